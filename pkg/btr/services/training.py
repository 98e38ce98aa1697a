"""Three-step training on the synthetic lookup task.

1. Train the undecomposed reader on the task loss.
2. Copy it into a decomposed reader and train on task + distillation, with the
   step-1 model as a frozen teacher.
3. Copy again, switch the binarization point to the straight-through sign and
   train on task + representation recovery.
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from btr.config import settings
from btr.errors import InvalidArgumentError, InvariantViolation, TrainingDivergedError
from btr.ops.binarizer import recovery_loss
from btr.ops.token_merge import merge_budget
from btr.services.reader import MiniReader, ReaderBatch, make_batch
from btr.services.synthetic_task import Example, SyntheticTask
from btr.services.tokenizer import PAD_ID
from btr.structures.training_structure import LossReport, StepMetrics, TrainConfig

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-3
TRACE_COLUMNS = ["stage", "step", "task_loss", "distill_loss", "recovery_loss", "total_loss", "dev_accuracy"]


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over non-padding label positions."""
    if logits.shape[:-1] != labels.shape:
        raise InvalidArgumentError(
            f"logits {tuple(logits.shape)} do not align with labels {tuple(labels.shape)}"
        )
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=PAD_ID)


def select_salient_tokens(
    attention,
    r: float,
    query_len: int,
    passage_len: Optional[int] = None,
    query_valid: Optional[int] = None,
) -> np.ndarray:
    """Top floor(r * L) passage positions by query-to-passage attention.

    ``attention`` is one pair's (heads, L, L) attention with the query first.
    Scores average over heads and the first ``query_valid`` query rows; ties go
    to the lower index. Returns sorted indices relative to the passage start.
    """
    if not 0 < r <= 1:
        raise InvalidArgumentError(f"salient ratio must be in (0, 1], got {r}")
    if isinstance(attention, torch.Tensor):
        attention = attention.detach().cpu().numpy()
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 2:
        attention = attention[None]
    total = attention.shape[-1]
    passage_len = total - query_len if passage_len is None else passage_len
    query_valid = query_len if query_valid is None else query_valid
    if passage_len < 0 or query_len + passage_len > total:
        raise InvalidArgumentError(f"query {query_len} + passage {passage_len} exceed attention width {total}")
    scores = attention[:, :query_valid, query_len : query_len + passage_len].mean(axis=(0, 1))
    n = merge_budget(r, passage_len)
    order = np.lexsort((np.arange(passage_len), -scores))
    return np.sort(order[:n])


def salient_mask(
    attention: torch.Tensor,
    r: float,
    query_mask: torch.Tensor,
    passage_mask: torch.Tensor,
) -> torch.Tensor:
    """Batched ``select_salient_tokens`` over (N, H, L, L) pair attention; returns (N, Lp) bools."""
    if not 0 < r <= 1:
        raise InvalidArgumentError(f"salient ratio must be in (0, 1], got {r}")
    query_len, passage_len = query_mask.shape[1], passage_mask.shape[1]
    rows = query_mask.to(attention.dtype)
    mass = attention.detach().mean(dim=1)[:, :query_len, query_len : query_len + passage_len]
    scores = (mass * rows[:, :, None]).sum(dim=1) / rows.sum(dim=1, keepdim=True).clamp_min(1.0)
    scores = scores.masked_fill(~passage_mask, float("-inf"))
    # stable: equal scores keep the lower index first
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices
    rank = torch.empty_like(order).scatter_(1, order, torch.arange(passage_len, device=order.device).expand_as(order))
    budget = torch.floor(r * passage_mask.sum(dim=1).double() + 1e-9).long()
    return (rank < budget[:, None]) & passage_mask


def distill_loss(
    teacher: torch.Tensor,
    student: torch.Tensor,
    selected: Union[Sequence[int], np.ndarray, torch.Tensor],
) -> torch.Tensor:
    """Mean squared difference over the selected token vectors.

    ``selected`` is either indices along the first axis of (L, d) states or a
    boolean mask over every axis but the last.
    """
    if teacher.shape != student.shape:
        raise InvalidArgumentError(f"teacher {tuple(teacher.shape)} vs student {tuple(student.shape)}")
    if isinstance(selected, torch.Tensor) and selected.dtype == torch.bool:
        if selected.shape != student.shape[:-1]:
            raise InvalidArgumentError(f"mask {tuple(selected.shape)} does not cover states {tuple(student.shape)}")
        t, s = teacher[selected], student[selected]
    else:
        idx = torch.as_tensor(np.asarray(selected, dtype=np.int64).reshape(-1))
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= student.shape[0]):
            raise InvalidArgumentError(f"selected index out of range for {student.shape[0]} tokens")
        t, s = teacher[idx], student[idx]
    if s.numel() == 0:
        return student.sum() * 0.0
    return (t.detach() - s).pow(2).mean()


def parameter_digest(model: torch.nn.Module) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _batch_of(examples: Sequence[Example]) -> ReaderBatch:
    return make_batch([e.query for e in examples], [e.passages for e in examples], [e.answer for e in examples])


@torch.no_grad()
def evaluate(model: MiniReader, examples: Sequence[Example], decomposed: bool, batch_size: int = 64) -> float:
    """Exact-match accuracy of greedy answers."""
    if not examples:
        return 0.0
    was_training = model.training
    model.eval()
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch([e.query for e in chunk], [e.passages for e in chunk])
        enc = model.forward_decomposed(batch) if decomposed else model.forward_reference(batch)
        answers = model.generate(enc.memory, enc.memory_mask)
        correct += sum(a == e.answer for a, e in zip(answers, chunk))
    model.train(was_training)
    return correct / len(examples)


def lr_factor(config: TrainConfig, steps: int) -> Callable[[int], float]:
    """Linear warmup, then constant or cosine decay to a tenth of the base rate."""
    warmup = max(1, config.warmup_steps)

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if config.lr_schedule == "constant" or steps <= warmup:
            return 1.0
        progress = min(1.0, (step - warmup) / (steps - warmup))
        return 0.1 + 0.45 * (1.0 + math.cos(math.pi * progress))

    return factor


LossFn = Callable[[MiniReader, ReaderBatch], Tuple[torch.Tensor, LossReport]]


def _reference_objective(model: MiniReader, batch: ReaderBatch):
    logits, _ = model(batch, decomposed=False)
    loss = task_loss(logits, batch.labels)
    return loss, LossReport(task=loss.item(), total=loss.item())


def _distill_objective(teacher: MiniReader, ratio: float, enabled: bool) -> LossFn:
    def objective(model: MiniReader, batch: ReaderBatch):
        logits, enc = model(batch, decomposed=True)
        task = task_loss(logits, batch.labels)
        if not enabled:
            return task, LossReport(task=task.item(), total=task.item())
        with torch.no_grad():
            ref = teacher.forward_reference(batch, capture_attention=True)
        n_p = batch.n_passages
        mask = salient_mask(ref.joint_attention, ratio, batch.query_mask.repeat_interleave(n_p, dim=0), ref.passage_mask)
        distill = distill_loss(ref.passage_states, enc.passage_states, mask)
        total = task + distill
        return total, LossReport(task=task.item(), distill=distill.item(), total=total.item())

    return objective


def _binarized_objective(enabled: bool) -> LossFn:
    def objective(model: MiniReader, batch: ReaderBatch):
        logits, enc = model(batch, decomposed=True)
        task = task_loss(logits, batch.labels)
        if not enabled:
            return task, LossReport(task=task.item(), total=task.item())
        keep = enc.passage_mask
        recovered = recovery_loss(model.recovery(enc.codes[keep]), enc.passage_states[keep])
        total = task + recovered
        return total, LossReport(task=task.item(), recovery=recovered.item(), total=total.item())

    return objective


def _optimizer(model: MiniReader, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


@dataclass
class TrainResult:
    reference: MiniReader
    decomposed: MiniReader
    binarized: MiniReader
    trace: pd.DataFrame
    dev_accuracy: Dict[int, float] = field(default_factory=dict)
    test_accuracy: Dict[int, float] = field(default_factory=dict)


class Trainer:
    def __init__(self, config: TrainConfig, task: SyntheticTask):
        self.config = config
        self.task = task
        self.dev = task.examples("dev")
        self.rows: List[StepMetrics] = []

    def run_stage(self, stage: int, model: MiniReader, steps: int, objective: LossFn, decomposed: bool) -> float:
        config = self.config
        model.train()
        # batches depend only on (seed, stage)
        rng = np.random.default_rng([config.seed, stage])
        optimizer = _optimizer(model, config)
        scheduler = LambdaLR(optimizer, lr_factor(config, steps))
        accuracy = evaluate(model, self.dev, decomposed) if steps == 0 else 0.0
        progress = tqdm(range(1, steps + 1), desc=f"step {stage}", disable=not settings.SHOW_PROGRESS, leave=False)
        for step in progress:
            batch = _batch_of(self.task.sample(config.batch_size, rng))
            loss, report = objective(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"training step {stage} diverged at iteration {step}: loss={loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            model.clamp_norm_weights(NORM_FLOOR)
            dev_accuracy = None
            if step % config.eval_every == 0 or step == steps:
                accuracy = dev_accuracy = evaluate(model, self.dev, decomposed)
                progress.set_postfix(loss=f"{report.total:.4f}", dev=f"{accuracy:.3f}")
                logger.debug("step %d iteration %d: loss %.4f dev %.3f", stage, step, report.total, accuracy)
            self.rows.append(
                StepMetrics(
                    stage=stage,
                    step=step,
                    task_loss=report.task,
                    distill_loss=report.distill,
                    recovery_loss=report.recovery,
                    total_loss=report.total,
                    dev_accuracy=dev_accuracy,
                )
            )
        logger.info("training step %d finished after %d iterations: dev accuracy %.3f", stage, steps, accuracy)
        return accuracy

    def trace(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=TRACE_COLUMNS)


def _trainable_copy(model: MiniReader) -> MiniReader:
    copied = copy.deepcopy(model)
    copied.requires_grad_(True)
    return copied


def three_step_train(
    config: TrainConfig,
    task: SyntheticTask,
    reference: Optional[MiniReader] = None,
    decomposed: Optional[MiniReader] = None,
) -> TrainResult:
    """Steps 1-3 of the recipe; returns the three models, the metric trace and accuracies.

    A trained step-1 ``reference`` skips step 1, a trained step-2 ``decomposed``
    model also skips step 2. Ablations of one loss reuse the stages before it.
    """
    if len(task.vocab) != config.reader.vocab_size:
        raise InvalidArgumentError(
            f"task vocabulary has {len(task.vocab)} tokens, reader expects {config.reader.vocab_size}"
        )
    if decomposed is not None and reference is None:
        raise InvalidArgumentError("a step-2 model needs the step-1 reference it was distilled from")
    torch.manual_seed(config.seed)
    trainer = Trainer(config, task)
    dev_accuracy: Dict[int, float] = {}

    if reference is None:
        reference = MiniReader(config.reader)
        dev_accuracy[1] = trainer.run_stage(1, reference, config.step1_steps, _reference_objective, decomposed=False)
    else:
        reference = _trainable_copy(reference)
        dev_accuracy[1] = evaluate(reference, trainer.dev, decomposed=False)

    teacher = copy.deepcopy(reference).eval()
    teacher.requires_grad_(False)
    digest = parameter_digest(teacher)

    if decomposed is None:
        decomposed = copy.deepcopy(reference)
        objective = _distill_objective(teacher, config.distill_ratio, config.use_distill)
        dev_accuracy[2] = trainer.run_stage(2, decomposed, config.step2_steps, objective, decomposed=True)
    else:
        decomposed = _trainable_copy(decomposed)
        decomposed.binarize_mode = "off"
        dev_accuracy[2] = evaluate(decomposed, trainer.dev, decomposed=True)

    binarized = copy.deepcopy(decomposed)
    binarized.binarize_mode = "ste"
    objective = _binarized_objective(config.use_recovery)
    dev_accuracy[3] = trainer.run_stage(3, binarized, config.step3_steps, objective, decomposed=True)

    if parameter_digest(teacher) != digest:
        raise InvariantViolation("frozen teacher parameters changed during training")

    test = task.examples("test")
    test_accuracy = {
        1: evaluate(reference, test, decomposed=False),
        2: evaluate(decomposed, test, decomposed=True),
        3: evaluate(binarized, test, decomposed=True),
    }
    logger.info(
        "three-step training done: dev %s, test %s (distill=%s, recovery=%s)",
        dev_accuracy,
        test_accuracy,
        config.use_distill,
        config.use_recovery,
    )
    return TrainResult(
        reference=teacher,
        decomposed=decomposed,
        binarized=binarized,
        trace=trainer.trace(),
        dev_accuracy=dev_accuracy,
        test_accuracy=test_accuracy,
    )
