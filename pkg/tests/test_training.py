import math

import numpy as np
import pytest
import torch
from pandas.testing import assert_frame_equal

from btr.config import settings
from btr.errors import InvalidArgumentError, TrainingDivergedError
from btr.services import training
from btr.services.gradcheck import check_gradient
from btr.services.synthetic_task import SyntheticTask
from btr.services.training import (
    TRACE_COLUMNS,
    distill_loss,
    lr_factor,
    parameter_digest,
    salient_mask,
    select_salient_tokens,
    task_loss,
    three_step_train,
)
from btr.structures.training_structure import TaskConfig, TrainConfig


@pytest.fixture
def tiny_train_config(tiny_config):
    return TrainConfig(
        reader=tiny_config,
        task=TaskConfig(n_facts=30, dev_facts=5, test_facts=5, n_distractors=2),
        step1_steps=4,
        step2_steps=4,
        step3_steps=4,
        batch_size=4,
        warmup_steps=2,
        eval_every=2,
    )


def test_task_loss_values():
    labels = torch.tensor([[5, 6, 0]])
    peaked = torch.full((1, 3, 10), -50.0)
    peaked[0, 0, 5] = peaked[0, 1, 6] = 50.0
    assert task_loss(peaked, labels).item() == pytest.approx(0.0, abs=1e-6)
    uniform = torch.zeros(1, 3, 10)
    assert task_loss(uniform, labels).item() == pytest.approx(math.log(10))
    # the padded position does not count
    uniform[0, 2, 3] = 100.0
    assert task_loss(uniform, labels).item() == pytest.approx(math.log(10))
    with pytest.raises(InvalidArgumentError):
        task_loss(uniform, labels[:, :2])


def test_task_loss_gradient():
    labels = torch.tensor([[4, 7], [2, 0]])
    logits = torch.randn(2, 2, 9, dtype=torch.float64)
    assert check_gradient(lambda z: task_loss(z, labels), logits) <= 1e-4


def test_salient_tokens():
    attention = np.full((2, 6, 6), 1 / 6)
    assert select_salient_tokens(attention, 1.0, query_len=2).tolist() == [0, 1, 2, 3]
    # equal scores go to the lower index
    assert select_salient_tokens(attention, 0.5, query_len=2).tolist() == [0, 1]
    attention[:, :2, 5] = 0.9
    assert select_salient_tokens(attention, 0.25, query_len=2).tolist() == [3]
    with pytest.raises(InvalidArgumentError):
        select_salient_tokens(attention, 0.0, query_len=2)


def test_salient_tokens_ignore_padding():
    attention = np.full((1, 6, 6), 0.1)
    attention[0, 1, 2] = 5.0  # padded query row
    attention[0, 0, 3] = 0.2
    assert select_salient_tokens(attention, 0.5, query_len=2, passage_len=2, query_valid=1).tolist() == [1]


def test_distill_loss():
    student = torch.randn(5, 4)
    assert distill_loss(student, student, [0, 2]).item() == 0.0
    assert distill_loss(student + 1.0, student, [1, 3]).item() == pytest.approx(1.0)
    assert distill_loss(student + 1.0, student, []).item() == 0.0
    mask = torch.tensor([True, False, True, False, False])
    assert distill_loss(student * 2, student, mask).item() == pytest.approx(distill_loss(student * 2, student, [0, 2]).item())
    with pytest.raises(InvalidArgumentError):
        distill_loss(student, student, [5])
    with pytest.raises(InvalidArgumentError):
        distill_loss(student, student[:3], [0])


def test_distill_loss_gradient():
    teacher = torch.randn(6, 3, dtype=torch.float64)
    assert check_gradient(lambda s: distill_loss(teacher, s, [1, 4, 5]), torch.randn(6, 3, dtype=torch.float64)) <= 1e-4


def test_three_step_trace(tiny_train_config):
    task = SyntheticTask(tiny_train_config.task, tiny_train_config.reader.vocab_size)
    result = three_step_train(tiny_train_config, task)
    trace = result.trace
    assert list(trace.columns) == TRACE_COLUMNS
    assert trace["stage"].tolist() == [1] * 4 + [2] * 4 + [3] * 4
    assert (trace.loc[trace.stage == 1, "distill_loss"] == 0).all()
    assert (trace.loc[trace.stage == 3, "recovery_loss"] > 0).all()
    assert trace["dev_accuracy"].notna().sum() == 6
    assert set(result.dev_accuracy) == set(result.test_accuracy) == {1, 2, 3}
    assert result.binarized.binarize_mode == "ste"
    assert result.decomposed.binarize_mode == "off"
    assert not any(p.requires_grad for p in result.reference.parameters())
    assert parameter_digest(result.reference) != parameter_digest(result.decomposed)


def test_three_step_is_deterministic(tiny_train_config):
    torch.set_num_threads(1)
    runs = []
    for _ in range(2):
        task = SyntheticTask(tiny_train_config.task, tiny_train_config.reader.vocab_size)
        runs.append(three_step_train(tiny_train_config, task))
    assert_frame_equal(runs[0].trace, runs[1].trace)
    assert parameter_digest(runs[0].binarized) == parameter_digest(runs[1].binarized)


def test_ablation_switches(tiny_train_config):
    config = tiny_train_config.model_copy(update={"use_distill": False, "use_recovery": False})
    result = three_step_train(config, SyntheticTask(config.task, config.reader.vocab_size))
    assert (result.trace.distill_loss == 0).all()
    assert (result.trace.recovery_loss == 0).all()


def test_vocabulary_size_mismatch(tiny_train_config):
    task = SyntheticTask(tiny_train_config.task, 48)
    with pytest.raises(InvalidArgumentError):
        three_step_train(tiny_train_config, task)


def test_divergence_is_reported(tiny_train_config, monkeypatch):
    monkeypatch.setattr(training, "task_loss", lambda logits, labels: logits.sum() * float("nan"))
    task = SyntheticTask(tiny_train_config.task, tiny_train_config.reader.vocab_size)
    with pytest.raises(TrainingDivergedError):
        three_step_train(tiny_train_config, task)


def test_ablations_reuse_trained_stages(tiny_train_config):
    torch.set_num_threads(1)
    task = SyntheticTask(tiny_train_config.task, tiny_train_config.reader.vocab_size)
    full = three_step_train(tiny_train_config, task)
    branch = three_step_train(
        tiny_train_config.model_copy(update={"use_recovery": False}), task, full.reference, full.decomposed
    )
    assert branch.trace["stage"].tolist() == [3] * 4
    assert branch.dev_accuracy[1] == full.dev_accuracy[1]
    assert parameter_digest(branch.decomposed) == parameter_digest(full.decomposed)
    assert parameter_digest(branch.reference) == parameter_digest(full.reference)
    replay = three_step_train(tiny_train_config, task, full.reference)
    stage2 = [run.trace[run.trace.stage == 2].reset_index(drop=True) for run in (full, replay)]
    assert_frame_equal(stage2[0], stage2[1])
    with pytest.raises(InvalidArgumentError):
        three_step_train(tiny_train_config, task, decomposed=full.decomposed)


def test_salient_mask_matches_single_pair_selection(rng):
    attention = torch.as_tensor(rng.random((3, 2, 7, 7))).softmax(dim=-1)
    query_mask = torch.tensor([[True, True, True], [True, True, False], [True, False, False]])
    passage_mask = torch.tensor([[True] * 4, [True, True, True, False], [True, True, False, False]])
    mask = salient_mask(attention, 0.5, query_mask, passage_mask)
    for i in range(3):
        picked = select_salient_tokens(
            attention[i], 0.5, 3, int(passage_mask[i].sum()), int(query_mask[i].sum())
        )
        assert torch.nonzero(mask[i]).flatten().tolist() == picked.tolist()


def test_learning_rate_schedule(tiny_train_config):
    config = tiny_train_config.model_copy(update={"warmup_steps": 10})
    factor = lr_factor(config, 110)
    assert factor(0) == pytest.approx(0.1)
    assert factor(9) == pytest.approx(1.0)
    assert factor(10) == pytest.approx(1.0)
    assert factor(60) == pytest.approx(0.55)
    assert factor(110) == pytest.approx(0.1)
    flat = lr_factor(config.model_copy(update={"lr_schedule": "constant"}), 110)
    assert flat(60) == flat(110) == 1.0


def test_reseeded_keys_every_seed(tiny_train_config):
    config = tiny_train_config.reseeded(7)
    assert (config.seed, config.reader.seed, config.task.seed) == (7, 7, 7)
    assert config.step1_steps == tiny_train_config.step1_steps


def _toy_config(**update) -> TrainConfig:
    config = TrainConfig.model_validate_json(settings.TOY_CONFIG_PATH.read_text(encoding="utf-8"))
    return config.model_copy(update=update)


@pytest.fixture(scope="module")
def seeded_runs():
    """Per seed: the full recipe, then step 3 without recovery and steps 2-3 without distillation."""
    torch.set_num_threads(1)
    runs = []
    for seed in range(5):
        config = _toy_config().reseeded(seed)
        task = SyntheticTask(config.task, config.reader.vocab_size)
        full = three_step_train(config, task)
        no_recovery = three_step_train(
            config.model_copy(update={"use_recovery": False}), task, full.reference, full.decomposed
        )
        no_distill = three_step_train(config.model_copy(update={"use_distill": False}), task, full.reference)
        runs.append(
            {
                "step1": full.dev_accuracy[1],
                "step3": full.dev_accuracy[3],
                "no_recovery": no_recovery.dev_accuracy[3],
                "no_distill": no_distill.dev_accuracy[3],
            }
        )
    return {key: float(np.mean([run[key] for run in runs])) for key in runs[0]}


@pytest.mark.slow
def test_reference_reader_solves_the_task(seeded_runs):
    assert seeded_runs["step1"] >= 0.95


@pytest.mark.slow
def test_binarized_reader_keeps_accuracy(seeded_runs):
    assert seeded_runs["step3"] >= 0.95 * seeded_runs["step1"]


@pytest.mark.slow
def test_recovery_loss_helps_on_average(seeded_runs):
    assert seeded_runs["no_recovery"] < seeded_runs["step3"]


@pytest.mark.slow
def test_distillation_helps_on_average(seeded_runs):
    assert seeded_runs["no_distill"] < seeded_runs["step3"]
