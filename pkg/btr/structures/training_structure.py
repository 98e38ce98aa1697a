from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from btr.structures.reader_structure import ReaderConfig


class TaskConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_facts: int = Field(default=200, ge=3)
    dev_facts: int = Field(default=20, ge=1)
    test_facts: int = Field(default=20, ge=1)
    n_distractors: int = Field(default=3, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_splits(self) -> "TaskConfig":
        if self.dev_facts + self.test_facts >= self.n_facts:
            raise ValueError("dev and test splits leave no training facts")
        if self.n_distractors >= self.n_facts:
            raise ValueError("more distractors than facts")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    reader: ReaderConfig = ReaderConfig()
    task: TaskConfig = TaskConfig()

    step1_steps: int = Field(default=3000, ge=0)
    step2_steps: int = Field(default=1500, ge=0)
    step3_steps: int = Field(default=1500, ge=0)
    batch_size: int = Field(default=32, ge=1)

    optimizer: Literal["sgd", "adamw"] = "sgd"
    lr: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    warmup_steps: int = Field(default=200, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    grad_clip: float = Field(default=1.0, gt=0)

    distill_ratio: float = Field(default=0.5, gt=0, le=1)
    use_distill: bool = True
    use_recovery: bool = True

    eval_every: int = Field(default=250, ge=1)
    seed: int = 0

    def reseeded(self, seed: int) -> "TrainConfig":
        """Same budget with the reader init, the task draw and batch sampling all keyed to ``seed``."""
        return self.model_copy(
            update={
                "seed": seed,
                "reader": self.reader.model_copy(update={"seed": seed}),
                "task": self.task.model_copy(update={"seed": seed}),
            }
        )


class LossReport(BaseModel):
    task: float = 0.0
    distill: float = 0.0
    recovery: float = 0.0
    total: float = 0.0


class StepMetrics(BaseModel):
    stage: int
    step: int
    task_loss: float
    distill_loss: float
    recovery_loss: float
    total_loss: float
    dev_accuracy: Optional[float] = None
