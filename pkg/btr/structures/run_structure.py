from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class RunConfig(BaseModel):
    """Resolved settings of one CLI run (flags > --config file > environment defaults)."""

    subcommand: str

    # paths
    model: Optional[Path] = None
    store: Optional[Path] = None
    corpus: Optional[Path] = None
    stopwords: Optional[Path] = None
    queries: Optional[Path] = None
    out: Optional[Path] = None
    config: Optional[Path] = None
    csv: Optional[Path] = None

    # knobs
    k: Optional[int] = Field(default=None, ge=1)
    r_o: float = Field(default=0.2, ge=0.0, le=0.5)
    r_p: float = Field(default=0.2, ge=0.0, le=0.5)
    g: int = Field(default=3, ge=1)
    seed: int = Field(default=0, ge=0)
    merge_rule: Literal["alg2", "every-g"] = "alg2"
    protect_query: bool = False
    repeats: int = Field(default=5, ge=1)
    warmup: int = Field(default=1, ge=0)
    threads: int = Field(default=1, ge=1)
    overwrite: bool = False

    # subcommand specifics
    query: Optional[str] = None
    passages: List[int] = []
    ablate: Optional[Literal["distill", "recovery"]] = None
    kind: Literal["offline", "runtime"] = "offline"
    ratios: List[float] = []
    suites: List[str] = []
    inject_fault: Optional[str] = None

    @field_validator("ratios")
    @classmethod
    def check_ratios(cls, ratios: List[float]) -> List[float]:
        bad = [r for r in ratios if not 0.0 <= r <= 0.5]
        if bad:
            raise ValueError(f"merge ratios must lie in [0, 0.5], got {bad}")
        return ratios


class SuiteResult(BaseModel):
    name: str
    passed: int
    total: int
    seconds: float
    failures: List[str] = []

    @property
    def ok(self) -> bool:
        return self.passed == self.total
