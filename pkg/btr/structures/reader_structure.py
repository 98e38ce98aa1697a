from typing import Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ReaderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d: int = Field(default=32, ge=1, description="Hidden size")
    heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=64, ge=1, description="Feed-forward inner size")
    n_enc: int = Field(default=2, ge=2, description="Encoder layers")
    n_dec: int = Field(default=2, ge=1, description="Decoder layers")
    k: int = Field(default=1, ge=1, description="Decomposition layer")
    vocab_size: int = Field(default=64, ge=5)
    max_query_len: int = Field(default=16, ge=1)
    max_passage_len: int = Field(default=64, ge=1)
    max_answer_len: int = Field(default=8, ge=1)
    r_p: float = Field(default=0.0, ge=0.0, le=0.5, description="Runtime merge ratio")
    g: int = Field(default=3, ge=1, description="Decoder merge period")
    seed: int = 0

    @model_validator(mode="after")
    def check_shape(self) -> "ReaderConfig":
        if self.k >= self.n_enc:
            raise ValueError(f"k must be < n_enc, got k={self.k}, n_enc={self.n_enc}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        return self


class MergeSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    r_o: float = Field(default=0.2, ge=0.0, le=0.5, description="Offline merge ratio")
    r_p: float = Field(default=0.2, ge=0.0, le=0.5, description="Runtime merge ratio")
    g: int = Field(default=3, ge=1, description="Decoder merge period")
    merge_rule: Literal["alg2", "every-g"] = "alg2"
    protect_query: bool = False
    # pair positions (query first) shielded from intra-passage merging
    protected_positions: Tuple[int, ...] = ()

    def merges_before_decoder_layer(self, d_idx: int) -> bool:
        """d_idx is 1-based."""
        if self.r_p == 0:
            return False
        if self.merge_rule == "alg2":
            return d_idx % self.g != 0
        return d_idx % self.g == 0
