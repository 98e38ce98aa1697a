from pydantic import BaseModel, Field

STORE_MAGIC = b"BTR1"
STORE_VERSION = 1
FLAG_COMPRESSED = 1 << 0


class StoreHeader(BaseModel):
    magic: bytes = STORE_MAGIC
    version: int = Field(default=STORE_VERSION, ge=0, lt=1 << 16)
    d: int = Field(ge=1, lt=1 << 32)
    vocab_size: int = Field(ge=0, lt=1 << 32)
    passage_count: int = Field(ge=0, lt=1 << 64)
    flags: int = Field(default=0, ge=0, lt=1 << 32)

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FLAG_COMPRESSED)

    def to_lines(self) -> str:
        fields = self.model_dump()
        fields["magic"] = self.magic.decode("ascii", errors="replace")
        return "\n".join(f"{key}={value}" for key, value in fields.items())


class StorageReport(BaseModel):
    vectors_stored: int = 0
    occurrences: int = 0
    bytes_bits: int = 0
    bytes_scales: int = 0
    bytes_index: int = 0
    total: int = 0
    float32_bytes: int = 0
    ratio_vs_float32: float = 0.0

    def to_lines(self) -> str:
        return "\n".join(f"{key}={value}" for key, value in self.model_dump().items())
