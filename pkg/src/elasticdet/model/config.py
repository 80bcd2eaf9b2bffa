"""Model configuration: one point in the architecture search space."""

from dataclasses import dataclass, fields

from ..errors import InvalidConfigError


@dataclass(frozen=True, order=True)
class ModelConfig:
    """A single sub-network choice: input shape plus elastic depth/width knobs.

    ``resolution`` and ``patch_size`` are in pixels; the remaining fields are
    counts. ``num_decoder_layers == 0`` is valid and means single-stage
    inference from the encoder proposals alone.
    """

    resolution: int
    patch_size: int
    num_windows: int
    num_decoder_layers: int
    num_queries: int
    mask_head_enabled: bool = False

    @property
    def grid_side(self) -> int:
        return self.resolution // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    def validate(self) -> None:
        """Check internal consistency; raises InvalidConfigError."""
        if self.patch_size < 2:
            raise InvalidConfigError(f"patch_size must be >= 2, got {self.patch_size}")
        if self.resolution <= 0 or self.num_windows <= 0 or self.num_queries <= 0:
            raise InvalidConfigError(f"non-positive field in {self}")
        if self.num_decoder_layers < 0:
            raise InvalidConfigError(f"num_decoder_layers must be >= 0, got {self.num_decoder_layers}")
        if self.resolution % self.patch_size != 0:
            raise InvalidConfigError(
                f"resolution {self.resolution} not divisible by patch_size {self.patch_size}"
            )
        if self.grid_side % self.num_windows != 0:
            raise InvalidConfigError(
                f"token grid side {self.grid_side} not divisible by num_windows {self.num_windows}"
            )
        if self.num_queries > self.num_tokens:
            raise InvalidConfigError(
                f"num_queries {self.num_queries} exceeds token count {self.num_tokens}"
            )

    def is_valid(self) -> bool:
        try:
            self.validate()
        except InvalidConfigError:
            return False
        return True

    def to_dict(self) -> dict:
        """Flat key-value record, the serialized form of a config."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, record: dict) -> "ModelConfig":
        kwargs = {f.name: record[f.name] for f in fields(cls) if f.name in record}
        unknown = set(record) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)
