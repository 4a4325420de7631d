"""Model hyperparameter configuration and validation."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


def default_channels(resolution_levels: int, base: int = 32) -> list[int]:
    """Per-resolution feature widths: base * (1, 2, 4, 6, 6, ...) truncated."""
    multipliers = [1, 2, 4] + [6] * max(0, resolution_levels - 3)
    return [base * m for m in multipliers[:resolution_levels]]


def default_alpha(latent_levels: int) -> list[float]:
    """Per-level KL weights 2^(l-1), compensating the 4x per-level growth in
    latent positions (up to the channel factor)."""
    return [float(2**i) for i in range(latent_levels)]


@dataclass
class ModelConfig:
    """Structural hyperparameters of the hierarchical segmentation model.

    Latent level l (1-based, l=1 finest) lives at spatial resolution
    (r_x * 2^(1-l), r_y * 2^(1-l)) with D channels.  Lists indexed by
    level use index l-1.
    """

    L: int = 5
    R: int = 7
    D: int = 2
    K: int = 2
    r_x: int = 128
    r_y: int = 128
    input_channels: int = 1
    channels: list[int] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    deterministic: bool = False
    activation: str = "relu"  # "relu" | "softplus" (softplus keeps the loss C-infinity)

    def __post_init__(self) -> None:
        if not self.channels:
            self.channels = default_channels(self.R)
        if not self.alpha:
            self.alpha = default_alpha(self.L)
        self.validate()

    def validate(self) -> None:
        if not (1 <= self.L <= self.R):
            raise ValueError(f"need 1 <= L <= R, got L={self.L}, R={self.R}")
        if self.D < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        factor = 2 ** (self.R - 1)
        if self.r_x % factor or self.r_y % factor:
            raise ValueError(
                f"image dims ({self.r_x}, {self.r_y}) must be divisible by 2^(R-1)={factor}"
            )
        if len(self.channels) != self.R:
            raise ValueError(f"channels must have length R={self.R}, got {len(self.channels)}")
        if len(self.alpha) != self.L:
            raise ValueError(f"alpha must have length L={self.L}, got {len(self.alpha)}")
        if any(a <= 0 for a in self.alpha):
            raise ValueError(f"alpha entries must be positive, got {self.alpha}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.activation not in ("relu", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def level_shape(self, level: int) -> tuple[int, int]:
        """Spatial dims of latent level l (1-based): (r_x, r_y) / 2^(l-1)."""
        if not (1 <= level <= self.L):
            raise ValueError(f"level must be in [1, {self.L}], got {level}")
        return self.r_x >> (level - 1), self.r_y >> (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
