"""Model hyperparameters."""
from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    # 2D branch, one entry per stage
    channels2d: tuple = (16, 32, 64, 128)
    depths2d: tuple = (1, 1, 2, 1)
    heads2d: tuple = (1, 2, 4, 8)
    ratios2d: tuple = (8, 4, 2, 1)
    # 3D branch; depths count blocks and must be even (L3D/SL3D pairs)
    channels3d: tuple = (16, 32, 64, 128)
    depths3d: tuple = (2, 2, 2, 2)
    heads3d: tuple = (1, 2, 4, 8)
    window3d: tuple = (2, 4, 4)
    mlp_ratio: int = 4
    # fusion module
    hlgm_dim: int = 16
    hlgm_blocks: int = 2
    hlgm_heads: int = 2
    hlgm_region: tuple = (2, 4, 4)
    hlgm_ratio: int = 2
    detach_2d: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("channels2d", "depths2d", "heads2d", "ratios2d",
                     "channels3d", "depths3d", "heads3d"):
            v = tuple(int(x) for x in getattr(self, name))
            if len(v) != 4:
                raise ValueError(f"{name} needs 4 stages, got {v}")
            setattr(self, name, v)
        self.window3d = tuple(int(x) for x in self.window3d)
        self.hlgm_region = tuple(int(x) for x in self.hlgm_region)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(b < a for a, b in zip(self.channels2d, self.channels2d[1:])):
            raise ValueError(f"channels2d must be non-decreasing, got {self.channels2d}")
        if any(d % 2 for d in self.depths3d):
            raise ValueError(f"depths3d must be even (L3D/SL3D pairs), got {self.depths3d}")
        for c, h in list(zip(self.channels2d, self.heads2d)) + list(zip(self.channels3d, self.heads3d)):
            if c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")
        if self.hlgm_dim % self.hlgm_heads:
            raise ValueError("hlgm_dim must be divisible by hlgm_heads")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


def tiny_config(**overrides) -> ModelConfig:
    """A very small model for gradient checks and smoke tests."""
    base = dict(in_channels=1, num_classes=2, channels2d=(4, 4, 8, 8), depths2d=(1, 1, 1, 1),
                heads2d=(1, 1, 2, 2), ratios2d=(2, 2, 1, 1), channels3d=(4, 4, 8, 8),
                depths3d=(2, 0, 0, 0), heads3d=(1, 1, 2, 2), window3d=(2, 2, 2), mlp_ratio=2,
                hlgm_dim=4, hlgm_blocks=1, hlgm_heads=1, hlgm_region=(1, 2, 2), hlgm_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)

