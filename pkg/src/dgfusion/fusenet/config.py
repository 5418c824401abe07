from __future__ import annotations

from dataclasses import dataclass, replace

from ..kvconfig import ConfigError

MODALITIES = ("rgb", "lidar", "radar", "event")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128)
    stem: int = 4  # stride of pyramid level 1; later levels double it
    adapter_channels: int = 8
    window: int = 8
    heads: int = 2
    token_dim: int = 64
    n_classes: int = 8
    n_conditions: int = 8
    modalities: tuple[str, ...] = MODALITIES
    bottleneck: int = 4
    seg_dim: int = 32
    depth_dim: int = 16
    mlp_ratio: int = 2
    d_min: float = 1.0
    d_max: float = 80.0
    use_ct: bool = True
    use_aux_depth_head: bool = True
    use_dt: bool = True
    use_pos_bias: bool = True
    cond_pos_embed: bool = False

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ConfigError("exactly four pyramid levels are required")
        if self.token_dim % self.heads:
            raise ConfigError("token_dim must be divisible by heads")
        if self.stem not in (1, 2, 4):
            raise ConfigError("stem stride must be 1, 2 or 4")
        top = self.stem * 8
        if self.height % top or self.width % top:
            raise ConfigError(f"image size must be divisible by the top stride {top}")
        if not self.modalities or self.modalities[0] != "rgb":
            raise ConfigError("rgb must be the first (primary) modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality")
        for w in self.widths:
            if w % self.bottleneck:
                raise ConfigError("level widths must be divisible by the bottleneck ratio")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.stem * 2 ** i for i in range(4))

    def level_hw(self, level: int) -> tuple[int, int]:
        s = self.strides[level]
        return self.height // s, self.width // s

    @property
    def secondary(self) -> tuple[str, ...]:
        return self.modalities[1:]

    @property
    def has_depth_branch(self) -> bool:
        return self.use_aux_depth_head or self.use_dt

    def with_toggles(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def tiny_config(**overrides) -> ModelConfig:
    """16 x 16 inputs, widths 4/8/16/32: the gradient-check model."""
    base = dict(height=16, width=16, widths=(4, 8, 16, 32), stem=2, adapter_channels=3,
                window=4, heads=2, token_dim=8, seg_dim=6, depth_dim=4, bottleneck=2)
    base.update(overrides)
    return ModelConfig(**base)
