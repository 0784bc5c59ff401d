"""Model configuration, layout parsing and named size presets."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

VOCAB_SIZE = 256

_BLOCK_RE = re.compile(r"([mT])(\d+)")


class LayoutError(ValueError):
    pass


def parse_blocks(spec: str) -> list[str]:
    """Expand a block string such as ``"m2T1"`` into ``["m", "m", "T"]``."""
    if not isinstance(spec, str):
        raise LayoutError(f"block spec must be a string, got {spec!r}")
    pos = 0
    out: list[str] = []
    for m in _BLOCK_RE.finditer(spec):
        if m.start() != pos:
            raise LayoutError(f"cannot parse block spec {spec!r}")
        out.extend(m.group(1) * int(m.group(2)))
        pos = m.end()
    if pos != len(spec):
        raise LayoutError(f"cannot parse block spec {spec!r}")
    return out


@dataclass
class StageLayout:
    """One level of the hierarchy.

    ``main`` is set only at the innermost level; otherwise ``encoder``,
    ``inner`` and ``decoder`` describe the U-shape around the next level.
    """

    main: list[str] | None = None
    encoder: list[str] | None = None
    inner: "StageLayout | None" = None
    decoder: list[str] | None = None

    @property
    def depth(self) -> int:
        return 1 if self.main is not None else 1 + self.inner.depth


def parse_layout(layout) -> StageLayout:
    """Parse a nested layout like ``["m2", ["m2", "T2", "m2"], "m2"]``.

    A string or one-element list is an innermost (main) stack; a three-element
    list is ``[encoder, inner, decoder]`` where ``inner`` is parsed recursively.
    """
    if isinstance(layout, str):
        return StageLayout(main=parse_blocks(layout))
    if isinstance(layout, (list, tuple)):
        if len(layout) == 1:
            return parse_layout(layout[0])
        if len(layout) == 3:
            enc, inner, dec = layout
            return StageLayout(encoder=parse_blocks(enc), inner=parse_layout(inner),
                               decoder=parse_blocks(dec))
    raise LayoutError(f"layout must be a string, [main] or [enc, inner, dec]; got {layout!r}")


@dataclass
class ModelConfig:
    d_model: list[int] = field(default_factory=lambda: [64, 96, 128])
    layout: list = field(default_factory=lambda: ["m2", ["m2", "T2", "m2"], "m2"])
    # per-transition downsampling targets; [4, 4] is the per-stage reading of [1, 4, 16]
    ratio_targets: list[float] = field(default_factory=lambda: [4.0, 4.0])
    n_heads: int = 4
    rotary_dim: int = 16
    window: int = -1
    ssm_state: int = 8
    ssm_expand: int = 2
    conv_width: int = 4
    ffn_mult: float = 2.0
    vocab_size: int = VOCAB_SIZE
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def stage_layout(self) -> StageLayout:
        return parse_layout(self.layout)

    @property
    def n_levels(self) -> int:
        return self.stage_layout.depth

    def validate(self):
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError("vocab_size is fixed at 256")
        depth = parse_layout(self.layout).depth
        if len(self.d_model) != depth:
            raise ValueError(f"layout has {depth} levels but d_model lists {len(self.d_model)} widths")
        if len(self.ratio_targets) != depth - 1:
            raise ValueError(f"need {depth - 1} ratio targets, got {len(self.ratio_targets)}")
        for d in self.d_model:
            if d % self.n_heads:
                raise ValueError(f"d_model {d} not divisible by n_heads {self.n_heads}")
        for d in self.d_model:
            if self.rotary_dim > d // self.n_heads or self.rotary_dim % 2:
                raise ValueError("rotary_dim must be even and at most the head width")

    def ffn_dim(self, level: int) -> int:
        return int(round(self.d_model[level] * self.ffn_mult))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def cumulative_to_stage_targets(ratios) -> list[float]:
    """[1, 4, 16] (cumulative, relative to bytes) -> [4, 4] per transition."""
    return [ratios[i + 1] / ratios[i] for i in range(len(ratios) - 1)]


PRESETS = {
    # three levels at desk scale; the model used for CPU training runs
    "tiny": dict(d_model=[64, 96, 128], layout=["m2", ["m2", "T2", "m2"], "m2"],
                 ratio_targets=[4.0, 4.0], n_heads=4, rotary_dim=16, window=-1,
                 ssm_state=8, ssm_expand=2, ffn_mult=2),
    # same topology, narrow enough for exhaustive unit tests
    "micro": dict(d_model=[16, 24, 32], layout=["m1", ["m1", "T1", "m1"], "m1"],
                 ratio_targets=[4.0, 4.0], n_heads=2, rotary_dim=4, window=-1,
                 ssm_state=4, ssm_expand=2, ffn_mult=2),
    # larger reference sizes; not exercised at desk scale
    "small": dict(d_model=[256, 256], layout=["m2", ["T6"], "m2"], ratio_targets=[4.0],
                  n_heads=8, rotary_dim=32, window=3071, ssm_state=32, ssm_expand=2, ffn_mult=4),
    "base": dict(d_model=[512, 512, 512], layout=["m2", ["m2", "T8", "m2"], "m2"],
                 ratio_targets=[4.0, 4.0], n_heads=16, rotary_dim=32, window=6399,
                 ssm_state=64, ssm_expand=2, ffn_mult=4),
    "large": dict(d_model=[1536, 1536, 1536], layout=["m4", ["m4", "T14", "m4"], "m4"],
                  ratio_targets=[4.0, 4.0], n_heads=16, rotary_dim=48, window=-1,
                  ssm_state=128, ssm_expand=2, ffn_mult=8 / 3),
}


PRESETS["desk"] = PRESETS["tiny"]


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)
