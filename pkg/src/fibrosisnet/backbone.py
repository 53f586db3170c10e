"""Convolutional feature extractor built from PRPE / PRPE-S blocks.

A PRPE block projects its input to ``mid_channels`` with a pointwise
conv, replicates the projection into ``branches`` parallel 3x3 depthwise
convs, projects the concatenated branches back to ``mid_channels`` and
expands to ``out_channels``; the result is added to a residual path
(identity for PRPE, stride-2 pointwise conv for PRPE-S).

Connectivity hubs are pointwise convs that carry an early stage's output
(average-pooled to the right resolution) straight into a later stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass
class ConvSpec:
    out_channels: int = 8
    kernel: int = 3
    stride: int = 2
    pad: int = 1


@dataclass
class PrpeBlockConfig:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    branches: int = 2

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("PRPE stride must be 1 or 2")
        if self.stride == 1 and self.out_channels != self.in_channels:
            raise ValueError("unstrided PRPE needs out_channels == in_channels for the identity residual")
        if self.mid_channels < 1 or self.branches < 1:
            raise ValueError("mid_channels and branches must be >= 1")


@dataclass
class BackboneConfig:
    input_size: tuple = (256, 256)
    stem: ConvSpec = field(default_factory=ConvSpec)
    stages: list = field(default_factory=list)
    hub_taps: list = field(default_factory=list)
    feature_dim: int = 32

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if isinstance(self.stem, dict):
            self.stem = ConvSpec(**self.stem)
        self.stages = [s if isinstance(s, PrpeBlockConfig) else PrpeBlockConfig(**s) for s in self.stages]
        self.hub_taps = [tuple(int(v) for v in tap) for tap in self.hub_taps]
        if not self.stages:
            raise ValueError("backbone needs at least one stage")
        channels = self.stem.out_channels
        for i, stage in enumerate(self.stages):
            if stage.in_channels != channels:
                raise ValueError(f"stage {i} expects {stage.in_channels} channels, receives {channels}")
            channels = stage.out_channels
        if channels != self.feature_dim:
            raise ValueError(f"last stage has {channels} channels but feature_dim is {self.feature_dim}")
        for src, dst in self.hub_taps:
            if not 0 <= src < dst < len(self.stages):
                raise ValueError(f"hub tap ({src}, {dst}) must satisfy 0 <= source < target < n_stages")

    @classmethod
    def desk(cls, input_size=(256, 256)) -> "BackboneConfig":
        """Default small topology: 4 blocks, at most 32 channels."""
        return cls(
            input_size=input_size,
            stem=ConvSpec(8, 3, 2, 1),
            stages=[
                PrpeBlockConfig(8, 4, 8, 1),
                PrpeBlockConfig(8, 8, 16, 2),
                PrpeBlockConfig(16, 8, 16, 1),
                PrpeBlockConfig(16, 16, 32, 2),
            ],
            hub_taps=[(0, 3), (1, 3)],
            feature_dim=32,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["hub_taps"] = [list(t) for t in self.hub_taps]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        return cls(**json.loads(text))


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict:
    """Kaiming-uniform (fan-in) weights, zero biases; returns name -> float32 array."""
    p = {}
    k = cfg.stem.kernel
    p["stem.w"] = T.kaiming_uniform(rng, (cfg.stem.out_channels, 1, k, k), k * k)
    p["stem.b"] = np.zeros(cfg.stem.out_channels, np.float32)
    for i, s in enumerate(cfg.stages):
        pre = f"stage{i}"
        p[f"{pre}.p1.w"] = T.kaiming_uniform(rng, (s.mid_channels, s.in_channels, 1, 1), s.in_channels)
        p[f"{pre}.p1.b"] = np.zeros(s.mid_channels, np.float32)
        for r in range(s.branches):
            p[f"{pre}.dw{r}.w"] = T.kaiming_uniform(rng, (s.mid_channels, 1, 3, 3), 9)
            p[f"{pre}.dw{r}.b"] = np.zeros(s.mid_channels, np.float32)
        cat = s.mid_channels * s.branches
        p[f"{pre}.p2.w"] = T.kaiming_uniform(rng, (s.mid_channels, cat, 1, 1), cat)
        p[f"{pre}.p2.b"] = np.zeros(s.mid_channels, np.float32)
        p[f"{pre}.e.w"] = T.kaiming_uniform(rng, (s.out_channels, s.mid_channels, 1, 1), s.mid_channels)
        p[f"{pre}.e.b"] = np.zeros(s.out_channels, np.float32)
        if s.stride != 1:
            p[f"{pre}.res.w"] = T.kaiming_uniform(rng, (s.out_channels, s.in_channels, 1, 1), s.in_channels)
    for j, (src, dst) in enumerate(cfg.hub_taps):
        c_in, c_out = cfg.stages[src].out_channels, cfg.stages[dst].out_channels
        p[f"hub{j}.w"] = T.kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in)
    return p


def prpe_forward(x: Tensor, block: PrpeBlockConfig, params: dict, prefix: str) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise ShapeMismatch(f"{prefix}: expected {block.in_channels} input channels, got {x.shape}")
    proj = T.relu(T.pointwise_conv(x, params[f"{prefix}.p1.w"], params[f"{prefix}.p1.b"]))
    branches = [
        T.relu(
            T.depthwise_conv2d(
                proj, params[f"{prefix}.dw{r}.w"], params[f"{prefix}.dw{r}.b"], stride=block.stride, pad=1
            )
        )
        for r in range(block.branches)
    ]
    merged = branches[0] if len(branches) == 1 else T.concat(branches, axis=1)
    squeezed = T.relu(T.pointwise_conv(merged, params[f"{prefix}.p2.w"], params[f"{prefix}.p2.b"]))
    expanded = T.pointwise_conv(squeezed, params[f"{prefix}.e.w"], params[f"{prefix}.e.b"])
    if block.stride == 1:
        shortcut = x
    else:
        shortcut = T.pointwise_conv(x, params[f"{prefix}.res.w"], stride=block.stride)
    return T.residual_add(shortcut, expanded)


def hub_inject(early: Tensor, late: Tensor, weight: Tensor) -> Tensor:
    """``late + PW(avg_pool(early))`` with the pool factor chosen to match spatial dims."""
    h_e, h_l = early.shape[2], late.shape[2]
    factor = max(1, h_e // h_l)
    pooled = T.avg_pool2d(early, factor)
    if pooled.shape[2:] != late.shape[2:]:
        raise ShapeMismatch(f"hub: early {early.shape} cannot be pooled onto late {late.shape}")
    return T.residual_add(late, T.pointwise_conv(pooled, weight))


def backbone_features(x: Tensor, cfg: BackboneConfig, params: dict) -> Tensor:
    """Map an (N, 1, H, W) batch of slices to (N, feature_dim) features."""
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != cfg.input_size:
        raise ShapeMismatch(f"backbone expects (N, 1, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}")
    stem = cfg.stem
    h = T.relu(T.conv2d(x, params["stem.w"], params["stem.b"], stride=stem.stride, pad=stem.pad))
    outputs = []
    incoming = {}
    for j, (src, dst) in enumerate(cfg.hub_taps):
        incoming.setdefault(dst, []).append((src, j))
    for i, block in enumerate(cfg.stages):
        h = prpe_forward(h, block, params, f"stage{i}")
        for src, j in incoming.get(i, ()):
            h = hub_inject(outputs[src], h, params[f"hub{j}.w"])
        outputs.append(h)
    return T.global_avg_pool(h)


def backbone_forward(slice_2d: np.ndarray, cfg: BackboneConfig, params: dict) -> np.ndarray:
    """Feature vector for a single normalized slice (inference helper)."""
    x = Tensor(np.asarray(slice_2d, dtype=_dtype(params))[None, None])
    return backbone_features(x, cfg, params).data[0]


def _dtype(params: dict):
    return next(iter(params.values())).dtype


def parameter_count(params: dict) -> int:
    return int(sum(np.asarray(p.data if isinstance(p, Tensor) else p).size for p in params.values()))
