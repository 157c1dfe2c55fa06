"""Single-stage residual/pyramid detector emitting per-anchor proposal grids."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .tensorcore import Module, Tensor

PAPER_ANCHORS = (3.0, 5.0, 7.0, 10.0, 13.0, 17.0, 22.0, 30.0, 40.0)
PRIOR_LOGIT = -4.6


class ConfigError(ValueError):
    pass


@dataclass
class DetectorConfig:
    patch_size: int = 96
    widths: tuple = (24, 32, 64, 64, 64)
    blocks: tuple = (1, 1, 1, 1, 1)
    up_width: int = 64
    head_strides: tuple = (4, 8)
    anchors: tuple = PAPER_ANCHORS
    rrelu_lower: float = 1 / 8
    rrelu_upper: float = 1 / 3
    norm: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.head_strides = tuple(sorted(int(s) for s in self.head_strides))
        self.anchors = tuple(float(a) for a in self.anchors)

    @property
    def max_stride(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def validate(self):
        if not self.anchors or any(a <= 0 for a in self.anchors):
            raise ConfigError(f"anchors must be non-empty and positive, got {self.anchors}")
        if any(w <= 0 for w in self.widths) or self.up_width <= 0:
            raise ConfigError("channel widths must be positive")
        if len(self.blocks) != len(self.widths):
            raise ConfigError("blocks and widths must have one entry per level")
        strides = [2 ** i for i in range(len(self.widths))]
        for s in self.head_strides:
            if s not in strides:
                raise ConfigError(f"head stride {s} is not a pyramid level {strides}")
        if self.patch_size % self.max_stride:
            raise ConfigError(f"patch size {self.patch_size} not divisible by deepest stride {self.max_stride}")
        if not (0 <= self.rrelu_lower <= self.rrelu_upper < 1):
            raise ConfigError("invalid rrelu bounds")
        return self

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    def grid_sides(self):
        return [self.patch_size // s for s in self.head_strides]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


def micro_config(patch_size: int = 32, anchors=(5.0, 10.0, 22.0)) -> DetectorConfig:
    """Small configuration used for gradient checks and desk-scale experiments."""
    return DetectorConfig(patch_size=patch_size, widths=(4, 8, 8, 8, 8), blocks=(0, 1, 1, 1, 1),
                          up_width=8, anchors=tuple(anchors))


class HeadGrid(NamedTuple):
    stride: int
    grid: Tensor  # [N, D', H', W', N_A, 5]; channel 0 logit, 1..4 (tx, ty, tz, td)


class _RngHolder:
    rng = None


class RReLU(Module):
    def __init__(self, lower, upper, holder):
        self.lower, self.upper, self._holder = lower, upper, holder

    def __call__(self, x):
        return tc.rrelu(x, self.lower, self.upper, training=self.training, rng=self._holder.rng)


class ResidualBlock(Module):
    """``act(F(x) + shortcut(x))`` with ``F = conv3-norm-act-conv3-norm``."""

    def __init__(self, c_in, c_out, act_factory, rng, dtype, norm=True):
        # a bias in front of batch normalisation is cancelled by the mean subtraction
        self.conv1 = tc.Conv3d(c_in, c_out, 3, rng=rng, dtype=dtype, bias=not norm)
        self.norm1 = tc.BatchNorm3d(c_out, dtype=dtype) if norm else tc.Identity()
        self.act1 = act_factory()
        self.conv2 = tc.Conv3d(c_out, c_out, 3, rng=rng, dtype=dtype, bias=not norm)
        self.norm2 = tc.BatchNorm3d(c_out, dtype=dtype) if norm else tc.Identity()
        self.proj = tc.Conv3d(c_in, c_out, 1, rng=rng, dtype=dtype) if c_in != c_out else tc.Identity()
        self.act2 = act_factory()

    def __call__(self, x):
        h = self.act1(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act2(tc.add(h, self.proj(x)))

    @staticmethod
    def parameter_count(c_in, c_out, norm=True) -> int:
        n = 27 * c_in * c_out + 27 * c_out * c_out
        n += 4 * c_out if norm else 2 * c_out
        if c_in != c_out:
            n += c_in * c_out + c_out
        return n


class Head(Module):
    def __init__(self, width, num_anchors, act_factory, rng, dtype):
        self.conv = tc.Conv3d(width, width, 3, rng=rng, dtype=dtype)
        self.act = act_factory()
        bias = np.zeros(num_anchors * 5)
        bias[0::5] = PRIOR_LOGIT
        self.out = tc.Conv3d(width, num_anchors * 5, 1, rng=rng, dtype=dtype, init_std=0.01, bias_value=bias)
        self.num_anchors = num_anchors

    def __call__(self, x):
        y = self.out(self.act(self.conv(x)))
        n, _, d, h, w = y.shape
        y = tc.transpose(y, (0, 2, 3, 4, 1))
        return tc.reshape(y, (n, d, h, w, self.num_anchors, 5))


class DetectorModel(Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._holder = _RngHolder()

        def act():
            return RReLU(cfg.rrelu_lower, cfg.rrelu_upper, self._holder)

        w = cfg.widths
        self.stem = tc.Conv3d(1, w[0], 3, rng=rng, dtype=dtype, bias=not cfg.norm)
        self.stem_norm = tc.BatchNorm3d(w[0], dtype=dtype) if cfg.norm else tc.Identity()
        self.stem_act = act()
        levels = []
        c_prev = w[0]
        for lvl, (width, nblk) in enumerate(zip(w, cfg.blocks)):
            blocks = []
            for _ in range(nblk):
                blocks.append(ResidualBlock(c_prev, width, act, rng, dtype, cfg.norm))
                c_prev = width
            if not blocks and c_prev != width:
                blocks.append(ResidualBlock(c_prev, width, act, rng, dtype, cfg.norm))
                c_prev = width
            levels.append(_Level(blocks))
        self.levels = levels
        self.head_levels = [int(np.log2(s)) for s in cfg.head_strides]
        lowest = self.head_levels[0]
        deepest = len(w) - 1
        self.laterals = [tc.Conv3d(w[lvl], cfg.up_width, 1, rng=rng, dtype=dtype)
                         for lvl in range(lowest, deepest + 1)]
        self.heads = [Head(cfg.up_width, cfg.num_anchors, act, rng, dtype) for _ in cfg.head_strides]

    def forward(self, patch, training: bool | None = None, rng=None):
        if training is not None:
            self.train(training)
        x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=self.dtype))
        g = self.cfg.patch_size
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (g, g, g):
            raise tc.ShapeError(f"expected patch [N,1,{g},{g},{g}], got {x.shape}")
        if self.training and rng is None:
            raise ValueError("training-mode forward needs a random generator")
        self._holder.rng = rng
        h = self.stem_act(self.stem_norm(self.stem(x)))
        feats = []
        for lvl, level in enumerate(self.levels):
            if lvl > 0:
                h = tc.maxpool3d(h, 2, 2)
            h = level(h)
            feats.append(h)
        lowest = self.head_levels[0]
        top = None
        pyramid = {}
        for lvl in range(len(feats) - 1, lowest - 1, -1):
            lat = self.laterals[lvl - lowest](feats[lvl])
            top = lat if top is None else tc.add(tc.upsample_nearest3d(top, 2), lat)
            pyramid[lvl] = top
        return [HeadGrid(2 ** lvl, head(pyramid[lvl])) for lvl, head in zip(self.head_levels, self.heads)]

    __call__ = forward

    # -- state ------------------------------------------------------------
    def state_arrays(self, include_optimizer: bool = True) -> dict:
        out = {}
        for name, p in self.named_parameters():
            out["param." + name] = p.data
            if include_optimizer and p.velocity is not None:
                out["velocity." + name] = p.velocity
        for name, b in self.named_buffers():
            out["buffer." + name] = b
        return out

    def load_state_arrays(self, arrays: dict):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            if kind == "param":
                if params[name].data.shape != arr.shape:
                    raise tc.ShapeError(f"{name}: checkpoint shape {arr.shape} != {params[name].shape}")
                params[name].data = arr.astype(self.dtype).copy()
            elif kind == "velocity":
                params[name].velocity = arr.astype(self.dtype).copy()
            elif kind == "buffer":
                buffers[name][...] = arr
        return self

    def summary(self) -> str:
        cfg = self.cfg
        g = cfg.patch_size
        lines = [f"DetectorModel  patch={g}^3  params={self.num_parameters()}  anchors={list(cfg.anchors)}"]
        for lvl, width in enumerate(cfg.widths):
            s = 2 ** lvl
            lines.append(f"  level {lvl}: stride {s:>2}  features [{width}, {g // s}, {g // s}, {g // s}]"
                         f"  blocks {len(self.levels[lvl].blocks)}")
        for s in cfg.head_strides:
            side = g // s
            lines.append(f"  head stride {s}: grid [{side}, {side}, {side}, {cfg.num_anchors}, 5]")
        return "\n".join(lines)


class _Level(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def named_children(self):
        for i, b in enumerate(self.blocks):
            yield f"blocks.{i}", b

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def build_detector(cfg: DetectorConfig, seed: int = 0, dtype=np.float32) -> DetectorModel:
    return DetectorModel(cfg, seed=seed, dtype=dtype)


def config_json(cfg: DetectorConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
