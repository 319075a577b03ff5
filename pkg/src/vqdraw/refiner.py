"""Refinement networks that propose K residual edits of a reconstruction.

A refiner owns one parameter set per segment of consecutive stages. Inside a
segment, every masked layer carries one learned channel mask per stage, so
``refine(x, i)`` depends on the stage index only through which segment runs
and which masks it multiplies in.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


def segment_index(stage: int, stages_per_segment: int) -> int:
    """1-based segment that handles 1-based ``stage``."""
    if stage < 1:
        raise ValueError(f"stage must be >= 1, got {stage}")
    if stages_per_segment < 1:
        raise ValueError(f"stages_per_segment must be >= 1, got {stages_per_segment}")
    return -(-stage // stages_per_segment)


@dataclass
class RefinerConfig:
    options: int = 64
    stages: int = 10
    stages_per_segment: int = 10
    data_shape: tuple[int, ...] = (1, 28, 28)
    kind: str = "cnn"
    channels: int = 64
    res_blocks: int = 4
    downsamples: int = 2
    groups: int = 8
    hidden: int = 128
    head_gain: float = 0.1

    def __post_init__(self):
        self.data_shape = tuple(int(d) for d in self.data_shape)
        if self.options < 1:
            raise ConfigError(f"options (K) must be >= 1, got {self.options}")
        if self.stages < 1:
            raise ConfigError(f"stages (N) must be >= 1, got {self.stages}")
        if not 1 <= self.stages_per_segment <= self.stages:
            raise ConfigError(
                f"stages_per_segment must lie in [1, {self.stages}], got {self.stages_per_segment}"
            )
        if self.kind not in ("cnn", "dense"):
            raise ConfigError(f"unknown refiner kind {self.kind!r}")
        if self.kind == "cnn":
            if len(self.data_shape) != 3:
                raise ConfigError(f"cnn refiner needs C x H x W data, got {self.data_shape}")
            factor = 2**self.downsamples
            if any(d % factor for d in self.data_shape[1:]):
                raise ConfigError(
                    f"spatial dims {self.data_shape[1:]} not divisible by downsampling factor {factor}"
                )
            if self.channels % self.groups:
                raise ConfigError(f"{self.groups} groups do not divide {self.channels} channels")
        elif len(self.data_shape) != 1:
            raise ConfigError(f"dense refiner needs flat data, got {self.data_shape}")

    @property
    def num_segments(self) -> int:
        return math.ceil(self.stages / self.stages_per_segment)

    def segment_stages(self, segment: int) -> range:
        first = (segment - 1) * self.stages_per_segment + 1
        return range(first, min(segment * self.stages_per_segment, self.stages) + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_shape"] = list(self.data_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RefinerConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _uniform(rng, shape, fan_in, gain, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias(rng, size, fan_in, gain, dtype):
    # nonzero biases keep the K options distinct on the all-zero first canvas
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size).astype(dtype)


@dataclass
class Refiner:
    """Base class: parameter bookkeeping and stage/segment routing."""

    config: RefinerConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def p(self, segment: int, name: str) -> Tensor:
        return self.params[f"seg{segment}.{name}"]

    def mask(self, segment: int, layer: str, stage: int) -> Tensor:
        return self.params[f"seg{segment}.{layer}.mask{stage}"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def head_names(self) -> list[str]:
        return [n for n in self.params if ".head." in n]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"parameter {k}: expected shape {self.params[k].shape}, found {v.shape}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> Refiner:
        """Copy of this refiner with every parameter cast to ``dtype``."""
        clone = copy.copy(self)
        clone.params = {
            k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()
        }
        return clone

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def zero_head(self) -> None:
        for n in self.head_names():
            if not n.split(".")[-1].startswith("mask"):
                self.params[n].data[...] = 0

    def refine(self, x_prime, stage: int) -> Tensor:
        """Return the K refinements ``x_prime + delta_j`` stacked on a new axis.

        Batched input (B, *data_shape) gives (B, K, *data_shape); a single
        reconstruction of ``data_shape`` gives (K, *data_shape).
        """
        cfg = self.config
        if not 1 <= stage <= cfg.stages:
            raise ValueError(f"stage {stage} outside [1, {cfg.stages}]")
        x = T.as_tensor(x_prime)
        unbatched = x.shape == cfg.data_shape
        if unbatched:
            x = x.reshape((1,) + cfg.data_shape)
        elif x.shape[1:] != cfg.data_shape:
            raise ShapeError(f"refine: reconstruction {x.shape} does not match data shape {cfg.data_shape}")
        seg = segment_index(stage, cfg.stages_per_segment)
        deltas = self._deltas(x, seg, stage)
        deltas = deltas.reshape((x.shape[0], cfg.options) + cfg.data_shape)
        out = T.add(x.reshape((x.shape[0], 1) + cfg.data_shape), deltas)
        if unbatched:
            out = out.reshape((cfg.options,) + cfg.data_shape)
        return out

    def _deltas(self, x: Tensor, segment: int, stage: int) -> Tensor:
        raise NotImplementedError

    def parameter_count(self, segment: int | None = None) -> int:
        prefix = "" if segment is None else f"seg{segment}."
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))


class DenseRefiner(Refiner):
    LAYERS = ("fc1", "fc2")

    def _deltas(self, x, segment, stage):
        h = x
        for layer in self.LAYERS:
            h = T.linear(h, self.p(segment, f"{layer}.weight"), self.p(segment, f"{layer}.bias"))
            h = T.channel_mask(h, self.mask(segment, layer, stage))
            h = T.relu(h)
        return T.linear(h, self.p(segment, "head.weight"), self.p(segment, "head.bias"))


class CNNRefiner(Refiner):
    def _block(self, h, segment, stage, layer, op, **kw):
        h = op(h, self.p(segment, f"{layer}.weight"), self.p(segment, f"{layer}.bias"), **kw)
        return T.channel_mask(h, self.mask(segment, layer, stage))

    def _norm(self, h, segment, layer):
        return T.group_norm(
            T.relu(h), self.config.groups, self.p(segment, f"{layer}.gn.weight"), self.p(segment, f"{layer}.gn.bias")
        )

    def _deltas(self, x, segment, stage):
        cfg = self.config
        h = x
        for d in range(cfg.downsamples):
            h = self._block(h, segment, stage, f"down{d}", T.conv2d, stride=2, padding=1)
            h = self._norm(h, segment, f"down{d}")
        for r in range(cfg.res_blocks):
            t = self._block(h, segment, stage, f"res{r}a", T.conv2d, padding=1)
            t = self._norm(t, segment, f"res{r}a")
            t = self._block(t, segment, stage, f"res{r}b", T.conv2d, padding=1)
            h = T.add(h, t)
        for u in range(cfg.downsamples):
            h = self._block(h, segment, stage, f"up{u}", T.conv_transpose2d, stride=2, padding=1)
            h = self._norm(h, segment, f"up{u}")
        return self._block(h, segment, stage, "head", T.conv2d, padding=1)


def _add_masks(refiner: Refiner, segment: int, layer: str, width: int, dtype) -> None:
    for stage in refiner.config.segment_stages(segment):
        refiner._add(f"seg{segment}.{layer}.mask{stage}", np.ones(width, dtype=dtype))


def build_dense_refiner(config: RefinerConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> DenseRefiner:
    if config.kind != "dense":
        config = RefinerConfig(**{**config.to_dict(), "kind": "dense"})
    rng = rng or np.random.default_rng(0)
    (d,) = config.data_shape
    hid, k = config.hidden, config.options
    net = DenseRefiner(config)
    for s in range(1, config.num_segments + 1):
        for layer, fan_in in (("fc1", d), ("fc2", hid)):
            net._add(f"seg{s}.{layer}.weight", _uniform(rng, (hid, fan_in), fan_in, math.sqrt(2), dtype))
            net._add(f"seg{s}.{layer}.bias", _bias(rng, hid, fan_in, 1.0, dtype))
            _add_masks(net, s, layer, hid, dtype)
        net._add(f"seg{s}.head.weight", _uniform(rng, (k * d, hid), hid, config.head_gain, dtype))
        net._add(f"seg{s}.head.bias", _bias(rng, k * d, hid, config.head_gain, dtype))
    return net


def build_cnn_refiner(config: RefinerConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> CNNRefiner:
    """Downsample with stride-2 convolutions, run residual blocks at the
    bottleneck, upsample with transposed convolutions, and emit K x C delta
    channels from a 3x3 convolutional head."""
    if config.kind != "cnn":
        config = RefinerConfig(**{**config.to_dict(), "kind": "cnn"})
    rng = rng or np.random.default_rng(0)
    c_in = config.data_shape[0]
    ch, k = config.channels, config.options
    relu_gain = math.sqrt(2)
    net = CNNRefiner(config)

    def conv(s, layer, shape, fan_in, gain, gn=True):
        net._add(f"seg{s}.{layer}.weight", _uniform(rng, shape, fan_in, gain, dtype))
        out_ch = shape[1] if layer.startswith("up") else shape[0]
        net._add(f"seg{s}.{layer}.bias", _bias(rng, out_ch, fan_in, min(gain, 1.0), dtype))
        if gn:
            net._add(f"seg{s}.{layer}.gn.weight", np.ones(out_ch, dtype=dtype))
            net._add(f"seg{s}.{layer}.gn.bias", np.zeros(out_ch, dtype=dtype))
        _add_masks(net, s, layer, out_ch, dtype)

    for s in range(1, config.num_segments + 1):
        prev = c_in
        for d in range(config.downsamples):
            conv(s, f"down{d}", (ch, prev, 4, 4), prev * 16, relu_gain)
            prev = ch
        for r in range(config.res_blocks):
            conv(s, f"res{r}a", (ch, ch, 3, 3), ch * 9, relu_gain)
            # second conv of a residual branch starts small so blocks begin near identity
            conv(s, f"res{r}b", (ch, ch, 3, 3), ch * 9, 0.5, gn=False)
        for u in range(config.downsamples):
            conv(s, f"up{u}", (prev, ch, 4, 4), prev * 4, relu_gain)
            prev = ch
        conv(s, "head", (k * c_in, prev, 3, 3), prev * 9, config.head_gain, gn=False)
    return net


def build_refiner(config: RefinerConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> Refiner:
    if config.kind == "cnn":
        return build_cnn_refiner(config, rng, dtype)
    return build_dense_refiner(config, rng, dtype)
