"""Greedy sequential encoding, decoding, and latent-code serialization."""
from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CODE_MAGIC = b"VQDC"
CODE_VERSION = 1
PACK_BITS = 0
PACK_BYTES = 1

OptionLoss = Callable[[Tensor, Tensor], Tensor]


class NumericalError(ArithmeticError):
    pass


class CodeFormatError(ValueError):
    pass


def option_mse(refinements: Tensor, target: Tensor) -> Tensor:
    """Per-option mean squared error, (B, K, *S) against (B, *S) -> (B, K)."""
    b, k = refinements.shape[:2]
    target = target.reshape((b, 1) + target.shape[1:])
    return T.mean_squared_error(refinements, target, axis=tuple(range(2, refinements.ndim)))


@dataclass(frozen=True)
class LatentCode:
    indices: tuple[int, ...]
    options: int
    stages: int = field(default=-1)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if self.stages == -1:
            object.__setattr__(self, "stages", len(idx))
        if len(idx) != self.stages:
            raise ValueError(f"code has {len(idx)} indices but N={self.stages}")
        if self.options < 1:
            raise ValueError(f"K must be >= 1, got {self.options}")
        bad = [i for i in idx if not 1 <= i <= self.options]
        if bad:
            raise ValueError(f"indices {bad} outside [1, {self.options}]")

    @property
    def bits(self) -> int:
        return code_bits(self.stages, self.options)

    def __len__(self) -> int:
        return self.stages


@dataclass
class EncodeTrace:
    """Everything the greedy encoder saw, for a batch of B targets.

    ``option_losses[i]`` is the (B, K) loss tensor of stage ``i + 1`` and
    ``reconstructions[i]`` the (B, *S) reconstruction after that stage. Codes
    are 1-based, shape (B, N).
    """

    target: Tensor
    option_losses: list[Tensor]
    codes: np.ndarray
    reconstructions: list[Tensor]
    options: int
    differentiable: bool = False

    @property
    def stages(self) -> int:
        return self.codes.shape[1]

    @property
    def final(self) -> Tensor:
        return self.reconstructions[-1]

    def code(self, row: int = 0) -> LatentCode:
        return LatentCode(self.codes[row], self.options, self.stages)

    def losses_array(self) -> np.ndarray:
        """(B, N, K) array of every recorded option loss."""
        return np.stack([l.data for l in self.option_losses], axis=1)


def _batched(x, data_shape) -> Tensor:
    x = T.as_tensor(x)
    if x.shape == tuple(data_shape):
        return x.reshape((1,) + tuple(data_shape))
    if x.shape[1:] != tuple(data_shape):
        raise ShapeError(f"input {x.shape} does not match data shape {tuple(data_shape)}")
    return x


def encode(
    x,
    refiner,
    stages: int | None = None,
    differentiable: bool = False,
    forced_codes: np.ndarray | None = None,
    loss: OptionLoss = option_mse,
) -> EncodeTrace:
    """Greedily pick, at every stage, the refinement closest to ``x``.

    Starting from a zero canvas, stage ``i`` asks the refiner for K options,
    scores each against ``x`` and keeps the lowest-loss one, smallest index
    first on ties. With ``differentiable=True`` all per-option losses keep
    their graph, so the chosen indices act as constants under backprop.
    ``forced_codes`` (B, N) replaces the argmin, which freezes the path for
    finite-difference checks.
    """
    cfg = refiner.config
    n = stages if stages is not None else cfg.stages
    if not 1 <= n <= cfg.stages:
        raise ValueError(f"cannot encode {n} stages with a refiner built for {cfg.stages}")
    x = _batched(x, cfg.data_shape)
    if x.dtype != refiner.dtype:
        x = Tensor(x.data.astype(refiner.dtype))
    b = x.shape[0]
    if forced_codes is not None:
        forced_codes = np.asarray(forced_codes).reshape(b, -1)

    canvas = Tensor(np.zeros(x.shape, dtype=refiner.dtype))
    codes = np.zeros((b, n), dtype=np.int64)
    losses, recons = [], []
    ctx = contextlib.nullcontext() if differentiable else T.no_grad()
    with ctx:
        for stage in range(1, n + 1):
            options = refiner.refine(canvas, stage)
            if not np.all(np.isfinite(options.data)):
                row, opt = np.argwhere(~np.isfinite(options.data.reshape(b, cfg.options, -1)))[0][:2]
                raise NumericalError(f"non-finite refinement at stage {stage}, option {opt + 1} (example {row})")
            stage_loss = loss(options, x)
            if forced_codes is not None:
                choice = forced_codes[:, stage - 1] - 1
            else:
                choice = np.argmin(stage_loss.data, axis=1)
            canvas = T.take_rows(options, choice)
            codes[:, stage - 1] = choice + 1
            losses.append(stage_loss)
            recons.append(canvas)
    return EncodeTrace(x, losses, codes, recons, cfg.options, differentiable)


def _code_matrix(codes, options: int, stages: int) -> np.ndarray:
    if isinstance(codes, LatentCode):
        codes = [codes]
    if isinstance(codes, (list, tuple)) and codes and isinstance(codes[0], LatentCode):
        for c in codes:
            if c.options != options:
                raise ValueError(f"code built for K={c.options}, refiner has K={options}")
        codes = [c.indices for c in codes]
    m = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    if m.shape[1] > stages:
        raise ValueError(f"code length {m.shape[1]} exceeds the refiner's N={stages}")
    if m.size and (m.min() < 1 or m.max() > options):
        raise ValueError(f"code indices must lie in [1, {options}]")
    return m


def decode(codes, refiner) -> Tensor:
    """Replay a code (or a batch of them) from a zero canvas.

    Accepts a :class:`LatentCode`, a list of them, or an integer array of
    shape (B, N) / (N,). Returns a (B, *data_shape) tensor.
    """
    cfg = refiner.config
    m = _code_matrix(codes, cfg.options, cfg.stages)
    canvas = Tensor(np.zeros((m.shape[0],) + cfg.data_shape, dtype=refiner.dtype))
    with T.no_grad():
        for stage in range(1, m.shape[1] + 1):
            canvas = T.take_rows(refiner.refine(canvas, stage), m[:, stage - 1] - 1)
    return canvas


def sample_codes(rng: np.random.Generator, count: int, stages: int, options: int) -> np.ndarray:
    return rng.integers(1, options + 1, size=(count, stages))


def sample(refiner, rng: np.random.Generator, count: int = 1, stages: int | None = None) -> Tensor:
    """Decode codes drawn uniformly at random, one index per stage."""
    cfg = refiner.config
    n = stages if stages is not None else cfg.stages
    return decode(sample_codes(rng, count, n, cfg.options), refiner)


# --------------------------------------------------------------------------
# packing
# --------------------------------------------------------------------------


def is_power_of_two(k: int) -> bool:
    return k >= 1 and k & (k - 1) == 0


def index_bits(options: int) -> int:
    return (options - 1).bit_length()


def code_bits(stages: int, options: int) -> int:
    return stages * index_bits(options)


def pack_mode(options: int) -> int:
    return PACK_BITS if is_power_of_two(options) else PACK_BYTES


def payload_size(stages: int, options: int) -> int:
    if pack_mode(options) == PACK_BYTES:
        return stages
    return math.ceil(code_bits(stages, options) / 8)


def pack_code(code: LatentCode) -> bytes:
    """Concatenate ``index - 1`` as log2(K)-bit fields, MSB first, zero-padded.

    Non-power-of-two K falls back to one byte per index.
    """
    if pack_mode(code.options) == PACK_BYTES:
        if code.options > 256:
            raise ValueError(f"byte-per-index packing supports K <= 256, got {code.options}")
        return bytes(i - 1 for i in code.indices)
    width = index_bits(code.options)
    acc = 0
    for i in code.indices:
        acc = (acc << width) | (i - 1)
    total = width * code.stages
    nbytes = math.ceil(total / 8)
    return (acc << (nbytes * 8 - total)).to_bytes(nbytes, "big")


def unpack_code(data: bytes, stages: int, options: int) -> LatentCode:
    expected = payload_size(stages, options)
    if len(data) != expected:
        raise CodeFormatError(f"payload is {len(data)} bytes, expected {expected} for N={stages}, K={options}")
    if pack_mode(options) == PACK_BYTES:
        return LatentCode([b + 1 for b in data], options, stages)
    width = index_bits(options)
    pad = expected * 8 - width * stages
    acc = int.from_bytes(data, "big")
    if acc & ((1 << pad) - 1):
        raise CodeFormatError("nonzero padding bits in packed code")
    acc >>= pad
    field_mask = (1 << width) - 1
    indices = [((acc >> (width * (stages - 1 - s))) & field_mask) + 1 for s in range(stages)]
    return LatentCode(indices, options, stages)


_HEADER = struct.Struct("<4sBHHB")


def code_file_bytes(code: LatentCode) -> bytes:
    header = _HEADER.pack(CODE_MAGIC, CODE_VERSION, code.options, code.stages, pack_mode(code.options))
    return header + pack_code(code)


def parse_code_file(data: bytes) -> LatentCode:
    if len(data) < _HEADER.size:
        raise CodeFormatError(f"code file is {len(data)} bytes, shorter than its {_HEADER.size}-byte header")
    magic, version, k, n, mode = _HEADER.unpack_from(data)
    if magic != CODE_MAGIC:
        raise CodeFormatError(f"bad magic {magic!r}, expected {CODE_MAGIC!r}")
    if version != CODE_VERSION:
        raise CodeFormatError(f"code file version {version}, expected {CODE_VERSION}")
    if mode != pack_mode(k):
        raise CodeFormatError(f"packing mode {mode} inconsistent with K={k}")
    return unpack_code(data[_HEADER.size :], n, k)


def write_code_file(path, code: LatentCode) -> None:
    with open(path, "wb") as fh:
        fh.write(code_file_bytes(code))


def read_code_file(path) -> LatentCode:
    with open(path, "rb") as fh:
        return parse_code_file(fh.read())


def codes_from_trace(trace: EncodeTrace) -> Sequence[LatentCode]:
    return [trace.code(r) for r in range(trace.codes.shape[0])]
