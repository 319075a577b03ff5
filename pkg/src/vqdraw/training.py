"""Training objective, Adam with gradient accumulation, diagnostics and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kvtext
from . import tensor as T
from .codec import EncodeTrace, NumericalError, encode
from .refiner import Refiner, RefinerConfig, build_refiner
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VQDR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.01
    batch_size: int = 32
    micro_batch_size: int | None = None
    steps: int = 50_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.micro_batch_size is None:
            self.micro_batch_size = self.batch_size
        if self.micro_batch_size < 1 or self.batch_size % self.micro_batch_size:
            raise ValueError(
                f"micro_batch_size {self.micro_batch_size} must divide batch_size {self.batch_size}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: Tensor
    chosen: Tensor
    all: Tensor


def loss_total(trace: EncodeTrace, alpha: float) -> LossTerms:
    """Chosen-option loss plus ``alpha`` times the loss of every option.

    Per example, the chosen term averages the selected option's loss over
    the N stages and the all-options term averages over all N*K options.
    Both are then averaged over the batch.
    """
    if not trace.differentiable:
        raise ValueError("loss_total needs a trace encoded with differentiable=True")
    b, n = trace.codes.shape
    chosen = [T.reshape(T.take_rows(l, trace.codes[:, i] - 1), (b, 1)) for i, l in enumerate(trace.option_losses)]
    chosen = T.mean(T.concatenate(chosen, axis=1))
    every = T.mean(T.concatenate(trace.option_losses, axis=1))
    total = T.add(chosen, T.scale(every, alpha))
    return LossTerms(total, chosen, every)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> AdamState:
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place; returns ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise T.ShapeError(f"adam: gradient {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        dt = p.data.dtype.type
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * np.square(g)
        state.m[name], state.v[name] = m, v
        update = dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        p.data = p.data - update.astype(p.data.dtype)
    return state


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class EntropyReport:
    per_stage: np.ndarray
    mean: float
    pooled: float


def batch_entropy(traces, options: int | None = None) -> EntropyReport:
    """Natural-log entropy of the chosen indices within a mini-batch.

    ``traces`` is an :class:`EncodeTrace`, a sequence of them, or a (B, N)
    array of 1-based codes. Per stage, the empirical distribution over the
    batch gives one entropy; ``mean`` averages those. ``pooled`` treats all
    stages' choices as one sample.
    """
    if isinstance(traces, EncodeTrace):
        traces = [traces]
    if isinstance(traces, np.ndarray):
        codes = np.atleast_2d(traces)
        if options is None:
            raise ValueError("options (K) is required when passing a code array")
    else:
        traces = list(traces)
        if not traces:
            raise ValueError("batch_entropy needs at least one trace")
        codes = np.concatenate([t.codes for t in traces], axis=0)
        options = options or traces[0].options
    per_stage = np.array(
        [_entropy(np.bincount(codes[:, i] - 1, minlength=options)) for i in range(codes.shape[1])]
    )
    pooled = _entropy(np.bincount(codes.reshape(-1) - 1, minlength=options))
    return EntropyReport(per_stage, float(per_stage.mean()), pooled)


# --------------------------------------------------------------------------
# training step
# --------------------------------------------------------------------------

METRIC_COLUMNS = ("step", "loss_chosen", "loss_all", "loss_total", "entropy", "entropy_pooled", "seconds")


@dataclass
class MetricsRow:
    step: int
    loss_chosen: float
    loss_all: float
    loss_total: float
    entropy: float
    entropy_pooled: float
    seconds: float = 0.0
    skipped: bool = False

    def csv_values(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


def train_step(batch: np.ndarray, refiner: Refiner, adam_state: AdamState, config: TrainConfig) -> MetricsRow:
    """One optimizer update from a full batch, accumulated over micro-batches.

    Each micro-batch contributes its loss scaled by its share of the batch,
    so the accumulated gradient is that of the batch-mean objective. A
    non-finite loss or gradient skips the update and leaves every parameter
    and moment untouched.
    """
    batch = np.asarray(batch, dtype=refiner.dtype)
    b = batch.shape[0]
    micro = config.micro_batch_size or b
    if b % micro:
        raise ValueError(f"micro_batch_size {micro} must divide batch {b}")
    params = refiner.named_parameters()
    refiner.zero_grad()
    sums = np.zeros(3)
    codes = []
    failed = False
    for start in range(0, b, micro):
        chunk = batch[start : start + micro]
        try:
            trace = encode(chunk, refiner, differentiable=True)
        except NumericalError as exc:
            log.warning("step %d: %s", adam_state.step + 1, exc)
            failed = True
            break
        terms = loss_total(trace, config.alpha)
        share = chunk.shape[0] / b
        values = np.array([terms.chosen.item(), terms.all.item(), terms.total.item()])
        if not np.all(np.isfinite(values)):
            log.warning("step %d: non-finite loss %s, update skipped", adam_state.step + 1, values)
            failed = True
            break
        sums += share * values
        T.backward(T.scale(terms.total, share))
        codes.append(trace.codes)

    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    if not failed and not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("step %d: non-finite gradient, update skipped", adam_state.step + 1)
        failed = True
    refiner.zero_grad()
    if failed:
        nan = float("nan")
        return MetricsRow(adam_state.step, nan, nan, nan, nan, nan, skipped=True)

    adam_step(params, grads, adam_state, config.lr, config.beta1, config.beta2, config.eps)
    ent = batch_entropy(np.concatenate(codes, axis=0), refiner.config.options)
    return MetricsRow(adam_state.step, *sums.tolist(), ent.mean, ent.pooled)


def evaluate(data: np.ndarray, refiner: Refiner, alpha: float = 0.0, batch_size: int = 100) -> MetricsRow:
    """Loss terms and entropy over a dataset without touching parameters."""
    sums = np.zeros(3)
    codes = []
    n = data.shape[0]
    for start in range(0, n, batch_size):
        chunk = np.asarray(data[start : start + batch_size], dtype=refiner.dtype)
        trace = encode(chunk, refiner)
        losses = trace.losses_array()  # (B, N, K)
        chosen = np.take_along_axis(losses, trace.codes[:, :, None] - 1, axis=2)[..., 0].mean(axis=1)
        every = losses.mean(axis=(1, 2))
        sums += np.array([chosen.sum(), every.sum(), (chosen + alpha * every).sum()])
        codes.append(trace.codes)
    ent = batch_entropy(np.concatenate(codes, axis=0), refiner.config.options)
    return MetricsRow(-1, *(sums / n).tolist(), ent.mean, ent.pooled)


class BatchSampler:
    """Uniform draws without replacement inside a batch, from a seeded generator."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng

    def __call__(self, batch_size: int) -> np.ndarray:
        return self.rng.choice(self.size, size=batch_size, replace=batch_size > self.size)


def fit(
    refiner: Refiner,
    data: np.ndarray,
    config: TrainConfig,
    adam_state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    steps: int | None = None,
    deterministic: bool = False,
) -> Iterator[MetricsRow]:
    """Run training steps, yielding one :class:`MetricsRow` per step.

    ``rng`` drives batch selection; pass the same generator object that gets
    checkpointed to make resumption exact. With ``deterministic`` the
    wall-clock column is reported as zero so metric files compare byte for
    byte.
    """
    adam_state = adam_state or AdamState.for_params(refiner.named_parameters())
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    sampler = BatchSampler(len(data), rng)
    todo = config.steps if steps is None else steps
    start = time.perf_counter()
    for _ in range(todo):
        idx = sampler(config.batch_size)
        row = train_step(data[idx], refiner, adam_state, config)
        row.seconds = 0.0 if deterministic else time.perf_counter() - start
        yield row


class MetricsWriter:
    """Append-only CSV of :class:`MetricsRow` values."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = append and self.path.exists() and self.path.stat().st_size > 0
        self._fh = open(self.path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if not exists:
            self._writer.writerow(METRIC_COLUMNS)

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.csv_values())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class TrainingState:
    refiner: Refiner
    train_config: TrainConfig
    adam: AdamState
    rng: np.random.Generator
    step: int
    extra: dict = field(default_factory=dict)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    cls = getattr(np.random, state["bit_generator"])
    bg = cls()
    bg.state = state
    return np.random.Generator(bg)


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def checkpoint_bytes(
    refiner: Refiner,
    train_config: TrainConfig,
    adam: AdamState,
    rng: np.random.Generator,
    step: int | None = None,
    extra: dict | None = None,
) -> bytes:
    meta = {
        "format": "vqdraw-checkpoint",
        "step": adam.step if step is None else step,
        "adam.step": adam.step,
        "initial_canvas": "zeros",
        "rng": _rng_state(rng),
    }
    meta.update({f"refiner.{k}": v for k, v in refiner.config.to_dict().items()})
    meta.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    meta.update({f"extra.{k}": v for k, v in (extra or {}).items()})
    text = kvtext.dumps(meta).encode("utf-8")

    blobs = []
    for name, p in refiner.named_parameters().items():
        blobs.append(_pack_blob(f"param/{name}", p.data))
        blobs.append(_pack_blob(f"adam.m/{name}", adam.m.get(name, np.zeros_like(p.data))))
        blobs.append(_pack_blob(f"adam.v/{name}", adam.v.get(name, np.zeros_like(p.data))))
    body = struct.pack("<I", len(text)) + text + struct.pack("<I", len(blobs)) + b"".join(blobs)
    head = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, refiner, train_config, adam, rng, step=None, extra=None) -> None:
    data = checkpoint_bytes(refiner, train_config, adam, rng, step, extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _check_expected(found: RefinerConfig, expected: RefinerConfig | None) -> None:
    if expected is None:
        return
    a, b = found.to_dict(), expected.to_dict()
    diffs = [f"{k}: checkpoint has {a[k]!r}, expected {b[k]!r}" for k in a if a[k] != b[k]]
    if diffs:
        raise ConfigMismatch("configuration mismatch: " + "; ".join(diffs))


def parse_checkpoint(data: bytes, expect: RefinerConfig | None = None) -> TrainingState:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body_start = r.pos
    (text_len,) = r.unpack("<I")
    meta = kvtext.loads(r.take(text_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = math.prod(shape)
        blobs[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    if crc != zlib.crc32(data[body_start:body_end]):
        raise CheckpointError("checkpoint checksum mismatch")

    rcfg = RefinerConfig.from_dict({k[8:]: v for k, v in meta.items() if k.startswith("refiner.")})
    _check_expected(rcfg, expect)
    tcfg = TrainConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("train.")})
    refiner = build_refiner(rcfg, np.random.default_rng(0))
    params = {k[6:]: v for k, v in blobs.items() if k.startswith("param/")}
    refiner.load_state_dict(params)
    adam = AdamState(
        {k[7:]: v for k, v in blobs.items() if k.startswith("adam.m/")},
        {k[7:]: v for k, v in blobs.items() if k.startswith("adam.v/")},
        int(meta["adam.step"]),
    )
    extra = {k[6:]: v for k, v in meta.items() if k.startswith("extra.")}
    return TrainingState(refiner, tcfg, adam, _restore_rng(meta["rng"]), int(meta["step"]), extra)


def load_checkpoint(path, expect: RefinerConfig | None = None) -> TrainingState:
    """Read a checkpoint written by :func:`save_checkpoint`.

    The whole file is validated before any state is built, so a truncated or
    corrupted file raises :class:`CheckpointError` and returns nothing.
    ``expect`` guards against resuming with a different refiner shape.
    """
    return parse_checkpoint(Path(path).read_bytes(), expect)
