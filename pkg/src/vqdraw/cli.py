"""Command-line front end.

    vqdraw train --images train-images-idx3-ubyte.gz --out runs/mnist
    vqdraw encode --checkpoint runs/mnist/checkpoint.vqdr --images t10k-images-idx3-ubyte.gz --count 4 --out codes
    vqdraw decode --checkpoint runs/mnist/checkpoint.vqdr --codes codes --out decoded
    vqdraw sample --checkpoint runs/mnist/checkpoint.vqdr --out samples.pgm
    vqdraw stages --checkpoint runs/mnist/checkpoint.vqdr --images t10k-images-idx3-ubyte.gz --out stages.pgm

Flags take the ``--key value`` form. ``--config FILE`` reads ``key = value``
lines (the same format as the run manifest); flags on the command line win.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, kvtext
from .codec import CodeFormatError, NumericalError
from .data import DataFormatError, MixtureSpec, gen_mixture, load_idx, write_image_grid
from .gradcheck import grad_check
from .refiner import RefinerConfig, build_refiner
from .training import (
    AdamState,
    CheckpointError,
    MetricsWriter,
    TrainConfig,
    fit,
    load_checkpoint,
    loss_total,
    save_checkpoint,
)

log = logging.getLogger("vqdraw")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Table 1, MNIST column
MNIST_PROFILE = {
    "options": 64,
    "stages": 10,
    "stages_per_segment": 10,
    "alpha": 0.01,
    "batch_size": 32,
    "steps": 50_000,
    "lr": 1e-3,
}

REFINER_KEYS = ("kind", "options", "stages", "stages_per_segment", "channels", "res_blocks", "downsamples", "groups", "hidden", "head_gain")
TRAIN_KEYS = ("alpha", "batch_size", "micro_batch_size", "steps", "lr", "beta1", "beta2", "eps", "seed")

DEFAULTS = {
    "seed": 0,
    "out": "run",
    "kind": None,
    "checkpoint_every": 1000,
    "grid_every": 1000,
    "log_every": 100,
    "mixture_count": 20_000,
    "rows": 5,
    "cols": 5,
    "count": 8,
    "first": 0,
    "max_stages_shown": 20,
    "deterministic": False,
    "max_skipped": 10,
    **{k: v for k, v in RefinerConfig().to_dict().items() if k in REFINER_KEYS and k != "kind"},
    **{k: v for k, v in TrainConfig().to_dict().items() if k in TRAIN_KEYS and k != "seed"},
    **MNIST_PROFILE,
    "micro_batch_size": None,
    # one segment spanning all stages unless set
    "stages_per_segment": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(p, name, type_=None, help_=None, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=type_, default=None, help=help_, **kw)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqdraw", description="Sequential discrete auto-encoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        _flag(p, "config", str, "key = value file; command-line flags override it")
        _flag(p, "seed", int)
        _flag(p, "out", str, "output directory (or file for grid commands)")
        _flag(p, "log_level", str)

    t = sub.add_parser("train", help="train a refiner")
    common(t)
    _flag(t, "images", str, "IDX training images")
    _flag(t, "test_images", str, "IDX test images for periodic reconstruction grids")
    _flag(t, "mixture", str, "mixture spec file (key = value) for flat synthetic data")
    _flag(t, "mixture_count", int)
    _flag(t, "resume", str, "checkpoint to continue from")
    for k in REFINER_KEYS:
        _flag(t, k, str if k == "kind" else (float if k == "head_gain" else int))
    for k in TRAIN_KEYS:
        if k != "seed":
            _flag(t, k, float if k in ("alpha", "lr", "beta1", "beta2", "eps") else int)
    _flag(t, "checkpoint_every", int)
    _flag(t, "grid_every", int)
    _flag(t, "log_every", int)
    _flag(t, "max_skipped", int, "abort after this many consecutive skipped steps")
    _flag(t, "deterministic", _bool, "zero the wall-clock column so metric files compare exactly")

    e = sub.add_parser("encode", help="write one code file per input")
    common(e)
    _flag(e, "checkpoint", str)
    _flag(e, "images", str)
    _flag(e, "points", str, "CSV of flat vectors for dense refiners")
    _flag(e, "first", int)
    _flag(e, "count", int)

    d = sub.add_parser("decode", help="reconstruct from code files")
    common(d)
    _flag(d, "checkpoint", str)
    _flag(d, "codes", str, "a .vqdc file or a directory of them")

    r = sub.add_parser("reconstruct", help="encode and write the encoder's own reconstructions")
    common(r)
    _flag(r, "checkpoint", str)
    _flag(r, "images", str)
    _flag(r, "points", str)
    _flag(r, "first", int)
    _flag(r, "count", int)

    s = sub.add_parser("sample", help="decode uniformly random codes into a grid")
    common(s)
    _flag(s, "checkpoint", str)
    _flag(s, "rows", int)
    _flag(s, "cols", int)

    g = sub.add_parser("stages", help="grid of per-stage reconstructions, target left-most")
    common(g)
    _flag(g, "checkpoint", str)
    _flag(g, "images", str)
    _flag(g, "first", int)
    _flag(g, "count", int)
    _flag(g, "max_stages_shown", int)

    c = sub.add_parser("grad-check", help="finite-difference check of the training loss gradient")
    common(c)
    _flag(c, "kind", str)
    _flag(c, "tolerance", float)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, an optional config file, and explicit flags."""
    opts = dict(DEFAULTS)
    if args.config:
        loaded = kvtext.load(args.config)
        loaded.pop("command", None)
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return opts


def _refiner_config(opts: dict, data_shape) -> RefinerConfig:
    kind = opts.get("kind") or ("cnn" if len(data_shape) == 3 else "dense")
    values = {k: opts[k] for k in REFINER_KEYS if k != "kind" and opts.get(k) is not None}
    values.setdefault("stages_per_segment", values.get("stages", RefinerConfig.stages))
    return RefinerConfig(data_shape=tuple(data_shape), kind=kind, **values)


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(**{k: opts[k] for k in TRAIN_KEYS if opts.get(k) is not None})


def _write_manifest(out: Path, command: str, opts: dict, extra: dict | None = None) -> None:
    manifest = {"command": command, **{k: v for k, v in sorted(opts.items()) if v is not None}}
    manifest.update(extra or {})
    kvtext.dump(manifest, out / "manifest.txt")


def _load_inputs(opts: dict) -> np.ndarray:
    if opts.get("images"):
        return load_idx(opts["images"]).examples
    if opts.get("points"):
        return np.loadtxt(opts["points"], delimiter=",", dtype=np.float32, ndmin=2)
    raise UsageError("one of --images or --points is required")


def _select(data: np.ndarray, opts: dict) -> np.ndarray:
    first, count = int(opts["first"]), int(opts["count"])
    if not 0 <= first < len(data):
        raise UsageError(f"--first {first} outside dataset of {len(data)}")
    return data[first : first + count]


def _is_image(shape) -> bool:
    return len(shape) == 3 and shape[0] in (1, 3)


def _write_points(path: Path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(len(points), -1), delimiter=",", fmt="%.9g")


def _stage_grid(refiner, targets: np.ndarray, max_shown: int) -> tuple[list[np.ndarray], int]:
    trace = codec.encode(targets, refiner)
    shown = min(trace.stages, max_shown)
    tiles = []
    for row in range(len(targets)):
        tiles.append(targets[row])
        tiles.extend(np.clip(trace.reconstructions[s].data[row], 0, 1) for s in range(shown))
    return tiles, shown + 1


def _sample_grid(refiner, rng, rows: int, cols: int) -> np.ndarray:
    return np.clip(codec.sample(refiner, rng, rows * cols).data, 0, 1)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(opts: dict) -> int:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(int(opts["seed"])).spawn(3)
    test = None
    if opts.get("images"):
        data = load_idx(opts["images"]).examples
        if opts.get("test_images"):
            test = load_idx(opts["test_images"]).examples
    elif opts.get("mixture"):
        data = gen_mixture(MixtureSpec.load(opts["mixture"]), int(opts["mixture_count"])).examples
    else:
        raise UsageError("train needs --images or --mixture")
    rcfg = _refiner_config(opts, data.shape[1:])
    tcfg = _train_config({**opts, "seed": int(opts["seed"])})

    if opts.get("resume"):
        state = load_checkpoint(opts["resume"], expect=rcfg)
        refiner, adam, rng = state.refiner, state.adam, state.rng
        if state.train_config.to_dict() | {"steps": tcfg.steps} != tcfg.to_dict():
            log.warning("training hyperparameters differ from the checkpoint; using the command line")
        append = (out / "metrics.csv").exists()
    else:
        refiner = build_refiner(rcfg, np.random.default_rng(seeds[0]))
        adam = AdamState.for_params(refiner.named_parameters())
        rng = np.random.default_rng(seeds[1])
        append = False
    _write_manifest(out, "train", opts, {"resolved.refiner": rcfg.to_dict(), "resolved.train": tcfg.to_dict()})

    image = _is_image(rcfg.data_shape)
    grid_rng = np.random.default_rng(seeds[2])
    ckpt = out / "checkpoint.vqdr"
    todo = max(0, tcfg.steps - adam.step)
    every_ckpt, every_grid, every_log = (int(opts[k]) for k in ("checkpoint_every", "grid_every", "log_every"))

    def dump_grids(tag: str) -> None:
        if not image:
            _write_points(out / f"samples_{tag}.csv", codec.sample(refiner, grid_rng, 25).data)
            return
        write_image_grid(_sample_grid(refiner, grid_rng, 5, 5), 5, 5, out / f"samples_{tag}.pgm")
        targets = (test if test is not None else data)[:8]
        tiles, cols = _stage_grid(refiner, targets, 20)
        write_image_grid(tiles, len(targets), cols, out / f"stages_{tag}.pgm")

    skipped = 0
    with MetricsWriter(out / "metrics.csv", append=append) as writer:
        for row in fit(refiner, data, tcfg, adam, rng, steps=todo, deterministic=bool(opts["deterministic"])):
            if row.skipped:
                skipped += 1
                if skipped >= int(opts["max_skipped"]):
                    raise NumericalError(f"{skipped} consecutive steps produced non-finite losses")
                continue
            skipped = 0
            writer.write(row)
            if every_log and row.step % every_log == 0:
                log.info("step %d chosen=%.5f entropy=%.3f", row.step, row.loss_chosen, row.entropy)
            if every_ckpt and row.step % every_ckpt == 0:
                save_checkpoint(ckpt, refiner, tcfg, adam, rng)
            if every_grid and row.step % every_grid == 0:
                dump_grids(f"{row.step:06d}")
    save_checkpoint(ckpt, refiner, tcfg, adam, rng)
    if todo:
        dump_grids("final")
    return EXIT_OK


def _checkpoint(opts: dict):
    if not opts.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    return load_checkpoint(opts["checkpoint"]).refiner


def cmd_encode(opts: dict) -> int:
    refiner = _checkpoint(opts)
    inputs = _select(_load_inputs(opts), opts)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "encode", opts)
    for i, x in enumerate(inputs):
        trace = codec.encode(x, refiner)
        codec.write_code_file(out / f"code_{int(opts['first']) + i:06d}.vqdc", trace.code(0))
    return EXIT_OK


def cmd_reconstruct(opts: dict) -> int:
    refiner = _checkpoint(opts)
    inputs = _select(_load_inputs(opts), opts)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "reconstruct", opts)
    for i, x in enumerate(inputs):
        stem = f"recon_{int(opts['first']) + i:06d}"
        recon = codec.encode(x, refiner).final.data[0]
        np.save(out / f"{stem}.npy", recon)
        if _is_image(recon.shape):
            write_image_grid([x, np.clip(recon, 0, 1)], 1, 2, out / f"{stem}.pgm")
    return EXIT_OK


def cmd_decode(opts: dict) -> int:
    refiner = _checkpoint(opts)
    if not opts.get("codes"):
        raise UsageError("--codes is required")
    src = Path(opts["codes"])
    files = sorted(src.glob("*.vqdc")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no .vqdc files under {src}")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "decode", opts)
    cfg = refiner.config
    for f in files:
        code = codec.read_code_file(f)
        if code.options != cfg.options or code.stages != cfg.stages:
            raise CodeFormatError(
                f"{f.name}: code has K={code.options}, N={code.stages}; checkpoint has K={cfg.options}, N={cfg.stages}"
            )
        recon = codec.decode(code, refiner).data[0]
        np.save(out / f"{f.stem}.npy", recon)
        if _is_image(recon.shape):
            write_image_grid([np.clip(recon, 0, 1)], 1, 1, out / f"{f.stem}.pgm")
        else:
            _write_points(out / f"{f.stem}.csv", recon[None])
    return EXIT_OK


def cmd_sample(opts: dict) -> int:
    refiner = _checkpoint(opts)
    rows, cols = int(opts["rows"]), int(opts["cols"])
    rng = np.random.default_rng(int(opts["seed"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if _is_image(refiner.config.data_shape):
        write_image_grid(_sample_grid(refiner, rng, rows, cols), rows, cols, out)
    else:
        _write_points(out, codec.sample(refiner, rng, rows * cols).data)
    return EXIT_OK


def cmd_stages(opts: dict) -> int:
    refiner = _checkpoint(opts)
    if not _is_image(refiner.config.data_shape):
        raise UsageError("stages needs an image checkpoint")
    targets = _select(_load_inputs(opts), opts)
    tiles, cols = _stage_grid(refiner, targets, int(opts["max_stages_shown"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image_grid(tiles, len(targets), cols, out)
    return EXIT_OK


GRAD_CHECK_CONFIGS = {
    "dense": RefinerConfig(options=3, stages=3, stages_per_segment=2, data_shape=(4,), kind="dense", hidden=6, head_gain=1.0),
    "cnn": RefinerConfig(
        options=3, stages=2, stages_per_segment=1, data_shape=(1, 8, 8), kind="cnn",
        channels=4, res_blocks=1, downsamples=1, groups=2, head_gain=1.0,
    ),
}


def loss_check(cfg: RefinerConfig, rng: np.random.Generator, batch: int = 2, alpha: float = 0.01):
    """Finite-difference report for d(loss_total)/d(params) on a fresh float64 refiner.

    The code path is frozen at the greedy choice, so the loss is a smooth
    function of the parameters away from relu kinks.
    """
    net = build_refiner(cfg, rng, dtype=np.float64)
    x = rng.random((batch,) + tuple(cfg.data_shape))
    codes = codec.encode(x, net).codes
    return grad_check(
        lambda: loss_total(codec.encode(x, net, differentiable=True, forced_codes=codes), alpha).total,
        net.parameters(),
        tolerance=1e-6,
        names=list(net.params),
    )


def cmd_grad_check(opts: dict) -> int:
    rng = np.random.default_rng(int(opts["seed"]))
    tol = float(opts.get("tolerance") or 1e-6)
    kinds = [opts["kind"]] if opts.get("kind") else list(GRAD_CHECK_CONFIGS)
    ok = True
    for kind in kinds:
        if kind not in GRAD_CHECK_CONFIGS:
            raise UsageError(f"unknown refiner kind {kind!r}")
        report = loss_check(GRAD_CHECK_CONFIGS[kind], rng)
        report.tolerance = tol
        print(f"{kind}: {report}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "reconstruct": cmd_reconstruct,
    "sample": cmd_sample,
    "stages": cmd_stages,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = resolve(args)
    except (OSError, ValueError) as exc:
        print(f"vqdraw: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=str(opts.get("log_level") or "INFO").upper(), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"vqdraw {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"vqdraw {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CodeFormatError, CheckpointError, OSError) as exc:
        print(f"vqdraw {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invalid hyperparameters (ConfigError and dataclass validation)
        print(f"vqdraw {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
