"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criterion 7 trains a
small CNN on the prepared MNIST subset for 2,000 steps and takes roughly
20-25 minutes on one CPU; it fails loudly if ``data/mnist`` is missing
(see ``scripts/prepare_mnist.py``).
"""
import math
import time

import numpy as np
import pytest
from sklearn.cluster import KMeans

from vqdraw import cli, codec
from vqdraw.codec import LatentCode
from vqdraw.data import MixtureSpec, gen_mixture, load_idx, read_pnm
from vqdraw.gradcheck import grad_check
from vqdraw.refiner import RefinerConfig, build_refiner
from vqdraw.tensor import backward
from vqdraw.training import TrainConfig, evaluate, fit, load_checkpoint, loss_total

from conftest import MNIST_DIR


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
        assert ok, detail

    return emit


def test_criterion_1_code_size(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    code = LatentCode(rng.integers(1, 65, size=10).tolist(), 64, 10)
    payload = codec.pack_code(code)
    header = len(codec.code_file_bytes(code)) - len(payload)
    ok = code.bits == 60 and codec.code_bits(10, 64) == 60 and len(payload) == 8 and header == 10
    elapsed = time.perf_counter() - t0
    verdict(1, "code size exact", ok and elapsed < 1.0, f"bits={code.bits} payload={len(payload)}B in {elapsed:.3f}s")


GRAD_CONFIGS = [
    RefinerConfig(options=3, stages=3, stages_per_segment=2, data_shape=(4,), kind="dense", hidden=6, head_gain=1.0),
    RefinerConfig(options=3, stages=2, stages_per_segment=1, data_shape=(1, 8, 8), kind="cnn",
                  channels=4, res_blocks=1, downsamples=1, groups=2, head_gain=1.0),
    RefinerConfig(options=2, stages=1, stages_per_segment=1, data_shape=(1, 8, 8), kind="cnn",
                  channels=4, res_blocks=1, downsamples=1, groups=1, head_gain=1.0),
]


def test_criterion_2_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, lines = 0.0, []
    ok = True
    for cfg in GRAD_CONFIGS:
        net = build_refiner(cfg, rng, dtype=np.float64)
        x = rng.random((2,) + cfg.data_shape)
        codes = codec.encode(x, net).codes
        report = grad_check(
            lambda: loss_total(codec.encode(x, net, differentiable=True, forced_codes=codes), 0.01).total,
            net.parameters(),
            fd_step=1e-5,
            tolerance=1e-6,
            names=list(net.params),
        )
        ok &= report.passed
        worst = max(worst, report.max_rel_error)
        lines.append(f"{cfg.kind}/N{cfg.stages}:{report.max_rel_error:.1e}({report.checked} coords)")
    elapsed = time.perf_counter() - t0
    verdict(2, "analytic vs finite-difference gradients", ok and elapsed < 60,
            f"max rel err {worst:.2e} < 1e-6; {' '.join(lines)}; {elapsed:.1f}s")


def test_criterion_3_greedy_choice(verdict):
    cfg = RefinerConfig(options=8, stages=4, stages_per_segment=2, data_shape=(1, 8, 8), kind="cnn",
                        channels=8, res_blocks=1, downsamples=1, groups=4)
    net = build_refiner(cfg, np.random.default_rng(3))
    x = np.random.default_rng(4).random((100, 1, 8, 8)).astype(np.float32)
    trace = codec.encode(x, net)
    losses = trace.losses_array()
    exhaustive = np.array([[min(range(8), key=lambda j: losses[b, s, j]) + 1 for s in range(4)] for b in range(100)])
    mismatches = int(np.sum(exhaustive != trace.codes))
    verdict(3, "greedy index equals exhaustive argmin", mismatches == 0, f"{mismatches} mismatches over 100x4 choices")


def test_criterion_4_round_trip(verdict):
    cfg = RefinerConfig(options=16, stages=5, stages_per_segment=5, data_shape=(1, 8, 8), kind="cnn",
                        channels=8, res_blocks=1, downsamples=1, groups=4)
    net = build_refiner(cfg, np.random.default_rng(5))
    x = np.random.default_rng(6).random((100, 1, 8, 8)).astype(np.float32)
    trace = codec.encode(x, net)
    decoded = codec.decode([trace.code(i) for i in range(100)], net)
    recon_ok = decoded.data.tobytes() == trace.final.data.tobytes()
    rng = np.random.default_rng(7)
    failures = 0
    for _ in range(1000):
        k = int(rng.choice([1, 2, 3, 7, 16, 64, 100, 256, 1024]))
        n = int(rng.integers(1, 33))
        code = LatentCode(rng.integers(1, k + 1, size=n).tolist(), k, n)
        failures += codec.unpack_code(codec.pack_code(code), n, k) != code
        failures += codec.parse_code_file(codec.code_file_bytes(code)) != code
    verdict(4, "decode(encode) bit-identical; pack/unpack exact", recon_ok and failures == 0,
            f"100 reconstructions identical={recon_ok}; 1000 codes, {failures} pack failures")


def _dead_option_grads(kind, alpha):
    if kind == "dense":
        cfg = RefinerConfig(options=3, stages=1, stages_per_segment=1, data_shape=(4,), kind="dense", hidden=8)
        width = 4
    else:
        cfg = RefinerConfig(options=3, stages=1, stages_per_segment=1, data_shape=(1, 8, 8), kind="cnn",
                            channels=4, res_blocks=1, downsamples=1, groups=2)
        width = 1
    net = build_refiner(cfg, np.random.default_rng(8), dtype=np.float64)
    dead = slice(2 * width, 3 * width)
    # push option 3 far from the data so it is never chosen
    net.params["seg1.head.bias"].data[dead] += 50.0
    x = np.random.default_rng(9).random((16,) + cfg.data_shape)
    trace = codec.encode(x, net, differentiable=True)
    assert not np.any(trace.codes == 3)
    names = [n for n in ("seg1.head.weight", "seg1.head.bias", "seg1.head.mask1") if n in net.params]
    grads = backward(loss_total(trace, alpha).total, [net.params[n] for n in names])
    return [g[dead] for g in grads]


def test_criterion_5_dead_option_rescue(verdict):
    details, ok = [], True
    for kind in ("dense", "cnn"):
        rescued = _dead_option_grads(kind, 0.01)
        silent = _dead_option_grads(kind, 0.0)
        nonzero = all(np.any(g != 0) for g in rescued) and np.all(rescued[1] != 0)
        zero = all(np.all(g == 0) for g in silent)
        ok &= nonzero and zero
        details.append(f"{kind}: |g|max alpha=.01 {max(np.abs(g).max() for g in rescued):.2e}, "
                       f"alpha=0 {max(np.abs(g).max() for g in silent):.1e}")
    verdict(5, "dead option gets gradient only through alpha", ok, "; ".join(details))


def entropy_mixture() -> MixtureSpec:
    grid = np.linspace(-0.5, 0.5, 4) + 1.0
    means = np.array([[a, b] for a in grid for b in grid])
    return MixtureSpec(means, 0.15, np.full(16, 1 / 16), seed=0)


def test_criterion_6_entropy_saturation(verdict):
    t0 = time.perf_counter()
    k = 8
    data = gen_mixture(entropy_mixture(), 20_000).examples
    cfg = RefinerConfig(options=k, stages=4, stages_per_segment=4, data_shape=(2,), kind="dense", hidden=64)
    net = build_refiner(cfg, np.random.default_rng(0))
    rows = list(fit(net, data, TrainConfig(batch_size=256, steps=2000, seed=0)))
    ent = np.array([r.entropy for r in rows]) / math.log(k)
    start_ok = ent[0] < 0.5
    late = ent[499:]
    stay_ok = bool(np.all(late > 0.9))
    elapsed = time.perf_counter() - t0
    verdict(6, "batch entropy rises from <0.5 lnK to >0.9 lnK and stays", start_ok and stay_ok and elapsed < 300,
            f"step1 {ent[0]:.3f} lnK; min over steps 500-2000 {late.min():.3f} lnK; "
            f"final {ent[-1]:.3f} lnK; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_reduced_mnist(verdict, tmp_path):
    train_path = MNIST_DIR / "train-images-idx3-ubyte.gz"
    test_path = MNIST_DIR / "t10k-images-idx3-ubyte.gz"
    if not (train_path.exists() and test_path.exists()):
        pytest.fail(f"MNIST IDX files missing under {MNIST_DIR}; run scripts/prepare_mnist.py")
    t0 = time.perf_counter()
    common = ["--images", str(train_path), "--test-images", str(test_path), "--options", "16", "--stages", "10",
              "--stages-per-segment", "10", "--channels", "16", "--res-blocks", "1", "--groups", "8",
              "--batch-size", "32", "--seed", "0", "--log-level", "warning", "--grid-every", "1000",
              "--checkpoint-every", "1000"]
    assert cli.main(["train", *common, "--steps", "0", "--out", str(tmp_path / "init")]) == 0
    test = load_idx(test_path).examples
    before = evaluate(test, load_checkpoint(tmp_path / "init" / "checkpoint.vqdr").refiner).loss_chosen
    code = cli.main(["train", *common, "--steps", "2000", "--out", str(tmp_path / "run"),
                     "--resume", str(tmp_path / "init" / "checkpoint.vqdr")])
    final = load_checkpoint(tmp_path / "run" / "checkpoint.vqdr")
    after = evaluate(test, final.refiner).loss_chosen
    grids = sorted(p.name for p in (tmp_path / "run").glob("*.pgm"))
    grids_ok = {"samples_final.pgm", "stages_final.pgm"} <= set(grids)
    stage_cols = read_pnm(tmp_path / "run" / "stages_final.pgm").shape[1] if grids_ok else 0
    ratio = after / before
    elapsed = time.perf_counter() - t0
    ok = code == 0 and final.step == 2000 and math.isfinite(after) and ratio < 0.4 and grids_ok
    ok &= stage_cols == 11 * 28 + 10 and elapsed < 30 * 60
    verdict(7, "reduced MNIST: test loss below 40% of step 0", ok,
            f"test l_chosen {before:.5f} -> {after:.5f} (ratio {ratio:.3f}); {len(grids)} grids; {elapsed / 60:.1f} min")


def test_criterion_8_vector_quantization(verdict):
    t0 = time.perf_counter()
    means = np.array([[-1.0, 0.5], [1.0, -0.5]])
    data = gen_mixture(MixtureSpec(means, 0.1, [0.5, 0.5], seed=1), 2000).examples
    cfg = RefinerConfig(options=2, stages=1, stages_per_segment=1, data_shape=(2,), kind="dense", hidden=32)
    net = build_refiner(cfg, np.random.default_rng(0))
    for _ in fit(net, data, TrainConfig(alpha=0.01, batch_size=64, steps=3000, seed=0)):
        pass
    options = net.refine(np.zeros(2, dtype=np.float32), 1).data.astype(np.float64)
    centroids = KMeans(2, n_init=10, random_state=0).fit(data.astype(np.float64)).cluster_centers_
    # pair options with centroids by the cheaper of the two matchings
    d_same = np.linalg.norm(options - centroids, axis=1)
    d_swap = np.linalg.norm(options - centroids[::-1], axis=1)
    dist = d_same if d_same.sum() <= d_swap.sum() else d_swap
    separation = np.linalg.norm(centroids[0] - centroids[1])
    rel = dist.max() / separation
    elapsed = time.perf_counter() - t0
    verdict(8, "K=2 options land on k-means centroids", rel < 0.1 and elapsed < 60,
            f"worst offset {rel:.3f} of separation {separation:.3f}; options {np.round(options, 3).tolist()}; "
            f"{elapsed:.1f}s")


def test_criterion_9_segment_and_mask_isolation(verdict):
    rng = np.random.default_rng(10)
    checks = []
    for kind in ("dense", "cnn"):
        if kind == "dense":
            cfg = RefinerConfig(options=4, stages=4, stages_per_segment=2, data_shape=(3,), kind="dense", hidden=8)
        else:
            cfg = RefinerConfig(options=4, stages=4, stages_per_segment=2, data_shape=(1, 8, 8), kind="cnn",
                                channels=4, res_blocks=1, downsamples=1, groups=2)
        net = build_refiner(cfg, np.random.default_rng(11))
        x = rng.random((3,) + cfg.data_shape).astype(np.float32)
        base = {s: net.refine(x, s).data.tobytes() for s in (1, 2)}
        saved = net.state_dict()
        for name, p in net.params.items():
            if name.startswith("seg2."):
                p.data = p.data + rng.normal(size=p.shape).astype(p.dtype)
        checks.append(all(net.refine(x, s).data.tobytes() == base[s] for s in (1, 2)))
        net.load_state_dict(saved)
        # stage-2 masks must not touch stage 1
        for name, p in net.params.items():
            if name.endswith(".mask2"):
                p.data = p.data * rng.uniform(0.1, 3.0, size=p.shape).astype(p.dtype)
        checks.append(net.refine(x, 1).data.tobytes() == base[1])
        checks.append(net.refine(x, 2).data.tobytes() != base[2])
    verdict(9, "segment-2 and foreign-mask perturbations leave stage outputs bit-identical", all(checks),
            f"{sum(checks)}/{len(checks)} isolation checks hold (dense, cnn)")
