import numpy as np
import pytest

from vqdraw import tensor as T
from vqdraw.refiner import Refiner, RefinerConfig, build_refiner

MNIST_DIR = __import__("pathlib").Path(__file__).resolve().parents[1] / "data" / "mnist"


class FixedDeltaRefiner(Refiner):
    """Proposes the same K deltas from every reconstruction, at every stage."""

    def _deltas(self, x, segment, stage):
        ones = T.Tensor(np.ones((x.shape[0], 1), dtype=self.dtype))
        return T.multiply(ones, T.reshape(self.params["seg1.head.bias"], (1, -1)))


def fixed_delta_refiner(deltas, stages: int, dim: int = 1) -> FixedDeltaRefiner:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(deltas), dim)
    cfg = RefinerConfig(
        options=len(deltas), stages=stages, stages_per_segment=stages, data_shape=(dim,), kind="dense", hidden=1
    )
    net = FixedDeltaRefiner(cfg)
    net._add("seg1.head.bias", deltas.reshape(-1))
    return net


def small_cnn(options=3, stages=2, sps=1, shape=(1, 8, 8), dtype=np.float64, seed=0, **kw):
    cfg = RefinerConfig(
        options=options, stages=stages, stages_per_segment=sps, data_shape=shape, kind="cnn",
        channels=kw.pop("channels", 4), res_blocks=kw.pop("res_blocks", 1), downsamples=kw.pop("downsamples", 1),
        groups=kw.pop("groups", 2), **kw,
    )
    return build_refiner(cfg, np.random.default_rng(seed), dtype=dtype)


def small_dense(options=3, stages=2, sps=1, dim=4, dtype=np.float64, seed=0, **kw):
    cfg = RefinerConfig(
        options=options, stages=stages, stages_per_segment=sps, data_shape=(dim,), kind="dense",
        hidden=kw.pop("hidden", 6), **kw,
    )
    return build_refiner(cfg, np.random.default_rng(seed), dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
