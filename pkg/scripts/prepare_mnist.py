"""Write MNIST IDX files for the reduced-scale runs.

When the canonical MNIST files cannot be fetched, the 5,000-digit subset
bundled with ``mlxtend`` (``mlxtend/data/data/mnist_5k.csv.gz``) stands in.
This script shuffles it with a fixed seed (the CSV is sorted by label), splits it
into 4,500 training and 500 test digits and writes the four standard IDX
files. Pass ``--source`` to point at the csv.gz or at an mlxtend
wheel when the package is not installed.

    python scripts/prepare_mnist.py --out data/mnist
"""
import argparse
import gzip
import importlib.util
import io
import zipfile
from pathlib import Path

import numpy as np

from vqdraw.data import write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(source):
    if source is None:
        spec = importlib.util.find_spec("mlxtend")
        if spec is None:
            raise SystemExit("mlxtend is not installed; pass --source <mnist_5k.csv.gz | mlxtend wheel>")
        source = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    source = Path(source)
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            raw = zf.read(CSV_MEMBER)
    else:
        raw = source.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    images, labels = read_source(args.source)
    # the subset is sorted by label
    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(images) - args.test
    write_idx(out / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[n_train:])
    print(f"wrote {n_train} train / {args.test} test digits to {out}")


if __name__ == "__main__":
    main()
