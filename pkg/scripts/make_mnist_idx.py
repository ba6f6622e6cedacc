"""Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

    python scripts/make_mnist_idx.py OUT_DIR

Produces ``OUT_DIR/mnist5k-images-idx3-ubyte.gz`` and
``OUT_DIR/mnist5k-labels-idx1-ubyte.gz`` for the ``idx`` dataset source.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from unlearn_recon.datasets import write_idx

IMAGES = "mnist5k-images-idx3-ubyte.gz"
LABELS = "mnist5k-labels-idx1-ubyte.gz"


def write_mnist5k(out_dir: str | Path) -> tuple[Path, Path]:
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ipath, lpath = out_dir / IMAGES, out_dir / LABELS
    write_idx(np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28), np.asarray(y, dtype=np.uint8), ipath, lpath)
    return ipath, lpath


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    for p in write_mnist5k(ap.parse_args().out_dir):
        print(p)
