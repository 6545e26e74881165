"""Build the bundled MNIST-5k IDX fixture.

The 5000-image MNIST subset shipped inside the ``mlxtend`` wheel
(``mlxtend/data/data/mnist_5k.csv.gz``, 500 images per digit, raw 0..255
bytes, label in the last column) is split 400/100 per class into train/test and
written as gzipped IDX files.  Run once; the outputs are committed.

    pip download --no-deps mlxtend -d /tmp/wheels
    python tools/make_mnist5k.py /tmp/wheels/mlxtend-*.whl src/dda/data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, images, labels_path, labels):
    n, rows, cols = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(labels_path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.int64)
    labels = table[:, -1]
    images = table[:, :-1].reshape(-1, 28, 28)

    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for k in range(10):
        members = np.flatnonzero(labels == k)
        train_idx.extend(members[:400])
        test_idx.extend(members[400:])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    write_idx(out / "train-images-idx3-ubyte.gz", images[train_idx],
              out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test_idx],
              out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
