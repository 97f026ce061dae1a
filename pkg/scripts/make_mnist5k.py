"""Convert the 5,000-image MNIST sample shipped with mlxtend into gzip IDX files.

Usage: python3 scripts/make_mnist5k.py path/to/mnist_5k.csv.gz data/mnist5k

The CSV holds one image per row: 784 pixel bytes followed by the label.
"""

import gzip
import sys
from pathlib import Path

import numpy as np

from ranklab.dataset import IMAGES_MAGIC, LABELS_MAGIC, idx_bytes


def main(src, out_dir):
    raw = np.loadtxt(gzip.open(src, "rt"), delimiter=",", dtype=np.int64)
    labels = raw[:, -1].astype(np.uint8)
    images = raw[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, payload in (("images-idx3-ubyte.gz", idx_bytes(images, IMAGES_MAGIC)),
                          ("labels-idx1-ubyte.gz", idx_bytes(labels, LABELS_MAGIC))):
        (out / name).write_bytes(gzip.compress(payload, mtime=0))
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
