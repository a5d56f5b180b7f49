#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset bundled in the mlxtend wheel into
gzipped IDX files (train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz).

Usage:
    pip download --no-deps mlxtend -d /tmp/mlx
    python3 scripts/mnist_subset_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    wheel, out_dir = sys.argv[1], Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER)).decode()
    rows = [line.split(",") for line in raw.splitlines() if line]
    images = bytearray()
    labels = bytearray()
    for row in rows:
        assert len(row) == 785
        images.extend(int(float(v)) for v in row[:784])
        labels.append(int(float(row[784])))
    n = len(rows)
    img = struct.pack(">IIII", 0x00000803, n, 28, 28) + bytes(images)
    lab = struct.pack(">II", 0x00000801, n) + bytes(labels)
    # mtime=0 keeps the archives byte-reproducible
    with open(out_dir / "train-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(img, mtime=0))
    with open(out_dir / "train-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(lab, mtime=0))
    print(f"wrote {n} samples to {out_dir}")


if __name__ == "__main__":
    main()
