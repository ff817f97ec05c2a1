#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST subset bundled in the npm `mnist` package
(https://www.npmjs.com/package/mnist, MIT) into gzipped IDX files.

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist

The package stores intensities rounded to three decimals in [0, 1]; they are
mapped back to bytes with round(v * 255). Samples are interleaved by class
(0, 1, ..., 9, 0, 1, ...) so the files are not sorted by label.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, dst: Path) -> None:
    per_class = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        per_class.append([raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)])

    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in samples[i]))
                labels.append(digit)

    dst.mkdir(parents=True, exist_ok=True)
    img = struct.pack(">IIII", 0x803, len(images), SIDE, SIDE) + b"".join(images)
    lab = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    for name, payload in (("subset10k-images-idx3-ubyte.gz", img), ("subset10k-labels-idx1-ubyte.gz", lab)):
        with open(dst / name, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    print(f"wrote {len(images)} images to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(Path(sys.argv[1]), Path(sys.argv[2]))
