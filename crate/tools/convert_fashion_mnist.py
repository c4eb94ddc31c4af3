#!/usr/bin/env python3
"""Builds the data/fmnist IDX files from the fashion-mnist npm package.

The package (https://www.npmjs.com/package/fashion-mnist, MIT) ships the
Fashion-MNIST images as per-class JSON arrays of 784 grayscale bytes. This
script deduplicates each class, then takes the first 1000 unique images per
class for the training split and the next 1000 for the test split, and
writes standard big-endian IDX files (image magic 0x803, label magic 0x801).

Samples are interleaved class by class so every prefix of the output is
approximately class-balanced. The conversion is fully deterministic.

Usage:
    python3 tools/convert_fashion_mnist.py fashion-mnist-1.1.0.tgz data/fmnist
"""

import io
import json
import struct
import sys
import tarfile
from pathlib import Path

PER_CLASS_TRAIN = 1000
PER_CLASS_TEST = 1000
SIDE = 28
CLASSES = 10


def load_class_images(tar: tarfile.TarFile, label: int) -> list[bytes]:
    member = tar.extractfile(f"package/src/clothes/{label}.json")
    if member is None:
        raise SystemExit(f"class file for label {label} missing from archive")
    rows = json.load(io.TextIOWrapper(member, encoding="utf-8"))["data"]
    seen = set()
    unique = []
    for row in rows:
        if not row:
            continue  # a handful of empty placeholder rows exist
        if len(row) != SIDE * SIDE:
            raise SystemExit(f"label {label}: row with {len(row)} pixels")
        img = bytes(row)
        if img not in seen:
            seen.add(img)
            unique.append(img)
    need = PER_CLASS_TRAIN + PER_CLASS_TEST
    if len(unique) < need:
        raise SystemExit(f"label {label}: only {len(unique)} unique images, need {need}")
    return unique[:need]


def write_idx(path: Path, images: list[bytes], labels: list[int]) -> None:
    with open(path.with_suffix(""), "wb") as f:  # images
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with open(str(path.with_suffix("")).replace("images-idx3", "labels-idx1"), "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    archive, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    with tarfile.open(archive) as tar:
        per_class = [load_class_images(tar, k) for k in range(CLASSES)]

    for split, start, count in [("train", 0, PER_CLASS_TRAIN), ("t10k", PER_CLASS_TRAIN, PER_CLASS_TEST)]:
        images, labels = [], []
        for i in range(count):
            for k in range(CLASSES):
                images.append(per_class[k][start + i])
                labels.append(k)
        write_idx(out_dir / f"{split}-images-idx3-ubyte.x", images, labels)
        print(f"{split}: {len(images)} images")


if __name__ == "__main__":
    main()
