#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: mnist_from_npm.py <package/src/digits> <out_dir>

Writes train-images-idx3-ubyte and train-labels-idx1-ubyte. Samples are
interleaved by class so that any prefix of the file is roughly balanced.
"""
import json
import struct
import sys
from pathlib import Path


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    per_class = []
    for d in range(10):
        raw = json.loads((src / f"{d}.json").read_text())["data"]
        n = len(raw) // 784
        per_class.append([raw[i * 784:(i + 1) * 784] for i in range(n)])
    images, labels = [], []
    for i in range(max(len(c) for c in per_class)):
        for d, glyphs in enumerate(per_class):
            if i < len(glyphs):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in glyphs[i]))
                labels.append(d)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} glyphs to {out}")


if __name__ == "__main__":
    main()
