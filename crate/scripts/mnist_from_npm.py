#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

The package ships the 10,000-image MNIST test split as per-class JSON arrays of
pixel intensities in [0, 1]. Images are interleaved round-robin across classes
so that any prefix of the output is close to class-balanced.

usage: mnist_from_npm.py <unpacked-package-dir> <out-dir>

Fetch the package with `npm pack mnist && tar xzf mnist-*.tgz`.
"""
import json
import os
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    per_class = []
    for d in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as f:
            data = json.load(f)["data"]
        n = len(data) // 784
        per_class.append([data[i * 784:(i + 1) * 784] for i in range(n)])

    images, labels = [], []
    idx = 0
    while any(idx < len(c) for c in per_class):
        for d, c in enumerate(per_class):
            if idx < len(c):
                images.append(c[idx])
                labels.append(d)
        idx += 1

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, int(round(v * 255)))) for v in img))
    with open(os.path.join(out, "labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()
