#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist

The package stores 10000 MNIST digits as per-class JSON arrays of pixel
intensities in [0, 1]. Samples are interleaved with a fixed shuffle so any
prefix is class-balanced in expectation.
"""

import argparse
import json
import pathlib
import random
import struct

ROWS = COLS = 28


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for label in range(10):
        data = json.loads((args.digits_dir / f"{label}.json").read_text())["data"]
        if len(data) % (ROWS * COLS):
            raise SystemExit(f"{label}.json: length {len(data)} is not a multiple of {ROWS * COLS}")
        for start in range(0, len(data), ROWS * COLS):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in data[start:start + ROWS * COLS])
            samples.append((pixels, label))
    random.Random(args.seed).shuffle(samples)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(samples), ROWS, COLS))
        for pixels, _ in samples:
            f.write(pixels)
    with open(args.out_dir / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} samples to {args.out_dir}")


if __name__ == "__main__":
    main()
