#!/usr/bin/env python3
"""Rebuild IDX files from the 10,000 MNIST digits bundled in the `mnist` npm package.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 mnist_from_npm.py package/src/digits OUT_DIR

Pixels are stored there as value/255 rounded to three decimals; the step 1/255 is larger
than the rounding, so round(v * 255) recovers the original byte exactly. Samples are
interleaved with a fixed permutation and split 8000 train / 2000 test.
"""
import json
import random
import struct
import sys
from pathlib import Path

src, out = Path(sys.argv[1]), Path(sys.argv[2])
out.mkdir(parents=True, exist_ok=True)

samples = []
for digit in range(10):
    raw = json.loads((src / f"{digit}.json").read_text())["data"]
    assert len(raw) % 784 == 0
    for i in range(len(raw) // 784):
        px = []
        for v in raw[i * 784:(i + 1) * 784]:
            b = round(v * 255)
            assert 0 <= b <= 255 and abs(b / 255 - v) < 6e-4, v
            px.append(b)
        samples.append((digit, bytes(px)))

random.Random(20170101).shuffle(samples)


def write(name, items):
    with open(out / f"{name}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(items), 28, 28))
        for _, px in items:
            f.write(px)
    with open(out / f"{name}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(items)))
        f.write(bytes(label for label, _ in items))


write("train", samples[:8000])
write("t10k", samples[8000:])
print(len(samples), "samples written to", out)
