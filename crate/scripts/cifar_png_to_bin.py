#!/usr/bin/env python3
"""Rebuild CIFAR-10 binary batches from the PNG strips shipped in the
`tfjs-cifar10` npm package.

Each strip is 1024 px wide and 10000 px tall: row i holds image i as 32x32
RGB pixels in row-major HWC order. The binary format stores, per record,
one label byte followed by the 1024 red, 1024 green and 1024 blue bytes.
"""
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def convert(strip: Path, labels, out: Path) -> None:
    pixels = np.asarray(Image.open(strip).convert("RGB"), dtype=np.uint8)
    assert pixels.shape == (10000, 1024, 3), pixels.shape
    chw = pixels.reshape(10000, 32, 32, 3).transpose(0, 3, 1, 2).reshape(10000, 3072)
    lab = np.asarray(labels, dtype=np.uint8).reshape(10000, 1)
    out.write_bytes(np.concatenate([lab, chw], axis=1).tobytes())


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train = json.loads((src / "train_lables.json").read_text())
    test = json.loads((src / "test_lables.json").read_text())
    for b in range(5):
        convert(src / f"data_batch_{b + 1}.png", train[b * 10000:(b + 1) * 10000],
                dst / f"data_batch_{b + 1}.bin")
    convert(src / "test_batch.png", test, dst / "test_batch.bin")


if __name__ == "__main__":
    main()
