#!/usr/bin/env python3
"""Build desk-scale MNIST IDX files from the 10k digits bundled in the npm
``mnist`` package (1.1.0).

The package ships one JSON file per class holding flattened 28x28 images
with values in [0, 1]. We quantise back to bytes, shuffle with a fixed seed,
and write an 8000-image training file and a 2000-image test file.

    python scripts/fetch_mnist.py --out data/mnist [--tarball mnist-1.1.0.tgz]
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from prunebench.data import write_idx


def read_digits(tarball: Path):
    pixels, labels = [], []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            imgs = np.clip(np.round(flat * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
            pixels.append(imgs)
            labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    return np.concatenate(pixels), np.concatenate(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--tarball", help="pre-downloaded mnist-1.1.0.tgz; fetched with `npm pack` if omitted")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=20210101)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tarball = Path(args.tarball) if args.tarball else None
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True)
            tarball = Path(tmp) / "mnist-1.1.0.tgz"
        pixels, labels = read_digits(tarball)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    tr = slice(0, args.train)
    te = slice(args.train, None)
    write_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte", pixels[tr], labels[tr])
    write_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte", pixels[te], labels[te])
    print(f"wrote {args.train} training and {len(labels) - args.train} test images to {out}")


if __name__ == "__main__":
    main()
