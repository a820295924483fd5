#!/usr/bin/env python3
"""Write the desk-scale 10-class digits dataset as IDX files.

Source: the UCI optical handwritten digits bundled with scikit-learn
(1797 samples, 8x8, 17 grey levels). Images are bilinearly upsampled to
32x32 and rescaled to 0..255, then split 80/20 with a fixed shuffle.

Usage: python3 scripts/make_digits_idx.py [out_dir]
"""
import os
import struct
import sys

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits

SIZE = 32
SEED = 0
TRAIN_FRACTION = 0.8


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join("data", "digits")
    os.makedirs(out, exist_ok=True)
    digits = load_digits()
    scaled = []
    for img in digits.images:
        pil = Image.fromarray((img * (255.0 / 16.0)).astype(np.float32), mode="F")
        big = pil.resize((SIZE, SIZE), Image.BILINEAR)
        scaled.append(np.clip(np.asarray(big), 0, 255).round())
    images = np.stack(scaled)
    labels = digits.target

    order = np.random.RandomState(SEED).permutation(len(labels))
    cut = int(round(len(labels) * TRAIN_FRACTION))
    train, test = order[:cut], order[cut:]

    write_images(os.path.join(out, "train-images-idx3-ubyte"), images[train])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[train])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), images[test])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), labels[test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
