"""Convert the digit JSON files shipped in the `mnist` npm package to IDX.

Usage: python3 scripts/mnist_from_npm.py <package/src/digits> <out_dir>

Writes gzipped images-idx3-ubyte.gz / labels-idx1-ubyte.gz, interleaving
classes so that any prefix of the file is roughly class-balanced.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main() -> None:
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    per_class = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        per_class.append([data[k : k + 784] for k in range(0, len(data), 784)])

    images, labels = [], []
    depth = max(len(c) for c in per_class)
    for k in range(depth):
        for digit, samples in enumerate(per_class):
            if k < len(samples):
                images.append(samples[k])
                labels.append(digit)

    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(bytes(min(255, max(0, round(v * 255))) for img in images for v in img))
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))
    print(len(images), [len(c) for c in per_class])


if __name__ == "__main__":
    main()
