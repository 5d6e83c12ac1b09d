#!/usr/bin/env python3
"""Convert the 5,000-digit MNIST sample bundled with mlxtend into IDX files.

Usage: python3 scripts/mnist5k_to_idx.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>

The wheel can be fetched with `pip download --no-deps mlxtend`. Each CSV row is
784 pixel bytes followed by the label.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    for line in text.strip().splitlines():
        fields = [int(v) for v in line.split(",")]
        yield fields[:784], fields[784]


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = list(read_rows(src))
    images = bytearray(struct.pack(">IIII", 0x803, len(rows), 28, 28))
    labels = bytearray(struct.pack(">II", 0x801, len(rows)))
    for pixels, label in rows:
        images.extend(bytes(pixels))
        labels.append(label)
    (out / "mnist5k-images-idx3-ubyte").write_bytes(images)
    (out / "mnist5k-labels-idx1-ubyte").write_bytes(labels)
    print(f"wrote {len(rows)} samples to {out}")


if __name__ == "__main__":
    main()
