#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package (MIT) into
per-digit gzipped IDX files under data/mnist/.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/import_mnist_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(values) // 784
        pixels = bytes(min(255, max(0, round(v * 255))) for v in values)
        header = struct.pack(">IIII", 0x00000803, count, 28, 28)
        with gzip.GzipFile(dst / f"digit-{digit}-idx3-ubyte.gz", "wb", mtime=0) as out:
            out.write(header + pixels)
        print(f"digit {digit}: {count} images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
