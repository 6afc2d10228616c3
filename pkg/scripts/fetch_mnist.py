"""Download the MNIST IDX files (needs network access).

Usage:
    python scripts/fetch_mnist.py --out data/mnist
"""

import argparse
import gzip
import urllib.request
from pathlib import Path

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def fetch(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        target = out_dir / name.removesuffix(".gz")
        if target.exists():
            print(f"{target} already present")
            continue
        last_error = None
        for mirror in MIRRORS:
            url = mirror + name
            try:
                print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as response:
                    target.write_bytes(gzip.decompress(response.read()))
                break
            except OSError as exc:
                last_error = exc
        else:
            raise SystemExit(f"could not download {name}: {last_error}")
        print(f"wrote {target}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist", type=Path)
    args = parser.parse_args()
    fetch(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
