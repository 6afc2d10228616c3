"""Export a handwritten-digits corpus as IDX image/label files.

Uses the 1797-sample digits corpus bundled with scikit-learn (no network
needed) and optionally enlarges it by replicating each digit with small
random rotations and shifts, mimicking natural writer variation, so the
leave-one-digit-out protocol sees a corpus closer to full MNIST scale.

Usage:
    python scripts/make_digits_idx.py --out data/digits --replication 4
"""

import argparse
from pathlib import Path

import numpy as np
from scipy import ndimage


def build_digits_corpus(replication: int = 1, seed: int = 11):
    """(images uint8 (n, 8, 8), labels uint8 (n,)) from the bundled corpus."""
    from sklearn.datasets import load_digits

    data = load_digits()
    base = data.images / 16.0 * 255.0
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(len(base)):
        images.append(base[i])
        labels.append(int(data.target[i]))
        for _ in range(replication - 1):
            # gentle writer-style variation; anything stronger blurs the
            # 8x8 stroke structure away
            img = ndimage.rotate(
                base[i], rng.uniform(-6, 6), reshape=False, order=1, mode="constant"
            )
            img = ndimage.shift(img, rng.uniform(-0.7, 0.7, size=2), order=1, mode="constant")
            images.append(np.clip(img, 0.0, 255.0))
            labels.append(int(data.target[i]))
    return (
        np.round(np.stack(images)).astype(np.uint8),
        np.array(labels, dtype=np.uint8),
    )


def write_corpus(out_dir: Path, replication: int, seed: int) -> tuple[Path, Path]:
    from neglearn.datasets import write_idx_images, write_idx_labels

    images, labels = build_digits_corpus(replication, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    images_path = out_dir / "digits-images-idx3-ubyte"
    labels_path = out_dir / "digits-labels-idx1-ubyte"
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)
    return images_path, labels_path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/digits", type=Path)
    parser.add_argument("--replication", default=4, type=int)
    parser.add_argument("--seed", default=11, type=int)
    args = parser.parse_args()
    images_path, labels_path = write_corpus(args.out, args.replication, args.seed)
    print(f"wrote {images_path} and {labels_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
