"""Dataset construction: IDX digit loading, leave-one-digit-out splits,
a synthetic pedestrian-patch generator, preprocessing, and deterministic
batch iteration.

All operations are pure functions of their arguments and seed. Partitions
are disjoint by source_id and label-pure where required; those invariants
are checked by ``DatasetSplit.validate``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from PIL import Image

IDX_MAGIC_IMAGES = 2051
IDX_MAGIC_LABELS = 2049


class Label(IntEnum):
    NORMAL = 0
    ABNORMAL = 1


class DatasetError(ValueError):
    """Base class for dataset construction failures."""


class IdxMagicError(DatasetError):
    """File does not start with the expected IDX magic number."""


class IdxTruncationError(DatasetError):
    """Payload is shorter than the IDX header promises."""


class IdxCountMismatchError(DatasetError):
    """Image file and label file disagree on the record count."""


@dataclass
class LabeledSample:
    """One raw image with its anomaly label.

    image is (channels, height, width), raw pixel bytes 0..255.
    class_tag carries the digit (0-9) or synthetic scenario id.
    """

    image: np.ndarray
    label: Label
    source_id: int
    class_tag: int | None = None


@dataclass
class DatasetDescriptor:
    image_shape: tuple[int, int, int]
    source: str
    seed: int


@dataclass
class DatasetSplit:
    """Disjoint labeled partitions for one experiment."""

    train_normal: list[LabeledSample]
    train_abnormal: list[LabeledSample]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    descriptor: DatasetDescriptor

    def partitions(self) -> dict[str, list[LabeledSample]]:
        return {
            "train_normal": self.train_normal,
            "train_abnormal": self.train_abnormal,
            "validation": self.validation,
            "test": self.test,
        }

    def validate(self) -> None:
        """Check disjointness, label purity and mixed-label eval partitions."""
        seen: dict[int, str] = {}
        for name, part in self.partitions().items():
            for s in part:
                if s.source_id in seen:
                    raise DatasetError(
                        f"source_id {s.source_id} appears in both "
                        f"{seen[s.source_id]} and {name}"
                    )
                seen[s.source_id] = name
        if any(s.label != Label.NORMAL for s in self.train_normal):
            raise DatasetError("train_normal contains an abnormal sample")
        if any(s.label != Label.ABNORMAL for s in self.train_abnormal):
            raise DatasetError("train_abnormal contains a normal sample")
        for name in ("validation", "test"):
            part = self.partitions()[name]
            labels = {s.label for s in part}
            if labels != {Label.NORMAL, Label.ABNORMAL}:
                raise DatasetError(f"{name} must contain both labels, has {labels}")


@dataclass
class ImageBatch:
    """Preprocessed batch: data is (batch, channels, size, size) in [-1, 1]."""

    data: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray

    def __len__(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# IDX container format (big-endian magic, dims, raw ubyte payload)
# ---------------------------------------------------------------------------


def _read_idx_ubyte(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxMagicError(f"{path}: file too short to hold an IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: bad magic number {magic}, expected {expected_magic}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncationError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < count:
        raise IdxTruncationError(
            f"{path}: payload holds {len(payload)} bytes, header promises {count}"
        )
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def write_idx_images(path: Union[str, Path], images: np.ndarray) -> None:
    """Write (n, rows, cols) uint8 images in the IDX container format."""
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: Union[str, Path], labels: np.ndarray) -> None:
    """Write (n,) uint8 labels in the IDX container format."""
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, len(labels)))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_mnist_idx(
    images_path: Union[str, Path], labels_path: Union[str, Path]
) -> list[LabeledSample]:
    """Load an IDX image/label file pair into samples tagged by digit.

    Labels default to NORMAL; `make_leave_one_digit_out_split` assigns the
    anomaly labeling afterwards.
    """
    images = _read_idx_ubyte(images_path, IDX_MAGIC_IMAGES)
    labels = _read_idx_ubyte(labels_path, IDX_MAGIC_LABELS)
    if images.ndim != 3:
        raise IdxMagicError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise IdxMagicError(f"{labels_path}: expected 1 dimension, got {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return [
        LabeledSample(
            image=images[i][np.newaxis, :, :],
            label=Label.NORMAL,
            source_id=i,
            class_tag=int(labels[i]),
        )
        for i in range(images.shape[0])
    ]


# ---------------------------------------------------------------------------
# Leave-one-digit-out anomaly split
# ---------------------------------------------------------------------------


def make_leave_one_digit_out_split(
    samples: Sequence[LabeledSample],
    anomaly_digit: int,
    train_fraction: float = 0.8,
    abnormal_ratio: float = 0.1,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> DatasetSplit:
    """Designate one digit as the anomaly class and split the rest for training.

    Per digit, `train_fraction` of the samples go to the train side and the
    remainder to test. From the train side, `val_fraction` is carved off as a
    mixed-label validation partition. The abnormal training pool is drawn from
    the anomaly digit's train-side portion, subsampled to
    ``abnormal_ratio * len(train_normal)``; the unused anomaly remainder stays
    outside every partition so the test-side anomalies are never seen.
    """
    if not samples:
        raise DatasetError("empty sample list")
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0.0 <= abnormal_ratio <= 1.0:
        raise DatasetError(f"abnormal_ratio must be in [0, 1], got {abnormal_ratio}")
    tags = {s.class_tag for s in samples}
    if anomaly_digit not in tags:
        raise DatasetError(f"anomaly digit {anomaly_digit} absent from samples")

    rng = np.random.default_rng(seed)

    def relabel(s: LabeledSample, label: Label) -> LabeledSample:
        return LabeledSample(s.image, label, s.source_id, s.class_tag)

    train_normal: list[LabeledSample] = []
    val: list[LabeledSample] = []
    test: list[LabeledSample] = []
    abnormal_pool: list[LabeledSample] = []

    # stratified by digit so small inputs still populate every partition
    by_tag: dict[int, list[LabeledSample]] = {}
    for s in samples:
        by_tag.setdefault(int(s.class_tag), []).append(s)
    for tag in sorted(by_tag):
        group = by_tag[tag]
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        train_side = [group[i] for i in order[:n_train]]
        test_side = [group[i] for i in order[n_train:]]
        n_val = int(round(val_fraction * len(train_side)))
        label = Label.ABNORMAL if tag == anomaly_digit else Label.NORMAL
        val.extend(relabel(s, label) for s in train_side[:n_val])
        test.extend(relabel(s, label) for s in test_side)
        rest = train_side[n_val:]
        if tag == anomaly_digit:
            abnormal_pool.extend(relabel(s, label) for s in rest)
        else:
            train_normal.extend(relabel(s, label) for s in rest)

    if not train_normal:
        raise DatasetError("split leaves train_normal empty")
    n_abnormal = min(int(round(abnormal_ratio * len(train_normal))), len(abnormal_pool))
    if abnormal_ratio > 0 and n_abnormal == 0:
        raise DatasetError(
            f"abnormal_ratio {abnormal_ratio} leaves train_abnormal empty"
        )
    train_abnormal = abnormal_pool[:n_abnormal]

    shape = tuple(samples[0].image.shape)
    split = DatasetSplit(
        train_normal=train_normal,
        train_abnormal=train_abnormal,
        validation=val,
        test=test,
        descriptor=DatasetDescriptor(image_shape=shape, source="digits-idx", seed=seed),
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# Synthetic pedestrian-patch generator (stand-in for non-public camera data)
# ---------------------------------------------------------------------------

SCENARIO_UPRIGHT = 0
SCENARIO_FALLEN = 1
SCENARIO_CLUSTER = 2
SCENARIO_SATURATED = 3

# oversize rendering widens the context window around the figure
OVERSIZE_W = 2.5
OVERSIZE_H = 1.5


def _draw_figure(
    draw, cx: float, cy: float, h: float, rng: np.random.Generator, color: tuple
) -> None:
    """One upright walker: head, torso ellipse, two legs and two arms."""
    head_r = h * 0.11
    torso_h = h * 0.42
    torso_w = h * (0.14 + 0.06 * rng.random())
    gait = np.deg2rad(5 + 30 * rng.random())
    head_cy = cy - h / 2 + head_r
    torso_top = head_cy + head_r * 0.8
    torso_bot = torso_top + torso_h
    draw.ellipse(
        [cx - head_r, head_cy - head_r, cx + head_r, head_cy + head_r], fill=color
    )
    draw.ellipse(
        [cx - torso_w, torso_top, cx + torso_w, torso_bot], fill=color
    )
    leg_len = cy + h / 2 - torso_bot
    w_line = max(1, int(h * 0.05))
    for sign in (-1.0, 1.0):
        dx = float(np.sin(gait)) * leg_len * sign * 0.5
        draw.line(
            [cx, torso_bot, cx + dx, torso_bot + leg_len], fill=color, width=w_line
        )
    arm_y = torso_top + torso_h * 0.2
    arm_len = torso_h * 0.8
    arm = np.deg2rad(10 + 25 * rng.random())
    for sign in (-1.0, 1.0):
        dx = float(np.sin(arm)) * arm_len * sign
        draw.line(
            [cx, arm_y, cx + dx, arm_y + arm_len * float(np.cos(arm))],
            fill=color,
            width=w_line,
        )


def _shirt_color(rng: np.random.Generator, saturated: bool) -> tuple:
    """Mostly grayscale; the saturated anomaly boosts one channel well past
    the normal chroma jitter while keeping overall brightness in range."""
    base = int(30 + rng.integers(0, 70))
    jitter = rng.integers(-12, 13, size=3)
    color = base + jitter
    if saturated:
        channel = int(rng.integers(0, 3))
        color[channel] += int(rng.integers(80, 111))
    return tuple(int(np.clip(v, 0, 255)) for v in color)


def _render_patch(
    rng: np.random.Generator,
    scenario: int,
    oversize: bool,
    out_size: int,
) -> np.ndarray:
    """Render one patch as (3, out_size, out_size) uint8.

    Anomalies are pose/count/chroma deviations with low-level statistics
    (ink area, palette, noise) matched to the normal class, so raw pixel
    statistics alone do not give them away.
    """
    canvas = 96
    bg = int(150 + rng.integers(-25, 26))
    img = Image.new("RGB", (canvas, canvas), (bg, bg, bg))
    from PIL import ImageDraw

    draw = ImageDraw.Draw(img)

    if scenario == SCENARIO_CLUSTER:
        # unusual gathering: two or three mid-size walkers
        for k in range(int(rng.integers(2, 4))):
            h = canvas * (0.45 + 0.15 * rng.random())
            cx = canvas * (0.22 + 0.56 * (k + rng.random()) / 3.0)
            cy = canvas / 2 + float(rng.uniform(-canvas * 0.06, canvas * 0.06))
            _draw_figure(draw, cx, cy, h, rng, _shirt_color(rng, saturated=False))
    else:
        h = canvas * (0.5 + 0.3 * rng.random())
        if scenario == SCENARIO_FALLEN:
            h *= 0.92  # horizontal pose trims apparent ink slightly
        cx = canvas / 2 + float(rng.uniform(-canvas * 0.15, canvas * 0.15))
        cy = canvas / 2 + float(rng.uniform(-canvas * 0.08, canvas * 0.08))
        _draw_figure(
            draw, cx, cy, h, rng,
            _shirt_color(rng, saturated=scenario == SCENARIO_SATURATED),
        )

    if scenario == SCENARIO_FALLEN:
        angle = float(rng.uniform(78, 102)) * (1.0 if rng.random() < 0.5 else -1.0)
    else:
        angle = float(rng.uniform(-6, 6))  # normal walkers lean a little
    img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=(bg, bg, bg))

    if oversize:
        # embed in a wider/taller context window before the final resize
        w = int(canvas * OVERSIZE_W)
        h2 = int(canvas * OVERSIZE_H)
        big = Image.new("RGB", (w, h2), (bg, bg, bg))
        big.paste(img, ((w - canvas) // 2, (h2 - canvas) // 2))
        img = big

    img = img.resize((out_size, out_size), resample=Image.BILINEAR)
    arr = np.asarray(img, dtype=np.uint8)
    noise = rng.integers(-10, 11, size=arr.shape)
    arr = np.clip(arr.astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return arr.transpose(2, 0, 1)


def make_synthetic_patch_dataset(
    n_normal: int,
    n_abnormal: int,
    oversize: bool = False,
    seed: int = 0,
    image_size: int = 64,
) -> DatasetSplit:
    """Generate a labeled pedestrian-patch dataset split 7:1:2 train:val:test.

    Normal patches are single upright walkers; abnormal patches are fallen
    figures, multi-figure clusters, or high-saturation variants. Deterministic
    under seed.
    """
    if n_normal <= 0 or n_abnormal <= 0:
        raise DatasetError("sample counts must be positive")
    rng = np.random.default_rng(seed)
    abnormal_scenarios = [SCENARIO_FALLEN, SCENARIO_CLUSTER, SCENARIO_SATURATED]

    normals = [
        LabeledSample(
            image=_render_patch(rng, SCENARIO_UPRIGHT, oversize, image_size),
            label=Label.NORMAL,
            source_id=i,
            class_tag=SCENARIO_UPRIGHT,
        )
        for i in range(n_normal)
    ]
    abnormals = []
    for i in range(n_abnormal):
        scenario = abnormal_scenarios[int(rng.integers(0, len(abnormal_scenarios)))]
        abnormals.append(
            LabeledSample(
                image=_render_patch(rng, scenario, oversize, image_size),
                label=Label.ABNORMAL,
                source_id=n_normal + i,
                class_tag=scenario,
            )
        )

    def cut(part: list, lo: float, hi: float) -> list:
        return part[int(round(lo * len(part))) : int(round(hi * len(part)))]

    split = DatasetSplit(
        train_normal=cut(normals, 0.0, 0.7),
        train_abnormal=cut(abnormals, 0.0, 0.7),
        validation=cut(normals, 0.7, 0.8) + cut(abnormals, 0.7, 0.8),
        test=cut(normals, 0.8, 1.0) + cut(abnormals, 0.8, 1.0),
        descriptor=DatasetDescriptor(
            image_shape=(3, image_size, image_size),
            source="synthetic-oversize" if oversize else "synthetic",
            seed=seed,
        ),
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# Preprocessing and batching
# ---------------------------------------------------------------------------


def preprocess(
    sample: Union[LabeledSample, np.ndarray],
    target_channels: int = 3,
    target_size: int = 64,
) -> np.ndarray:
    """Resize to target_size^2, adapt channels, map bytes linearly to [-1, 1].

    Byte 0 maps to -1.0 and byte 255 to +1.0 exactly; resize is bilinear.
    """
    if target_size < 8:
        raise DatasetError(f"target_size must be >= 8, got {target_size}")
    if target_channels not in (1, 3):
        raise DatasetError(f"target_channels must be 1 or 3, got {target_channels}")
    image = sample.image if isinstance(sample, LabeledSample) else sample
    c, h, w = image.shape
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    if c == 3 and target_channels == 1:
        arr = np.round(arr.astype(np.float32).mean(axis=0)).astype(np.uint8)[None]
        c = 1
    if (h, w) != (target_size, target_size):
        if c == 1:
            pil = Image.fromarray(arr[0], mode="L")
        else:
            pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        pil = pil.resize((target_size, target_size), resample=Image.BILINEAR)
        resized = np.asarray(pil, dtype=np.uint8)
        arr = resized[None] if c == 1 else resized.transpose(2, 0, 1)
    if c == 1 and target_channels == 3:
        arr = np.repeat(arr, 3, axis=0)
    return arr.astype(np.float32) / 127.5 - 1.0


@dataclass
class PreprocessedPartition:
    """Partition cache: preprocessed once, then sliced per batch.

    ``samples_served`` counts every sample handed out through batches; the
    trainer uses it to prove the unsupervised baseline never touches the
    abnormal partition.
    """

    data: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray
    samples_served: int = 0

    def __len__(self) -> int:
        return self.data.shape[0]


def preprocess_partition(
    samples: Sequence[LabeledSample], target_channels: int = 3, target_size: int = 64
) -> PreprocessedPartition:
    if not samples:
        raise DatasetError("empty partition")
    data = np.stack([preprocess(s, target_channels, target_size) for s in samples])
    labels = np.array([int(s.label) for s in samples], dtype=np.int8)
    ids = np.array([s.source_id for s in samples], dtype=np.int64)
    return PreprocessedPartition(data=data, labels=labels, source_ids=ids)


def batch_iterator(
    partition: Union[Sequence[LabeledSample], PreprocessedPartition],
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
    target_channels: int = 3,
    target_size: int = 64,
) -> Iterator[ImageBatch]:
    """Yield every sample exactly once; order is a pure function of
    (shuffle_seed, epoch). The final partial batch is emitted."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    if not isinstance(partition, PreprocessedPartition):
        partition = preprocess_partition(partition, target_channels, target_size)
    n = len(partition)
    if n == 0:
        raise DatasetError("empty partition")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        partition.samples_served += len(idx)
        yield ImageBatch(
            data=partition.data[idx],
            labels=partition.labels[idx],
            source_ids=partition.source_ids[idx],
        )


# ---------------------------------------------------------------------------
# Split manifest (exact split reuse)
# ---------------------------------------------------------------------------


def write_split_manifest(split: DatasetSplit, path: Union[str, Path]) -> None:
    """One `partition source_id` line per sample."""
    with open(path, "w") as fh:
        for name, part in split.partitions().items():
            for s in part:
                fh.write(f"{name} {s.source_id}\n")


def read_split_manifest(
    path: Union[str, Path],
    samples: Sequence[LabeledSample],
    descriptor: DatasetDescriptor,
    anomaly_class_tag: int | None = None,
) -> DatasetSplit:
    """Rebuild a split from a manifest over the given sample pool.

    When the pool carries no anomaly labeling of its own (raw IDX loads),
    pass `anomaly_class_tag` to restore labels from each sample's class tag.
    """
    by_id = {s.source_id: s for s in samples}
    parts: dict[str, list[LabeledSample]] = {
        "train_normal": [],
        "train_abnormal": [],
        "validation": [],
        "test": [],
    }
    label_for = {"train_normal": Label.NORMAL, "train_abnormal": Label.ABNORMAL}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, sid = line.split()
            sample = by_id[int(sid)]
        except (ValueError, KeyError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad manifest line {line!r}") from exc
        if name not in parts:
            raise DatasetError(f"{path}:{lineno}: unknown partition {name!r}")
        if name in label_for:
            label = label_for[name]
        elif anomaly_class_tag is not None:
            label = (
                Label.ABNORMAL if sample.class_tag == anomaly_class_tag else Label.NORMAL
            )
        else:
            label = sample.label
        if label != sample.label:
            sample = LabeledSample(sample.image, label, sample.source_id, sample.class_tag)
        parts[name].append(sample)
    return DatasetSplit(descriptor=descriptor, **parts)
