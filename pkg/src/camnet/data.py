"""Datasets: synthetic motif generator, manifest ingestion, patient splits.

The synthetic generator stamps one geometric motif kind per class onto a
noisy background and records the stamped boxes, giving exact localization
ground truth for the attention maps. Real images come in through a plain
CSV manifest (``path,patient_id,labels`` with pipe-separated label names).
Splitting is always by patient: all images of a subject land in exactly
one of train/validation/test.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, GenerationError, ManifestError

log = logging.getLogger("camnet.data")


@dataclass
class Sample:
    image: np.ndarray          # [c, S, S] floats in [0, 1]
    labels: np.ndarray         # multi-hot [C]
    patient_id: str
    motif_boxes: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    # each box is (class index, x, y, w, h) with x = column of the top-left corner

    def validate(self) -> None:
        if self.image.min() < 0 or self.image.max() > 1:
            raise ConfigError("pixel values must lie in [0, 1]")
        for cls, *_ in self.motif_boxes:
            if self.labels[cls] != 1:
                raise ConfigError(f"box for class {cls} present but label is 0")


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    skipped_rows: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def images_array(self, dtype=np.float32, channels: int | None = None) -> np.ndarray:
        arr = np.stack([s.image for s in self.samples]).astype(dtype, copy=False)
        if channels is not None and arr.shape[1] == 1 and channels == 3:
            arr = np.repeat(arr, 3, axis=1)  # grayscale replicated for 3-channel nets
        elif channels is not None and arr.shape[1] != channels:
            raise ConfigError(
                f"dataset has {arr.shape[1]} channels but {channels} were requested")
        return arr

    def labels_array(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.labels for s in self.samples]).astype(dtype, copy=False)

    def patient_ids(self) -> list[str]:
        return [s.patient_id for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.class_names)


# ---------------------------------------------------------------------------
# Motif catalog
# ---------------------------------------------------------------------------


def _disc(diameter: int) -> np.ndarray:
    r = (diameter - 1) / 2
    yy, xx = np.mgrid[:diameter, :diameter]
    return (yy - r) ** 2 + (xx - r) ** 2 <= r ** 2 + 0.25


def _bar(height: int, width: int) -> np.ndarray:
    return np.ones((height, width), dtype=bool)


def _ring(outer: int, inner: int) -> np.ndarray:
    mask = _disc(outer)
    pad = (outer - inner) // 2
    hole = np.zeros_like(mask)
    hole[pad:pad + inner, pad:pad + inner] = _disc(inner)
    return mask & ~hole


def _checker(size: int, cell: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return ((yy // cell) + (xx // cell)) % 2 == 0


def _cross(size: int, thickness: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    lo = (size - thickness) // 2
    mask[lo:lo + thickness, :] = True
    mask[:, lo:lo + thickness] = True
    return mask


def _frame(size: int, thickness: int) -> np.ndarray:
    mask = np.ones((size, size), dtype=bool)
    mask[thickness:-thickness, thickness:-thickness] = False
    return mask


# one motif kind per class, distinct shapes and scales
MOTIF_CATALOG: list[tuple[str, np.ndarray]] = [
    ("disc_small", _disc(7)),
    ("disc_large", _disc(13)),
    ("bar_wide", _bar(4, 14)),
    ("bar_tall", _bar(14, 4)),
    ("ring_small", _ring(9, 3)),
    ("ring_large", _ring(15, 7)),
    ("checker_fine", _checker(10, 2)),
    ("checker_coarse", _checker(12, 4)),
    ("disc_tiny", _disc(5)),
    ("bar_long", _bar(3, 18)),
    ("ring_thin", _ring(13, 9)),
    ("checker_wide", _checker(15, 5)),
    ("cross_mid", _cross(11, 3)),
    ("frame_mid", _frame(16, 3)),
]


@dataclass
class SynthConfig:
    num_patients: int = 40
    images_per_patient: int = 10
    image_size: int = 64
    num_classes: int = 8
    label_prob: float = 0.3
    noise_level: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > len(MOTIF_CATALOG):
            raise ConfigError(
                f"num_classes must be in [1, {len(MOTIF_CATALOG)}], got {self.num_classes}")
        if self.num_patients < 1 or self.images_per_patient < 1:
            raise ConfigError("num_patients and images_per_patient must be >= 1")
        if not 0 < self.label_prob < 1:
            raise ConfigError("label_prob must lie in (0, 1)")
        if not 0 <= self.noise_level < 0.5:
            raise ConfigError("noise_level must lie in [0, 0.5)")
        largest = max(max(m.shape) for _, m in MOTIF_CATALOG[:self.num_classes])
        if self.image_size < 2 * largest:
            raise ConfigError(
                f"image_size {self.image_size} too small for motifs up to {largest} px")

    def class_names(self) -> list[str]:
        return [name for name, _ in MOTIF_CATALOG[:self.num_classes]]


def _overlaps(box, others) -> bool:
    x, y, w, h = box
    for _, ox, oy, ow, oh in others:
        if x < ox + ow and ox < x + w and y < oy + oh and oy < y + h:
            return True
    return False


def _make_sample(config: SynthConfig, patient: int, index: int) -> Sample:
    # per-sample generator: content never depends on generation order
    rng = np.random.default_rng((config.seed, patient, index))
    size = config.image_size
    img = rng.uniform(0.0, config.noise_level, size=(size, size)).astype(np.float32)
    labels = (rng.random(config.num_classes) < config.label_prob).astype(np.float32)
    boxes: list[tuple[int, int, int, int, int]] = []
    for cls in np.flatnonzero(labels):
        mask = MOTIF_CATALOG[cls][1]
        h, w = mask.shape
        intensity = rng.uniform(0.6, 1.0)
        for attempt in range(50):
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            if not _overlaps((x, y, w, h), boxes):
                break
        else:
            raise GenerationError(
                f"could not place motif for class {cls} without overlap after 50 "
                f"tries; use a larger image_size than {size}")
        img[y:y + h, x:x + w][mask] = intensity
        boxes.append((int(cls), x, y, w, h))
    return Sample(image=img[None, :, :], labels=labels,
                  patient_id=f"P{patient:04d}", motif_boxes=boxes)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Seed-deterministic multi-label motif dataset with box ground truth."""
    samples = [
        _make_sample(config, p, i)
        for p in range(config.num_patients)
        for i in range(config.images_per_patient)
    ]
    return Dataset(samples, config.class_names())


# ---------------------------------------------------------------------------
# Resizing and manifest ingestion
# ---------------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, target: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-d array to target x target.

    A no-op (bit-identical copy) when the source already has the target
    size, so resizing is idempotent.
    """
    h, w = image.shape
    if h == target and w == target:
        return image.copy()

    def axis_coords(src: int) -> np.ndarray:
        if target == 1:
            return np.asarray([(src - 1) / 2.0])
        return np.arange(target) * ((src - 1) / (target - 1))

    ys, xs = axis_coords(h), axis_coords(w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(image.dtype)[:, None]
    wx = (xs - x0).astype(image.dtype)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
            return np.asarray(gray, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ManifestError(f"image file not found: {path}")
    except Exception as exc:
        raise ManifestError(f"cannot decode image {path}: {exc}")


def load_manifest(manifest_path, image_root=None, target_size: int = 64,
                  class_names: list[str] | None = None,
                  strict: bool = True) -> Dataset:
    """Load a ``path,patient_id,labels`` CSV into a dataset.

    Labels are pipe-separated names (empty = all-negative). The vocabulary
    is either supplied or inferred from the manifest; unknown names are
    rejected. In lenient mode bad rows are skipped and counted instead of
    aborting.
    """
    manifest_path = Path(manifest_path)
    root = Path(image_root) if image_root is not None else manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                [f.strip() for f in reader.fieldnames[:3]] != ["path", "patient_id", "labels"]:
            raise ManifestError(
                f"{manifest_path}: expected header 'path,patient_id,labels', "
                f"got {reader.fieldnames}")
        rows = list(reader)
    inferred = sorted({name for row in rows for name in row["labels"].split("|") if name})
    vocab = class_names if class_names is not None else inferred
    index = {name: i for i, name in enumerate(vocab)}

    boxes_by_path = _load_boxes(manifest_path.parent / "boxes.csv", index)
    samples: list[Sample] = []
    skipped = 0
    for rownum, row in enumerate(rows, start=2):
        try:
            labels = np.zeros(len(vocab), dtype=np.float32)
            for name in row["labels"].split("|"):
                if not name:
                    continue
                if name not in index:
                    raise ManifestError(
                        f"{manifest_path}:{rownum}: unknown label {name!r}; "
                        f"vocabulary has {len(vocab)} classes")
                labels[index[name]] = 1.0
            img = _load_png(root / row["path"])
            resized = bilinear_resize(img, target_size)
            samples.append(Sample(image=resized[None].astype(np.float32),
                                  labels=labels,
                                  patient_id=row["patient_id"],
                                  motif_boxes=boxes_by_path.get(row["path"], [])))
        except ManifestError as exc:
            if strict:
                raise
            skipped += 1
            log.warning("skipping row %d: %s", rownum, exc)
    return Dataset(samples, vocab, skipped_rows=skipped)


def load_dataset_dir(directory, target_size: int = 64,
                     class_names: list[str] | None = None,
                     strict: bool = True) -> Dataset:
    """Load a directory written by save_dataset (or hand-assembled to match).

    The class vocabulary comes from, in order of preference: the explicit
    argument, the directory's summary.json, or names inferred from the
    manifest (sorted).
    """
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ManifestError(f"no manifest.csv in {directory}")
    if class_names is None:
        summary = directory / "summary.json"
        if summary.exists():
            try:
                class_names = json.loads(summary.read_text())["classes"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{summary}: unreadable class list: {exc}")
    return load_manifest(manifest, target_size=target_size,
                         class_names=class_names, strict=strict)


def _load_boxes(path: Path, class_index: dict[str, int]) -> dict[str, list]:
    if not path.exists():
        return {}
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cls = row["class"]
            ci = class_index[cls] if cls in class_index else int(cls)
            out.setdefault(row["path"], []).append(
                (ci, int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"])))
    return out


def save_dataset(dataset: Dataset, out_dir) -> dict:
    """Write images/, manifest.csv, boxes.csv and summary.json; returns the summary."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    box_rows = []
    counters: dict[str, int] = {}
    for sample in dataset.samples:
        k = counters.get(sample.patient_id, 0)
        counters[sample.patient_id] = k + 1
        rel = f"images/{sample.patient_id}_{k:03d}.png"
        img8 = np.clip(np.rint(sample.image[0] * 255), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(out / rel)
        names = [dataset.class_names[i] for i in np.flatnonzero(sample.labels)]
        manifest_rows.append((rel, sample.patient_id, "|".join(names)))
        for cls, x, y, w, h in sample.motif_boxes:
            box_rows.append((rel, dataset.class_names[cls], x, y, w, h))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "patient_id", "labels"])
        writer.writerows(manifest_rows)
    with open(out / "boxes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class", "x", "y", "w", "h"])
        writer.writerows(box_rows)
    freqs = dataset.labels_array().mean(axis=0)
    summary = {
        "num_samples": len(dataset),
        "num_patients": len(set(dataset.patient_ids())),
        "classes": dataset.class_names,
        "label_frequencies": {n: float(f) for n, f in zip(dataset.class_names, freqs)},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def patient_split(dataset: Dataset, train_frac: float = 0.8,
                  val_frac_of_train: float = 0.1,
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by patient so no subject's images span two splits.

    Test takes floor((1-train_frac) * patients); validation takes
    floor(val_frac * remaining) but never less than one patient; the
    remainder stays in train.
    """
    if not 0 < train_frac < 1 or not 0 < val_frac_of_train < 1:
        raise ConfigError("split fractions must lie in (0, 1)")
    ids = dataset.patient_ids()
    patients = sorted(set(ids))
    rng = np.random.default_rng(seed)
    perm = [patients[i] for i in rng.permutation(len(patients))]
    # the epsilon keeps fractions like 1 - 0.8 from flooring one short
    n_test = int(np.floor((1 - train_frac) * len(patients) + 1e-9))
    n_val = int(np.floor(val_frac_of_train * (len(patients) - n_test) + 1e-9))
    n_val = max(n_val, 1)
    n_train = len(patients) - n_test - n_val
    if n_test < 1 or n_train < 1:
        raise ConfigError(
            f"split of {len(patients)} patients leaves an empty subset "
            f"(train {n_train}, val {n_val}, test {n_test})")
    test_ids = set(perm[:n_test])
    val_ids = set(perm[n_test:n_test + n_val])
    groups: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, pid in enumerate(ids):
        key = "test" if pid in test_ids else "val" if pid in val_ids else "train"
        groups[key].append(i)
    return (dataset.subset(groups["train"]), dataset.subset(groups["val"]),
            dataset.subset(groups["test"]))
