"""Thresholded diagnosis, ROC curves, and per-class AUC evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .backbone import LabelVector
from .engine import Tensor
from .errors import UndefinedCurveError

EVAL_BRANCHES = ("cls", "att", "fused")


def diagnose(scores: LabelVector | np.ndarray) -> np.ndarray:
    """Binary calls: strictly greater than 0.5 is positive, 0.5 itself is not."""
    values = scores.values if isinstance(scores, LabelVector) else np.asarray(scores)
    return (values > 0.5).astype(np.int64)


@dataclass
class RocCurve:
    """Operating points swept over descending score thresholds, ties grouped."""

    points: list[tuple[float, float]]  # (false positive rate, true positive rate)
    class_id: int | str | None = None

    def false_positive_rates(self) -> list[float]:
        return [p[0] for p in self.points]

    def true_positive_rates(self) -> list[float]:
        return [p[1] for p in self.points]


def roc_curve(scores, labels, class_id=None) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UndefinedCurveError(
            f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-d")
    pos = int((labels == 1).sum())
    neg = int(labels.size - pos)
    if pos == 0 or neg == 0:
        name = "scores" if class_id is None else f"class {class_id}"
        raise UndefinedCurveError(
            f"ROC undefined for {name}: needs at least one positive and one "
            f"negative label (got {pos} positive, {neg} negative)")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        # all samples tied at one score move across the threshold together
        block = sorted_labels[i:j]
        tp += int((block == 1).sum())
        fp += int(j - i) - int((block == 1).sum())
        points.append((fp / neg, tp / pos))
        i = j
    return RocCurve(points=points, class_id=class_id)


def auc(scores, labels, class_id=None) -> float:
    """Trapezoidal area under the ROC curve.

    Equals the probability that a random positive outranks a random
    negative, counting ties as half.
    """
    curve = roc_curve(scores, labels, class_id=class_id)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_auc: list[float | None]   # None for excluded classes
    average_auc: float
    positive_counts: list[int]
    excluded_classes: list[str]         # no positives or no negatives
    branch: str = "fused"
    num_samples: int = 0

    def to_json(self) -> str:
        payload = {
            "branch": self.branch,
            "num_samples": self.num_samples,
            "average_auc": self.average_auc,
            "excluded_classes": self.excluded_classes,
            "classes": [
                {"name": n, "auc": a, "positives": p}
                for n, a, p in zip(self.class_names, self.per_class_auc,
                                   self.positive_counts)
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max([len(n) for n in self.class_names] + [len("Average")])
        lines = [f"{'Class'.ljust(width)}  AUC     Positives",
                 "-" * (width + 19)]
        for name, a, p in zip(self.class_names, self.per_class_auc,
                              self.positive_counts):
            shown = "excluded" if a is None else f"{a:.4f}"
            lines.append(f"{name.ljust(width)}  {shown:<8}{p}")
        lines.append("-" * (width + 19))
        lines.append(f"{'Average'.ljust(width)}  {self.average_auc:.4f}")
        return "\n".join(lines) + "\n"


def scores_report(scores: np.ndarray, labels: np.ndarray,
                  class_names: list[str] | None = None,
                  branch: str = "fused") -> EvalReport:
    """Per-class AUC over a score matrix; degenerate classes are excluded
    from the average and listed in the report."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n, c = scores.shape
    names = class_names or [f"class{i}" for i in range(c)]
    per_class: list[float | None] = []
    excluded: list[str] = []
    for ci in range(c):
        try:
            per_class.append(auc(scores[:, ci], labels[:, ci], class_id=names[ci]))
        except UndefinedCurveError:
            per_class.append(None)
            excluded.append(names[ci])
    included = [a for a in per_class if a is not None]
    average = float(np.mean(included)) if included else float("nan")
    return EvalReport(
        class_names=names,
        per_class_auc=per_class,
        average_auc=average,
        positive_counts=[int((labels[:, ci] == 1).sum()) for ci in range(c)],
        excluded_classes=excluded,
        branch=branch,
        num_samples=n,
    )


def branch_scores(model, images: np.ndarray, branch: str,
                  batch_size: int = 32) -> np.ndarray:
    """Run inference and collect the requested branch's scores."""
    if branch not in EVAL_BRANCHES:
        raise UndefinedCurveError(f"unknown branch {branch!r}; expected {EVAL_BRANCHES}")
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        batch = Tensor(np.ascontiguousarray(images[start:start + batch_size]))
        with engine.record():
            out = model.forward(batch, include_attention=branch != "cls")
        if branch == "cls":
            chunks.append(out.cls_probs.data)
        elif branch == "att":
            chunks.append(out.att_probs.data)
        else:
            chunks.append(out.fused.data)
    return np.concatenate(chunks, axis=0)


def evaluate(model, dataset, branch: str = "fused", batch_size: int = 32) -> EvalReport:
    """Fused (or single-branch) inference over a dataset, reported per class."""
    images = dataset.images_array(dtype=model.dtype, channels=model.backbone_config.input_channels)
    labels = dataset.labels_array()
    scores = branch_scores(model, images, branch, batch_size=batch_size)
    return scores_report(scores, labels, class_names=dataset.class_names, branch=branch)


def attention_maps(model, images: np.ndarray, batch_size: int = 32,
                   normalized: bool = True) -> np.ndarray:
    """Per-class saliency maps [n, C, h, w] for a stack of images."""
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        batch = Tensor(np.ascontiguousarray(images[start:start + batch_size]))
        with engine.record():
            out = model.forward(batch, include_attention=True)
        maps = out.attention.maps
        chunks.append(maps.normalized if normalized else maps.raw)
    return np.concatenate(chunks, axis=0)


def box_mass(norm_map: np.ndarray, box: tuple[int, int, int, int],
             image_size: int) -> tuple[float, float]:
    """Saliency mass inside an image-space box, plus the uniform baseline.

    The box (x, y, w, h) is given in image pixels; the map is coarser, so
    each map cell contributes in proportion to how much of it the box
    covers. A uniform map therefore scores exactly the box's area
    fraction. Returns (mass inside, box area fraction).
    """
    h, w = norm_map.shape
    x, y, bw, bh = box
    cell_h, cell_w = image_size / h, image_size / w
    row_edges = np.arange(h + 1) * cell_h
    col_edges = np.arange(w + 1) * cell_w
    row_cover = np.clip(np.minimum(row_edges[1:], y + bh)
                        - np.maximum(row_edges[:-1], y), 0.0, None)
    col_cover = np.clip(np.minimum(col_edges[1:], x + bw)
                        - np.maximum(col_edges[:-1], x), 0.0, None)
    frac = np.outer(row_cover, col_cover) / (cell_h * cell_w)
    mass = float((norm_map * frac).sum())
    area_fraction = (bw * bh) / (image_size * image_size)
    return mass, area_fraction


def localization_report(model, dataset, batch_size: int = 32) -> dict:
    """In-box saliency mass for every positive (sample, class) pair with a
    recorded box, compared against the area-proportional baseline."""
    images = dataset.images_array(dtype=model.dtype,
                                  channels=model.backbone_config.input_channels)
    image_size = images.shape[-1]
    maps = attention_maps(model, images, batch_size=batch_size)
    masses, baselines = [], []
    for i, sample in enumerate(dataset.samples):
        for cls, x, y, w, h in sample.motif_boxes:
            mass, baseline = box_mass(maps[i, cls], (x, y, w, h), image_size)
            masses.append(mass)
            baselines.append(baseline)
    if not masses:
        return {"pairs": 0, "mean_in_box_mass": None,
                "mean_baseline": None, "ratio": None}
    mean_mass = float(np.mean(masses))
    mean_baseline = float(np.mean(baselines))
    return {"pairs": len(masses), "mean_in_box_mass": mean_mass,
            "mean_baseline": mean_baseline, "ratio": mean_mass / mean_baseline}


def roc_to_csv(curve: RocCurve) -> str:
    lines = ["false_positive_rate,true_positive_rate"]
    lines += [f"{x:.10g},{y:.10g}" for x, y in curve.points]
    return "\n".join(lines) + "\n"


def roc_to_svg(curve: RocCurve, size: int = 320, margin: int = 30) -> str:
    """Standalone SVG: ROC polyline over the chance diagonal."""
    span = size - 2 * margin

    def sx(x):
        return margin + x * span

    def sy(y):
        return size - margin - y * span

    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in curve.points)
    title = f"ROC {curve.class_id}" if curve.class_id is not None else "ROC"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'  <rect width="{size}" height="{size}" fill="white"/>\n'
        f'  <text x="{size / 2:.0f}" y="18" text-anchor="middle" '
        f'font-size="12">{title}</text>\n'
        f'  <line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" y2="{sy(1):.2f}" '
        f'stroke="#bbbbbb" stroke-dasharray="4 3"/>\n'
        f'  <rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        f'fill="none" stroke="black"/>\n'
        f'  <polyline points="{pts}" fill="none" stroke="#cc3311" stroke-width="1.5"/>\n'
        f'</svg>\n'
    )
