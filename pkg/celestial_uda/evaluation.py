"""mAP evaluation, EvalReport files and the multi-run comparison table."""

from __future__ import annotations

import csv
import logging
import statistics
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_MAP_IOU,
    DEFAULT_NMS_IOU,
    METHOD_SOURCE_ONLY,
)
from .core import DetectionSet, iou
from .data import DatasetSplit
from .detector import Checkpoint, OneStageDetector, decode, load_checkpoint
from .exceptions import ConfigError, DatasetFormatError, DatasetIOError

_LOGGER = logging.getLogger(__name__)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, summed where recall changes."""
    mrec = np.concatenate(([0.0], np.asarray(recall, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precision, dtype=np.float64), [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_class(
    predictions: Sequence[DetectionSet],
    ground_truth: Sequence[DetectionSet],
    class_id: int,
    map_iou: float = DEFAULT_MAP_IOU,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy confidence-ordered matching of one class across a split.

    Returns (confidences, true-positive flags) in match order and the
    ground-truth count.
    """
    gts = [[d.box for d in dets if d.class_id == class_id] for dets in ground_truth]
    n_gt = sum(len(g) for g in gts)
    candidates = [
        (det.confidence, image_index, det.box)
        for image_index, dets in enumerate(predictions)
        for det in dets
        if det.class_id == class_id
    ]
    # Stable sort keeps input order among equal confidences
    candidates.sort(key=lambda c: -c[0])
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    confidences = np.array([c[0] for c in candidates], dtype=np.float64)
    tp = np.zeros(len(candidates), dtype=bool)
    for k, (_, image_index, box) in enumerate(candidates):
        best, best_iou = -1, -1.0
        for j, gt_box in enumerate(gts[image_index]):
            if matched[image_index][j]:
                continue
            overlap = iou(box, gt_box)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= map_iou:
            matched[image_index][best] = True
            tp[k] = True
    return confidences, tp, n_gt


def class_average_precision(
    predictions: Sequence[DetectionSet],
    ground_truth: Sequence[DetectionSet],
    class_id: int,
    map_iou: float = DEFAULT_MAP_IOU,
) -> float | None:
    """AP of one class, or None when the class has no ground truth."""
    _, tp, n_gt = match_class(predictions, ground_truth, class_id, map_iou)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def mean_average_precision(
    predictions: Sequence[DetectionSet],
    ground_truth: Sequence[DetectionSet],
    class_names: Sequence[str],
    map_iou: float = DEFAULT_MAP_IOU,
) -> tuple[dict[str, float], float, list[str]]:
    """Per-class AP, their mean, and the classes absent from ground truth."""
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} prediction sets for {len(ground_truth)} images"
        )
    per_class: dict[str, float] = {}
    absent: list[str] = []
    for class_id, name in enumerate(class_names):
        ap = class_average_precision(predictions, ground_truth, class_id, map_iou)
        if ap is None:
            absent.append(name)
        else:
            per_class[name] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean, absent


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map: float
    detection_count: int
    ground_truth_count: int
    absent_classes: list[str] = field(default_factory=list)
    map_iou: float = DEFAULT_MAP_IOU
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    split: str | None = None
    method: str | None = None
    seed: int | None = None
    fingerprint: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvalReport:
        try:
            return cls(**dict(data))
        except TypeError as err:
            raise DatasetFormatError(f"Malformed evaluation report: {err}") from err


def save_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(report.to_dict(), fh, sort_keys=False)
    except OSError as err:
        raise DatasetIOError(f"Could not write report {path}: {err}") from err
    return path


def load_report(path: str | Path) -> EvalReport:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as err:
        raise DatasetIOError(f"Could not read report {path}: {err}") from err
    except yaml.YAMLError as err:
        raise DatasetFormatError(f"{path}: {err}") from err
    if not isinstance(data, dict):
        raise DatasetFormatError(f"{path}: not a report mapping")
    return EvalReport.from_dict(data)


@torch.no_grad()
def predict(
    detector: OneStageDetector,
    images: Sequence[np.ndarray],
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[DetectionSet]:
    detector.eval()
    param = next(detector.parameters())
    results: list[DetectionSet] = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start : start + batch_size]).astype(np.float32)
        tensor = torch.from_numpy(chunk)[:, None]
        tensor = tensor.to(device=param.device, dtype=param.dtype)
        out = detector(tensor)
        for b in range(out.batch_size):
            results.append(decode(out.predictions(b), conf_threshold, nms_iou))
    return results


def evaluate_model(
    detector: OneStageDetector,
    split: DatasetSplit,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
    map_iou: float = DEFAULT_MAP_IOU,
    class_names: Sequence[str] | None = None,
) -> EvalReport:
    if not split.labeled:
        raise ConfigError(f"Split {split.name!r} has no labels to evaluate against")
    names = list(class_names or split.class_names)
    predictions = predict(
        detector, [item.image for item in split.items], conf_threshold, nms_iou
    )
    ground_truth = [item.detections for item in split.items]
    per_class, mean, absent = mean_average_precision(
        predictions, ground_truth, names, map_iou
    )
    return EvalReport(
        per_class_ap=per_class,
        map=mean,
        detection_count=sum(len(p) for p in predictions),
        ground_truth_count=sum(len(g) for g in ground_truth),
        absent_classes=absent,
        map_iou=map_iou,
        conf_threshold=conf_threshold,
        nms_iou=nms_iou,
        split=split.name,
    )


def evaluate(
    checkpoint: Checkpoint | str | Path,
    split: DatasetSplit,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
    map_iou: float = DEFAULT_MAP_IOU,
) -> EvalReport:
    """Score a checkpoint on a labeled split at mAP@map_iou."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    names = checkpoint.class_names or split.class_names
    if list(names) != list(split.class_names):
        raise ConfigError(
            f"Checkpoint classes {names} do not match split classes {split.class_names}"
        )
    report = evaluate_model(
        checkpoint.detector, split, conf_threshold, nms_iou, map_iou, names
    )
    report.method = checkpoint.metadata.get("method")
    report.seed = checkpoint.metadata.get("seed")
    report.fingerprint = checkpoint.metadata.get("fingerprint")
    _LOGGER.info(
        "%s on %s: mAP@%.2f = %.4f (%d detections, %d ground truth)",
        report.method or "checkpoint",
        split.name,
        map_iou,
        report.map,
        report.detection_count,
        report.ground_truth_count,
    )
    return report


@dataclass
class MethodSummary:
    method: str
    seeds: list[int] = field(default_factory=list)
    maps: list[float] = field(default_factory=list)
    gain: float | None = None

    @property
    def median(self) -> float:
        return float(statistics.median(self.maps))

    @property
    def mean(self) -> float:
        return float(statistics.fmean(self.maps))

    def as_row(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "runs": len(self.maps),
            "median_map": round(self.median, 6),
            "mean_map": round(self.mean, 6),
            "gain_vs_source_only": None if self.gain is None else round(self.gain, 6),
            "seeds": " ".join(str(s) for s in self.seeds),
        }


def aggregate_reports(
    reports: Sequence[EvalReport], method_order: Sequence[str] = ()
) -> list[MethodSummary]:
    """Group reports by method; gain is relative to the source_only median."""
    by_method: dict[str, MethodSummary] = {}
    for report in reports:
        name = report.method or "unknown"
        summary = by_method.setdefault(name, MethodSummary(name))
        summary.maps.append(report.map)
        if report.seed is not None:
            summary.seeds.append(int(report.seed))
    baseline = by_method.get(METHOD_SOURCE_ONLY)
    for summary in by_method.values():
        if baseline is not None and baseline.median > 0:
            summary.gain = (summary.median - baseline.median) / baseline.median
    rank = {name: i for i, name in enumerate(method_order)}
    return sorted(
        by_method.values(), key=lambda s: (rank.get(s.method, len(rank)), s.method)
    )


_TABLE_COLUMNS = (
    ("method", "Method"),
    ("runs", "Runs"),
    ("median_map", "Median mAP"),
    ("mean_map", "Mean mAP"),
    ("gain_vs_source_only", "Gain"),
)


def format_report_table(summaries: Sequence[MethodSummary]) -> str:
    """Aligned plain-text comparison table."""
    rows = []
    for summary in summaries:
        row = summary.as_row()
        gain = row["gain_vs_source_only"]
        rows.append(
            [
                row["method"],
                str(row["runs"]),
                f"{row['median_map']:.4f}",
                f"{row['mean_map']:.4f}",
                "-" if gain is None else f"{gain * 100:+.1f}%",
            ]
        )
    headers = [title for _, title in _TABLE_COLUMNS]
    widths = [
        max(len(headers[c]), *(len(r[c]) for r in rows)) if rows else len(headers[c])
        for c in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths, strict=True))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        cells = [row[0].ljust(widths[0])]
        cells += [cell.rjust(w) for cell, w in zip(row[1:], widths[1:], strict=True)]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def write_report_csv(summaries: Sequence[MethodSummary], path: str | Path) -> Path:
    path = Path(path)
    rows = [s.as_row() for s in summaries]
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=[*(key for key, _ in _TABLE_COLUMNS), "seeds"]
            )
            writer.writeheader()
            writer.writerows(rows)
    except OSError as err:
        raise DatasetIOError(f"Could not write {path}: {err}") from err
    return path
