"""Training harness: supervised loss plus the method's alignment terms.

total = L_yolo + lambda_img * L_img + lambda_inst * L_inst + lambda_pc * L_pc

L_inst is the instance or feature alignment term. For PC methods the PC term
belongs to the instance objective but is logged in its own column.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .const import (
    CHECKPOINT_BEST,
    CHECKPOINT_LAST,
    DIAGNOSTICS_NAME,
    DOMAIN_TARGET,
    TRAIN_LOG_NAME,
)
from .core import DetectionSet
from .data import DatasetSplit, LabeledImage
from .detector import OneStageDetector, save_checkpoint, supervised_loss
from .diagnostics import (
    AlignmentRecord,
    DiagnosticsLog,
    divergence_report,
    write_divergence_dump,
)
from .evaluation import evaluate_model
from .exceptions import ConfigError, TrainingDivergedError
from .feature_vsa import FeatureAligner
from .global_align import Discriminator, img_loss
from .instance_vsa import InstanceAligner, select_instances
from .pc import pc_loss

_LOGGER = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step",
    "L_total",
    "L_yolo",
    "L_img",
    "L_inst",
    "L_pc",
    "skipped_instance_batches",
)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    yolo: torch.Tensor
    img: torch.Tensor
    inst: torch.Tensor
    pc: torch.Tensor
    instance_skipped: bool = False
    record: AlignmentRecord | None = None

    def as_floats(self) -> dict[str, float]:
        return {
            "L_total": float(self.total.detach()),
            "L_yolo": float(self.yolo.detach()),
            "L_img": float(self.img.detach()),
            "L_inst": float(self.inst.detach()),
            "L_pc": float(self.pc.detach()),
        }


@dataclass
class PathCounters:
    """How many times each loss path was evaluated."""

    supervised: int = 0
    target_forward: int = 0
    img: int = 0
    pc: int = 0
    instance: int = 0
    feature: int = 0


@dataclass
class TrainResult:
    last_checkpoint: Path
    log_path: Path
    best_checkpoint: Path | None = None
    best_map: float | None = None
    history: list[dict[str, float]] = field(default_factory=list)
    counters: PathCounters = field(default_factory=PathCounters)


def images_to_tensor(
    items: Sequence[LabeledImage], device: torch.device | str = "cpu"
) -> torch.Tensor:
    stacked = np.stack([item.image for item in items]).astype(np.float32)
    return torch.from_numpy(stacked)[:, None].to(device)


class UdaTrainer:
    """Owns the detector, the method's alignment modules and one optimizer."""

    def __init__(self, cfg: TrainConfig, class_names: Sequence[str]):
        self.cfg = cfg
        self.spec = cfg.method_spec
        self.class_names = list(class_names)
        self.device = torch.device(cfg.device)
        torch.manual_seed(cfg.seed)
        self.detector = OneStageDetector(cfg.detector_config(len(self.class_names)))
        channels = self.detector.cfg.neck_channels
        self.aligners = nn.ModuleDict()
        if self.spec.global_align:
            self.aligners["image"] = Discriminator(self.detector.cfg.backbone_channels)
        if self.spec.instance:
            self.aligners["instance"] = InstanceAligner(
                channels,
                self.spec.instance,
                sff=self.spec.sff,
                pool_size=cfg.pool_size,
                keep_fraction=cfg.keep_fraction,
                merge_threshold=cfg.merge_threshold,
                margin=cfg.margin,
                attention_kernel=cfg.attention_kernel,
                grl_lambda=cfg.grl_lambda,
                contrastive_raw=cfg.contrastive_raw,
            )
        if self.spec.feature:
            self.aligners["feature"] = FeatureAligner(
                channels,
                self.spec.feature,
                class_count=len(self.class_names),
                keep_fraction=cfg.keep_fraction,
                attention_kernel=cfg.attention_kernel,
                kmeans_max_iter=cfg.kmeans_max_iter,
                seed=cfg.seed,
                grl_lambda=cfg.grl_lambda,
            )
        self.detector.to(self.device)
        self.aligners.to(self.device)
        self.optimizer = torch.optim.SGD(
            self.parameters(),
            lr=cfg.learning_rate,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        self.scheduler: torch.optim.lr_scheduler.LRScheduler | None = None
        self.counters = PathCounters()
        self.diagnostics = DiagnosticsLog()
        self.step = 0

    def parameters(self) -> list[nn.Parameter]:
        return list(self.detector.parameters()) + list(self.aligners.parameters())

    def set_training(self, mode: bool = True) -> None:
        self.detector.train(mode)
        self.aligners.train(mode)

    def _instances(self, raw: Sequence[torch.Tensor]) -> list[DetectionSet]:
        batch = int(raw[0].shape[0])
        return [
            select_instances(
                [p[b] for p in raw],
                self.cfg.conf_threshold,
                self.cfg.nms_iou,
                self.cfg.max_instances,
            )
            for b in range(batch)
        ]

    def compute_losses(
        self,
        images: torch.Tensor,
        ground_truth: Sequence[DetectionSet],
        target_images: torch.Tensor | None = None,
        batch_index: int = 0,
    ) -> LossBreakdown:
        """Loss terms for one batch; `images` carry the supervised labels."""
        cfg = self.cfg
        out_s = self.detector(images)
        self.counters.supervised += 1
        yolo = supervised_loss(out_s.raw_predictions, ground_truth)
        zero = yolo.new_zeros(())
        img, inst, pc = zero, zero, zero
        record = AlignmentRecord(step=self.step, batch_index=batch_index)
        if self.spec.uses_target:
            if target_images is None:
                raise ConfigError(f"Method {cfg.method} needs target images")
            out_t = self.detector(target_images)
            self.counters.target_forward += 1
            if self.spec.global_align:
                img = img_loss(
                    out_s.global_features,
                    out_t.global_features,
                    self.aligners["image"],
                    cfg.grl_lambda,
                )
                self.counters.img += 1
            if self.spec.pc:
                pc = pc_loss(
                    out_s.instance_features,
                    out_t.instance_features,
                    normalize=cfg.pc_normalize,
                )
                self.counters.pc += 1
            if self.spec.instance:
                alignment = self.aligners["instance"](
                    out_s.instance_features,
                    self._instances(out_s.raw_predictions),
                    out_t.instance_features,
                    self._instances(out_t.raw_predictions),
                )
                self.counters.instance += 1
                inst = alignment.loss.value.to(zero)
                record.instances = alignment.instances
                record.clusters = alignment.clusters
                record.dropped_instances = alignment.dropped
                record.instance_skipped = alignment.loss.skipped > 0
            if self.spec.feature:
                feature_alignment = self.aligners["feature"](
                    out_s.instance_features, out_t.instance_features
                )
                self.counters.feature += 1
                inst = feature_alignment.loss.value.to(zero)
                record.feature_groups = feature_alignment.groups
        total = (
            yolo
            + cfg.lambda_img * img
            + cfg.lambda_inst * inst
            + cfg.lambda_pc * pc
        )
        return LossBreakdown(
            total=total,
            yolo=yolo,
            img=img,
            inst=inst,
            pc=pc,
            instance_skipped=record.instance_skipped,
            record=record,
        )

    def train_step(
        self,
        images: torch.Tensor,
        ground_truth: Sequence[DetectionSet],
        target_images: torch.Tensor | None = None,
        batch_index: int = 0,
        dump_dir: Path | None = None,
    ) -> dict[str, float]:
        """One optimizer step; returns the logged row."""
        self.set_training(True)
        self.optimizer.zero_grad(set_to_none=True)
        losses = self.compute_losses(images, ground_truth, target_images, batch_index)
        values = losses.as_floats()
        if not math.isfinite(values["L_total"]):
            dump_path = None
            if dump_dir is not None:
                report = divergence_report(
                    self.step,
                    batch_index,
                    values,
                    self.cfg.to_dict(),
                    self.diagnostics.get_history(),
                )
                dump_file = write_divergence_dump(dump_dir / DIAGNOSTICS_NAME, report)
                dump_path = str(dump_file)
            _LOGGER.error("Training diverged at step %d, batch %d", self.step, batch_index)
            raise TrainingDivergedError(self.step, batch_index, dump_path)
        losses.total.backward()
        if self.cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(self.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        if losses.record is not None:
            self.diagnostics.record(losses.record)
        self.step += 1
        row = {"step": float(self.step), **values}
        row["skipped_instance_batches"] = float(self.diagnostics.skipped_instance_batches)
        _LOGGER.debug(
            "step %d: total %.5f yolo %.5f img %.5f inst %.5f pc %.5f",
            self.step,
            values["L_total"],
            values["L_yolo"],
            values["L_img"],
            values["L_inst"],
            values["L_pc"],
        )
        return row

    def checkpoint(self, path: Path, metadata: dict[str, Any]) -> Path:
        return save_checkpoint(
            path,
            self.detector,
            train_config=self.cfg.to_dict(),
            class_names=self.class_names,
            extra_state={"aligners": self.aligners.state_dict()},
            metadata=metadata,
        )

    def fit(
        self,
        source: DatasetSplit,
        target: DatasetSplit | None,
        out_dir: str | Path,
        val: DatasetSplit | None = None,
    ) -> TrainResult:
        cfg = self.cfg
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        supervised, unsupervised = _resolve_splits(cfg, source, target)
        _check_split(supervised, cfg.input_size)
        if unsupervised is not None:
            _check_split(unsupervised, cfg.input_size)
            if unsupervised.class_names != supervised.class_names:
                raise ConfigError("Source and target class names differ")

        rng = np.random.default_rng(cfg.seed)
        n_sup = len(supervised)
        steps_per_epoch = math.ceil(n_sup / cfg.batch_size)
        self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            self.optimizer, T_max=max(1, cfg.epochs * steps_per_epoch)
        )
        target_order: list[int] = []

        def next_target(count: int) -> list[int]:
            nonlocal target_order
            picked = []
            while len(picked) < count:
                if not target_order:
                    target_order = rng.permutation(len(unsupervised)).tolist()
                picked.append(target_order.pop(0))
            return picked

        log_path = out_dir / TRAIN_LOG_NAME
        result = TrainResult(last_checkpoint=out_dir / CHECKPOINT_LAST, log_path=log_path)
        _LOGGER.info(
            "Training %s for %d epochs (%d steps/epoch, seed %d)",
            cfg.method,
            cfg.epochs,
            steps_per_epoch,
            cfg.seed,
        )
        with open(log_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(n_sup)
                epoch_rows = []
                for batch_index in range(steps_per_epoch):
                    start = batch_index * cfg.batch_size
                    idx = order[start : start + cfg.batch_size]
                    items = [supervised.items[i] for i in idx]
                    images = images_to_tensor(items, self.device)
                    target_images = None
                    if unsupervised is not None:
                        t_items = [unsupervised.items[i] for i in next_target(len(items))]
                        target_images = images_to_tensor(t_items, self.device)
                    row = self.train_step(
                        images,
                        [item.detections for item in items],
                        target_images,
                        batch_index,
                        dump_dir=out_dir,
                    )
                    writer.writerow(_format_row(row))
                    epoch_rows.append(row)
                result.history.extend(epoch_rows)
                fh.flush()
                mean_total = float(np.mean([r["L_total"] for r in epoch_rows]))
                _LOGGER.info("Epoch %d/%d: mean L_total %.4f", epoch, cfg.epochs, mean_total)
                if val is not None:
                    report = evaluate_model(
                        self.detector,
                        val,
                        conf_threshold=cfg.conf_threshold,
                        nms_iou=cfg.nms_iou,
                    )
                    if result.best_map is None or report.map > result.best_map:
                        result.best_map = report.map
                        result.best_checkpoint = self.checkpoint(
                            out_dir / CHECKPOINT_BEST,
                            self._metadata(epoch, report.map),
                        )
                        _LOGGER.info("New best validation mAP %.4f", report.map)
        self.checkpoint(result.last_checkpoint, self._metadata(cfg.epochs, result.best_map))
        result.counters = self.counters
        _LOGGER.info("Training finished; checkpoint at %s", result.last_checkpoint)
        return result

    def _metadata(self, epoch: int, val_map: float | None) -> dict[str, Any]:
        return {
            "method": self.cfg.method,
            "seed": self.cfg.seed,
            "fingerprint": self.cfg.fingerprint(),
            "epoch": epoch,
            "step": self.step,
            "val_map": val_map,
        }


def _format_row(row: dict[str, float]) -> list[str]:
    out = []
    for column in LOG_COLUMNS:
        value = row[column]
        if column in ("step", "skipped_instance_batches"):
            out.append(str(int(value)))
        else:
            out.append(f"{value:.10g}")
    return out


def _check_split(split: DatasetSplit, input_size: int) -> None:
    if not split.items:
        raise ConfigError(f"Split {split.name!r} is empty")
    shape = split.items[0].image.shape
    if shape != (input_size, input_size):
        raise ConfigError(
            f"Split {split.name!r} images are {shape}, detector expects {input_size}"
        )


def _resolve_splits(
    cfg: TrainConfig, source: DatasetSplit, target: DatasetSplit | None
) -> tuple[DatasetSplit, DatasetSplit | None]:
    """Return (supervised split, unlabeled alignment split) for the method."""
    spec = cfg.method_spec
    if spec.supervised_domain == DOMAIN_TARGET:
        if target is None or not target.labeled:
            raise ConfigError(f"Method {cfg.method} needs a labeled target split")
        return target, None
    if not source.labeled:
        raise ConfigError("Source split must be labeled")
    if spec.uses_target:
        if target is None:
            raise ConfigError(f"Method {cfg.method} needs a target split")
        return source, target
    return source, None


def read_train_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(
    cfg: TrainConfig,
    source: DatasetSplit,
    target: DatasetSplit | None,
    out_dir: str | Path,
    val: DatasetSplit | None = None,
) -> TrainResult:
    """Train one method end to end and write checkpoints plus the step log."""
    supervised, _ = _resolve_splits(cfg, source, target)
    trainer = UdaTrainer(cfg, supervised.class_names)
    return trainer.fit(source, target, out_dir, val)
