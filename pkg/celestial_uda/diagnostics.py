"""Alignment diagnostics: per-batch records and the divergence dump."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .exceptions import DatasetIOError

_LOGGER = logging.getLogger(__name__)

HISTORY_SIZE = 50


@dataclass
class AlignmentRecord:
    step: int
    batch_index: int
    instances: dict[str, int] = field(default_factory=dict)
    clusters: dict[str, int] = field(default_factory=dict)
    feature_groups: dict[str, list[int]] = field(default_factory=dict)
    dropped_instances: int = 0
    instance_skipped: bool = False


class DiagnosticsLog:
    """Bounded history of alignment records plus running skip counters."""

    def __init__(self, maxlen: int = HISTORY_SIZE):
        self._history: deque[AlignmentRecord] = deque(maxlen=maxlen)
        self.skipped_instance_batches = 0

    def record(self, entry: AlignmentRecord) -> None:
        if entry.instance_skipped:
            self.skipped_instance_batches += 1
        self._history.append(entry)
        _LOGGER.debug(
            "step %d: instances %s clusters %s groups %s",
            entry.step,
            entry.instances,
            entry.clusters,
            entry.feature_groups,
        )

    def get_history(self) -> list[dict[str, Any]]:
        """Return recent records (most recent last)."""
        return [asdict(entry) for entry in self._history]


def divergence_report(
    step: int,
    batch_index: int,
    losses: dict[str, float],
    config: dict[str, Any],
    history: list[dict[str, Any]],
) -> dict[str, Any]:
    return {
        "step": step,
        "batch_index": batch_index,
        "losses": {k: float(v) for k, v in losses.items()},
        "config": config,
        "recent_alignment": history,
    }


def write_divergence_dump(path: str | Path, report: dict[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(report, fh, sort_keys=False)
    except OSError as err:
        _LOGGER.error("Could not write divergence dump %s: %s", path, err)
        raise DatasetIOError(f"Could not write {path}: {err}") from err
    return path
