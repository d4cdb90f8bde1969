"""Test diagnostics functionality."""

import math

import pytest
import yaml

from celestial_uda.diagnostics import (
    HISTORY_SIZE,
    AlignmentRecord,
    DiagnosticsLog,
    divergence_report,
    write_divergence_dump,
)
from celestial_uda.exceptions import DatasetIOError


def record(step, skipped=False):
    return AlignmentRecord(
        step=step,
        batch_index=step % 3,
        instances={"source": 4, "target": 2},
        clusters={"source": 2, "target": 1},
        instance_skipped=skipped,
    )


def test_history_is_bounded():
    """Test only the most recent records are kept."""
    log = DiagnosticsLog(maxlen=3)
    for step in range(5):
        log.record(record(step))
    history = log.get_history()
    assert [h["step"] for h in history] == [2, 3, 4]
    assert history[-1]["instances"] == {"source": 4, "target": 2}


def test_default_history_size():
    log = DiagnosticsLog()
    for step in range(HISTORY_SIZE + 10):
        log.record(record(step))
    assert len(log.get_history()) == HISTORY_SIZE


def test_skipped_batches_counted_beyond_history():
    log = DiagnosticsLog(maxlen=2)
    for step in range(6):
        log.record(record(step, skipped=step % 2 == 0))
    assert log.skipped_instance_batches == 3


def test_divergence_report_shape():
    report = divergence_report(
        7, 1, {"L_total": float("nan"), "L_yolo": 2}, {"method": "inst_adv_pc"}, []
    )
    assert list(report) == ["step", "batch_index", "losses", "config", "recent_alignment"]
    assert report["losses"]["L_yolo"] == 2.0
    assert isinstance(report["losses"]["L_yolo"], float)


def test_dump_round_trip(tmp_path):
    log = DiagnosticsLog()
    log.record(record(0))
    report = divergence_report(
        1, 0, {"L_total": float("inf")}, {"method": "feat_adv_ptap"}, log.get_history()
    )
    path = write_divergence_dump(tmp_path / "nested" / "divergence.yaml", report)
    loaded = yaml.safe_load(path.read_text())
    assert math.isinf(loaded["losses"]["L_total"])
    assert loaded["recent_alignment"][0]["clusters"] == {"source": 2, "target": 1}
    assert loaded["config"]["method"] == "feat_adv_ptap"


def test_dump_write_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetIOError):
        write_divergence_dump(blocker / "divergence.yaml", divergence_report(0, 0, {}, {}, []))
