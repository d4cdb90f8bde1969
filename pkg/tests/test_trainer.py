"""Test the training harness across methods."""

import math

import numpy as np
import pytest
import torch
import yaml

from celestial_uda.config import METHODS, load_config
from celestial_uda.const import (
    CHECKPOINT_BEST,
    CHECKPOINT_LAST,
    DIAGNOSTICS_NAME,
    RECIPE_MINI_ASTEROID,
    SPLIT_SOURCE_TRAIN,
    SPLIT_TARGET_TEST,
    SPLIT_TARGET_TRAIN,
    TRAIN_LOG_NAME,
)
from celestial_uda.data import RECIPES, DatasetSplit, render, scene_spec
from celestial_uda.detector import BOX_CHANNELS, load_checkpoint
from celestial_uda.exceptions import ConfigError, TrainingDivergedError
from celestial_uda.trainer import (
    LOG_COLUMNS,
    UdaTrainer,
    images_to_tensor,
    read_train_log,
    train,
)

SIZE = 64
SMALL = {
    "input_size": SIZE,
    "backbone_channels": 8,
    "neck_channels": "8,8,8",
    "batch_size": 2,
    "epochs": 1,
}


def small_config(method, **overrides):
    return load_config(overrides={**SMALL, "method": method, **overrides})


def make_split(split, count, labeled=True, seed=3):
    recipe = RECIPES[RECIPE_MINI_ASTEROID]
    items = [render(scene_spec(recipe, seed, split, i), SIZE) for i in range(count)]
    if not labeled:
        for item in items:
            item.detections = []
            item.labeled = False
    return DatasetSplit(split, list(recipe.classes), items, labeled)


@pytest.fixture(scope="module")
def splits():
    return {
        "source": make_split(SPLIT_SOURCE_TRAIN, 4),
        "target": make_split(SPLIT_TARGET_TRAIN, 4),
        "test": make_split(SPLIT_TARGET_TEST, 2),
    }


def batch(split, start=0, size=2):
    items = split.items[start : start + size]
    return images_to_tensor(items), [item.detections for item in items]


def raise_head_biases(trainer, value=5.0):
    """Make every cell a confident detection so instance alignment has input."""
    with torch.no_grad():
        for head in trainer.detector.heads:
            head.bias[BOX_CHANNELS:] = value


class TestComputeLosses:
    """Loss composition per method."""

    def test_source_only_has_no_alignment(self, splits):
        trainer = UdaTrainer(small_config("source_only"), splits["source"].class_names)
        images, gt = batch(splits["source"])
        target, _ = batch(splits["target"])
        losses = trainer.compute_losses(images, gt, target)
        assert float(losses.img) == 0.0
        assert float(losses.inst) == 0.0
        assert float(losses.pc) == 0.0
        assert float(losses.total) == pytest.approx(float(losses.yolo))
        counters = trainer.counters
        assert counters.supervised == 1
        assert counters.target_forward == counters.img == counters.instance == 0

    def test_instance_method_produces_every_term(self, splits):
        trainer = UdaTrainer(small_config("inst_adv_pc_sff"), splits["source"].class_names)
        raise_head_biases(trainer)
        images, gt = batch(splits["source"])
        target, _ = batch(splits["target"])
        losses = trainer.compute_losses(images, gt, target)
        assert float(losses.img) > 0.0
        assert float(losses.pc) > 0.0
        assert float(losses.inst) > 0.0
        assert not losses.instance_skipped
        assert losses.record.instances == {"source": 16, "target": 16}
        assert trainer.counters.instance == 1

    def test_no_detections_skips_instance_term(self, splits):
        trainer = UdaTrainer(small_config("inst_con_pc"), splits["source"].class_names)
        raise_head_biases(trainer, -20.0)
        images, gt = batch(splits["source"])
        target, _ = batch(splits["target"])
        losses = trainer.compute_losses(images, gt, target)
        assert losses.instance_skipped
        assert float(losses.inst) == 0.0

    def test_alignment_needs_target_images(self, splits):
        trainer = UdaTrainer(small_config("inst_adv_visga"), splits["source"].class_names)
        images, gt = batch(splits["source"])
        with pytest.raises(ConfigError):
            trainer.compute_losses(images, gt)


class TestTrainStep:
    """Optimizer steps and logged rows."""

    def test_components_sum_to_total(self, splits):
        cfg = small_config("feat_adv_pc_kmeans", lambda_img=0.5, lambda_inst=2.0, lambda_pc=0.1)
        trainer = UdaTrainer(cfg, splits["source"].class_names)
        images, gt = batch(splits["source"])
        target, _ = batch(splits["target"])
        row = trainer.train_step(images, gt, target)
        expected = row["L_yolo"] + 0.5 * row["L_img"] + 2.0 * row["L_inst"] + 0.1 * row["L_pc"]
        assert row["L_total"] == pytest.approx(expected, abs=1e-5)
        assert row["step"] == 1.0
        assert set(row) == set(LOG_COLUMNS)

    def test_deterministic(self, splits):
        rows = []
        for _ in range(2):
            trainer = UdaTrainer(small_config("inst_adv_pc"), splits["source"].class_names)
            run = []
            for start in (0, 2):
                images, gt = batch(splits["source"], start)
                target, _ = batch(splits["target"], start)
                run.append(trainer.train_step(images, gt, target))
            rows.append(run)
        assert rows[0] == rows[1]

    def test_non_finite_loss_writes_dump(self, splits, tmp_path):
        trainer = UdaTrainer(small_config("inst_adv_visga"), splits["source"].class_names)
        images, gt = batch(splits["source"])
        target, _ = batch(splits["target"])
        trainer.train_step(images, gt, target)
        images[0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError) as err:
            trainer.train_step(images, gt, target, batch_index=3, dump_dir=tmp_path)
        assert err.value.step == 1
        assert err.value.batch_index == 3
        dump = yaml.safe_load((tmp_path / DIAGNOSTICS_NAME).read_text())
        assert dump["step"] == 1
        assert dump["batch_index"] == 3
        assert math.isnan(dump["losses"]["L_total"])
        assert dump["config"]["method"] == "inst_adv_visga"
        assert len(dump["recent_alignment"]) == 1


class TestFit:
    """Full runs over small splits."""

    @pytest.mark.parametrize("method", sorted(METHODS))
    def test_every_method_trains(self, method, splits, tmp_path):
        cfg = small_config(method, epochs=2)
        result = train(cfg, splits["source"], splits["target"], tmp_path)
        steps = 2 * 2
        assert (tmp_path / CHECKPOINT_LAST).exists()
        log = read_train_log(tmp_path / TRAIN_LOG_NAME)
        assert len(log) == steps
        assert [row["step"] for row in log] == [1.0, 2.0, 3.0, 4.0]
        assert all(math.isfinite(row["L_total"]) for row in log)
        spec = METHODS[method]
        counters = result.counters
        assert counters.supervised == steps
        assert counters.target_forward == (steps if spec.uses_target else 0)
        assert counters.img == (steps if spec.global_align else 0)
        assert counters.pc == (steps if spec.pc else 0)
        assert counters.instance == (steps if spec.instance else 0)
        assert counters.feature == (steps if spec.feature else 0)
        checkpoint = load_checkpoint(tmp_path / CHECKPOINT_LAST)
        assert checkpoint.metadata["method"] == method
        assert checkpoint.class_names == splits["source"].class_names

    def test_validation_keeps_best(self, splits, tmp_path):
        result = train(
            small_config("source_only", epochs=2), splits["source"], None, tmp_path, val=splits["test"]
        )
        assert result.best_checkpoint == tmp_path / CHECKPOINT_BEST
        assert result.best_checkpoint.exists()
        assert 0.0 <= result.best_map <= 1.0

    def test_target_only_needs_labels(self, splits, tmp_path):
        unlabeled = make_split(SPLIT_TARGET_TRAIN, 2, labeled=False)
        with pytest.raises(ConfigError):
            train(small_config("target_only"), splits["source"], unlabeled, tmp_path)

    def test_alignment_needs_target_split(self, splits, tmp_path):
        with pytest.raises(ConfigError):
            train(small_config("feat_adv_ptap"), splits["source"], None, tmp_path)

    def test_image_size_checked(self, splits, tmp_path):
        cfg = load_config(overrides={**SMALL, "input_size": 32})
        with pytest.raises(ConfigError):
            train(cfg, splits["source"], None, tmp_path)


def test_images_to_tensor_shape():
    items = make_split(SPLIT_SOURCE_TRAIN, 3).items
    tensor = images_to_tensor(items)
    assert tensor.shape == (3, 1, SIZE, SIZE)
    assert tensor.dtype == torch.float32
    assert np.array_equal(tensor[1, 0].numpy(), items[1].image)
