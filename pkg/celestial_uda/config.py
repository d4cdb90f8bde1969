"""Training configuration: schema, flat key = value files, method table."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    CONF_ATTENTION_KERNEL,
    CONF_BACKBONE_CHANNELS,
    CONF_BATCH_SIZE,
    CONF_CONF_THRESHOLD,
    CONF_CONTRASTIVE_RAW,
    CONF_DEVICE,
    CONF_EPOCHS,
    CONF_GRAD_CLIP,
    CONF_GRL_LAMBDA,
    CONF_INPUT_SIZE,
    CONF_KEEP_FRACTION,
    CONF_KMEANS_MAX_ITER,
    CONF_LAMBDA_IMG,
    CONF_LAMBDA_INST,
    CONF_LAMBDA_PC,
    CONF_LEARNING_RATE,
    CONF_MARGIN,
    CONF_MAX_INSTANCES,
    CONF_MERGE_THRESHOLD,
    CONF_METHOD,
    CONF_MOMENTUM,
    CONF_NECK_CHANNELS,
    CONF_NMS_IOU,
    CONF_PC_NORMALIZE,
    CONF_POOL_SIZE,
    CONF_SEED,
    CONF_STRIDES,
    CONF_WEIGHT_DECAY,
    DEFAULT_ATTENTION_KERNEL,
    DEFAULT_BACKBONE_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_DEVICE,
    DEFAULT_EPOCHS,
    DEFAULT_GRAD_CLIP,
    DEFAULT_GRL_LAMBDA,
    DEFAULT_INPUT_SIZE,
    DEFAULT_KEEP_FRACTION,
    DEFAULT_KMEANS_MAX_ITER,
    DEFAULT_LAMBDA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MARGIN,
    DEFAULT_MAX_INSTANCES,
    DEFAULT_MERGE_THRESHOLD,
    DEFAULT_MOMENTUM,
    DEFAULT_NECK_CHANNELS,
    DEFAULT_NMS_IOU,
    DEFAULT_POOL_SIZE,
    DEFAULT_SEED,
    DEFAULT_STRIDES,
    DEFAULT_WEIGHT_DECAY,
    DOMAIN_SOURCE,
    DOMAIN_TARGET,
    METHOD_FEAT_ADV_PC_KMEANS,
    METHOD_FEAT_ADV_PTAP,
    METHOD_FEAT_ADV_YOCOV1,
    METHOD_INST_ADV_PC,
    METHOD_INST_ADV_PC_SFF,
    METHOD_INST_ADV_VISGA,
    METHOD_INST_CON_PC,
    METHOD_INST_CON_PC_SFF,
    METHOD_INST_CON_VISGA,
    METHOD_SOURCE_ONLY,
    METHOD_TARGET_ONLY,
)
from .detector import DetectorConfig
from .exceptions import ConfigError
from .feature_vsa import FEATURE_MODE_HIERARCHICAL, FEATURE_MODE_KMEANS, FEATURE_MODE_PTAP
from .instance_vsa import INSTANCE_MODE_ADVERSARIAL, INSTANCE_MODE_CONTRASTIVE


@dataclass(frozen=True)
class MethodSpec:
    """Loss composition of one training method."""

    supervised_domain: str = DOMAIN_SOURCE
    global_align: bool = False
    pc: bool = False
    instance: str | None = None
    sff: bool = False
    feature: str | None = None

    @property
    def uses_target(self) -> bool:
        return self.global_align or self.pc or bool(self.instance) or bool(self.feature)


_ADV = INSTANCE_MODE_ADVERSARIAL
_CON = INSTANCE_MODE_CONTRASTIVE

METHODS: dict[str, MethodSpec] = {
    METHOD_SOURCE_ONLY: MethodSpec(),
    METHOD_TARGET_ONLY: MethodSpec(supervised_domain=DOMAIN_TARGET),
    METHOD_INST_ADV_VISGA: MethodSpec(global_align=True, instance=_ADV),
    METHOD_INST_ADV_PC: MethodSpec(global_align=True, pc=True, instance=_ADV),
    METHOD_INST_ADV_PC_SFF: MethodSpec(
        global_align=True, pc=True, instance=_ADV, sff=True
    ),
    METHOD_INST_CON_VISGA: MethodSpec(global_align=True, instance=_CON),
    METHOD_INST_CON_PC: MethodSpec(global_align=True, pc=True, instance=_CON),
    METHOD_INST_CON_PC_SFF: MethodSpec(
        global_align=True, pc=True, instance=_CON, sff=True
    ),
    METHOD_FEAT_ADV_YOCOV1: MethodSpec(
        global_align=True, feature=FEATURE_MODE_HIERARCHICAL
    ),
    METHOD_FEAT_ADV_PC_KMEANS: MethodSpec(
        global_align=True, pc=True, feature=FEATURE_MODE_KMEANS
    ),
    METHOD_FEAT_ADV_PTAP: MethodSpec(global_align=True, feature=FEATURE_MODE_PTAP),
}


def _int_triple(value: Any) -> tuple[int, int, int]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    try:
        triple = tuple(int(v) for v in value)
    except (TypeError, ValueError) as err:
        raise vol.Invalid(f"expected three integers, got {value!r}") from err
    if len(triple) != 3 or min(triple) < 1:
        raise vol.Invalid(f"expected three positive integers, got {value!r}")
    return triple  # type: ignore[return-value]


_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_UNIT = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))

TRAIN_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_METHOD, default=METHOD_SOURCE_ONLY): vol.In(list(METHODS)),
        vol.Optional(CONF_EPOCHS, default=DEFAULT_EPOCHS): _POSITIVE_INT,
        vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _POSITIVE_INT,
        vol.Optional(CONF_LEARNING_RATE, default=DEFAULT_LEARNING_RATE): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional(CONF_MOMENTUM, default=DEFAULT_MOMENTUM): _UNIT,
        vol.Optional(CONF_WEIGHT_DECAY, default=DEFAULT_WEIGHT_DECAY): _NON_NEGATIVE,
        vol.Optional(CONF_GRAD_CLIP, default=DEFAULT_GRAD_CLIP): _NON_NEGATIVE,
        vol.Optional(CONF_LAMBDA_IMG, default=DEFAULT_LAMBDA): _NON_NEGATIVE,
        vol.Optional(CONF_LAMBDA_INST, default=DEFAULT_LAMBDA): _NON_NEGATIVE,
        vol.Optional(CONF_LAMBDA_PC, default=DEFAULT_LAMBDA): _NON_NEGATIVE,
        vol.Optional(CONF_GRL_LAMBDA, default=DEFAULT_GRL_LAMBDA): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional(CONF_SEED, default=DEFAULT_SEED): vol.Coerce(int),
        vol.Optional(CONF_MERGE_THRESHOLD, default=DEFAULT_MERGE_THRESHOLD): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=2.0)
        ),
        vol.Optional(CONF_KEEP_FRACTION, default=DEFAULT_KEEP_FRACTION): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)
        ),
        vol.Optional(CONF_MARGIN, default=DEFAULT_MARGIN): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional(CONF_CONF_THRESHOLD, default=DEFAULT_CONF_THRESHOLD): _UNIT,
        vol.Optional(CONF_NMS_IOU, default=DEFAULT_NMS_IOU): _UNIT,
        vol.Optional(CONF_POOL_SIZE, default=DEFAULT_POOL_SIZE): _POSITIVE_INT,
        vol.Optional(CONF_MAX_INSTANCES, default=DEFAULT_MAX_INSTANCES): _POSITIVE_INT,
        vol.Optional(CONF_KMEANS_MAX_ITER, default=DEFAULT_KMEANS_MAX_ITER): _POSITIVE_INT,
        vol.Optional(CONF_PC_NORMALIZE, default=False): vol.Boolean(),
        vol.Optional(CONF_CONTRASTIVE_RAW, default=False): vol.Boolean(),
        vol.Optional(CONF_ATTENTION_KERNEL, default=DEFAULT_ATTENTION_KERNEL): vol.All(
            vol.Coerce(int), vol.Range(min=1)
        ),
        vol.Optional(CONF_INPUT_SIZE, default=DEFAULT_INPUT_SIZE): _POSITIVE_INT,
        vol.Optional(CONF_BACKBONE_CHANNELS, default=DEFAULT_BACKBONE_CHANNELS): _POSITIVE_INT,
        vol.Optional(CONF_NECK_CHANNELS, default=DEFAULT_NECK_CHANNELS): _int_triple,
        vol.Optional(CONF_STRIDES, default=DEFAULT_STRIDES): _int_triple,
        vol.Optional(CONF_DEVICE, default=DEFAULT_DEVICE): str,
    }
)


@dataclass(frozen=True)
class TrainConfig:
    method: str = METHOD_SOURCE_ONLY
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    grad_clip: float = DEFAULT_GRAD_CLIP
    lambda_img: float = DEFAULT_LAMBDA
    lambda_inst: float = DEFAULT_LAMBDA
    lambda_pc: float = DEFAULT_LAMBDA
    grl_lambda: float = DEFAULT_GRL_LAMBDA
    seed: int = DEFAULT_SEED
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD
    keep_fraction: float = DEFAULT_KEEP_FRACTION
    margin: float = DEFAULT_MARGIN
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    pool_size: int = DEFAULT_POOL_SIZE
    max_instances: int = DEFAULT_MAX_INSTANCES
    kmeans_max_iter: int = DEFAULT_KMEANS_MAX_ITER
    pc_normalize: bool = False
    contrastive_raw: bool = False
    attention_kernel: int = DEFAULT_ATTENTION_KERNEL
    input_size: int = DEFAULT_INPUT_SIZE
    backbone_channels: int = DEFAULT_BACKBONE_CHANNELS
    neck_channels: tuple[int, int, int] = DEFAULT_NECK_CHANNELS
    strides: tuple[int, int, int] = DEFAULT_STRIDES
    device: str = DEFAULT_DEVICE

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> TrainConfig:
        try:
            validated = TRAIN_CONFIG_SCHEMA(dict(data))
        except vol.Invalid as err:
            raise ConfigError(f"Invalid training config: {err}") from err
        if validated[CONF_ATTENTION_KERNEL] % 2 == 0:
            raise ConfigError(
                f"{CONF_ATTENTION_KERNEL} must be odd, got {validated[CONF_ATTENTION_KERNEL]}"
            )
        return cls(**validated)

    @property
    def method_spec(self) -> MethodSpec:
        return METHODS[self.method]

    def with_overrides(self, overrides: Mapping[str, Any]) -> TrainConfig:
        return TrainConfig.from_mapping({**self.to_dict(), **dict(overrides)})

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data[CONF_NECK_CHANNELS] = list(self.neck_channels)
        data[CONF_STRIDES] = list(self.strides)
        return data

    def fingerprint(self) -> str:
        """Short stable hash of every field except the device."""
        data = self.to_dict()
        data.pop(CONF_DEVICE)
        blob = json.dumps(data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def detector_config(self, class_count: int) -> DetectorConfig:
        try:
            return DetectorConfig(
                class_count=class_count,
                input_size=self.input_size,
                backbone_channels=self.backbone_channels,
                neck_channels=self.neck_channels,
                strides=self.strides,
            )
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from err


CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> TrainConfig:
    """Read a config file (optional) and apply overrides on top."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"Could not read config {path}: {err}") from err
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return TrainConfig.from_mapping(values)


def format_config(cfg: TrainConfig) -> str:
    """Render a config in the flat file format."""
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}\n")
    return "".join(lines)
