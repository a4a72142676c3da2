"""Shared domain types: volumes, slices, binary masks, class splits, run config."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np


class Modality(enum.Enum):
    MR = "MR"
    CT = "CT"
    SYNTHETIC = "SYNTHETIC"


@dataclass(frozen=True)
class Volume:
    """A 3D grayscale scan with an aligned multi-class label volume.

    ``voxels`` is (D, H, W) float32 in [0, 1]; ``labels`` is (D, H, W) uint8
    with 0 reserved for background.
    """

    voxels: np.ndarray
    labels: np.ndarray
    modality: Modality
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.voxels.shape != self.labels.shape:
            raise ValueError(
                f"voxels {self.voxels.shape} and labels {self.labels.shape} differ"
            )
        if self.voxels.ndim != 3:
            raise ValueError(f"expected 3D volume, got shape {self.voxels.shape}")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0,1]: min={lo} max={hi}")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def foreground_classes(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.labels) if c != 0)

    def slice(self, index: int) -> "SliceSample":
        return SliceSample(
            image=self.voxels[index],
            multilabel=self.labels[index],
            source_volume=self.id,
            slice_index=index,
        )


@dataclass(frozen=True)
class SliceSample:
    """One 2D image/label pair cut from a volume."""

    image: np.ndarray
    multilabel: np.ndarray
    source_volume: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.image.shape != self.multilabel.shape:
            raise ValueError(
                f"image {self.image.shape} and labels {self.multilabel.shape} differ"
            )

    def foreground_classes(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.multilabel) if c != 0)


@dataclass(frozen=True)
class BinaryMask:
    """A single-class indicator mask with values in {0, 1}."""

    mask: np.ndarray
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"mask values must be binary, found {vals}")


@dataclass(frozen=True)
class ClassSets:
    """Disjoint train/test foreground class ids."""

    train_classes: frozenset[int]
    test_classes: frozenset[int]


def binarize_labels(sample: SliceSample) -> list[BinaryMask]:
    """Split a multi-class slice into one indicator mask per foreground class.

    Returns masks in ascending class-id order; an all-background slice yields
    an empty list and the caller decides whether to skip it.
    """
    masks = []
    for cid in sorted(sample.foreground_classes()):
        masks.append(
            BinaryMask(mask=(sample.multilabel == cid).astype(np.uint8), class_id=cid)
        )
    return masks


def reconstruct_labels(masks: list[BinaryMask], shape: tuple[int, int]) -> np.ndarray:
    """Rebuild a multi-class label map from disjoint binary masks."""
    out = np.zeros(shape, dtype=np.uint8)
    for m in masks:
        overlap = (out != 0) & (m.mask != 0)
        if overlap.any():
            raise ValueError(f"mask for class {m.class_id} overlaps earlier classes")
        out[m.mask != 0] = m.class_id
    return out


def validate_split(classes: ClassSets) -> None:
    """Raise ValueError unless the train/test class sets are nonempty and disjoint."""
    if not classes.train_classes:
        raise ValueError("empty train class set")
    if not classes.test_classes:
        raise ValueError("empty test class set")
    if 0 in classes.train_classes or 0 in classes.test_classes:
        raise ValueError("background id 0 is not a foreground class")
    shared = classes.train_classes & classes.test_classes
    if shared:
        listing = ", ".join(str(c) for c in sorted(shared))
        noun = "class" if len(shared) == 1 else "classes"
        raise ValueError(f"{noun} {listing} in both splits")


@dataclass(frozen=True)
class RunConfig:
    """Training/evaluation knobs, serializable as flat ``key = value`` text."""

    epochs: int = 10
    episodes_per_epoch: int = 25
    iterations_per_episode: int = 1
    learning_rate: float = 1e-2
    momentum: float = 0.0
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    partition_factors: tuple[int, int] = (4, 4)
    de_loss_weight: float = 1.0
    de_raw_distance: bool = False
    gc_scales: frozenset[int] = frozenset({1, 2})
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "iterations_per_episode"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")
        if any(v <= 0 for v in self.image_size + self.channel_widths + self.partition_factors):
            raise ValueError("sizes, widths and partition factors must be positive")
        valid_scales = range(len(self.channel_widths))
        bad = [s for s in self.gc_scales if s not in valid_scales]
        if bad:
            raise ValueError(f"gc_scales {sorted(bad)} outside valid scale indices")


_INT_TUPLE_FIELDS = {"image_size", "channel_widths", "partition_factors"}


def _format_value(name: str, value) -> str:
    if name == "gc_scales":
        return ",".join(str(v) for v in sorted(value))
    if name in _INT_TUPLE_FIELDS:
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str):
    text = text.strip()
    if name == "gc_scales":
        return frozenset(int(v) for v in text.split(",") if v.strip())
    if name in _INT_TUPLE_FIELDS:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if name in ("de_raw_distance",):
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false for {name}, got {text!r}")
        return text == "true"
    if name in ("learning_rate", "momentum", "de_loss_weight", "threshold"):
        return float(text)
    return int(text)


def config_to_text(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {_format_value(f.name, getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, val)
    return RunConfig(**values)


def save_config(config: RunConfig, path) -> None:
    from .ioutil import atomic_write_text

    atomic_write_text(path, config_to_text(config))


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())
