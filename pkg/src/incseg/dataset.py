"""Annotated volumes, 2D slicing, class registry and scenario partitioning.

Volumes are stored one directory each::

    <vol_dir>/header.json      id, shape, spacing, contrast, classes
    <vol_dir>/image.f32        little-endian float32, C order (H, W, D)
    <vol_dir>/mask_<cls>.u8    uint8 {0,1}, same layout
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROLES = ("D_init", "D_exemplar", "D_inc", "validation", "test")
CONTRASTS = ("A", "B")
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    volume_id: str
    contrast_profile: str = "A"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DatasetError(f"volume {self.volume_id}: expected 3D voxels, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise DatasetError(f"volume {self.volume_id}: non-finite voxel values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DatasetError(f"volume {self.volume_id}: spacing must be 3 positive values, got {self.spacing}")
        if self.contrast_profile not in CONTRASTS:
            raise DatasetError(f"volume {self.volume_id}: unknown contrast {self.contrast_profile!r}")


@dataclass
class AnnotationSet:
    masks: dict[str, np.ndarray]
    annotated_classes: frozenset[str] = None

    def __post_init__(self):
        self.masks = {k: np.asarray(v, dtype=np.uint8) for k, v in self.masks.items()}
        if self.annotated_classes is None:
            self.annotated_classes = frozenset(self.masks)
        self.annotated_classes = frozenset(self.annotated_classes)
        if set(self.masks) != set(self.annotated_classes):
            raise DatasetError("masks must cover exactly the annotated classes")
        for k, m in self.masks.items():
            if m.size and m.max() > 1:
                raise DatasetError(f"mask {k!r} is not binary")

    def restricted(self, classes: Iterable[str]) -> AnnotationSet:
        """Keep only the given classes (annotation hiding)."""
        keep = set(classes) & self.annotated_classes
        return AnnotationSet({k: self.masks[k] for k in keep}, frozenset(keep))


@dataclass
class ImageSample:
    image: np.ndarray
    masks: dict[str, np.ndarray]
    annotated_classes: frozenset[str]
    provenance: tuple[str, int]

    def __post_init__(self):
        for k, m in self.masks.items():
            if m.shape != self.image.shape:
                raise DatasetError(f"{self.provenance}: mask {k!r} shape {m.shape} != image {self.image.shape}")

    @property
    def key(self) -> str:
        return f"{self.provenance[0]}/{self.provenance[1]:04d}"

    def has_foreground(self, class_id: str) -> bool:
        return class_id in self.annotated_classes and bool(self.masks[class_id].any())


@dataclass
class ClassEntry:
    class_id: str
    name: str
    introduced_at_step: int


@dataclass
class ClassRegistry:
    entries: list[ClassEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate class ids in registry: {ids}")
        steps = [e.introduced_at_step for e in self.entries]
        if any(s < 0 for s in steps) or steps != sorted(steps):
            raise DatasetError("introduced_at_step must be non-negative and non-decreasing")

    @property
    def class_ids(self) -> list[str]:
        return [e.class_id for e in self.entries]

    def classes_at(self, step: int) -> list[str]:
        return [e.class_id for e in self.entries if e.introduced_at_step == step]

    def classes_before(self, step: int) -> list[str]:
        return [e.class_id for e in self.entries if e.introduced_at_step < step]

    def add(self, class_id: str, name: str | None = None, step: int | None = None) -> ClassRegistry:
        last = self.entries[-1].introduced_at_step if self.entries else 0
        entry = ClassEntry(class_id, name or class_id, last + 1 if step is None else step)
        return ClassRegistry(self.entries + [entry])

    def __contains__(self, class_id) -> bool:
        return class_id in self.class_ids

    def to_list(self) -> list[dict]:
        return [vars(e).copy() for e in self.entries]

    @classmethod
    def from_list(cls, rows: Sequence[dict]) -> ClassRegistry:
        return cls([ClassEntry(r["class_id"], r["name"], int(r["introduced_at_step"])) for r in rows])


@dataclass
class VolumeInfo:
    volume_id: str
    spacing: tuple[float, float, float]
    contrast_profile: str
    shape: tuple[int, int, int]
    annotated_classes: frozenset[str]


@dataclass
class LabeledDataset:
    samples: list[ImageSample]
    registry: ClassRegistry
    role: str
    volumes: dict[str, VolumeInfo] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise DatasetError(f"unknown dataset role {self.role!r}")
        known = set(self.registry.class_ids)
        seen = set()
        for s in self.samples:
            unknown = set(s.annotated_classes) - known
            if unknown:
                raise DatasetError(f"{s.provenance}: classes {sorted(unknown)} not in registry")
            if s.provenance in seen:
                raise DatasetError(f"duplicate provenance {s.provenance}")
            seen.add(s.provenance)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_key(self) -> dict[str, ImageSample]:
        return {s.key: s for s in self.samples}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in sorted(self.samples, key=lambda s: s.provenance):
            h.update(s.key.encode())
            h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            for c in sorted(s.annotated_classes):
                h.update(c.encode())
                h.update(np.ascontiguousarray(s.masks[c], dtype=np.uint8).tobytes())
        return h.hexdigest()

    def union(self, other: LabeledDataset, role: str | None = None) -> LabeledDataset:
        return LabeledDataset(
            self.samples + other.samples,
            self.registry if len(self.registry.entries) >= len(other.registry.entries) else other.registry,
            role or self.role,
            {**self.volumes, **other.volumes},
        )


def slice_volume(volume: Volume, annotations: AnnotationSet, axis: int = 2) -> list[ImageSample]:
    """Cut a volume into 2D samples along ``axis`` (default: depth)."""
    for k, m in annotations.masks.items():
        if m.shape != volume.voxels.shape:
            raise DatasetError(
                f"volume {volume.volume_id}: mask {k!r} shape {m.shape} does not match voxels {volume.voxels.shape}"
            )
    samples = []
    for idx in range(volume.voxels.shape[axis]):
        image = np.ascontiguousarray(np.take(volume.voxels, idx, axis=axis))
        masks = {k: np.ascontiguousarray(np.take(m, idx, axis=axis)) for k, m in annotations.masks.items()}
        samples.append(ImageSample(image, masks, annotations.annotated_classes, (volume.volume_id, idx)))
    return samples


def restack(samples: Sequence[ImageSample], axis: int = 2) -> np.ndarray:
    ordered = sorted(samples, key=lambda s: s.provenance[1])
    return np.stack([s.image for s in ordered], axis=axis)


def restack_masks(samples: Sequence[ImageSample], class_id: str, axis: int = 2) -> np.ndarray:
    ordered = sorted(samples, key=lambda s: s.provenance[1])
    return np.stack([s.masks[class_id] for s in ordered], axis=axis)


@dataclass
class ScenarioConfig:
    """Volume-level partition of one incremental experiment.

    ``eval_contrast`` optionally maps a class to the contrast tag of the test
    volumes it is scored on (a class is only judged on the image domain it was
    trained on).
    """

    name: str
    init_ids: list[str]
    inc_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    init_classes: list[str]
    inc_classes: list[str]
    eval_contrast: dict[str, str] = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.init_ids), len(self.inc_ids), len(self.val_ids), len(self.test_ids)

    def registry(self) -> ClassRegistry:
        entries = [ClassEntry(c, c, 0) for c in self.init_classes]
        entries += [ClassEntry(c, c, 1) for c in self.inc_classes]
        return ClassRegistry(entries)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "init_ids": list(self.init_ids),
            "inc_ids": list(self.inc_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
            "init_classes": list(self.init_classes),
            "inc_classes": list(self.inc_classes),
            "eval_contrast": dict(self.eval_contrast),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def _info(vol: Volume, ann: AnnotationSet) -> VolumeInfo:
    return VolumeInfo(vol.volume_id, vol.spacing, vol.contrast_profile, vol.voxels.shape, ann.annotated_classes)


def build_scenario(
    volumes: Sequence[tuple[Volume, AnnotationSet]], scenario: ScenarioConfig
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset, LabeledDataset]:
    """Split annotated volumes into (D_init, D_inc, validation, test) slice datasets.

    D_init only sees the initial classes and D_inc only the incremental ones,
    emulating separate annotation studies; validation and test keep everything.
    """
    needed = sum(scenario.sizes)
    if len(volumes) < needed:
        raise DatasetError(f"scenario {scenario.name!r} needs {needed} volumes, got {len(volumes)}")
    parts = [scenario.init_ids, scenario.inc_ids, scenario.val_ids, scenario.test_ids]
    flat = [v for p in parts for v in p]
    if len(set(flat)) != len(flat):
        raise DatasetError(f"scenario {scenario.name!r}: a volume id is assigned to more than one partition")
    by_id = {vol.volume_id: (vol, ann) for vol, ann in volumes}
    missing = [v for v in flat if v not in by_id]
    if missing:
        raise DatasetError(f"scenario {scenario.name!r}: unknown volume ids {missing}")

    registry = scenario.registry()
    all_classes = registry.class_ids

    def make(ids, classes, role):
        samples, infos = [], {}
        for vid in ids:
            vol, ann = by_id[vid]
            absent = [c for c in classes if c not in ann.annotated_classes]
            if role in ("D_init", "D_inc") and absent:
                raise DatasetError(f"volume {vid} assigned to {role} lacks annotations for {absent}")
            visible = ann.restricted(classes)
            samples.extend(slice_volume(vol, visible))
            infos[vid] = _info(vol, visible)
        return LabeledDataset(samples, registry, role, infos)

    return (
        make(scenario.init_ids, scenario.init_classes, "D_init"),
        make(scenario.inc_ids, scenario.inc_classes, "D_inc"),
        make(scenario.val_ids, all_classes, "validation"),
        make(scenario.test_ids, all_classes, "test"),
    )


# -- on-disk format ---------------------------------------------------------


def volume_hash(volume: Volume, annotations: AnnotationSet) -> str:
    h = hashlib.sha256()
    h.update(volume.volume_id.encode())
    h.update(np.asarray(volume.spacing, dtype="<f8").tobytes())
    h.update(volume.contrast_profile.encode())
    h.update(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())
    for c in sorted(annotations.annotated_classes):
        h.update(c.encode())
        h.update(np.ascontiguousarray(annotations.masks[c], dtype=np.uint8).tobytes())
    return h.hexdigest()


def save_volume(directory: str | Path, volume: Volume, annotations: AnnotationSet) -> str:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "volume_id": volume.volume_id,
        "shape": list(volume.voxels.shape),
        "spacing": list(volume.spacing),
        "contrast_profile": volume.contrast_profile,
        "classes": sorted(annotations.annotated_classes),
        "sha256": volume_hash(volume, annotations),
    }
    np.ascontiguousarray(volume.voxels, dtype="<f4").tofile(d / "image.f32")
    for c in header["classes"]:
        np.ascontiguousarray(annotations.masks[c], dtype=np.uint8).tofile(d / f"mask_{c}.u8")
    (d / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    return header["sha256"]


def load_volume(directory: str | Path) -> tuple[Volume, AnnotationSet]:
    d = Path(directory)
    try:
        header = json.loads((d / "header.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no volume header in {d}") from exc
    shape = tuple(header["shape"])
    n = int(np.prod(shape))

    def read(path, dtype):
        arr = np.fromfile(path, dtype=dtype)
        if arr.size != n:
            raise DatasetError(f"{path}: expected {n} values, found {arr.size}")
        return arr.reshape(shape)

    voxels = read(d / "image.f32", "<f4").astype(np.float32)
    masks = {c: read(d / f"mask_{c}.u8", np.uint8) for c in header["classes"]}
    vol = Volume(voxels, tuple(header["spacing"]), header["volume_id"], header["contrast_profile"])
    return vol, AnnotationSet(masks, frozenset(header["classes"]))


def load_volumes(root: str | Path) -> list[tuple[Volume, AnnotationSet]]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/header.json"))
    if not dirs:
        raise DatasetError(f"no volumes under {root}")
    return [load_volume(p) for p in dirs]
