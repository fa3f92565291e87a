"""Exemplar selection by greedy maximum coverage, and the exemplar store.

Two representations feed the same greedy facility-location selector:
spatially averaged abstraction-layer activations compared by cosine
similarity (AeiSeg), and a multi-layer content distance computed by a fixed
feature extractor (CoRiSeg).
"""
from __future__ import annotations

import hashlib
import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import ImageSample, LabeledDataset, load_volume, save_volume
from .losses import PredictionSnapshot
from .network import SegmentationNetwork
from .uncertainty import most_certain_set

AEISEG = "AeiSeg"
CORISEG = "CoRiSeg"
METHODS = (AEISEG, CORISEG, "none")


class ExemplarError(ValueError):
    pass


# -- representations ---------------------------------------------------------


@dataclass
class RepresentationVector:
    values: np.ndarray
    key: str


def _as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return x[None] if x.ndim == 2 else x


def abstraction_vector(net: SegmentationNetwork, image, key: str = "") -> RepresentationVector:
    with torch.no_grad():
        _, abstraction, _ = net.features(_as_batch(image), mode="eval")
    return RepresentationVector(abstraction[0].double().mean(dim=(1, 2)).numpy(), key)


def abstraction_vectors(net: SegmentationNetwork, images, batch: int = 32) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            _, abstraction, _ = net.features(_as_batch(np.stack(images[i:i + batch])), mode="eval")
            out.append(abstraction.double().mean(dim=(2, 3)).numpy())
    return np.concatenate(out)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ExemplarError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ExemplarError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ExemplarError("cosine similarity undefined for a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


# -- content networks ---------------------------------------------------------


class ContentNetwork(Protocol):
    """Fixed feature extractor: ``activations(images)`` returns one (N, F_l, h_l, w_l) array per layer."""

    layers: list[str]

    def activations(self, images: np.ndarray) -> list[np.ndarray]: ...


class IdentityContent:
    """Single 'layer' whose only filter is the image itself."""

    layers = ["identity"]

    def activations(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        return [x[:, None]]


class RandomConvContent:
    """Small fixed-seed convolutional pyramid (stand-in for a pretrained classifier)."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 1234, input_shape=None):
        g = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.convs = []
        cin = 1
        for cout in channels:
            bound = (6.0 / (cin * 9)) ** 0.5
            w = (torch.rand(cout, cin, 3, 3, generator=g, dtype=torch.float64) * 2 - 1) * bound
            self.convs.append(w)
            cin = cout
        self.layers = [f"conv{i}" for i in range(len(channels))]
        self.input_shape = input_shape

    def activations(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float64))
        if x.ndim == 2:
            x = x[None]
        if self.input_shape is not None and tuple(x.shape[-2:]) != tuple(self.input_shape):
            raise ExemplarError(f"content network expects {self.input_shape}, got {tuple(x.shape[-2:])}")
        # per-image standardisation keeps the fixed filters in a sane range
        x = x[:, None]
        x = (x - x.mean(dim=(2, 3), keepdim=True)) / (x.std(dim=(2, 3), keepdim=True) + 1e-6)
        out = []
        for i, w in enumerate(self.convs):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = F.relu(F.conv2d(x, w, padding=1))
            out.append(x.numpy())
        return out


class EncoderContent:
    """Uses a trained segmentation network's encoder activations ('self' mode)."""

    def __init__(self, net: SegmentationNetwork):
        self.net = net
        self.layers = [f"enc{i}_{j}" for i in range(net.config.levels) for j in range(2)]

    def activations(self, images):
        x = _as_batch(images)
        with torch.no_grad():
            _, _, acts = self.net.features(x, mode="eval")
        return [a.double().numpy() for a in acts]


def make_content_network(kind: str, net: SegmentationNetwork | None = None, seed: int = 1234) -> ContentNetwork:
    if kind == "random":
        return RandomConvContent(seed=seed)
    if kind == "identity":
        return IdentityContent()
    if kind == "self":
        if net is None:
            raise ExemplarError("'self' content network needs the segmentation network")
        return EncoderContent(net)
    raise ExemplarError(f"unknown content network {kind!r}")


def content_distance(cn: ContentNetwork, image_i, image_j) -> float:
    """Sum over layers of the mean squared activation difference."""
    a = np.asarray(image_i)
    b = np.asarray(image_j)
    if a.shape != b.shape:
        raise ExemplarError(f"image shapes differ: {a.shape} vs {b.shape}")
    acts = cn.activations(np.stack([a, b]))
    return float(sum(np.mean((r[0] - r[1]) ** 2) for r in acts))


def content_distance_matrix(
    cn: ContentNetwork, rows: Sequence[np.ndarray], cols: Sequence[np.ndarray], workers: int = 1
) -> np.ndarray:
    """All-pairs content distance, computed layer by layer from flattened features."""
    fr = [a.reshape(len(rows), -1) for a in cn.activations(np.stack(rows))]
    fc = [a.reshape(len(cols), -1) for a in cn.activations(np.stack(cols))]

    def one(i):
        return sum(((fc_l - fr_l[i]) ** 2).mean(axis=1) for fr_l, fc_l in zip(fr, fc))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.stack(list(pool.map(one, range(len(rows)))))
    return np.stack([one(i) for i in range(len(rows))])


# -- greedy maximum coverage ----------------------------------------------------


@dataclass
class CoverageResult:
    selected: list
    gains: list[float]
    objective: float
    objectives: list[float]


def coverage_objective(affinity: np.ndarray, chosen: Sequence[int], threshold: float | None = None) -> float:
    """Sum over universe columns of the best affinity to any chosen row."""
    if not len(chosen):
        return 0.0
    sub = affinity[list(chosen)]
    if threshold is not None:
        return float((sub >= threshold).any(axis=0).sum())
    return float(sub.max(axis=0).sum())


def greedy_max_coverage(
    candidates: Sequence[Hashable],
    universe: Sequence[Hashable],
    k_r: int,
    affinity: Callable | np.ndarray,
    threshold: float | None = None,
) -> CoverageResult:
    """Greedy facility location over ``universe``.

    ``affinity`` is either a callable ``(cand, item) -> float`` or a
    precomputed (len(candidates), len(universe)) matrix. Ties go to the
    smallest candidate key. With ``threshold`` set, an item counts as covered
    once some chosen candidate reaches it (classic set cover variant).
    """
    if not len(candidates):
        raise ExemplarError("no candidates to select from")
    if k_r < 0:
        raise ExemplarError("k_r must be non-negative")
    if callable(affinity):
        try:
            A = np.array([[float(affinity(c, s)) for s in universe] for c in candidates], dtype=np.float64)
        except Exception as exc:
            raise ExemplarError(f"affinity evaluation failed: {exc}") from exc
    else:
        A = np.asarray(affinity, dtype=np.float64)
        if A.shape != (len(candidates), len(universe)):
            raise ExemplarError(f"affinity matrix shape {A.shape} != {(len(candidates), len(universe))}")
    if not np.all(np.isfinite(A)):
        raise ExemplarError("affinity contains non-finite values")
    if threshold is not None:
        A = (A >= threshold).astype(np.float64)

    rank = np.argsort(np.array([str(c) for c in candidates], dtype=object), kind="stable")
    # Baseline below every candidate: gains stay >= 0 and the first pick maximises the plain column sum.
    current = A.min(axis=0) if len(A) else np.zeros(len(universe))
    if threshold is not None:
        current = np.zeros(len(universe))
    available = np.ones(len(candidates), dtype=bool)
    chosen, gains, objectives = [], [], []
    for _ in range(min(k_r, len(candidates))):
        g = np.maximum(A - current, 0.0).sum(axis=1)
        g_ranked = np.where(available[rank], g[rank], -np.inf)
        best = int(rank[int(np.argmax(g_ranked))])
        chosen.append(best)
        gains.append(float(g[best]))
        available[best] = False
        current = np.maximum(current, A[best])
        objectives.append(coverage_objective(A, chosen))
    return CoverageResult(
        [candidates[i] for i in chosen], gains, objectives[-1] if objectives else 0.0, objectives
    )


# -- selection pipelines ------------------------------------------------------------


@dataclass
class Selection:
    class_id: str
    method: str
    keys: list[str]
    certain_keys: list[str]
    gains: list[float]
    objective: float


def _universe(dataset) -> list[ImageSample]:
    return sorted(dataset, key=lambda s: s.provenance)


def select_exemplars_aeiseg(
    net: SegmentationNetwork,
    dataset: LabeledDataset,
    class_id: str,
    k_c: int = 50,
    k_r: int = 30,
    t_mc: int = 29,
    seed: int = 0,
    workers: int = 1,
    threshold: float | None = None,
    **mc_kwargs,
) -> Selection:
    certain = most_certain_set(net, dataset, class_id, k_c, t_mc, seed, workers=workers, **mc_kwargs)
    by_key = {s.key: s for s in dataset}
    universe = _universe(dataset)
    cand = [by_key[k] for k in certain.keys]
    vc = abstraction_vectors(net, [s.image for s in cand])
    vu = abstraction_vectors(net, [s.image for s in universe])
    res = greedy_max_coverage([s.key for s in cand], [s.key for s in universe], k_r, cosine_matrix(vc, vu), threshold)
    return Selection(class_id, AEISEG, res.selected, certain.keys, res.gains, res.objective)


def select_exemplars_coriseg(
    net: SegmentationNetwork,
    content_net: ContentNetwork,
    dataset: LabeledDataset,
    class_id: str,
    k_c: int = 50,
    k_r: int = 30,
    t_mc: int = 29,
    seed: int = 0,
    workers: int = 1,
    threshold: float | None = None,
    cache: AffinityCache | None = None,
    cache_key: str | None = None,
    **mc_kwargs,
) -> Selection:
    certain = most_certain_set(net, dataset, class_id, k_c, t_mc, seed, workers=workers, **mc_kwargs)
    universe = _universe(dataset)
    ukeys = [s.key for s in universe]
    full = None
    if cache is not None and cache_key is not None:
        full = cache.get(cache_key, ukeys)
    if full is None:
        imgs = [s.image for s in universe]
        full = content_distance_matrix(content_net, imgs, imgs, workers)
        if cache is not None and cache_key is not None:
            cache.put(cache_key, ukeys, full)
    pos = {k: i for i, k in enumerate(ukeys)}
    D = full[[pos[k] for k in certain.keys]]
    res = greedy_max_coverage(certain.keys, ukeys, k_r, -D, threshold)
    return Selection(class_id, CORISEG, res.selected, certain.keys, res.gains, res.objective)


class AffinityCache:
    """Square distance matrices on disk: a JSON header line followed by raw float64."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / f"{hashlib.sha256(key.encode()).hexdigest()[:24]}.mat"

    def get(self, key: str, keys: Sequence[str]) -> np.ndarray | None:
        p = self._path(key)
        if not p.exists():
            return None
        with open(p, "rb") as fh:
            header = json.loads(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f8")
        if header.get("key") != key or header.get("keys") != list(keys):
            return None
        return data.reshape(header["shape"]).copy()

    def put(self, key: str, keys: Sequence[str], matrix: np.ndarray):
        self.root.mkdir(parents=True, exist_ok=True)
        header = {"key": key, "keys": list(keys), "shape": list(matrix.shape), "dtype": "<f8"}
        with open(self._path(key), "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


# -- exemplar store --------------------------------------------------------------


@dataclass
class ExemplarRecord:
    sample: ImageSample
    rank: int
    snapshot: np.ndarray | None = None  # (n_old_classes, 2, H, W)


@dataclass
class ExemplarStore:
    method: str = "none"
    k_r: int = 30
    entries: dict[str, list[ExemplarRecord]] = field(default_factory=dict)
    snapshot_classes: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ExemplarError(f"unknown exemplar method {self.method!r}")

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def samples(self) -> list[ImageSample]:
        """Distinct exemplar samples across classes, in class then rank order."""
        seen, out = set(), []
        for cid in self.entries:
            for rec in self.entries[cid]:
                if rec.sample.key not in seen:
                    seen.add(rec.sample.key)
                    out.append(rec.sample)
        return out

    def keys(self, class_id: str | None = None) -> list[str]:
        if class_id is not None:
            return [r.sample.key for r in self.entries.get(class_id, [])]
        return [s.key for s in self.samples()]

    def snapshot(self) -> PredictionSnapshot:
        snap = PredictionSnapshot(list(self.snapshot_classes))
        for recs in self.entries.values():
            for r in recs:
                if r.snapshot is not None:
                    snap.maps[r.sample.key] = r.snapshot
        return snap

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps([self.method, self.k_r, self.snapshot_classes]).encode())
        for cid in sorted(self.entries):
            for r in self.entries[cid]:
                h.update(f"{cid}:{r.rank}:{r.sample.key}".encode())
                h.update(np.ascontiguousarray(r.sample.image, dtype="<f4").tobytes())
                if r.snapshot is not None:
                    h.update(np.ascontiguousarray(r.snapshot, dtype="<f4").tobytes())
        return h.hexdigest()


def store_exemplars(
    store: ExemplarStore,
    class_id: str,
    exemplars: Sequence[ImageSample],
    snapshots: PredictionSnapshot | None,
) -> ExemplarStore:
    """Add ``exemplars`` (already in selection order) for ``class_id``."""
    if len(exemplars) > store.k_r:
        raise ExemplarError(f"{len(exemplars)} exemplars exceed capacity k_r={store.k_r}")
    records = []
    for rank, s in enumerate(exemplars):
        snap = None
        if snapshots is not None:
            snap = snapshots.get(s.key)
            if not store.snapshot_classes:
                store.snapshot_classes = list(snapshots.classes)
        records.append(ExemplarRecord(s, rank, snap))
    if snapshots is None and store.snapshot_classes:
        raise ExemplarError(f"snapshots missing for class {class_id!r}")
    store.entries[class_id] = records
    store.history.append({"op": "store", "class_id": class_id, "n": len(records)})
    return store


def trim(store: ExemplarStore, budget: int) -> ExemplarStore:
    """Keep the ``budget`` best-ranked exemplars per class. Irreversible."""
    if budget < 0:
        raise ExemplarError("budget must be non-negative")
    for cid, recs in store.entries.items():
        if len(recs) > budget:
            store.history.append(
                {"op": "trim", "class_id": cid, "from": len(recs), "to": budget, "irreversible": True}
            )
            store.entries[cid] = recs[:budget]
    store.k_r = min(store.k_r, budget)
    return store


def refresh_snapshots(store: ExemplarStore, snapshot: PredictionSnapshot) -> ExemplarStore:
    store.snapshot_classes = list(snapshot.classes)
    for recs in store.entries.values():
        for r in recs:
            r.snapshot = snapshot.get(r.sample.key)
    store.history.append({"op": "refresh_snapshots", "classes": list(snapshot.classes)})
    return store


def save_store(store: ExemplarStore, directory: str | Path) -> str:
    """Write the store: ``manifest.json`` plus dataset-format records per exemplar."""
    from .dataset import AnnotationSet, Volume

    d = Path(directory)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    classes = {}
    for cid, recs in store.entries.items():
        rows = []
        for r in recs:
            rec_dir = f"records/{cid}/{r.rank:04d}"
            vol = Volume(r.sample.image[:, :, None], (1.0, 1.0, 1.0), r.sample.key.replace("/", "_"))
            ann = AnnotationSet({c: m[:, :, None] for c, m in r.sample.masks.items()}, r.sample.annotated_classes)
            save_volume(d / rec_dir, vol, ann)
            if r.snapshot is not None:
                np.ascontiguousarray(r.snapshot, dtype="<f4").tofile(d / rec_dir / "snapshot.f32")
            rows.append({
                "rank": r.rank,
                "key": r.sample.key,
                "provenance": list(r.sample.provenance),
                "dir": rec_dir,
                "snapshot_shape": list(r.snapshot.shape) if r.snapshot is not None else None,
            })
        classes[cid] = rows
    manifest = {
        "format_version": 1,
        "method": store.method,
        "k_r": store.k_r,
        "snapshot_classes": store.snapshot_classes,
        "classes": classes,
        "history": store.history,
        "meta": store.meta,
        "sha256": store.content_hash(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest["sha256"]


def load_store(directory: str | Path) -> ExemplarStore:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ExemplarError(f"no exemplar store at {d}") from exc
    store = ExemplarStore(manifest["method"], manifest["k_r"], {}, manifest["snapshot_classes"],
                          manifest["history"], manifest.get("meta", {}))
    for cid, rows in manifest["classes"].items():
        recs = []
        for row in rows:
            vol, ann = load_volume(d / row["dir"])
            sample = ImageSample(
                vol.voxels[:, :, 0].copy(),
                {c: m[:, :, 0].copy() for c, m in ann.masks.items()},
                ann.annotated_classes,
                (row["provenance"][0], int(row["provenance"][1])),
            )
            snap = None
            if row["snapshot_shape"] is not None:
                snap = np.fromfile(d / row["dir"] / "snapshot.f32", dtype="<f4").reshape(row["snapshot_shape"])
            recs.append(ExemplarRecord(sample, row["rank"], snap))
        store.entries[cid] = recs
    if store.content_hash() != manifest["sha256"]:
        raise ExemplarError(f"exemplar store {d} failed its integrity check")
    return store
