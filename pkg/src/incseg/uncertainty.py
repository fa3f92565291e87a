"""Monte-Carlo dropout inference and per-class certainty ranking."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import ImageSample, LabeledDataset
from .network import SegmentationNetwork

LN2 = float(np.log(2.0))


class UncertaintyError(ValueError):
    pass


@dataclass
class McPrediction:
    mean: dict[str, np.ndarray]          # class -> (2, H, W) averaged probabilities
    uncertainty: dict[str, np.ndarray]   # class -> (H, W), non-negative
    t_mc: int
    measure: str = "entropy"


@dataclass
class CertaintySet:
    class_id: str
    capacity: int
    members: list[tuple[str, float]] = field(default_factory=list)  # (sample key, uncertainty), ascending

    @property
    def keys(self) -> list[str]:
        return [k for k, _ in self.members]


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and e.g. a sample provenance."""
    text = ":".join(str(p) for p in (master_seed, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def binary_entropy(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q > 0, q * np.log(q), 0.0) + np.where(q < 1, (1 - q) * np.log1p(-q), 0.0))
    return np.maximum(h, 0.0)


def mc_inference(
    net: SegmentationNetwork, image, t_mc: int = 29, rng_seed: int = 0, measure: str = "entropy"
) -> McPrediction:
    """Run ``t_mc`` dropout-active passes (eval batch-norm) and summarise them.

    All passes go through the network as one batch; the dropout masks come
    from a generator seeded with ``rng_seed`` only, so results do not depend
    on scheduling.
    """
    if net.config.dropout_rate <= 0:
        raise UncertaintyError("MC inference needs a network with dropout_rate > 0")
    if t_mc < 2:
        raise UncertaintyError("t_mc must be >= 2")
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    x = x.expand(t_mc, *x.shape[-2:]).contiguous()
    g = torch.Generator().manual_seed(int(rng_seed))
    with torch.no_grad():
        probs, _ = net.predict(x, mode="mc", generator=g)
    mean, unc = {}, {}
    for cid, p in probs.items():
        p = p.double().numpy()
        m = p.mean(axis=0)
        mean[cid] = m
        if measure == "entropy":
            unc[cid] = binary_entropy(m[0])
        elif measure == "variance":
            unc[cid] = p[:, 0].var(axis=0)
        else:
            raise UncertaintyError(f"unknown uncertainty measure {measure!r}")
    return McPrediction(mean, unc, t_mc, measure)


def image_uncertainty(mc: McPrediction, class_id: str, mask: np.ndarray | None = None) -> float:
    """Mean per-pixel uncertainty of one head (optionally over ``mask`` pixels only)."""
    if class_id not in mc.uncertainty:
        raise UncertaintyError(f"no head {class_id!r} in MC prediction")
    u = mc.uncertainty[class_id]
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        return float(u[sel].mean()) if sel.any() else 0.0
    return float(u.mean())


def candidates_for(dataset: LabeledDataset | list[ImageSample], class_id: str) -> list[ImageSample]:
    """Slices annotated for ``class_id`` whose mask actually contains the structure."""
    return sorted((s for s in dataset if s.has_foreground(class_id)), key=lambda s: s.provenance)


def score_samples(
    net: SegmentationNetwork,
    samples: list[ImageSample],
    class_id: str,
    t_mc: int,
    seed: int,
    measure: str = "entropy",
    foreground_only: bool = False,
    workers: int = 1,
) -> list[tuple[str, float]]:
    def one(s: ImageSample):
        mc = mc_inference(net, s.image, t_mc, derive_seed(seed, *s.provenance), measure)
        mask = s.masks[class_id] if foreground_only else None
        return s.key, image_uncertainty(mc, class_id, mask)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, samples))
    return [one(s) for s in samples]


def most_certain_set(
    net: SegmentationNetwork,
    dataset: LabeledDataset | list[ImageSample],
    class_id: str,
    k_c: int = 50,
    t_mc: int = 29,
    seed: int = 0,
    measure: str = "entropy",
    foreground_only: bool = False,
    workers: int = 1,
) -> CertaintySet:
    """The ``k_c`` lowest-uncertainty slices that contain ``class_id``."""
    cands = candidates_for(dataset, class_id)
    if not cands:
        raise UncertaintyError(f"no annotated slice contains class {class_id!r}")
    scored = score_samples(net, cands, class_id, t_mc, seed, measure, foreground_only, workers)
    order = {s.key: i for i, s in enumerate(cands)}
    scored.sort(key=lambda kv: (kv[1], order[kv[0]]))
    return CertaintySet(class_id, k_c, scored[:k_c])
