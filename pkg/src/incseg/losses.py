"""Supervised, distillation and combined incremental losses.

All per-head tensors are shaped (N, 2, H, W) with channel 0 = foreground and
channel 1 = that head's own background. Losses are normalised per pixel and
averaged over heads, so the alpha trade-off does not depend on image size or
on how many classes are involved.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

INC = "D_inc"
EXEMPLAR = "D_exemplar"


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise LossError("temperature must be positive")


@dataclass
class PredictionSnapshot:
    """Frozen old-network probabilities, keyed by sample key then class id."""

    classes: list[str]
    maps: dict[str, np.ndarray] = field(default_factory=dict)  # key -> (n_classes, 2, H, W)

    def __post_init__(self):
        for key, arr in self.maps.items():
            self._check(key, arr)

    def _check(self, key, arr):
        if arr.ndim != 4 or arr.shape[:2] != (len(self.classes), 2):
            raise LossError(f"snapshot {key}: expected ({len(self.classes)}, 2, H, W), got {arr.shape}")
        if not np.allclose(arr.sum(axis=1), 1.0, atol=1e-6):
            raise LossError(f"snapshot {key}: channels do not sum to 1")

    def add(self, key: str, arr: np.ndarray):
        self._check(key, arr)
        self.maps[key] = arr

    def get(self, key: str) -> np.ndarray:
        try:
            return self.maps[key]
        except KeyError:
            raise LossError(f"no snapshot for sample {key}") from None

    def batch(self, keys: Sequence[str], classes: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
        """Stack the maps of ``keys`` into per-class (N, 2, H, W) tensors."""
        classes = list(self.classes if classes is None else classes)
        missing = set(classes) - set(self.classes)
        if missing:
            raise LossError(f"snapshot lacks classes {sorted(missing)}")
        stacked = np.stack([self.get(k) for k in keys])
        return {c: torch.from_numpy(stacked[:, self.classes.index(c)]) for c in classes}

    def covers(self, keys) -> bool:
        return set(keys) <= set(self.maps)


def _targets(mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(torch.get_default_dtype()) if not mask.is_floating_point() else mask
    if mask.ndim == 2:
        mask = mask[None]
    return torch.stack([mask, 1.0 - mask], dim=1)


def _check_binary(mask: torch.Tensor):
    if not torch.all((mask == 0) | (mask == 1)):
        raise LossError("ground-truth mask must be binary")


def _log_probs(out: torch.Tensor, from_logits: bool, temperature: float = 1.0) -> torch.Tensor:
    if from_logits:
        return torch.log_softmax(out / temperature, dim=1)
    return torch.log(out)


def pixel_cross_entropy(log_y: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-(1/N_pix) sum_pix sum_ch target*log_y, one value per sample."""
    # xlogy keeps 0*log(0) = 0 for saturated predictions
    terms = -torch.where(target == 0, torch.zeros_like(log_y), target * log_y)
    return terms.sum(dim=1).flatten(1).mean(dim=1)


def soft_dice_loss(prob_fg: torch.Tensor, mask: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    inter = (prob_fg * mask).flatten(1).sum(1)
    denom = prob_fg.flatten(1).sum(1) + mask.flatten(1).sum(1)
    return 1.0 - (2 * inter + eps) / (denom + eps)


def classification_loss(
    outputs: Mapping[str, torch.Tensor] | torch.Tensor,
    masks: Mapping[str, torch.Tensor] | torch.Tensor,
    from_logits: bool = False,
    kind: str = "ce",
    reduce: bool = True,
) -> torch.Tensor:
    """Supervised 2-class loss over the given heads.

    ``outputs`` are probabilities (or logits with ``from_logits``) for the heads
    whose classes are annotated. Returns the batch mean, or the per-sample
    vector when ``reduce`` is False.
    """
    if isinstance(outputs, torch.Tensor):
        outputs, masks = {"_": outputs}, {"_": masks}
    if set(outputs) != set(masks):
        raise LossError(f"heads {sorted(outputs)} vs masks {sorted(masks)}")
    per_head = []
    for cid, out in outputs.items():
        mask = masks[cid]
        if mask.ndim == 2:
            mask = mask[None]
        if out.ndim != 4 or out.shape[1] != 2 or out.shape[-2:] != mask.shape[-2:] or out.shape[0] != mask.shape[0]:
            raise LossError(f"head {cid}: output {tuple(out.shape)} vs mask {tuple(mask.shape)}")
        _check_binary(mask)
        mask = mask.to(out.dtype)
        if kind == "ce":
            per_head.append(pixel_cross_entropy(_log_probs(out, from_logits), _targets(mask)))
        elif kind == "dice":
            prob = torch.softmax(out, dim=1) if from_logits else out
            per_head.append(soft_dice_loss(prob[:, 0], mask))
        else:
            raise LossError(f"unknown classification loss {kind!r}")
    per_sample = torch.stack(per_head).mean(0)
    return per_sample.mean() if reduce else per_sample


def distillation_loss(
    outputs: Mapping[str, torch.Tensor] | torch.Tensor,
    snapshot: Mapping[str, torch.Tensor] | torch.Tensor,
    from_logits: bool = False,
    temperature: float = 1.0,
    reduce: bool = True,
) -> torch.Tensor:
    """Cross-entropy of old-head outputs against the frozen snapshot.

    Negated so it is minimised: equals the snapshot entropy exactly when the
    outputs reproduce the snapshot.
    """
    if isinstance(outputs, torch.Tensor):
        outputs, snapshot = {"_": outputs}, {"_": snapshot}
    if set(outputs) != set(snapshot):
        raise LossError(f"old heads {sorted(outputs)} vs snapshot classes {sorted(snapshot)}")
    per_head = []
    for cid, out in outputs.items():
        p = snapshot[cid].to(out.dtype)
        if p.ndim == 3:
            p = p[None]
        if p.shape != out.shape:
            raise LossError(f"head {cid}: output {tuple(out.shape)} vs snapshot {tuple(p.shape)}")
        if temperature != 1.0:
            p = p ** (1.0 / temperature)
            p = p / p.sum(dim=1, keepdim=True)
        per_head.append(pixel_cross_entropy(_log_probs(out, from_logits, temperature), p))
    per_sample = torch.stack(per_head).mean(0)
    return per_sample.mean() if reduce else per_sample


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel entropy of 2-channel maps, i.e. the floor of the distillation loss."""
    return pixel_cross_entropy(torch.log(p), p).mean()


def total_loss(
    l_c: torch.Tensor | Sequence[float | None],
    l_d: torch.Tensor | Sequence[float],
    memberships: Sequence[str],
    weights: LossWeights | float = 0.5,
) -> torch.Tensor:
    """Batch mean of alpha*L_c + (1-alpha)*L_d on new data and L_d on exemplars.

    ``l_c`` entries of exemplar samples are ignored (may be None).
    """
    alpha = weights.alpha if isinstance(weights, LossWeights) else float(weights)
    if not 0.0 <= alpha <= 1.0:
        raise LossError(f"alpha must be in [0, 1], got {alpha}")
    if len(memberships) == 0:
        raise LossError("empty batch")
    bad = [m for m in memberships if m not in (INC, EXEMPLAR)]
    if bad:
        raise LossError(f"untagged or unknown sample membership {bad[0]!r}")
    l_d = torch.as_tensor(l_d, dtype=torch.get_default_dtype()) if not isinstance(l_d, torch.Tensor) else l_d
    if len(l_d) != len(memberships):
        raise LossError("missing distillation term for some samples")
    terms = []
    for i, m in enumerate(memberships):
        if m == INC:
            lc = l_c[i]
            if lc is None:
                raise LossError(f"sample {i} from new data lacks a classification term")
            terms.append(alpha * torch.as_tensor(lc, dtype=l_d.dtype) + (1.0 - alpha) * l_d[i])
        else:
            terms.append(l_d[i])
    return torch.stack(terms).mean()
