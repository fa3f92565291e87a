"""Initial training, prediction snapshots, head growth and incremental training."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import ImageSample, LabeledDataset
from .exemplar import (
    AEISEG,
    CORISEG,
    AffinityCache,
    ExemplarStore,
    make_content_network,
    select_exemplars_aeiseg,
    select_exemplars_coriseg,
    store_exemplars,
)
from .losses import EXEMPLAR, INC, PredictionSnapshot, classification_loss, distillation_loss, total_loss
from .metrics import EvalReport, aggregate, assd, dice
from .network import Checkpoint, NetworkConfig, SegmentationNetwork, build_network, grow_network

log = logging.getLogger(__name__)

FINETUNE = "finetune"
LWFSEG = "LwfSeg"
METHODS = (FINETUNE, LWFSEG, AEISEG, CORISEG)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = LWFSEG
    alpha: float = 0.5
    batch_size: int = 8
    epochs: int = 1000
    k_c: int = 50
    k_r: int = 30
    t_mc: int = 29
    optimizer: str = "adam"
    lr: float = 1e-4
    seed: int = 0
    temperature: float = 1.0
    loss_kind: str = "ce"
    mix_batches: bool = False
    freeze_bn: bool = False
    uncertainty: str = "entropy"
    foreground_only: bool = False
    content_network: str = "random"
    coverage_threshold: float | None = None
    val_every: int = 10
    workers: int = 1
    deterministic: bool = True
    levels: int = 3
    base_filters: int = 8
    dropout_rate: float = 0.3
    input_shape: tuple[int, int] = (64, 64)
    desk_scale: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise TrainingError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise TrainingError("epochs must be >= 0 and batch_size > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError("alpha must lie in [0, 1]")
        self.input_shape = tuple(self.input_shape)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(self.levels, self.base_filters, self.dropout_rate, self.input_shape)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_profile(**overrides) -> TrainConfig:
    """Small configuration used by the tests and the synthetic acceptance runs."""
    base = dict(
        epochs=60, k_c=12, k_r=6, t_mc=8, lr=1e-3, levels=3, base_filters=16,
        input_shape=(64, 64), desk_scale=True, val_every=20,
    )
    base.update(overrides)
    return TrainConfig(**base)


def full_profile(**overrides) -> TrainConfig:
    cfg = dict(epochs=1000, k_c=50, k_r=30, t_mc=29, alpha=0.5, batch_size=8, levels=5, base_filters=64,
               input_shape=(192, 192))
    cfg.update(overrides)
    return TrainConfig(**cfg)


def set_determinism(enabled: bool = True):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- tensors and evaluation ------------------------------------------------------------


def stack_images(samples: Sequence[ImageSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))


def stack_masks(samples: Sequence[ImageSample], class_id: str) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, H, W) masks plus a bool vector telling which samples carry that annotation."""
    shape = samples[0].image.shape
    masks = np.stack([s.masks[class_id] if class_id in s.annotated_classes else np.zeros(shape, np.uint8)
                      for s in samples])
    present = torch.tensor([class_id in s.annotated_classes for s in samples])
    return torch.from_numpy(masks.astype(np.float32)), present


def supervised_terms(logits: dict, samples: Sequence[ImageSample], classes: Sequence[str], kind: str = "ce"):
    """Per-sample L_c averaged over the given classes each sample is annotated for."""
    total = torch.zeros(len(samples), dtype=torch.float32)
    count = torch.zeros(len(samples), dtype=torch.float32)
    for c in classes:
        mask, present = stack_masks(samples, c)
        if not present.any():
            continue
        per = classification_loss(logits[c], mask, from_logits=True, kind=kind, reduce=False)
        total = total + torch.where(present, per, torch.zeros_like(per))
        count = count + present.float()
    if (count == 0).any():
        raise TrainingError("a sample on the supervised path has none of the supervised classes annotated")
    return total / count


def predict_probs(net: SegmentationNetwork, samples: Sequence[ImageSample], batch: int = 32) -> dict[str, np.ndarray]:
    """Eval-mode probabilities per head, (N, 2, H, W)."""
    out = defaultdict(list)
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            probs, _ = net.predict(stack_images(samples[i:i + batch]), mode="eval")
            for c, p in probs.items():
                out[c].append(p.numpy())
    return {c: np.concatenate(v) for c, v in out.items()}


def evaluate(
    net: SegmentationNetwork,
    dataset: LabeledDataset,
    classes: Sequence[str] | None = None,
    eval_contrast: dict | None = None,
    method: str = "",
    case: str = "",
    with_assd: bool = True,
) -> EvalReport:
    """3D per-volume Dice / ASSD from restacked slice predictions (foreground prob > 0.5)."""
    classes = list(net.head_ids if classes is None else classes)
    eval_contrast = eval_contrast or {}
    by_vol = defaultdict(list)
    for s in dataset:
        by_vol[s.provenance[0]].append(s)
    rows = []
    for vid in sorted(by_vol):
        samples = sorted(by_vol[vid], key=lambda s: s.provenance[1])
        info = dataset.volumes.get(vid)
        spacing = info.spacing if info else (1.0, 1.0, 1.0)
        wanted = [c for c in classes if c in samples[0].annotated_classes
                  and (c not in eval_contrast or info is None or info.contrast_profile == eval_contrast[c])]
        if not wanted:
            continue
        probs = predict_probs(net, samples)
        for c in wanted:
            pred = np.stack(list(probs[c][:, 0] > 0.5), axis=2)
            gt = np.stack([s.masks[c] for s in samples], axis=2).astype(bool)
            rows.append({
                "volume_id": vid, "class": c, "dice": dice(pred, gt),
                "assd": assd(pred, gt, spacing) if with_assd else float("nan"),
            })
    return aggregate(method, case, rows)


def mean_dice(report: EvalReport) -> float:
    return float(np.mean(list(report.dice.values()))) / 100.0 if report.dice else 0.0


# -- training loops ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    best_val_dice: float | None
    epoch_log: list[dict] = field(default_factory=list)
    batch_log: list[dict] = field(default_factory=list)


def _optimizer(net, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=0.9)
    raise TrainingError(f"unknown optimizer {cfg.optimizer!r}")


def _check_finite(value: torch.Tensor, epoch: int, step: int):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {value.item()}")


def _validate(net, validation, eval_contrast, epoch, epoch_log):
    rep = evaluate(net, validation, eval_contrast=eval_contrast, with_assd=False)
    for c, d in rep.dice.items():
        epoch_log.append({"epoch": epoch, "split": "validation", "class": c, "dice": d / 100.0})
    return mean_dice(rep)


def train_initial(
    d_init: LabeledDataset,
    config: TrainConfig,
    validation: LabeledDataset | None = None,
    eval_contrast: dict | None = None,
    on_step: Callable | None = None,
) -> TrainResult:
    """Train a fresh network on the step-0 classes of ``d_init``."""
    if not len(d_init):
        raise TrainingError("initial dataset is empty")
    classes = d_init.registry.classes_at(0)
    if not classes:
        raise TrainingError("registry has no step-0 classes")
    set_determinism(config.deterministic)
    net = build_network(config.network_config(), d_init.registry, config.seed, classes)
    opt = _optimizer(net, config)
    g = torch.Generator().manual_seed(config.seed + 1)
    samples = list(d_init.samples)
    epoch_log, best_state, best_score = [], None, None
    mode = "mc" if config.freeze_bn else "train"
    for epoch in range(config.epochs):
        perm = torch.randperm(len(samples), generator=g).tolist()
        losses = []
        for step, i in enumerate(range(0, len(perm), config.batch_size)):
            batch = [samples[j] for j in perm[i:i + config.batch_size]]
            logits, _ = net(stack_images(batch), mode=mode, generator=g)
            loss = supervised_terms(logits, batch, classes, config.loss_kind).mean()
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if on_step is not None:
                on_step(net)
        epoch_log.append({"epoch": epoch, "split": "train", "class": "*", "loss_total": float(np.mean(losses)),
                          "loss_c": float(np.mean(losses))})
        last = epoch == config.epochs - 1
        if validation is not None and len(validation) and ((epoch + 1) % config.val_every == 0 or last):
            score = _validate(net, validation, eval_contrast, epoch, epoch_log)
            if best_score is None or score > best_score:
                best_score, best_state = score, Checkpoint.from_network(net)
    final = Checkpoint.from_network(net, {"stage": "initial", "epochs": config.epochs, "seed": config.seed})
    best = best_state or final
    best.meta.update({"stage": "initial", "selection": "best_validation_dice", "seed": config.seed})
    return TrainResult(final, best, best_score, epoch_log)


def snapshot_predictions(old: SegmentationNetwork | Checkpoint, samples: Sequence[ImageSample]) -> PredictionSnapshot:
    """Eval-mode probabilities of every old head for every sample of D_a."""
    net = old.to_network() if isinstance(old, Checkpoint) else old
    samples = list(samples)
    if not samples:
        raise TrainingError("nothing to snapshot")
    keys = [s.key for s in samples]
    if len(set(keys)) != len(keys):
        raise TrainingError("duplicate samples in snapshot input")
    probs = predict_probs(net, samples)
    classes = net.head_ids
    snap = PredictionSnapshot(classes)
    stacked = np.stack([probs[c] for c in classes], axis=1)  # (N, n_classes, 2, H, W)
    for k, arr in zip(keys, stacked):
        snap.add(k, arr)
    return snap


@dataclass
class IncrementalRun:
    old: Checkpoint
    new_classes: list[str]
    d_inc: LabeledDataset
    store: ExemplarStore = field(default_factory=ExemplarStore)
    snapshot: PredictionSnapshot | None = None


def _epoch_schedule(n_inc: int, n_ex: int, cfg: TrainConfig, g: torch.Generator, ex_stream):
    """List of (membership, sample indices) batches for one epoch."""
    bs = cfg.batch_size
    perm = torch.randperm(n_inc, generator=g).tolist()
    inc_batches = [perm[i:i + bs] for i in range(0, n_inc, bs)]
    n_ex_batches = max(1, round(len(inc_batches) * n_ex / n_inc)) if n_ex else 0
    if cfg.mix_batches and n_ex:
        pool = [(INC, i) for i in perm] + [(EXEMPLAR, next(ex_stream)) for _ in range(n_ex_batches * min(bs, n_ex))]
        order = torch.randperm(len(pool), generator=g).tolist()
        pool = [pool[i] for i in order]
        return [("mixed", pool[i:i + bs]) for i in range(0, len(pool), bs)]
    ex_batches = []
    for _ in range(n_ex_batches):
        take = []
        while len(take) < min(bs, n_ex):
            j = next(ex_stream)
            if j not in take:
                take.append(j)
        ex_batches.append(take)
    tagged = [(INC, b) for b in inc_batches] + [(EXEMPLAR, b) for b in ex_batches]
    order = torch.randperm(len(tagged), generator=g).tolist()
    return [tagged[i] for i in order]


def _cycle(n: int, g: torch.Generator):
    while True:
        yield from torch.randperm(n, generator=g).tolist()


def train_incremental(
    run: IncrementalRun,
    config: TrainConfig,
    validation: LabeledDataset | None = None,
    eval_contrast: dict | None = None,
    on_step: Callable | None = None,
) -> TrainResult:
    """Grow the old network by the new heads and train with the configured method."""
    method = config.method
    if not len(run.d_inc):
        raise TrainingError("incremental dataset is empty")
    exemplars = run.store.samples()
    if method in (FINETUNE, LWFSEG) and exemplars:
        raise TrainingError(f"{method} runs must not carry exemplars")
    if method in (AEISEG, CORISEG) and not exemplars:
        raise TrainingError(f"{method} needs a non-empty exemplar store")
    set_determinism(config.deterministic)
    old_net = run.old.to_network()
    old_classes = old_net.head_ids
    new_classes = list(run.new_classes)
    net = grow_network(old_net, new_classes, config.seed)
    inc_samples = list(run.d_inc.samples)

    snapshot = None
    if method != FINETUNE:
        snapshot = run.snapshot or snapshot_predictions(old_net, inc_samples + exemplars)
        needed = [s.key for s in inc_samples + exemplars]
        missing = [k for k in needed if k not in snapshot.maps]
        if missing:
            raise TrainingError(f"snapshot missing for {len(missing)} samples, e.g. {missing[0]}")
        if list(snapshot.classes) != old_classes:
            raise TrainingError(f"snapshot classes {snapshot.classes} != old heads {old_classes}")

    opt = _optimizer(net, config)
    g = torch.Generator().manual_seed(config.seed + 1)
    ex_stream = _cycle(len(exemplars), g) if exemplars else None
    mode = "mc" if config.freeze_bn else "train"
    epoch_log, batch_log, best_state, best_score = [], [], None, None

    def pick(member, idx):
        return inc_samples[idx] if member == INC else exemplars[idx]

    for epoch in range(config.epochs):
        schedule = _epoch_schedule(len(inc_samples), len(exemplars), config, g, ex_stream)
        sums = defaultdict(list)
        for step, (tag, idxs) in enumerate(schedule):
            if tag == "mixed":
                members = [m for m, _ in idxs]
                batch = [pick(m, i) for m, i in idxs]
            else:
                members = [tag] * len(idxs)
                batch = [pick(tag, i) for i in idxs]
            logits, _ = net(stack_images(batch), mode=mode, generator=g)
            is_inc = [m == INC for m in members]
            lc = ld = None
            if any(is_inc):
                inc_batch = [s for s, f in zip(batch, is_inc) if f]
                inc_logits = {c: logits[c][torch.tensor(is_inc)] for c in new_classes}
                lc_inc = supervised_terms(inc_logits, inc_batch, new_classes, config.loss_kind)
                lc_iter = iter(lc_inc)
                lc = [next(lc_iter) if f else None for f in is_inc]
            if method == FINETUNE:
                loss = torch.stack([v for v in lc if v is not None]).mean()
            else:
                targets = snapshot.batch([s.key for s in batch], old_classes)
                ld = distillation_loss({c: logits[c] for c in old_classes}, targets, from_logits=True,
                                       temperature=config.temperature, reduce=False)
                loss = total_loss(lc if lc is not None else [None] * len(batch), ld, members, config.alpha)
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            # instrumentation: new heads only ever receive gradient through L_c
            new_head_grad = sum(float(p.grad.abs().sum()) for c in new_classes
                                for p in net.heads[c].parameters() if p.grad is not None)
            opt.step()
            lc_vals = [v.item() for v in (lc or []) if v is not None]
            row = {
                "epoch": epoch, "step": step, "membership": tag, "n": len(batch),
                "n_inc": sum(is_inc), "n_exemplar": len(batch) - sum(is_inc),
                "loss_c": float(np.mean(lc_vals)) if lc_vals else None,
                "new_head_grad": new_head_grad,
                "loss_d": float(ld.mean().item()) if ld is not None else None,
                "loss_total": loss.item(),
            }
            batch_log.append(row)
            sums["loss_total"].append(row["loss_total"])
            if row["loss_c"] is not None:
                sums["loss_c"].append(row["loss_c"])
            if row["loss_d"] is not None:
                sums["loss_d"].append(row["loss_d"])
            if on_step is not None:
                on_step(net)
        epoch_log.append({"epoch": epoch, "split": "train", "class": "*",
                          **{k: float(np.mean(v)) for k, v in sums.items()}})
        last = epoch == config.epochs - 1
        if validation is not None and len(validation) and ((epoch + 1) % config.val_every == 0 or last):
            score = _validate(net, validation, eval_contrast, epoch, epoch_log)
            if best_score is None or score > best_score:
                best_score, best_state = score, Checkpoint.from_network(net)
    meta = {"stage": "incremental", "method": method, "epochs": config.epochs, "seed": config.seed,
            "old_checkpoint": run.old.content_hash(), "new_classes": new_classes}
    final = Checkpoint.from_network(net, meta)
    best = best_state or final
    best.meta.update({**meta, "selection": "best_validation_dice"})
    return TrainResult(final, best, best_score, epoch_log, batch_log)


def build_exemplar_store(
    old: SegmentationNetwork | Checkpoint,
    old_data: LabeledDataset,
    method: str,
    config: TrainConfig,
    cache: AffinityCache | None = None,
) -> ExemplarStore:
    """Select and persist exemplars for every old head (empty for finetune / LwfSeg)."""
    if method in (FINETUNE, LWFSEG):
        return ExemplarStore("none", config.k_r)
    if method not in (AEISEG, CORISEG):
        raise TrainingError(f"unknown exemplar method {method!r}")
    ckpt = old if isinstance(old, Checkpoint) else Checkpoint.from_network(old)
    net = ckpt.to_network()
    store = ExemplarStore(method, config.k_r, meta={
        "k_c": config.k_c, "k_r": config.k_r, "t_mc": config.t_mc, "seed": config.seed,
        "checkpoint": ckpt.content_hash(), "dataset": old_data.content_hash(),
        "content_network": config.content_network if method == CORISEG else None,
    })
    mc_kwargs = {"measure": config.uncertainty, "foreground_only": config.foreground_only}
    by_key = old_data.by_key()
    selections = {}
    content_net = make_content_network(config.content_network, net, seed=config.seed + 1234) if method == CORISEG else None
    for cid in net.head_ids:
        if method == AEISEG:
            sel = select_exemplars_aeiseg(net, old_data, cid, config.k_c, config.k_r, config.t_mc, config.seed,
                                          config.workers, config.coverage_threshold, **mc_kwargs)
        else:
            key = f"{config.content_network}:{ckpt.content_hash() if config.content_network == 'self' else config.seed}:{old_data.content_hash()}"
            sel = select_exemplars_coriseg(net, content_net, old_data, cid, config.k_c, config.k_r, config.t_mc,
                                           config.seed, config.workers, config.coverage_threshold,
                                           cache=cache, cache_key=key, **mc_kwargs)
        selections[cid] = sel
    chosen = {k for sel in selections.values() for k in sel.keys}
    snap = snapshot_predictions(net, [by_key[k] for k in sorted(chosen)])
    for cid, sel in selections.items():
        store_exemplars(store, cid, [by_key[k] for k in sel.keys], snap)
    store.meta["gains"] = {cid: sel.gains for cid, sel in selections.items()}
    return store


# -- logs -----------------------------------------------------------------------------

EPOCH_FIELDS = ["epoch", "split", "class", "dice", "loss_total", "loss_c", "loss_d"]


def write_epoch_csv(rows: list[dict], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in EPOCH_FIELDS})


def read_epoch_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (v if k in ("split", "class") else (int(v) if k == "epoch" else
                         (float(v) if v != "" else None))) for k, v in r.items()})
        return rows
