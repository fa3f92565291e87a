"""U-Net style segmentation network with independent per-class heads.

The body is shared; every class owns a 1x1 head producing a 2-channel
(foreground, background) softmax, so classes are never forced to be
mutually exclusive. ``forward`` takes the mode explicitly instead of relying
on ``nn.Module.training`` so frozen networks can serve eval / MC inference
from several threads at once.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import ClassRegistry

MODES = ("train", "eval", "mc")
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    levels: int = 3
    base_filters: int = 8
    dropout_rate: float = 0.3
    input_shape: tuple[int, int] = (64, 64)
    in_channels: int = 1
    head_channels: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.levels < 2:
            raise NetworkError("levels must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetworkError("dropout_rate must lie in [0, 1)")
        div = 2 ** (self.levels - 1)
        if any(s % div for s in self.input_shape):
            raise NetworkError(f"input shape {self.input_shape} not divisible by {div}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def abstraction_channels(self) -> int:
        return self.filters(self.levels - 1)

    @property
    def abstraction_shape(self) -> tuple[int, int]:
        div = 2 ** (self.levels - 1)
        return self.input_shape[0] // div, self.input_shape[1] // div

    @classmethod
    def full_scale(cls) -> NetworkConfig:
        return cls(levels=5, base_filters=64, input_shape=(192, 192))


class ConvBNReLU(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x, mode: str):
        x = self.conv(x)
        bn = self.bn
        x = F.batch_norm(
            x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
            training=(mode == "train"), momentum=bn.momentum, eps=bn.eps,
        )
        return F.relu(x)


class SpatialDropout(nn.Module):
    """Channel dropout whose randomness comes from an explicit generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, mode: str, generator: torch.Generator | None = None):
        if mode == "eval" or self.p == 0.0:
            return x
        keep = torch.full((x.shape[0], x.shape[1], 1, 1), 1.0 - self.p, dtype=x.dtype)
        mask = torch.bernoulli(keep, generator=generator)
        return x * mask / (1.0 - self.p)


class Head(nn.Conv2d):
    def __init__(self, cin: int, cout: int = 2):
        super().__init__(cin, cout, kernel_size=1, bias=True)

    def reset_with_seed(self, seed: int):
        """Uniform fan-in init drawn from ``seed`` so it can be replayed."""
        g = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(self.in_channels)
        with torch.no_grad():
            self.weight.copy_((torch.rand(self.weight.shape, generator=g) * 2 - 1) * bound)
            self.bias.copy_((torch.rand(self.bias.shape, generator=g) * 2 - 1) * bound)


class SegmentationNetwork(nn.Module):
    def __init__(self, config: NetworkConfig, registry: ClassRegistry | None = None):
        super().__init__()
        self.config = config
        self.registry = registry or ClassRegistry()
        self.head_seeds: dict[str, int] = {}
        L = config.levels
        cin = config.in_channels
        self.enc = nn.ModuleList()
        for level in range(L):
            f = config.filters(level)
            self.enc.append(nn.ModuleList([ConvBNReLU(cin, f), ConvBNReLU(f, f)]))
            cin = f
        self.coarse_drop = SpatialDropout(config.dropout_rate)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.dec_drop = nn.ModuleList()
        for level in reversed(range(L - 1)):
            f = config.filters(level)
            self.up.append(ConvBNReLU(config.filters(level + 1), f))
            self.dec_drop.append(SpatialDropout(config.dropout_rate))
            self.dec.append(nn.ModuleList([ConvBNReLU(2 * f, f), ConvBNReLU(f, f)]))
        self.heads = nn.ModuleDict()

    @property
    def head_ids(self) -> list[str]:
        return list(self.heads.keys())

    def channel_schedule(self) -> list[int]:
        return [blk[1].conv.out_channels for blk in self.enc]

    def features(self, x: torch.Tensor, mode: str = "eval", generator=None):
        """Return (last decoder features, abstraction activations, encoder activations)."""
        if mode not in MODES:
            raise NetworkError(f"unknown mode {mode!r}")
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if tuple(x.shape[-2:]) != self.config.input_shape or x.shape[1] != self.config.in_channels:
            raise NetworkError(f"input shape {tuple(x.shape)} does not match config {self.config.input_shape}")
        skips, enc_acts = [], []
        for level, (c1, c2) in enumerate(self.enc):
            if level > 0:
                x = F.max_pool2d(x, 2)
            x = c1(x, mode)
            enc_acts.append(x)
            x = c2(x, mode)
            enc_acts.append(x)
            skips.append(x)
        abstraction = x
        x = self.coarse_drop(x, mode, generator)
        for up, drop, (c1, c2), skip in zip(self.up, self.dec_drop, self.dec, reversed(skips[:-1])):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"), mode)
            x = drop(torch.cat([x, skip], dim=1), mode, generator)
            x = c2(c1(x, mode), mode)
        return x, abstraction, enc_acts

    def forward(self, x: torch.Tensor, mode: str = "eval", generator=None, heads=None):
        """Per-head logits (N, 2, H, W) and the abstraction activations."""
        if not len(self.heads):
            raise NetworkError("network has no heads")
        feats, abstraction, _ = self.features(x, mode, generator)
        ids = self.head_ids if heads is None else list(heads)
        return {h: self.heads[h](feats) for h in ids}, abstraction

    def predict(self, x: torch.Tensor, mode: str = "eval", generator=None, heads=None):
        """Per-head probabilities (channel 0 = foreground)."""
        logits, abstraction = self.forward(x, mode, generator, heads)
        return {h: torch.softmax(v, dim=1) for h, v in logits.items()}, abstraction

    def add_head(self, class_id: str, seed: int) -> SegmentationNetwork:
        if class_id in self.heads:
            raise NetworkError(f"head {class_id!r} already exists")
        head = Head(self.config.filters(0), self.config.head_channels)
        head.reset_with_seed(seed)
        self.heads[class_id] = head
        self.head_seeds[class_id] = int(seed)
        if class_id not in self.registry:
            self.registry = self.registry.add(class_id)
        return self

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build_network(config: NetworkConfig, registry: ClassRegistry, seed: int, classes=None) -> SegmentationNetwork:
    """Fresh network with one head per class (default: registry step 0), seeded for replay."""
    torch.manual_seed(seed)
    net = SegmentationNetwork(config, registry)
    for i, cid in enumerate(registry.classes_at(0) if classes is None else classes):
        net.add_head(cid, seed=seed * 1000 + i)
    return net


def grow_network(old: SegmentationNetwork, new_classes, seed: int) -> SegmentationNetwork:
    """Copy ``old`` and attach freshly initialised heads for ``new_classes``."""
    net = SegmentationNetwork(old.config, old.registry)
    for cid in old.head_ids:
        net.heads[cid] = Head(old.config.filters(0), old.config.head_channels)
    net.load_state_dict(old.state_dict())
    net.head_seeds = dict(old.head_seeds)
    step = max((e.introduced_at_step for e in old.registry.entries), default=-1) + 1
    for i, cid in enumerate(new_classes):
        if cid not in net.registry:
            net.registry = net.registry.add(cid, step=step)
        net.add_head(cid, seed=seed * 1000 + len(old.head_ids) + i)
    return net


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    config: NetworkConfig
    registry: ClassRegistry
    head_ids: list[str]
    head_seeds: dict[str, int]
    meta: dict

    @classmethod
    def from_network(cls, net: SegmentationNetwork, meta: dict | None = None) -> Checkpoint:
        state = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
        return cls(state, net.config, net.registry, net.head_ids, dict(net.head_seeds), dict(meta or {}))

    def to_network(self) -> SegmentationNetwork:
        net = SegmentationNetwork(self.config, self.registry)
        for cid in self.head_ids:
            net.heads[cid] = Head(self.config.filters(0), self.config.head_channels)
        expected = set(net.state_dict())
        if expected != set(self.state):
            raise CheckpointError(
                f"checkpoint tensors do not match architecture: "
                f"missing {sorted(expected - set(self.state))[:3]}, extra {sorted(set(self.state) - expected)[:3]}"
            )
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        net.head_seeds = dict(self.head_seeds)
        return net

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.state):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.state[k]).tobytes())
        h.update(json.dumps(self.head_ids).encode())
        return h.hexdigest()


def save(net_or_ckpt, path: str | Path, meta: dict | None = None) -> str:
    """Write a zip container: ``manifest.json`` plus one ``.npy`` blob per tensor."""
    ckpt = net_or_ckpt if isinstance(net_or_ckpt, Checkpoint) else Checkpoint.from_network(net_or_ckpt, meta)
    if meta:
        ckpt.meta.update(meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "registry": ckpt.registry.to_list(),
        "head_ids": ckpt.head_ids,
        "head_seeds": ckpt.head_seeds,
        "meta": ckpt.meta,
        "tensors": sorted(ckpt.state),
        "sha256": ckpt.content_hash(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep the container bytes reproducible
        def put(name, data):
            zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)

        put("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for i, k in enumerate(manifest["tensors"]):
            buf = io.BytesIO()
            np.save(buf, ckpt.state[k], allow_pickle=False)
            put(f"tensors/{i:04d}.npy", buf.getvalue())
    tmp.replace(path)
    return manifest["sha256"]


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            state = {}
            for i, k in enumerate(manifest["tensors"]):
                state[k] = np.load(io.BytesIO(zf.read(f"tensors/{i:04d}.npy")), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    ckpt = Checkpoint(
        state,
        NetworkConfig(**manifest["config"]),
        ClassRegistry.from_list(manifest["registry"]),
        list(manifest["head_ids"]),
        {k: int(v) for k, v in manifest["head_seeds"].items()},
        manifest["meta"],
    )
    if ckpt.content_hash() != manifest["sha256"]:
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    return ckpt
