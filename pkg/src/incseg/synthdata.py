"""Deterministic synthetic shoulder-like volumes.

Structure "hum" is a compact ellipsoid (bright in contrast A); structure
"scap" is a thin curved sheet wrapped around it at a gap (intermediate
intensity). Contrast B remaps the intensity transfer so both structures turn
darker than the surrounding tissue. Masks are exact by construction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import AnnotationSet, ScenarioConfig, Volume, save_volume, volume_hash

HUM = "hum"
SCAP = "scap"


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    shape: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (0.91, 0.91, 3.0)
    seed: int = 0
    # ellipsoid radii in voxels (in-plane, in-plane, slices)
    hum_radius_xy: tuple[float, float] = (10.0, 14.0)
    hum_radius_z: tuple[float, float] = (3.5, 5.5)
    hum_fraction: tuple[float, float] = (0.02, 0.08)
    # sheet: gap to the ellipsoid, thickness, angular span (degrees), slice extent
    scap_gap: tuple[float, float] = (3.0, 5.0)
    scap_thickness: tuple[float, float] = (2.5, 3.5)
    scap_span_deg: tuple[float, float] = (100.0, 160.0)
    scap_slices: tuple[int, int] = (6, 9)
    scap_fraction: tuple[float, float] = (0.005, 0.03)
    noise: float = 0.04
    texture_sigma: float = 3.0
    texture_amplitude: float = 0.08
    bias_amplitude: float = 0.1
    # (background, hum, scap) mean intensity per contrast tag
    intensities: dict = field(default_factory=lambda: {"A": (0.35, 0.85, 0.6), "B": (0.65, 0.15, 0.4)})
    max_retries: int = 50

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.noise < 0:
            raise SynthError("noise must be non-negative")
        max_r = self.hum_radius_xy[1] + self.scap_gap[1] + self.scap_thickness[1]
        if 2 * max_r + 4 > min(self.shape[:2]):
            raise SynthError(f"structures (radius up to {max_r}) do not fit a {self.shape[:2]} plane")
        if 2 * self.hum_radius_z[1] + 2 > self.shape[2] or self.scap_slices[1] + 2 > self.shape[2]:
            raise SynthError("structures do not fit the slice count")


def _structures(cfg: SynthConfig, rng: np.random.Generator):
    H, W, D = cfg.shape
    yy, xx, zz = np.meshgrid(np.arange(H), np.arange(W), np.arange(D), indexing="ij")
    n = H * W * D
    for _ in range(cfg.max_retries):
        a, b = rng.uniform(*cfg.hum_radius_xy, size=2)
        c = rng.uniform(*cfg.hum_radius_z)
        gap = rng.uniform(*cfg.scap_gap)
        thick = rng.uniform(*cfg.scap_thickness)
        outer = max(a, b) + gap + thick
        cy = rng.uniform(outer + 1, H - outer - 2)
        cx = rng.uniform(outer + 1, W - outer - 2)
        cz = rng.uniform(c + 0.5, D - c - 1.5)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        hum = (u / a) ** 2 + (v / b) ** 2 + ((zz - cz) / c) ** 2 <= 1.0

        radius = max(a, b) + gap
        span = np.deg2rad(rng.uniform(*cfg.scap_span_deg))
        direction = rng.uniform(-np.pi, np.pi)
        ang = np.angle(np.exp(1j * (np.arctan2(dy, dx) - direction)))
        r = np.hypot(dy, dx)
        nz = int(rng.integers(cfg.scap_slices[0], cfg.scap_slices[1] + 1))
        z0 = int(np.clip(round(cz - nz / 2 + rng.uniform(-1, 1)), 0, D - nz - 1))
        scap = (np.abs(r - radius - thick / 2) <= thick / 2) & (np.abs(ang) <= span / 2)
        scap &= (zz >= z0) & (zz < z0 + nz)
        scap &= ~hum
        fh, fs = hum.sum() / n, scap.sum() / n
        if cfg.hum_fraction[0] <= fh <= cfg.hum_fraction[1] and cfg.scap_fraction[0] <= fs <= cfg.scap_fraction[1]:
            return hum, scap
    raise SynthError(f"could not place structures within {cfg.max_retries} attempts")


def render(cfg: SynthConfig, hum: np.ndarray, scap: np.ndarray, contrast: str, rng: np.random.Generator):
    """Intensity image for given masks; texture and bias field drawn from ``rng``."""
    if contrast not in cfg.intensities:
        raise SynthError(f"unknown contrast {contrast!r}")
    bg, ih, isc = cfg.intensities[contrast]
    H, W, D = cfg.shape
    texture = ndimage.gaussian_filter(rng.standard_normal(cfg.shape), cfg.texture_sigma)
    texture *= cfg.texture_amplitude / (texture.std() + 1e-12)
    direction = rng.uniform(-np.pi, np.pi)
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    bias = cfg.bias_amplitude * (yy * np.cos(direction) + xx * np.sin(direction))
    img = np.full(cfg.shape, bg) + texture + bias[:, :, None]
    img[hum] = ih + 0.5 * texture[hum]
    img[scap] = isc + 0.5 * texture[scap]
    # slight partial-volume blur at structure edges
    img = ndimage.gaussian_filter(img, (0.7, 0.7, 0.0))
    img += cfg.noise * rng.standard_normal(cfg.shape)
    return img.astype(np.float32)


def generate_volume(
    cfg: SynthConfig, volume_index: int, contrast: str = "A", volume_id: str | None = None
) -> tuple[Volume, AnnotationSet]:
    """Volume ``volume_index`` of the corpus; geometry depends only on (seed, index)."""
    geo_rng = np.random.default_rng([cfg.seed, volume_index, 0])
    hum, scap = _structures(cfg, geo_rng)
    img_rng = np.random.default_rng([cfg.seed, volume_index, 1 + "AB".index(contrast)])
    img = render(cfg, hum, scap, contrast, img_rng)
    vid = volume_id or f"v{volume_index:03d}{contrast}"
    vol = Volume(img, cfg.spacing, vid, contrast)
    return vol, AnnotationSet({HUM: hum.astype(np.uint8), SCAP: scap.astype(np.uint8)})


# case -> (init class, init count, inc class, inc count, inc contrast)
CASES = {
    1: (HUM, 4, SCAP, 4, "A"),
    2: (SCAP, 6, HUM, 1, "A"),
    3: (HUM, 4, SCAP, 3, "B"),
}


def scenario_plan(case: int) -> tuple[ScenarioConfig, list[tuple[int, str, list[str]]]]:
    """Scenario config plus (volume index, contrast, visible classes) for each volume."""
    if case not in CASES:
        raise SynthError(f"unknown case {case!r}; expected one of {sorted(CASES)}")
    init_cls, n_init, inc_cls, n_inc, inc_contrast = CASES[case]
    both = [HUM, SCAP]
    plan, idx = [], 0
    init_ids, inc_ids = [], []
    for _ in range(n_init):
        plan.append((idx, "A", [init_cls]))
        init_ids.append(f"v{idx:03d}A")
        idx += 1
    for _ in range(n_inc):
        plan.append((idx, inc_contrast, [inc_cls]))
        inc_ids.append(f"v{idx:03d}{inc_contrast}")
        idx += 1
    eval_contrasts = ["A"] if inc_contrast == "A" else ["A", "B"]
    held = {}
    for role in ("val", "test"):
        held[role] = []
        for con in eval_contrasts:
            plan.append((idx, con, both))
            held[role].append(f"v{idx:03d}{con}")
        idx += 1
    eval_contrast = {} if inc_contrast == "A" else {init_cls: "A", inc_cls: inc_contrast}
    scen = ScenarioConfig(f"case{case}", init_ids, inc_ids, held["val"], held["test"], [init_cls], [inc_cls],
                          eval_contrast)
    return scen, plan


def generate_scenario_corpus(cfg: SynthConfig, case: int, out_dir: str | Path | None = None):
    """Generate the volumes of a case analog; write them if ``out_dir`` is given.

    Returns (scenario, list of (Volume, AnnotationSet), manifest dict).
    """
    scen, plan = scenario_plan(case)
    volumes, hashes = [], {}
    for idx, contrast, visible in plan:
        vol, ann = generate_volume(cfg, idx, contrast)
        ann = ann.restricted(visible)
        volumes.append((vol, ann))
        hashes[vol.volume_id] = volume_hash(vol, ann)
    manifest = {
        "format_version": 1,
        "case": case,
        "synth_config": json.loads(json.dumps(asdict(cfg))),
        "scenario": scen.to_dict(),
        "volumes": hashes,
    }
    if out_dir is not None:
        out = Path(out_dir)
        for vol, ann in volumes:
            save_volume(out / "volumes" / vol.volume_id, vol, ann)
        (out / "scenario.json").write_text(json.dumps(scen.to_dict(), indent=2) + "\n")
        (out / "corpus_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return scen, volumes, manifest
