"""Reproducible synthetic three-organ phantoms whose statistics depend on the grade.

* esophagus: bright ellipsoidal blobs on the wall of an axial tube; count and
  size grow with grade (G2 and G3 overlap on purpose).
* liver: ellipsoidal organ with smoothed-noise texture whose amplitude grows
  with grade.
* spleen: bright ellipsoid whose volume fraction of the ROI grows with grade.

Each organ draws its own per-case jitter, so the three organs carry partly
independent evidence and G2/G3 are best separated by combining them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import CaseRecord, DatasetManifest, Grade, RoiVolume, write_volume

log = logging.getLogger(__name__)

BACKGROUND = 0.3

# per-grade design tables, indexed by grade - 1
BLOB_COUNT = ((0, 1), (2, 4), (2, 5))              # inclusive uniform ranges
BLOB_RADIUS = ((1.0, 1.3), (1.2, 1.7), (1.3, 1.8))
LIVER_LEVEL = (1.0, 1.4, 2.0)
SPLEEN_LEVEL = (0.0, 0.5, 1.2)


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    counts: tuple[int, int, int] = (8, 8, 8)
    esophagus_dims: tuple[int, int, int] = (10, 10, 25)
    liver_dims: tuple[int, int, int] = (64, 49, 9)
    spleen_dims: tuple[int, int, int] = (38, 49, 6)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    esophagus_contrast: float = 0.5
    liver_texture: float = 0.15
    spleen_scale: float = 0.3
    noise: float = 0.05
    tube_contrast: float = 0.0
    liver_jitter: float = 0.25
    spleen_jitter: float = 0.35
    masked: bool = False

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        for name in ("esophagus_dims", "liver_dims", "spleen_dims"):
            dims = tuple(int(d) for d in getattr(self, name))
            if len(dims) != 3 or min(dims) < 4:
                raise SynthConfigError(f"{name} must be three values >= 4, got {dims}")
            setattr(self, name, dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise SynthConfigError(f"counts must be three non-negative ints, got {self.counts}")
        if min(self.esophagus_contrast, self.liver_texture, self.spleen_scale) < 0:
            raise SynthConfigError("signal strengths must be >= 0")
        if self.noise <= 0:
            raise SynthConfigError("noise must be > 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCase:
    grade: Grade
    volumes: dict[str, RoiVolume]
    lesion_mask: np.ndarray
    tube_mask: np.ndarray
    stats: dict = field(default_factory=dict)


def _rng(seed) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _smooth_noise(rng, dims, sigma=1.0):
    field_ = gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="wrap")
    return field_ / field_.std()


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")


def _ellipsoid(dims, center, semi_axes):
    ii, jj, kk = _grid(dims)
    return (
        ((ii - center[0]) / semi_axes[0]) ** 2
        + ((jj - center[1]) / semi_axes[1]) ** 2
        + ((kk - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def tube_region(dims, center):
    """Esophagus tube (lumen plus one-voxel wall) running along the last axis."""
    h, w, d = dims
    r_wall = 0.25 * min(h, w) + 1.0
    ii, jj, _ = _grid(dims)
    return (ii - center[0]) ** 2 + (jj - center[1]) ** 2 <= r_wall ** 2


def _esophagus(rng, grade, cfg):
    dims = cfg.esophagus_dims
    h, w, d = dims
    if min(h, w) < 6 or d < 6:
        raise SynthConfigError(f"esophagus dims {dims} too small to contain a tube")
    center = ((h - 1) / 2 + rng.uniform(-0.5, 0.5), (w - 1) / 2 + rng.uniform(-0.5, 0.5))
    r_lumen = 0.25 * min(h, w)
    tube = tube_region(dims, center)
    vol = BACKGROUND + cfg.noise * _smooth_noise(rng, dims)
    vol[tube] += cfg.tube_contrast

    lo, hi = BLOB_COUNT[grade - 1]
    n_blobs = int(rng.integers(lo, hi + 1))
    r_lo, r_hi = BLOB_RADIUS[grade - 1]
    lesion = np.zeros(dims, dtype=bool)
    for _ in range(n_blobs):
        theta = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(r_lo, r_hi)
        z = rng.uniform(1.5, d - 2.5)
        c = (center[0] + r_lumen * np.cos(theta), center[1] + r_lumen * np.sin(theta), z)
        lesion |= _ellipsoid(dims, c, (radius, radius, 1.5 * radius))
    lesion &= tube
    vol[lesion] += cfg.esophagus_contrast
    if cfg.masked:
        vol[~tube] = 0.0
    return vol, lesion, tube, {"n_blobs": n_blobs, "lesion_voxels": int(lesion.sum())}


def _liver(rng, grade, cfg):
    dims = cfg.liver_dims
    level = LIVER_LEVEL[grade - 1] * float(np.exp(cfg.liver_jitter * rng.standard_normal()))
    center = [(n - 1) / 2 + rng.uniform(-1, 1) for n in dims]
    organ = _ellipsoid(dims, center, [0.42 * n for n in dims])
    vol = BACKGROUND + cfg.noise * _smooth_noise(rng, dims)
    texture = _smooth_noise(rng, dims, sigma=1.0)
    vol[organ] += 0.15 + cfg.liver_texture * level * texture[organ]
    if cfg.masked:
        vol[~organ] = 0.0
    return vol, {"liver_roughness": cfg.liver_texture * level}


def _spleen(rng, grade, cfg):
    dims = cfg.spleen_dims
    level = SPLEEN_LEVEL[grade - 1] + cfg.spleen_jitter * rng.standard_normal()
    scale = float(np.clip(1.0 + cfg.spleen_scale * level, 0.5, 1.7))
    center = [(n - 1) / 2 + rng.uniform(-1, 1) for n in dims]
    organ = _ellipsoid(dims, center, [0.28 * scale * n for n in dims])
    vol = BACKGROUND + cfg.noise * _smooth_noise(rng, dims)
    vol[organ] += 0.2
    if cfg.masked:
        vol[~organ] = 0.0
    return vol, {"spleen_fraction": float(organ.mean())}


def synthesize_case(seed, grade, cfg: SynthConfig) -> SyntheticCase:
    """Render one case. Fully determined by ``(seed, grade, cfg)``; ``seed`` may be an int or int tuple."""
    grade = Grade.parse(grade)
    rng = _rng(seed)
    # independent child streams so changing one organ's design leaves the others untouched
    r_e, r_l, r_s = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3))
    eso, lesion, tube, stats = _esophagus(r_e, grade, cfg)
    liver, s_l = _liver(r_l, grade, cfg)
    spleen, s_s = _spleen(r_s, grade, cfg)
    stats.update(s_l)
    stats.update(s_s)
    vols = {
        "esophagus": RoiVolume(eso.astype(np.float32), cfg.spacing),
        "liver": RoiVolume(liver.astype(np.float32), cfg.spacing),
        "spleen": RoiVolume(spleen.astype(np.float32), cfg.spacing),
    }
    return SyntheticCase(grade, vols, lesion, tube, stats)


def case_grades(cfg: SynthConfig) -> list[Grade]:
    return [g for g, n in zip(Grade, cfg.counts) for _ in range(n)]


def _write_case(args):
    index, grade, cfg, out_dir = args
    cid = f"case{index:04d}"
    case = synthesize_case((cfg.seed, index), grade, cfg)
    rel = {}
    for organ, vol in case.volumes.items():
        name = f"volumes/{cid}_{organ}.vol"
        write_volume(vol, out_dir / name)
        rel[organ] = name
    mask_name = f"volumes/{cid}_lesion.vol"
    write_volume(RoiVolume(case.lesion_mask.astype(np.float32), cfg.spacing), out_dir / mask_name)
    return CaseRecord(cid, rel, grade, mask_name)


def synthesize_dataset(cfg: SynthConfig, out_dir, workers: int = 1) -> DatasetManifest:
    """Write all case volumes plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out_dir} not writable: {exc}") from exc
    jobs = [(i, g, cfg, out_dir) for i, g in enumerate(case_grades(cfg))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_write_case, jobs))
    else:
        records = [_write_case(j) for j in jobs]
    manifest = DatasetManifest(records, out_dir, masked=cfg.masked)
    manifest.save(out_dir / "manifest.json")
    log.info("wrote %d synthetic cases to %s", len(records), out_dir)
    return manifest
