"""Scene normalization, synthetic paired-scene generation, and dataset I/O.

SAR backscatter is clipped per polarization (VV to [-25, 0] dB, VH to
[-32.5, 0] dB) and mapped linearly to [0, 1]; optical digital numbers are
clipped to [0, 10000] and divided by 10000.

The synthetic generator produces (cloud-free, cloudy, SAR, mask) quadruples
that exercise the fusion mechanism at desk scale: a smooth band-correlated
field plus sharp geometric primitives forms the ground truth; the SAR pair
is a monotone intensity remap of the scene structure multiplied by gamma
speckle and converted to dB; the cloud mask is thresholded smooth noise hit
to a target coverage; clouds alpha-blend a near-white layer over the truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .engine import ContractError
from .gtns import read_tensor, write_tensor

VV_RANGE = (-25.0, 0.0)
VH_RANGE = (-32.5, 0.0)
OPTICAL_MAX = 10000.0

SCENE_FILES = ("s1", "s2", "s2_cloudy", "mask")


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneTriplet:
    """One sample: all members normalized to [0,1], shared H x W."""

    s2_cloudfree: np.ndarray    # [bands, H, W]
    s2_cloudy: np.ndarray       # [bands, H, W]
    s1: np.ndarray              # [2, H, W]
    mask: np.ndarray            # [1, H, W], 1 = cloud

    def __post_init__(self):
        hw = self.s2_cloudfree.shape[1:]
        for name in ("s2_cloudy", "s1", "mask"):
            if getattr(self, name).shape[1:] != hw:
                raise ContractError(f"scene member {name} has spatial size "
                                    f"{getattr(self, name).shape[1:]}, expected {hw}")

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())

    @property
    def spatial(self) -> tuple[int, int]:
        return self.s2_cloudfree.shape[1], self.s2_cloudfree.shape[2]


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    bands: int = 13
    seed: int = 0
    speckle_looks: float = 1.0      # gamma shape; 1 = single-look (exponential)
    coverage: float = 0.4           # target cloud fraction
    cloud_softness: float = 0.1     # edge ramp width, in units of the noise field

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ContractError("scene size must be at least 16x16")
        if not 0.0 <= self.coverage <= 1.0:
            raise ContractError(f"coverage must lie in [0,1], got {self.coverage}")
        if self.speckle_looks <= 0:
            raise ContractError("speckle_looks must be > 0")


# ---------------------------------------------------------------------------
# normalization


def normalize_sar(vv_db: np.ndarray, vh_db: np.ndarray) -> np.ndarray:
    """Clip per-polarization dB backscatter and rescale linearly to [0,1]."""
    vv = (np.clip(vv_db, *VV_RANGE) - VV_RANGE[0]) / (VV_RANGE[1] - VV_RANGE[0])
    vh = (np.clip(vh_db, *VH_RANGE) - VH_RANGE[0]) / (VH_RANGE[1] - VH_RANGE[0])
    return np.stack([vv, vh]).astype(np.float32)


def normalize_optical(raw: np.ndarray) -> np.ndarray:
    """Clip digital numbers to [0, 10000] and rescale to [0,1]."""
    return (np.clip(raw, 0.0, OPTICAL_MAX) / OPTICAL_MAX).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic scenes


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _ground_truth(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w, bands = cfg.height, cfg.width, cfg.bands
    sigma = min(h, w) / 16.0
    latents = np.stack([gaussian_filter(rng.standard_normal((h, w)), sigma)
                        for _ in range(4)])
    mixing = rng.uniform(-1.0, 1.0, size=(bands, 4))
    truth = np.einsum("bl,lhw->bhw", mixing, latents)

    # sharp primitives shared across bands (what clouds occlude and SAR keeps)
    n_prims = int(rng.integers(5, 10))
    for _ in range(n_prims):
        stamp = np.zeros((h, w))
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
            hh = int(rng.integers(6, max(7, h // 3)))
            ww = int(rng.integers(6, max(7, w // 3)))
            stamp[y0:min(h, y0 + hh), x0:min(w, x0 + ww)] = 1.0
        else:  # thick line
            pos = int(rng.integers(2, (h if rng.random() < 0.5 else w) - 4))
            width = int(rng.integers(2, 5))
            if rng.random() < 0.5:
                stamp[pos:pos + width, :] = 1.0
            else:
                stamp[:, pos:pos + width] = 1.0
        amp = rng.uniform(0.4, 1.0) * np.sign(rng.uniform(-1, 1))
        shade = rng.uniform(0.6, 1.0, size=(bands, 1, 1))
        truth += amp * shade * stamp[None]

    truth = _minmax(truth)
    return (0.05 + 0.9 * truth).astype(np.float64)


def _sar_pair(truth: np.ndarray, cfg: SynthConfig,
              rng: np.random.Generator) -> np.ndarray:
    structure = truth.mean(axis=0)
    gy, gx = np.gradient(structure)
    edges = _minmax(np.hypot(gy, gx))
    s = np.clip(0.65 * _minmax(structure) + 0.35 * edges, 0.0, 1.0)

    looks = cfg.speckle_looks
    chans = []
    for lo, _hi in (VV_RANGE, VH_RANGE):
        intensity = 10.0 ** ((s * (-lo) + lo) / 10.0)       # dB in [lo, 0]
        speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=s.shape)
        db = 10.0 * np.log10(np.maximum(intensity * speckle, 1e-12))
        chans.append(db)
    return normalize_sar(chans[0], chans[1])


def _cloud_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    if cfg.coverage == 0.0:
        return np.zeros((h, w), dtype=np.float64)
    if cfg.coverage == 1.0:
        return np.ones((h, w), dtype=np.float64)
    fld = gaussian_filter(rng.standard_normal((h, w)), min(h, w) / 8.0)
    fld = _minmax(fld)
    soft = max(cfg.cloud_softness, 0.0)

    def mask_at(t):
        if soft == 0.0:
            return (fld > t).astype(np.float64)
        return np.clip((fld - t) / soft, 0.0, 1.0)

    lo, hi = -soft - 1.0, 2.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        mean = mask_at(mid).mean()
        if abs(mean - cfg.coverage) <= 0.005:
            return mask_at(mid)
        if mean > cfg.coverage:
            lo = mid
        else:
            hi = mid
    raise GenerationError(f"coverage {cfg.coverage} unreachable within 100 "
                          f"bisection steps (last mean {mean:.4f})")


def synth_scene(cfg: SynthConfig, scene_index: int = 0) -> SceneTriplet:
    """Deterministic scene for (cfg.seed, scene_index)."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    truth = _ground_truth(cfg, rng)
    s1 = _sar_pair(truth, cfg, rng)
    mask = _cloud_mask(cfg, rng)
    cloud = np.clip(0.92 + 0.06 * gaussian_filter(rng.standard_normal(mask.shape), 4.0),
                    0.75, 1.0)
    cloudy = (1.0 - mask) * truth + mask * cloud[None]
    return SceneTriplet(
        s2_cloudfree=truth.astype(np.float32),
        s2_cloudy=cloudy.astype(np.float32),
        s1=s1.astype(np.float32),
        mask=mask[None].astype(np.float32),
    )


def crop_sample(t: SceneTriplet, size: int, rng: np.random.Generator) -> SceneTriplet:
    """One shared random spatial window across all four members."""
    h, w = t.spatial
    if size > h or size > w:
        raise ContractError(f"crop {size} exceeds scene size {h}x{w}")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    sl = np.s_[:, y0:y0 + size, x0:x0 + size]
    return SceneTriplet(t.s2_cloudfree[sl], t.s2_cloudy[sl], t.s1[sl], t.mask[sl])


# ---------------------------------------------------------------------------
# dataset directories: root/scene_%06d/{s1,s2,s2_cloudy,mask}.gtns + manifest


def scene_dir(root, index: int) -> Path:
    return Path(root) / f"scene_{index:06d}"


def write_scene(directory, t: SceneTriplet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "s1.gtns", t.s1)
    write_tensor(directory / "s2.gtns", t.s2_cloudfree)
    write_tensor(directory / "s2_cloudy.gtns", t.s2_cloudy)
    write_tensor(directory / "mask.gtns", t.mask)


def read_scene(directory) -> SceneTriplet:
    directory = Path(directory)
    return SceneTriplet(
        s2_cloudfree=read_tensor(directory / "s2.gtns"),
        s2_cloudy=read_tensor(directory / "s2_cloudy.gtns"),
        s1=read_tensor(directory / "s1.gtns"),
        mask=read_tensor(directory / "mask.gtns"),
    )


def synth_dataset(root, n_scenes: int, cfg: SynthConfig,
                  coverage_range: tuple[float, float] | None = None) -> list[Path]:
    """Write ``n_scenes`` deterministic scenes plus ``manifest.tsv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    dirs = []
    for i in range(n_scenes):
        scene_cfg = cfg
        if coverage_range is not None:
            lo, hi = coverage_range
            u = np.random.default_rng([cfg.seed, i, 9]).uniform(lo, hi)
            scene_cfg = replace(cfg, coverage=round(float(u), 4))
        t = synth_scene(scene_cfg, scene_index=i)
        d = scene_dir(root, i)
        write_scene(d, t)
        dirs.append(d)
        rows.append((i, t.spatial[0], t.spatial[1], f"{t.coverage:.6f}"))
    with open(root / "manifest.tsv", "w", newline="") as fp:
        writer = csv.writer(fp, delimiter="\t", lineterminator="\n")
        writer.writerow(("scene", "height", "width", "coverage"))
        writer.writerows(rows)
    return dirs


class SceneDataset:
    """Lazy reader over a dataset directory written by :func:`synth_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.tsv"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest.tsv under {self.root}")
        with open(manifest, newline="") as fp:
            reader = csv.reader(fp, delimiter="\t")
            header = next(reader)
            self.rows = [dict(zip(header, row)) for row in reader]

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i: int) -> SceneTriplet:
        return read_scene(scene_dir(self.root, int(self.rows[i]["scene"])))

    def coverage(self, i: int) -> float:
        return float(self.rows[i]["coverage"])
