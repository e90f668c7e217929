"""Image quality metrics and cloud-cover-binned reporting.

All metrics assume inputs normalized to [0,1] (data range 1.0); PSNR of
identical images is reported as the distinguished value ``PSNR_PERFECT``
(infinity). SAM is reported in degrees. Scenes are binned by cloud cover
percentage into [0,20), [20,40), [40,60), [60,80), [80,100].
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ShapeError

PSNR_PERFECT = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

BIN_EDGES = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)
METRIC_NAMES = ("psnr", "ssim", "sam", "mae")


def _check_pair(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"metric operands disagree: {list(pred.shape)} vs {list(ref.shape)}")
    return pred, ref


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """10*log10(1 / MSE) over all bands and pixels, data range 1.0."""
    pred, ref = _check_pair(pred, ref)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_PERFECT
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, ref: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows and bands."""
    pred, ref = _check_pair(pred, ref)
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]
    h, w = pred.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
                         f"SSIM window")
    kern = _gaussian_kernel()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def win_mean(img):
        sw = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW), axis=(-2, -1))
        return np.tensordot(sw, kern, axes=([-2, -1], [0, 1]))

    mu_p = win_mean(pred)
    mu_r = win_mean(ref)
    var_p = win_mean(pred * pred) - mu_p * mu_p
    var_r = win_mean(ref * ref) - mu_r * mu_r
    cov = win_mean(pred * ref) - mu_p * mu_r
    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def sam(pred: np.ndarray, ref: np.ndarray, eps: float = 1e-8) -> float:
    """Mean per-pixel spectral angle, in degrees.

    Evaluates arccos(<p,r>/(|p||r|)) through the equivalent, well-conditioned
    form 2*atan2(|u-v|, |u+v|) on the eps-guarded unit spectra, so identical
    spectra score exactly 0 and near-parallel spectra do not lose precision.
    """
    pred, ref = _check_pair(pred, ref)
    p = pred.reshape(pred.shape[0], -1)
    r = ref.reshape(ref.shape[0], -1)
    u = p / np.maximum(np.sqrt((p * p).sum(axis=0)), eps)
    v = r / np.maximum(np.sqrt((r * r).sum(axis=0)), eps)
    diff = np.sqrt(((u - v) ** 2).sum(axis=0))
    summ = np.sqrt(((u + v) ** 2).sum(axis=0))
    ang = 2.0 * np.arctan2(diff, summ)
    return float(np.degrees(ang).mean())


def mae(pred: np.ndarray, ref: np.ndarray) -> float:
    pred, ref = _check_pair(pred, ref)
    return float(np.mean(np.abs(pred - ref)))


# ---------------------------------------------------------------------------
# binned reporting


@dataclass
class SceneMetrics:
    psnr: float
    ssim: float
    sam: float
    mae: float
    coverage: float     # cloud fraction in [0,1]

    def values(self) -> dict[str, float]:
        return {"psnr": self.psnr, "ssim": self.ssim, "sam": self.sam, "mae": self.mae}


def score_scene(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray,
                bands: list[int] | None = None) -> SceneMetrics:
    """All four metrics for one scene; ``bands`` restricts to a subset."""
    if bands is not None:
        pred = np.asarray(pred)[bands]
        ref = np.asarray(ref)[bands]
    return SceneMetrics(psnr(pred, ref), ssim(pred, ref), sam(pred, ref),
                        mae(pred, ref), float(np.asarray(mask).mean()))


@dataclass
class BinStat:
    lo: float
    hi: float
    count: int
    means: dict[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.lo:.0f}-{self.hi:.0f}"


@dataclass
class MetricReport:
    scenes: list[SceneMetrics]
    bins: list[BinStat]
    overall: dict[str, float]


def bin_index(coverage: float) -> int:
    """Bin by coverage percent; the last bin includes 100%."""
    pct = coverage * 100.0
    for i in range(len(BIN_EDGES) - 1):
        if pct < BIN_EDGES[i + 1] or i == len(BIN_EDGES) - 2:
            return i
    return len(BIN_EDGES) - 2


def binned_report(scenes: list[SceneMetrics]) -> MetricReport:
    if not scenes:
        raise ValueError("binned_report requires at least one scene")
    groups: list[list[SceneMetrics]] = [[] for _ in range(len(BIN_EDGES) - 1)]
    for s in scenes:
        groups[bin_index(s.coverage)].append(s)
    bins = []
    for i, grp in enumerate(groups):
        means = {}
        if grp:
            for name in METRIC_NAMES:
                means[name] = float(np.mean([getattr(s, name) for s in grp]))
        bins.append(BinStat(BIN_EDGES[i], BIN_EDGES[i + 1], len(grp), means))
    overall = {name: float(np.mean([getattr(s, name) for s in scenes]))
               for name in METRIC_NAMES}
    return MetricReport(scenes, bins, overall)


def report_to_tsv(report: MetricReport) -> str:
    out = io.StringIO()
    out.write("metric\tbin\tvalue\tcount\n")
    for name in METRIC_NAMES:
        out.write(f"{name}\tall\t{report.overall[name]!r}\t{len(report.scenes)}\n")
        for b in report.bins:
            val = repr(b.means[name]) if b.count else ""
            out.write(f"{name}\t{b.label}\t{val}\t{b.count}\n")
    return out.getvalue()


def format_report(report: MetricReport) -> str:
    rows = [f"{'bin':>8} {'count':>5} " + " ".join(f"{n:>10}" for n in METRIC_NAMES)]
    for b in report.bins:
        cells = " ".join(f"{b.means[n]:10.4f}" if b.count else " " * 10
                         for n in METRIC_NAMES)
        rows.append(f"{b.label:>8} {b.count:5d} {cells}")
    cells = " ".join(f"{report.overall[n]:10.4f}" for n in METRIC_NAMES)
    rows.append(f"{'all':>8} {len(report.scenes):5d} {cells}")
    return "\n".join(rows)
