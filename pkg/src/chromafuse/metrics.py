"""Fusion quality metrics: MI, VIF, SF, Qabf, SD and the CIELAB Delta E.

All metrics except Delta E operate on single-channel intensity images in
[0, 1]; color inputs are reduced with the 0.299/0.587/0.114 luminance
weights. Delta E compares the fused image against the visible source in
full color. Conventions, pinned here once:

* MI uses 256-bin joint histograms over the 8-bit quantization grid and
  base-2 logarithms; empty bins contribute zero.
* VIF is the four-scale pixel-domain formulation with Gaussian windows of
  size 2^(5-scale)+1 (sd = N/5), noise variance 2, per-block fidelity
  ratios weighted by the reference information content (so the weighted
  sum collapses to sum(num)/sum(den), and a perfect copy scores 1).
* SF is sqrt of the mean squared horizontal plus vertical first
  differences, each averaged over its own difference count.
* Qabf uses 3x3 Sobel strength/orientation (replicate-padded, so constant
  images carry no edges) and the sigmoid edge-retention model with
  constants 0.9994/-15/0.5 (strength) and 0.9879/-22/0.8 (orientation),
  weighted by source edge strength; with no source edges at all the
  metric is defined as 0.
* SD is the population standard deviation on the [0, 255] scale.
* Delta E is the mean per-pixel CIEDE2000 (kL = kC = kH = 1) after sRGB ->
  Lab conversion with D65 white.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color import ciede2000, srgb_to_lab

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_QABF_STRENGTH = (0.9994, -15.0, 0.5)  # gamma, kappa, sigma
_QABF_ORIENT = (0.9879, -22.0, 0.8)
_VIF_NOISE_VAR = 2.0
_VIF_EPS = 1e-10


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance of an (H, W, 3) image; single-channel input passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 1:
        return arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr @ GRAY_WEIGHTS
    raise ValueError(f"cannot convert shape {arr.shape} to a gray image")


def _check_gray(image: np.ndarray, what: str, min_side: int = 1) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{what} must be a non-empty (H, W) image, got shape {arr.shape}")
    if min(arr.shape) < min_side:
        raise ValueError(f"{what} must be at least {min_side}x{min_side}, got {arr.shape}")
    return arr


def quantize_255(image: np.ndarray) -> np.ndarray:
    """Round-half-up quantization to the 256-level grid."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.int64)


# -- mutual information -----------------------------------------------------

def _mi_single(a: np.ndarray, f: np.ndarray) -> float:
    qa = quantize_255(a).ravel()
    qf = quantize_255(f).ravel()
    joint = np.bincount(qa * 256 + qf, minlength=256 * 256).reshape(256, 256)
    p = joint / joint.sum()
    pa = p.sum(axis=1, keepdims=True)
    pf = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = np.divide(p, pa * pf, out=np.ones_like(p), where=mask)
    return float(np.sum(p[mask] * np.log2(ratio[mask])))


def metric_mi(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """I(A; F) + I(B; F) in bits from 256-bin joint histograms."""
    a = _check_gray(a, "source A")
    b = _check_gray(b, "source B")
    f = _check_gray(f, "fused image")
    if a.shape != f.shape or b.shape != f.shape:
        raise ValueError(f"shape mismatch: A {a.shape}, B {b.shape}, F {f.shape}")
    return _mi_single(a, f) + _mi_single(b, f)


# -- visual information fidelity ---------------------------------------------

def _gaussian_window(n: int) -> np.ndarray:
    sd = n / 5.0
    half = (n - 1) / 2.0
    coords = np.arange(n) - half
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2.0 * sd * sd))
    return g / g.sum()


def _filter2_same(image: np.ndarray, kernel: np.ndarray, edge_pad: bool = False) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((ph, ph), (pw, pw)), mode="edge" if edge_pad else "constant")
    h, w = image.shape
    out = np.zeros_like(image)
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i : i + h, j : j + w]
    return out


def _fidelity_terms(
    s1: np.ndarray, s2: np.ndarray, s12: np.ndarray, noise_var: float = _VIF_NOISE_VAR
) -> tuple[np.ndarray, np.ndarray]:
    """Per-block information terms of the GSM fidelity model.

    Returns (num, den): information about the reference that survives in
    the distorted signal, and the total reference information.
    """
    s1 = np.maximum(s1, 0.0)
    s2 = np.maximum(s2, 0.0)
    g = s12 / (s1 + _VIF_EPS)
    sv = s2 - g * s12
    g = np.where(s1 < _VIF_EPS, 0.0, g)
    sv = np.where(s1 < _VIF_EPS, s2, sv)
    s1 = np.where(s1 < _VIF_EPS, 0.0, s1)
    sv = np.where(s2 < _VIF_EPS, 0.0, sv)
    g = np.where(s2 < _VIF_EPS, 0.0, g)
    sv = np.where(g < 0.0, s2, sv)
    g = np.maximum(g, 0.0)
    sv = np.maximum(sv, _VIF_EPS)
    num = np.log(1.0 + g * g * s1 / (sv + noise_var))
    den = np.log(1.0 + s1 / noise_var)
    return num, den


def _vif_accumulate(ref: np.ndarray, dist: np.ndarray, scales: int = 4) -> tuple[float, float]:
    num = 0.0
    den = 0.0
    for scale in range(1, scales + 1):
        n = 2 ** (4 - scale + 1) + 1
        win = _gaussian_window(n)
        if scale > 1:
            ref = _filter2_same(ref, win)[::2, ::2]
            dist = _filter2_same(dist, win)[::2, ::2]
        mu1 = _filter2_same(ref, win)
        mu2 = _filter2_same(dist, win)
        s1 = _filter2_same(ref * ref, win) - mu1 * mu1
        s2 = _filter2_same(dist * dist, win) - mu2 * mu2
        s12 = _filter2_same(ref * dist, win) - mu1 * mu2
        n_terms, d_terms = _fidelity_terms(s1, s2, s12)
        num += float(n_terms.sum())
        den += float(d_terms.sum())
    return num, den


def metric_vif(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Fusion VIF: fidelity of F against both sources, saliency-weighted.

    Weighting each block's num/den ratio by its reference information
    reduces the aggregate to (num_A + num_B) / (den_A + den_B); identical
    images score 1 and information loss pushes the value below 1.
    """
    a = _check_gray(a, "source A", min_side=32)
    b = _check_gray(b, "source B", min_side=32)
    f = _check_gray(f, "fused image", min_side=32)
    if a.shape != f.shape or b.shape != f.shape:
        raise ValueError(f"shape mismatch: A {a.shape}, B {b.shape}, F {f.shape}")
    num_a, den_a = _vif_accumulate(a, f)
    num_b, den_b = _vif_accumulate(b, f)
    den = den_a + den_b
    if den == 0.0:
        return 1.0
    return (num_a + num_b) / den


# -- spatial frequency and contrast -------------------------------------------

def metric_sf(f: np.ndarray) -> float:
    """sqrt(RF^2 + CF^2) with row/column RMS first differences on [0, 1]."""
    f = _check_gray(f, "fused image", min_side=2)
    rf2 = float(np.mean(np.diff(f, axis=1) ** 2))
    cf2 = float(np.mean(np.diff(f, axis=0) ** 2))
    return float(np.sqrt(rf2 + cf2))


def metric_sd(f: np.ndarray) -> float:
    """Population standard deviation of intensities on the [0, 255] scale."""
    f = _check_gray(f, "fused image")
    if np.ptp(f) == 0.0:
        return 0.0  # exactly zero on constants, free of mean-rounding residue
    return float(np.std(f * 255.0))


# -- edge transfer (Qabf) ------------------------------------------------------

def _edge_strength_orientation(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # replicate borders: constant images must carry zero edge strength
    sx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    sy = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])
    gx = _filter2_same(image, sx, edge_pad=True)
    gy = _filter2_same(image, sy, edge_pad=True)
    strength = np.hypot(gx, gy)
    orientation = np.where(gx == 0.0, np.pi / 2.0, np.arctan(np.divide(gy, gx, out=np.zeros_like(gy), where=gx != 0.0)))
    return strength, orientation


def _edge_preservation(g_src: np.ndarray, a_src: np.ndarray, g_f: np.ndarray, a_f: np.ndarray) -> np.ndarray:
    ratio = np.ones_like(g_src)
    bigger = g_src > g_f
    smaller = g_src < g_f
    ratio[bigger] = g_f[bigger] / g_src[bigger]
    ratio[smaller] = g_src[smaller] / g_f[smaller]
    angle = 1.0 - np.abs(a_src - a_f) / (np.pi / 2.0)
    gamma_g, kappa_g, sigma_g = _QABF_STRENGTH
    gamma_a, kappa_a, sigma_a = _QABF_ORIENT
    q_g = gamma_g / (1.0 + np.exp(kappa_g * (ratio - sigma_g)))
    q_a = gamma_a / (1.0 + np.exp(kappa_a * (angle - sigma_a)))
    return q_g * q_a


def metric_qabf(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Edge-transfer quality in [0, 1], weighted by source edge strength."""
    a = _check_gray(a, "source A", min_side=3)
    b = _check_gray(b, "source B", min_side=3)
    f = _check_gray(f, "fused image", min_side=3)
    if a.shape != f.shape or b.shape != f.shape:
        raise ValueError(f"shape mismatch: A {a.shape}, B {b.shape}, F {f.shape}")
    g_a, o_a = _edge_strength_orientation(a)
    g_b, o_b = _edge_strength_orientation(b)
    g_f, o_f = _edge_strength_orientation(f)
    q_af = _edge_preservation(g_a, o_a, g_f, o_f)
    q_bf = _edge_preservation(g_b, o_b, g_f, o_f)
    weight_sum = float(np.sum(g_a + g_b))
    if weight_sum == 0.0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b) / weight_sum)


# -- color fidelity -------------------------------------------------------------

def metric_delta_e(vis: np.ndarray, fused: np.ndarray) -> float:
    """Mean per-pixel CIEDE2000 between the visible source and the fused image."""
    vis = np.asarray(vis, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    if vis.shape != fused.shape or vis.ndim != 3 or vis.shape[2] != 3:
        raise ValueError(f"expected matching (H, W, 3) images, got {vis.shape} and {fused.shape}")
    for name, arr in (("visible", vis), ("fused", fused)):
        if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} image values must lie in [0, 1]")
    return float(np.mean(ciede2000(srgb_to_lab(np.clip(vis, 0, 1)), srgb_to_lab(np.clip(fused, 0, 1)))))


# -- reporting -------------------------------------------------------------------

METRIC_NAMES = ("MI", "VIF", "SF", "Qabf", "SD", "DeltaE")


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    mi: float
    vif: float
    sf: float
    qabf: float
    sd: float
    delta_e: float

    def values(self) -> tuple[float, ...]:
        return (self.mi, self.vif, self.sf, self.qabf, self.sd, self.delta_e)


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[PairMetrics, ...]

    def means(self) -> tuple[float, ...]:
        stacked = np.array([row.values() for row in self.rows])
        return tuple(float(v) for v in stacked.mean(axis=0))

    def to_records(self) -> str:
        lines = []
        for row in self.rows:
            fields = [row.pair_id] + [f"{v:.6f}" for v in row.values()]
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        id_width = max([len("pair")] + [len(r.pair_id) for r in self.rows])
        header = ["pair".ljust(id_width)] + [name.rjust(10) for name in METRIC_NAMES]
        lines = ["  ".join(header)]
        for row in self.rows:
            cells = [row.pair_id.ljust(id_width)] + [f"{v:10.6f}" for v in row.values()]
            lines.append("  ".join(cells))
        cells = ["mean".ljust(id_width)] + [f"{v:10.6f}" for v in self.means()]
        lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_pair(pair01: np.ndarray, fused01: np.ndarray, pair_id: str = "pair") -> PairMetrics:
    """Six metrics for one (H, W, 4) source pair and its (H, W, 3) fusion."""
    pair01 = np.asarray(pair01, dtype=np.float64)
    fused01 = np.asarray(fused01, dtype=np.float64)
    if pair01.ndim != 3 or pair01.shape[2] != 4:
        raise ValueError(f"source pair must be (H, W, 4), got {pair01.shape}")
    if fused01.shape != pair01.shape[:2] + (3,):
        raise ValueError(f"fused image shape {fused01.shape} does not match pair {pair01.shape[:2]}")
    vis = pair01[:, :, :3]
    ir = pair01[:, :, 3]
    vis_gray = to_gray(vis)
    fused_gray = to_gray(fused01)
    return PairMetrics(
        pair_id=pair_id,
        mi=metric_mi(ir, vis_gray, fused_gray),
        vif=metric_vif(ir, vis_gray, fused_gray),
        sf=metric_sf(fused_gray),
        qabf=metric_qabf(ir, vis_gray, fused_gray),
        sd=metric_sd(fused_gray),
        delta_e=metric_delta_e(vis, np.clip(fused01, 0.0, 1.0)),
    )


def evaluate(
    pair_ids: list[str], pairs: list[np.ndarray], fused_images: list[np.ndarray]
) -> MetricReport:
    """Per-pair metrics plus means, ordered by pair id."""
    if not (len(pair_ids) == len(pairs) == len(fused_images)):
        raise ValueError(
            f"count mismatch: {len(pair_ids)} ids, {len(pairs)} pairs, {len(fused_images)} fused images"
        )
    if len(pair_ids) == 0:
        raise ValueError("nothing to evaluate")
    if len(set(pair_ids)) != len(pair_ids):
        raise ValueError("pair ids must be unique")
    order = np.argsort(pair_ids)
    rows = tuple(
        evaluate_pair(pairs[i], fused_images[i], pair_id=pair_ids[i]) for i in map(int, order)
    )
    return MetricReport(rows=rows)
