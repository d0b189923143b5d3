"""Toy identity and condition-alignment scores for generated panels.

identity_score combines hue-histogram similarity (0.5), silhouette IoU under
a rotation/translation search (0.3), and a radial texture-frequency match
(0.2) against the spec's canonical render. condition_alignment checks the
background region's value histogram against the conditioned background
class. Both are deterministic and bounded to [0, 1].
"""

from __future__ import annotations

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .denoiser import BACKGROUND_CLASSES, Condition
from .subjects import SubjectSpec, ViewParams, render_background, render_view

HUE_BINS = 36
VALUE_BINS = 24
# below this total weight a hue histogram carries no signal
_HUE_NEGLIGIBLE = 0.05
# silhouette search: full-circle rotations every 15 deg; translations every
# 2 px within +/-4 px after centroid pre-alignment
_ROTATIONS = tuple(float(r) for r in range(0, 360, 15))
_SHIFTS = tuple(range(-4, 5, 2))


def _palette(spec: SubjectSpec) -> np.ndarray:
    """RGB colors the subject can take (stripe shading modulates value)."""
    mods = np.linspace(0.55, 1.0, 8) if spec.texture is not None else np.array([1.0])
    hsv = np.stack([
        np.full_like(mods, spec.hue / 360.0),
        np.full_like(mods, spec.saturation),
        np.clip(spec.value * mods, 0.0, 1.0),
    ], axis=1)
    return hsv_to_rgb(hsv.reshape(-1, 1, 3)).reshape(-1, 3)


def _background_residual(rgb01: np.ndarray) -> np.ndarray:
    """Pixelwise distance to the best-fitting background class, chosen by
    the median residual over the 1-px border ring (translation bounds keep
    the subject interior, so the ring is background)."""
    size = rgb01.shape[0]
    v = rgb_to_hsv(rgb01)[:, :, 2]
    gray = rgb01.mean(axis=2, keepdims=True)
    chroma = np.sqrt(((rgb01 - gray) ** 2).sum(axis=2))
    ring = np.zeros((size, size), dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    best = None
    for cls in BACKGROUND_CLASSES:
        if cls == "noise":
            resid = np.maximum(v - 0.70, 0.0) + np.maximum(0.50 - v, 0.0)
        else:
            resid = np.abs(v - render_background(cls, size))
        dist = np.hypot(chroma, resid)
        score = np.median(dist[ring])
        if best is None or score < best[0]:
            best = (score, dist)
    return best[1]


def _subject_confidence(rgb01: np.ndarray, spec: SubjectSpec) -> np.ndarray:
    """Soft subject coverage in [0, 1]: the palette-vs-background likelihood
    ratio. The background distance is the residual against the panel's own
    fitted background field (value-aware, so gray subjects stay visible),
    floored by the distance to the achromatic-gray family. On a blended
    boundary pixel the ratio equals the blend coverage exactly."""
    shape2d = rgb01.shape[:2]
    flat = rgb01.reshape(-1, 3)
    pal = _palette(spec)
    d_subj = np.sqrt(((flat[:, None, :] - pal[None, :, :]) ** 2).sum(axis=2)).min(axis=1).reshape(shape2d)
    gray = np.clip(flat.mean(axis=1, keepdims=True), 0.25, 1.0)
    d_gray = np.sqrt(((flat - gray) ** 2).sum(axis=1)).reshape(shape2d)
    d_bg = np.maximum(_background_residual(rgb01), d_gray)
    return np.clip(d_bg / (d_bg + d_subj + 1e-9), 0.0, 1.0)


def _subject_mask(rgb01: np.ndarray, spec: SubjectSpec) -> np.ndarray:
    return _subject_confidence(rgb01, spec) > 0.5


def hue_histogram(rgb01: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Saturation*value-weighted hue histogram over the masked region.

    Soft circular binning (mass split linearly between the two nearest bin
    centers) keeps hues near a bin edge from flipping with quantization."""
    hsv = rgb_to_hsv(rgb01)
    h = hsv[:, :, 0][mask]
    w = (hsv[:, :, 1] * hsv[:, :, 2])[mask]
    pos = h * HUE_BINS - 0.5
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    hist = np.zeros(HUE_BINS)
    np.add.at(hist, i0 % HUE_BINS, w * (1.0 - f))
    np.add.at(hist, (i0 + 1) % HUE_BINS, w * f)
    return hist


def _normalized_intersection(a: np.ndarray, b: np.ndarray, negligible: float = 1e-9) -> float:
    """Histogram intersection after L1 normalization.

    When both totals are negligible there is nothing to compare and the
    match is vacuously 1; when only one side carries mass it is 0.
    """
    ta, tb = a.sum(), b.sum()
    if ta <= negligible and tb <= negligible:
        return 1.0
    if ta <= negligible or tb <= negligible:
        return 0.0
    return float(np.minimum(a / ta, b / tb).sum())


def _shift2d(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    rs0, rs1 = max(dr, 0), min(h + dr, h)
    cs0, cs1 = max(dc, 0), min(w + dc, w)
    out[rs0:rs1, cs0:cs1] = mask[rs0 - dr : rs1 - dr, cs0 - dc : cs1 - dc]
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    """Soft Jaccard over [0,1]-valued masks."""
    union = np.maximum(a, b).sum()
    if union <= 0:
        return 0.0
    return float(np.minimum(a, b).sum() / union)


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    rr, cc = np.nonzero(mask)
    return float(rr.mean()), float(cc.mean())


def _erode(mask: np.ndarray) -> np.ndarray:
    """1-px erosion to keep histograms off the antialiased boundary; falls
    back to the input if it would empty the mask (thin shapes)."""
    out = mask.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out &= _shift2d(mask, dr, dc)
    return out if out.any() else mask


_CANON_CACHE: dict[tuple[SubjectSpec, int], dict] = {}


def _canonical_artifacts(spec: SubjectSpec, size: int) -> dict:
    """Per-spec canonical render, histograms, and rotated silhouettes."""
    key = (spec, size)
    if key in _CANON_CACHE:
        return _CANON_CACHE[key]
    canon_rgb, canon_alpha = render_view(spec, ViewParams(background="plain"), size)
    canon01 = canon_rgb.astype(np.float64) / 255.0
    canon_mask = canon_alpha > 127
    sils = []
    for rot in _ROTATIONS:
        _, alpha = render_view(spec, ViewParams(rotation=rot, background="plain"), size)
        sil = alpha.astype(np.float64) / 255.0
        if (sil > 0.5).any():
            sils.append((rot, sil, _centroid(sil > 0.5)))
    canon_core = _erode(canon_mask)
    # eroded and full-mask histograms both kept so the panel side pairs with
    # whichever rule it actually applied (thin shapes fall back to full)
    art = {
        "hue_hist": {True: hue_histogram(canon01, canon_core),
                     False: hue_histogram(canon01, canon_mask)},
        "rgb_hist": {True: _rgb_histogram(canon01, canon_core),
                     False: _rgb_histogram(canon01, canon_mask)},
        "chromatic": spec.saturation * spec.value >= 0.05,
        "radial": _radial_profile(canon01, canon_mask),
        "silhouettes": sils,
    }
    if len(_CANON_CACHE) > 1024:
        _CANON_CACHE.clear()
    _CANON_CACHE[key] = art
    return art


def _best_silhouette_iou(est_f: np.ndarray, spec: SubjectSpec, size: int) -> float:
    hard = est_f > 0.5
    if not hard.any():
        return 0.0
    er, ec = _centroid(hard)
    best, best_rot = 0.0, None
    arts = _canonical_artifacts(spec, size)
    for rot, sil, (sr, sc) in arts["silhouettes"]:
        # floor/ceil bases cover both parities around the centroid alignment
        bases_r = {int(np.floor(er - sr)), int(np.ceil(er - sr))}
        bases_c = {int(np.floor(ec - sc)), int(np.ceil(ec - sc))}
        for br in bases_r:
            for bc in bases_c:
                for dr in _SHIFTS:
                    for dc in _SHIFTS:
                        val = _iou(est_f, _shift2d(sil, br + dr, bc + dc))
                        if val > best:
                            best, best_rot = val, rot
    if best_rot is not None:
        # refinement around the winner: exact-centroid translation (thin
        # shapes lose a lot of overlap to half-pixel snapping) and half-grid
        # rotations, which the 15-degree grid quantizes away for pointy shapes
        s0r, s0c = next((sr, sc) for r, _, (sr, sc) in arts["silhouettes"] if r == best_rot)
        for rot in (best_rot, best_rot - 7.5, best_rot + 7.5):
            refined = render_view(
                spec,
                ViewParams(rotation=rot % 360.0,
                           translate=((er - s0r) / size, (ec - s0c) / size),
                           background="plain"),
                size,
            )[1].astype(np.float64) / 255.0
            best = max(best, _iou(est_f, refined))
    return best


def _radial_profile(rgb01: np.ndarray, mask: np.ndarray, bands: int = 6,
                    band_width: float = 2.0) -> np.ndarray:
    """Energy per radial frequency band (band_width cycles per panel wide)
    of the masked value channel. The DC term is dropped; the lowest band
    (mask envelope) stays, which keeps flat subjects self-consistent."""
    v = rgb_to_hsv(rgb01)[:, :, 2].astype(np.float64)
    v = np.where(mask, v, 0.0)
    spec2d = np.abs(np.fft.fft2(v))
    h, w = v.shape
    fr = np.fft.fftfreq(h)[:, None] * h
    fc = np.fft.fftfreq(w)[None, :] * w
    rad = np.sqrt(fr ** 2 + fc ** 2)
    prof = np.zeros(bands)
    for b in range(bands):
        sel = (rad >= 0.5 + b * band_width) & (rad < 0.5 + (b + 1) * band_width)
        if sel.any():
            prof[b] = spec2d[sel].sum()
    return prof


def identity_score(panel_rgb: np.ndarray, spec: SubjectSpec) -> float:
    """How well a generated panel preserves the subject's identity.

    Returns 0.0 by convention for panels with no detectable subject region.
    """
    if panel_rgb.ndim != 3 or panel_rgb.shape[2] != 3 or panel_rgb.shape[0] != panel_rgb.shape[1]:
        raise ValueError("panel must be square (S, S, 3)")
    size = panel_rgb.shape[0]
    rgb01 = panel_rgb.astype(np.float64) / 255.0
    soft = _subject_confidence(rgb01, spec)
    est = soft > 0.5
    if not est.any():
        return 0.0

    art = _canonical_artifacts(spec, size)
    core = _erode(est)
    eroded = core is not est
    hue_sim = _normalized_intersection(_rgb_histogram(rgb01, core), art["rgb_hist"][eroded])
    if art["chromatic"]:
        # hue is only meaningful above the uint8 quantization floor; near the
        # floor whichever color reading agrees better wins
        hue_sim = max(hue_sim, _normalized_intersection(
            hue_histogram(rgb01, core), art["hue_hist"][eroded], negligible=_HUE_NEGLIGIBLE))
    iou = _best_silhouette_iou(soft, spec, size)
    tex_sim = _normalized_intersection(_radial_profile(rgb01, est), art["radial"])
    return float(np.clip(0.5 * hue_sim + 0.3 * iou + 0.2 * tex_sim, 0.0, 1.0))


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out |= _shift2d(mask, dr, dc)
    return out


def _value_histogram(values: np.ndarray, bins: int = VALUE_BINS) -> np.ndarray:
    hist, _ = np.histogram(values, bins=bins, range=(0.0, 1.0 + 1e-9))
    smooth = np.convolve(hist.astype(np.float64), [0.25, 0.5, 0.25], mode="same")
    return smooth


def _rgb_histogram(rgb01: np.ndarray, mask: np.ndarray,
                   confidence: np.ndarray | None = None, bins: int = 9) -> np.ndarray:
    """Trilinear-soft RGB histogram, the hue surrogate for near-achromatic
    subjects: RGB is the quantization-native space, and soft binning keeps
    colors near bin edges from flipping between views."""
    pts = np.clip(rgb01[mask], 0.0, 1.0) * (bins - 1)
    i0 = np.floor(pts).astype(int)
    i0 = np.minimum(i0, bins - 2)
    f = pts - i0
    base_w = np.ones(pts.shape[0]) if confidence is None else confidence[mask] ** 2
    hist = np.zeros((bins, bins, bins))
    for dr in (0, 1):
        for dg in (0, 1):
            for db in (0, 1):
                w = base_w * (np.abs(1 - dr - f[:, 0]) * np.abs(1 - dg - f[:, 1])
                              * np.abs(1 - db - f[:, 2]))
                np.add.at(hist, (i0[:, 0] + dr, i0[:, 1] + dg, i0[:, 2] + db), w)
    return hist.ravel()


def condition_alignment(panel_rgb: np.ndarray, cond: Condition) -> float:
    """Does the panel's background match the conditioned background class?

    The reference histogram is taken from the canonical background field at
    the same pixels as the panel's estimated background region, so subject
    occlusion biases both sides equally. Conditions without a background
    constraint score 1.0 (nothing to check).
    """
    if cond.background is None:
        return 1.0
    if cond.background not in BACKGROUND_CLASSES:
        raise ValueError(f"unknown background class {cond.background!r}")
    size = panel_rgb.shape[0]
    rgb01 = panel_rgb.astype(np.float64) / 255.0
    # subject-ish pixels: far from the achromatic background family
    gray = np.clip(rgb01.mean(axis=2, keepdims=True), 0.25, 1.0)
    d_bg = np.sqrt(((rgb01 - gray) ** 2).sum(axis=2))
    bg_region = ~_dilate(d_bg > 0.10)
    if bg_region.sum() < 8:
        return 0.0
    values = rgb_to_hsv(rgb01)[:, :, 2]
    field = render_background(cond.background, size, noise_seed=0)
    hist = _value_histogram(values[bg_region])
    ref = _value_histogram(field[bg_region])
    return float(np.clip(_normalized_intersection(hist, ref), 0.0, 1.0))
