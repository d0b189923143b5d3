"""Procedural synthetic subjects: sampled identities and deterministic renders.

A subject's identity is (shape class, hue/saturation/value, optional stripe
texture, scale). Views vary rotation, translation, and background. Renders
are antialiased by 4x supersampling of analytic polygon/disk inside-tests.
Backgrounds are deliberately achromatic so hue carries identity only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from matplotlib.path import Path as MplPath

from .denoiser import BACKGROUND_CLASSES, SHAPE_CLASSES

PANEL_SIZE = 24
_SUPERSAMPLE = 4

# canonical geometry fits the unit disk so scale bounds panel coverage
SHAPE_AREAS = {
    "circle": np.pi,
    "square": 2.0,  # half-side 1/sqrt(2), corners on the unit circle
    "triangle": 3.0 * np.sqrt(3.0) / 4.0,  # equilateral, circumradius 1
    "star": 5.0 * 0.40 * np.sin(np.deg2rad(36.0)),  # outer 1, inner 0.40
    "cross": 8 * 0.21 - 4 * 0.21 ** 2,  # two 2 x 0.42 bars
    "ring": np.pi * (1.0 - 0.58 ** 2),
}


@dataclass(frozen=True)
class SubjectSpec:
    shape_class: str
    hue: float  # degrees [0, 360)
    saturation: float
    value: float
    texture: tuple[float, float] | None  # (stripe frequency, stripe angle deg)
    scale: float

    def __post_init__(self):
        if self.shape_class not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {self.shape_class!r}")
        if not (0.0 <= self.hue < 360.0):
            raise ValueError("hue must be in [0, 360)")
        for name in ("saturation", "value"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if not (0.4 <= self.scale <= 0.9):
            raise ValueError("scale must be in [0.4, 0.9]")


@dataclass(frozen=True)
class ViewParams:
    rotation: float = 0.0  # degrees
    translate: tuple[float, float] = (0.0, 0.0)  # (row, col) fraction of panel
    background: str = "plain"

    def __post_init__(self):
        if self.background not in BACKGROUND_CLASSES:
            raise ValueError(f"unknown background class {self.background!r}")


def sample_spec(seed) -> SubjectSpec:
    """Deterministic subject identity; fields uniform over their ranges."""
    rng = np.random.default_rng(seed)
    shape = SHAPE_CLASSES[rng.integers(0, len(SHAPE_CLASSES))]
    hue = float(rng.uniform(0.0, 360.0))
    sat = float(rng.uniform(0.0, 1.0))
    val = float(rng.uniform(0.0, 1.0))
    texture = None
    if rng.random() < 0.5:
        texture = (float(rng.uniform(2.0, 8.0)), float(rng.uniform(0.0, 180.0)))
    scale = float(rng.uniform(0.4, 0.9))
    return SubjectSpec(shape, hue, sat, val, texture, scale)


def sample_view(rng: np.random.Generator, spec: SubjectSpec) -> ViewParams:
    """View with translation bounded so the subject stays inside the panel."""
    max_frac = (1.0 - spec.scale) / 2.0
    return ViewParams(
        rotation=float(rng.uniform(0.0, 360.0)),
        translate=(float(rng.uniform(-max_frac, max_frac)), float(rng.uniform(-max_frac, max_frac))),
        background=BACKGROUND_CLASSES[rng.integers(0, len(BACKGROUND_CLASSES))],
    )


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


_POLY_CACHE: dict[str, MplPath] = {}


def _shape_path(shape: str) -> MplPath:
    if shape in _POLY_CACHE:
        return _POLY_CACHE[shape]
    if shape == "square":
        a = 1.0 / np.sqrt(2.0)
        verts = [(-a, -a), (a, -a), (a, a), (-a, a)]
    elif shape == "triangle":
        ang = np.deg2rad([90.0, 210.0, 330.0])
        verts = list(zip(np.cos(ang), np.sin(ang)))
    elif shape == "star":
        ang = np.deg2rad(90.0 + 36.0 * np.arange(10))
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.40)
        verts = list(zip(rad * np.cos(ang), rad * np.sin(ang)))
    elif shape == "cross":
        a = 0.21
        verts = [(1, a), (a, a), (a, 1), (-a, 1), (-a, a), (-1, a),
                 (-1, -a), (-a, -a), (-a, -1), (a, -1), (a, -a), (1, -a)]
    else:
        raise ValueError(shape)
    path = MplPath(np.asarray(verts, dtype=np.float64), closed=False)
    _POLY_CACHE[shape] = path
    return path


def _inside(shape: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r2 = x * x + y * y
    if shape == "circle":
        return r2 <= 1.0
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.58 ** 2)
    pts = np.column_stack([x.ravel(), y.ravel()])
    return _shape_path(shape).contains_points(pts).reshape(x.shape)


def render_background(background: str, size: int, noise_seed: int = 0) -> np.ndarray:
    """Achromatic background value field in [0, 1], shape (size, size)."""
    if background == "plain":
        return np.ones((size, size), dtype=np.float64)
    if background == "gradient":
        ramp = np.linspace(0.25, 0.95, size)
        return np.repeat(ramp[:, None], size, axis=1)
    if background == "checker":
        cell = max(size // 6, 1)
        rr, cc = np.meshgrid(np.arange(size) // cell, np.arange(size) // cell, indexing="ij")
        return np.where((rr + cc) % 2 == 0, 0.85, 0.45)
    if background == "noise":
        rng = np.random.default_rng(noise_seed)
        return rng.uniform(0.50, 0.70, size=(size, size))
    raise ValueError(f"unknown background class {background!r}")


def render_view(spec: SubjectSpec, view: ViewParams, size: int = PANEL_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Render (rgb uint8 (size,size,3), alpha uint8 (size,size)).

    Alpha is the antialiased subject coverage; rgb composites the subject
    over the view's background.
    """
    ss = _SUPERSAMPLE
    big = size * ss
    rot = view.rotation % 360.0
    radius = spec.scale * size / 2.0
    # pixel centers in panel coordinates, row -> y down; shape frame is y-up
    coords = (np.arange(big) + 0.5) / ss
    py, px = np.meshgrid(coords, coords, indexing="ij")
    cx = size / 2.0 + view.translate[1] * size
    cy = size / 2.0 + view.translate[0] * size
    ux = (px - cx) / radius
    uy = -(py - cy) / radius
    th = np.deg2rad(rot)
    lx = np.cos(th) * ux + np.sin(th) * uy
    ly = -np.sin(th) * ux + np.cos(th) * uy
    mask = _inside(spec.shape_class, lx, ly).astype(np.float64)
    alpha = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))

    value = np.full((big, big), spec.value, dtype=np.float64)
    if spec.texture is not None:
        freq, angle = spec.texture
        ar = np.deg2rad(angle)
        u = np.cos(ar) * lx + np.sin(ar) * ly  # stripes anchored to the subject frame
        stripes = 0.5 + 0.5 * np.sin(np.pi * freq * u)
        value = value * (1.0 - 0.45 * stripes)
    value = (value * mask).reshape(size, ss, size, ss).mean(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        value = np.where(alpha > 0, value / np.maximum(alpha, 1e-12), 0.0)

    hsv = np.zeros((size, size, 3), dtype=np.float64)
    hsv[:, :, 0] = spec.hue / 360.0
    hsv[:, :, 1] = spec.saturation
    hsv[:, :, 2] = value
    subject_rgb = hsv_to_rgb(hsv)

    noise_seed = _stable_seed(spec, rot, view.translate, view.background, size)
    bg = render_background(view.background, size, noise_seed=noise_seed)
    rgb = alpha[:, :, None] * subject_rgb + (1.0 - alpha[:, :, None]) * bg[:, :, None]
    rgb8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    alpha8 = np.round(alpha * 255.0).astype(np.uint8)
    return rgb8, alpha8


def segment_to_white(rgb: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Replace background (alpha-weighted) with white, the toy analog of
    reference background removal."""
    a = alpha.astype(np.float64)[:, :, None] / 255.0
    fg = rgb.astype(np.float64)
    out = a * fg + (1.0 - a) * 255.0
    return np.round(out).astype(np.uint8)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class SubjectRecord:
    index: int
    spec: SubjectSpec
    views: list[tuple[np.ndarray, np.ndarray]]  # (rgb, alpha) per view
    view_params: list[ViewParams]


def subject_seed(corpus_seed: int, index: int) -> list[int]:
    return [corpus_seed, index]


def build_corpus(num_subjects: int, views_per_subject: int, seed: int,
                 size: int = PANEL_SIZE) -> list[SubjectRecord]:
    """In-memory corpus; subject i is fully determined by (seed, i)."""
    records = []
    for i in range(num_subjects):
        spec = sample_spec(subject_seed(seed, i))
        rng = np.random.default_rng([seed, i, 1])
        views, params = [], []
        for _ in range(views_per_subject):
            vp = sample_view(rng, spec)
            views.append(render_view(spec, vp, size))
            params.append(vp)
        records.append(SubjectRecord(i, spec, views, params))
    return records


def spec_to_text(spec: SubjectSpec) -> str:
    lines = [
        f"shape={spec.shape_class}",
        f"hue={spec.hue!r}",
        f"saturation={spec.saturation!r}",
        f"value={spec.value!r}",
        f"scale={spec.scale!r}",
    ]
    if spec.texture is not None:
        lines.append(f"stripe_freq={spec.texture[0]!r}")
        lines.append(f"stripe_angle={spec.texture[1]!r}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SubjectSpec:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if line and "=" in line:
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
    texture = None
    if "stripe_freq" in kv:
        texture = (float(kv["stripe_freq"]), float(kv.get("stripe_angle", "0.0")))
    return SubjectSpec(
        shape_class=kv["shape"],
        hue=float(kv["hue"]),
        saturation=float(kv["saturation"]),
        value=float(kv["value"]),
        texture=texture,
        scale=float(kv["scale"]),
    )


def save_corpus(records: list[SubjectRecord], root: str | Path) -> None:
    from .fileio import write_png

    root = Path(root)
    for rec in records:
        sub = root / f"subject_{rec.index:04d}"
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "spec.txt").write_text(spec_to_text(rec.spec))
        for j, (rgb, alpha) in enumerate(rec.views):
            write_png(sub / f"view_{j:02d}.png", np.dstack([rgb, alpha]))


def load_corpus(root: str | Path) -> list[SubjectRecord]:
    from .fileio import read_png

    root = Path(root)
    records = []
    for i, sub in enumerate(sorted(root.glob("subject_*"))):
        spec = spec_from_text((sub / "spec.txt").read_text())
        views = []
        for png in sorted(sub.glob("view_*.png")):
            img = read_png(png)
            views.append((img[:, :, :3], img[:, :, 3]))
        records.append(SubjectRecord(i, spec, views, []))
    return records
