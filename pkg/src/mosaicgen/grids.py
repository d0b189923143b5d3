"""Latent grids, mosaic layouts, panel masks, and panel extraction.

A latent is a plain float32 ndarray of shape (height, width, channels).
A mosaic arranges rows x cols panels of identical size into one latent;
one panel is the synthesis target and the rest hold reference views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Latent = np.ndarray  # float (H, W, C), finite values
PanelMask = np.ndarray  # bool (H, W), True on the region to synthesize


def validate_latent(arr: np.ndarray, name: str = "latent") -> None:
    if not isinstance(arr, np.ndarray) or arr.ndim != 3:
        raise ValueError(f"{name} must be a rank-3 ndarray (H, W, C)")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has a zero-sized dimension: {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")


def to_latent(
    image: np.ndarray,
    value_range: tuple[float, float] = (-1.0, 1.0),
    background_fill: float = 1.0,
) -> Latent:
    """Map an 8-bit RGB(A) raster into a latent with values in `value_range`.

    Pixels with alpha == 0 are treated as background and set to
    `background_fill` (default 1.0 == white) in every channel.
    """
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] not in (3, 4):
        raise ValueError("image must be (H, W, 3) or (H, W, 4) uint8")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("zero-sized image")
    lo, hi = value_range
    rgb = image[:, :, :3].astype(np.float32) / 255.0
    out = lo + (hi - lo) * rgb
    if image.shape[2] == 4:
        bg = image[:, :, 3] == 0
        out[bg] = np.float32(background_fill)
    return out.astype(np.float32)


def make_assignment(
    rows: int,
    cols: int,
    target: tuple[int, int],
    num_references: int,
    mode: str = "cycle",
    seed: int = 0,
) -> dict[tuple[int, int], int]:
    """Assign a reference index to every non-target panel.

    `cycle` walks panels in raster order assigning 0,1,2,... modulo the
    reference count; `random` draws uniformly (with replacement) from the
    seeded generator. Pure function of its arguments.
    """
    if num_references < 1:
        raise ValueError("num_references must be >= 1")
    if mode not in ("cycle", "random"):
        raise ValueError(f"unknown assignment mode: {mode!r}")
    rng = np.random.default_rng(seed)
    assignment: dict[tuple[int, int], int] = {}
    k = 0
    for r in range(rows):
        for c in range(cols):
            if (r, c) == target:
                continue
            if mode == "cycle":
                assignment[(r, c)] = k % num_references
                k += 1
            else:
                assignment[(r, c)] = int(rng.integers(0, num_references))
    return assignment


@dataclass(frozen=True)
class MosaicLayout:
    """Grid geometry plus the per-panel reference assignment."""

    rows: int
    cols: int
    panel_height: int
    panel_width: int
    target: tuple[int, int] = (0, 0)
    assignment: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.rows * self.cols < 2:
            raise ValueError("grid must have at least one reference panel (rows*cols >= 2)")
        if self.panel_height < 1 or self.panel_width < 1:
            raise ValueError("panel dimensions must be positive")
        tr, tc = self.target
        if not (0 <= tr < self.rows and 0 <= tc < self.cols):
            raise ValueError(f"target panel {self.target} outside {self.rows}x{self.cols} grid")
        panels = {(r, c) for r in range(self.rows) for c in range(self.cols)} - {self.target}
        if set(self.assignment) != panels:
            raise ValueError("assignment must cover every non-target panel and nothing else")
        if any(idx < 0 for idx in self.assignment.values()):
            raise ValueError("assignment indices must be non-negative")

    @classmethod
    def build(
        cls,
        rows: int,
        cols: int,
        panel_height: int,
        panel_width: int,
        target: tuple[int, int] = (0, 0),
        num_references: int = 1,
        mode: str = "cycle",
        seed: int = 0,
    ) -> "MosaicLayout":
        assignment = make_assignment(rows, cols, target, num_references, mode, seed)
        return cls(rows, cols, panel_height, panel_width, target, assignment)

    @property
    def mosaic_height(self) -> int:
        return self.rows * self.panel_height

    @property
    def mosaic_width(self) -> int:
        return self.cols * self.panel_width

    def panel_box(self, row: int, col: int) -> tuple[slice, slice]:
        """Pixel slices of panel (row, col) within the mosaic."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"panel ({row}, {col}) outside {self.rows}x{self.cols} grid")
        h, w = self.panel_height, self.panel_width
        return slice(row * h, (row + 1) * h), slice(col * w, (col + 1) * w)


def unfold(references: list[Latent], layout: MosaicLayout) -> Latent:
    """Tile reference latents into a mosaic, zero-filling the target panel."""
    if not references:
        raise ValueError("need at least one reference latent")
    shape = (layout.panel_height, layout.panel_width, references[0].shape[2])
    for i, ref in enumerate(references):
        validate_latent(ref, f"reference[{i}]")
        if ref.shape != shape:
            raise ValueError(f"reference[{i}] shape {ref.shape} != expected {shape}")
    if any(idx >= len(references) for idx in layout.assignment.values()):
        raise ValueError("layout assignment references a missing view")
    mosaic = np.zeros((layout.mosaic_height, layout.mosaic_width, shape[2]), dtype=np.float32)
    for (r, c), idx in layout.assignment.items():
        rs, cs = layout.panel_box(r, c)
        mosaic[rs, cs] = references[idx]
    return mosaic


def target_mask(layout: MosaicLayout) -> PanelMask:
    """True exactly on the target panel."""
    mask = np.zeros((layout.mosaic_height, layout.mosaic_width), dtype=bool)
    rs, cs = layout.panel_box(*layout.target)
    mask[rs, cs] = True
    return mask


def region_mask(layout: MosaicLayout, rect: tuple[int, int, int, int]) -> PanelMask:
    """True on a (top, left, height, width) rectangle given in target-panel
    coordinates. Used for replacement/insertion edits where the target panel
    holds a scene and only the rectangle is synthesized."""
    top, left, height, width = rect
    if height < 1 or width < 1:
        raise ValueError("region rectangle must have positive size")
    if top < 0 or left < 0 or top + height > layout.panel_height or left + width > layout.panel_width:
        raise ValueError(f"region {rect} escapes the {layout.panel_height}x{layout.panel_width} target panel")
    mask = np.zeros((layout.mosaic_height, layout.mosaic_width), dtype=bool)
    tr, tc = layout.target
    r0 = tr * layout.panel_height + top
    c0 = tc * layout.panel_width + left
    mask[r0 : r0 + height, c0 : c0 + width] = True
    return mask


def extract_panel(mosaic: Latent, layout: MosaicLayout, row: int, col: int) -> Latent:
    """Copy one panel out of a mosaic."""
    validate_latent(mosaic, "mosaic")
    if mosaic.shape[:2] != (layout.mosaic_height, layout.mosaic_width):
        raise ValueError(f"mosaic shape {mosaic.shape[:2]} inconsistent with layout "
                         f"({layout.mosaic_height}, {layout.mosaic_width})")
    rs, cs = layout.panel_box(row, col)
    return mosaic[rs, cs].copy()


def place_panel(mosaic: Latent, layout: MosaicLayout, row: int, col: int, panel: Latent) -> Latent:
    """Return a copy of the mosaic with one panel replaced."""
    validate_latent(panel, "panel")
    if panel.shape[:2] != (layout.panel_height, layout.panel_width):
        raise ValueError(f"panel shape {panel.shape[:2]} != "
                         f"({layout.panel_height}, {layout.panel_width})")
    out = mosaic.copy()
    rs, cs = layout.panel_box(row, col)
    out[rs, cs] = panel
    return out
