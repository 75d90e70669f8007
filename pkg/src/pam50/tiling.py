"""Slide tiling, tissue/blur quality control and model-ready patch preparation.

A slide raster is cut into non-overlapping 512x512 patches (row-major,
only patches fully inside the image). Each patch gets a tissue fraction
(share of grayscale pixels darker than the background threshold) and a
focus score (variance of the 4-neighbour Laplacian response). Passing
patches are resized to 224x224 and normalized with ImageNet statistics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptySlideError, InputError

PATCH_SIZE = 512
MODEL_SIZE = 224

GRAY_WEIGHTS = (0.2989, 0.5870, 0.1140)
TISSUE_GRAY_THRESHOLD = 200.0
DEFAULT_M_MIN = 0.2
DEFAULT_VARL_MIN = 100.0

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

QC_PASS = "pass"
QC_FAIL_BACKGROUND = "fail_background"
QC_FAIL_BLUR = "fail_blur"
QC_FAIL_BORDER = "fail_border"
QC_STATUSES = frozenset({QC_PASS, QC_FAIL_BACKGROUND, QC_FAIL_BLUR, QC_FAIL_BORDER})

MANIFEST_HEADER = (
    "slide_id,patch_id,grid_row,grid_col,origin_x,origin_y,"
    "tissue_fraction,laplacian_var,qc_status"
)


@dataclass
class SlideRaster:
    """An RGB slide held in memory, uint8, shape (H, W, 3)."""

    slide_id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InputError(
                f"slide {self.slide_id!r}: expected (H, W, 3) RGB array, got {px.shape}"
            )
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchRecord:
    """One grid position with its QC statistics. Stubs leave QC fields unset."""

    slide_id: str
    patch_id: int
    grid_row: int
    grid_col: int
    origin_x: int
    origin_y: int
    tissue_fraction: float | None = None
    laplacian_var: float | None = None
    qc_status: str | None = None


@dataclass
class PreparedPatch:
    """Model-ready tensor, channel-first (3, 224, 224) float32."""

    patch_id: int
    tensor: np.ndarray


@dataclass
class TileResult:
    manifest: list[PatchRecord]
    prepared: list[PreparedPatch] = field(default_factory=list)


def compute_grid(width: int, height: int, slide_id: str = "") -> list[PatchRecord]:
    """Row-major grid of patch stubs; exactly floor(W/512)*floor(H/512) records."""
    if width < 0 or height < 0:
        raise InputError(f"negative slide dimensions ({width}, {height})")
    n_cols = width // PATCH_SIZE
    n_rows = height // PATCH_SIZE
    records = []
    for row in range(n_rows):
        for col in range(n_cols):
            records.append(
                PatchRecord(
                    slide_id=slide_id,
                    patch_id=row * n_cols + col,
                    grid_row=row,
                    grid_col=col,
                    origin_x=col * PATCH_SIZE,
                    origin_y=row * PATCH_SIZE,
                )
            )
    return records


def to_grayscale(rgb_patch: np.ndarray) -> np.ndarray:
    """Luminance-weighted grayscale, kept in real arithmetic (no re-quantization)."""
    rgb = np.asarray(rgb_patch, dtype=np.float64)
    r, g, b = GRAY_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def tissue_fraction(gray_patch: np.ndarray) -> float:
    """Share of pixels strictly darker than the background threshold (200)."""
    gray = np.asarray(gray_patch, dtype=np.float64)
    return float(np.count_nonzero(gray < TISSUE_GRAY_THRESHOLD) / gray.size)


def laplacian_variance(gray_patch: np.ndarray) -> float:
    """Population variance of the 4-neighbour Laplacian over the valid interior."""
    g = np.asarray(gray_patch, dtype=np.float64)
    if g.shape[0] < 3 or g.shape[1] < 3:
        return 0.0
    resp = (
        g[:-2, 1:-1]
        + g[2:, 1:-1]
        + g[1:-1, :-2]
        + g[1:-1, 2:]
        - 4.0 * g[1:-1, 1:-1]
    )
    return float(resp.var())


def qc_filter(
    record: PatchRecord,
    m_min: float = DEFAULT_M_MIN,
    varl_min: float = DEFAULT_VARL_MIN,
) -> str:
    """QC verdict from (tissue_fraction, laplacian_var); background checked first."""
    if record.tissue_fraction is None or record.laplacian_var is None:
        raise InputError("qc_filter requires populated tissue_fraction and laplacian_var")
    if record.tissue_fraction < m_min:
        return QC_FAIL_BACKGROUND
    if record.laplacian_var < varl_min:
        return QC_FAIL_BLUR
    return QC_PASS


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain (non-antialiased) bilinear resample with half-pixel centers."""
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    ty = ys - y0f
    tx = xs - x0f
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)

    top = src[y0][:, x0] * (1 - tx)[None, :, None] + src[y0][:, x1] * tx[None, :, None]
    bot = src[y1][:, x0] * (1 - tx)[None, :, None] + src[y1][:, x1] * tx[None, :, None]
    return top * (1 - ty)[:, None, None] + bot * ty[:, None, None]


def prepare_patch(rgb_patch: np.ndarray, patch_id: int = 0) -> PreparedPatch:
    """Resize to 224x224, scale to [0,1], apply ImageNet channel normalization."""
    resized = bilinear_resize(np.asarray(rgb_patch, dtype=np.float64), MODEL_SIZE, MODEL_SIZE)
    scaled = resized / 255.0
    mean = np.asarray(IMAGENET_MEAN)
    std = np.asarray(IMAGENET_STD)
    normalized = (scaled - mean) / std
    tensor = np.ascontiguousarray(normalized.transpose(2, 0, 1).astype(np.float32))
    return PreparedPatch(patch_id=patch_id, tensor=tensor)


def extract_patch(slide: SlideRaster, record: PatchRecord) -> np.ndarray:
    y, x = record.origin_y, record.origin_x
    return slide.pixels[y : y + PATCH_SIZE, x : x + PATCH_SIZE]


def tile_slide(
    slide: SlideRaster,
    m_min: float = DEFAULT_M_MIN,
    varl_min: float = DEFAULT_VARL_MIN,
    exclude_border: bool = False,
    normalize: Callable[[np.ndarray], np.ndarray] | None = None,
    prepare: bool = True,
) -> TileResult:
    """QC every grid patch of a slide; optionally produce prepared tensors.

    ``normalize`` (stain normalization) is applied to passing patches only,
    after QC and before resizing. Raises EmptySlideError when nothing passes.
    """
    records = compute_grid(slide.width, slide.height, slide_id=slide.slide_id)
    n_cols = slide.width // PATCH_SIZE
    n_rows = slide.height // PATCH_SIZE
    prepared: list[PreparedPatch] = []
    n_pass = 0
    for rec in records:
        patch = extract_patch(slide, rec)
        gray = to_grayscale(patch)
        rec.tissue_fraction = tissue_fraction(gray)
        rec.laplacian_var = laplacian_variance(gray)
        on_ring = rec.grid_row in (0, n_rows - 1) or rec.grid_col in (0, n_cols - 1)
        if exclude_border and on_ring:
            rec.qc_status = QC_FAIL_BORDER
            continue
        rec.qc_status = qc_filter(rec, m_min=m_min, varl_min=varl_min)
        if rec.qc_status != QC_PASS:
            continue
        n_pass += 1
        if prepare:
            if normalize is not None:
                patch = normalize(patch)
            prepared.append(prepare_patch(patch, patch_id=rec.patch_id))
    if n_pass == 0:
        raise EmptySlideError(
            f"slide {slide.slide_id!r}: no patch passed QC "
            f"(grid {n_rows}x{n_cols}, m_min={m_min}, varl_min={varl_min})"
        )
    return TileResult(manifest=records, prepared=prepared)


def write_manifest(records: Sequence[PatchRecord], path: str | Path) -> None:
    """Manifest CSV; fractions printed with 6 decimal places, '\\n' line endings."""
    lines = [MANIFEST_HEADER]
    for r in records:
        if r.qc_status not in QC_STATUSES:
            raise InputError(f"patch {r.patch_id}: manifest rows need a QC verdict")
        lines.append(
            f"{r.slide_id},{r.patch_id},{r.grid_row},{r.grid_col},"
            f"{r.origin_x},{r.origin_y},"
            f"{r.tissue_fraction:.6f},{r.laplacian_var:.6f},{r.qc_status}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[PatchRecord]:
    text = Path(path).read_text()
    lines = text.strip().split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise InputError(f"{path}: bad manifest header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 9:
            raise InputError(f"{path}: malformed manifest row: {line!r}")
        records.append(
            PatchRecord(
                slide_id=parts[0],
                patch_id=int(parts[1]),
                grid_row=int(parts[2]),
                grid_col=int(parts[3]),
                origin_x=int(parts[4]),
                origin_y=int(parts[5]),
                tissue_fraction=float(parts[6]),
                laplacian_var=float(parts[7]),
                qc_status=parts[8],
            )
        )
    return records


def load_slide(path: str | Path, slide_id: str | None = None) -> SlideRaster:
    """Read a slide from a raster image or a directory of pre-cut 512x512 tiles.

    Tile directories hold files named ``r{row:03d}_c{col:03d}.png`` forming a
    complete grid.
    """
    from PIL import Image

    path = Path(path)
    sid = slide_id if slide_id is not None else path.stem
    if path.is_dir():
        tiles = {}
        for name in sorted(os.listdir(path)):
            stem, ext = os.path.splitext(name)
            if ext.lower() not in (".png", ".tif", ".tiff", ".jpg", ".jpeg"):
                continue
            try:
                r_part, c_part = stem.split("_")
                row, col = int(r_part[1:]), int(c_part[1:])
            except ValueError as exc:
                raise InputError(f"{path}: unexpected tile name {name!r}") from exc
            tiles[(row, col)] = path / name
        if not tiles:
            raise InputError(f"{path}: tile directory contains no tiles")
        n_rows = max(r for r, _ in tiles) + 1
        n_cols = max(c for _, c in tiles) + 1
        if len(tiles) != n_rows * n_cols:
            raise InputError(f"{path}: incomplete {n_rows}x{n_cols} tile grid")
        canvas = np.zeros((n_rows * PATCH_SIZE, n_cols * PATCH_SIZE, 3), dtype=np.uint8)
        for (row, col), tile_path in tiles.items():
            tile = np.asarray(Image.open(tile_path).convert("RGB"))
            if tile.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
                raise InputError(f"{tile_path}: tile must be {PATCH_SIZE}x{PATCH_SIZE}")
            canvas[
                row * PATCH_SIZE : (row + 1) * PATCH_SIZE,
                col * PATCH_SIZE : (col + 1) * PATCH_SIZE,
            ] = tile
        return SlideRaster(slide_id=sid, pixels=canvas)
    if not path.exists():
        raise InputError(f"{path}: no such slide")
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise InputError(f"{path}: unreadable image ({exc})") from exc
    return SlideRaster(slide_id=sid, pixels=np.asarray(img))
