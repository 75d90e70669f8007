"""Macenko stain normalization in optical-density space.

Stains mix linearly in OD (Beer-Lambert): od = M @ c with M the 3x2 stain
matrix (columns hematoxylin, eosin) and c the per-pixel concentrations.
Fitting estimates M from the extreme angles of the top-2 OD principal
plane; applying maps concentrations onto a reference profile and
re-renders the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, DegenerateStainsError, NoTissueError

OD_BETA = 0.15
ANGLE_PERCENTILE = 1.0
CONCENTRATION_PERCENTILE = 99.0
MIN_TISSUE_PIXELS = 100

# Canonical H&E target so every slide maps into one color domain.
REFERENCE_STAIN_MATRIX = (
    (0.5626, 0.2159),
    (0.7201, 0.8012),
    (0.4062, 0.5581),
)
REFERENCE_MAX_CONCENTRATIONS = (1.9705, 1.0308)


@dataclass
class StainProfile:
    """Unit-column 3x2 stain matrix plus 99th-percentile concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2):
            raise DataError(f"stain matrix must be 3x2, got {m.shape}")
        if c.shape != (2,):
            raise DataError(f"max_concentrations must have 2 entries, got {c.shape}")
        norms = np.linalg.norm(m, axis=0)
        if np.any(norms <= 0):
            raise DataError("stain matrix has a zero column")
        self.stain_matrix = m / norms
        self.max_concentrations = c

    def to_json(self) -> str:
        return json.dumps(
            {
                "stain_matrix": self.stain_matrix.tolist(),
                "max_concentrations": self.max_concentrations.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        data = json.loads(text)
        return cls(
            stain_matrix=np.asarray(data["stain_matrix"]),
            max_concentrations=np.asarray(data["max_concentrations"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "StainProfile":
        return cls.from_json(Path(path).read_text())


def default_reference() -> StainProfile:
    return StainProfile(
        stain_matrix=np.asarray(REFERENCE_STAIN_MATRIX),
        max_concentrations=np.asarray(REFERENCE_MAX_CONCENTRATIONS),
    )


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    """Optical density, -log10((rgb+1)/256); white maps to zero absorbance."""
    arr = np.asarray(rgb, dtype=np.float64)
    return -np.log10((arr + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_od, rounded and clamped to uint8."""
    arr = np.asarray(od, dtype=np.float64)
    rgb = 256.0 * np.power(10.0, -arr) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _fit_od_pixels(
    od_pixels: np.ndarray,
    beta: float,
    alpha: float,
) -> StainProfile:
    tissue = od_pixels[np.linalg.norm(od_pixels, axis=1) > beta]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise NoTissueError(
            f"only {tissue.shape[0]} pixels exceed OD {beta}; "
            f"need {MIN_TISSUE_PIXELS} to fit stains"
        )
    _, eigvecs = np.linalg.eigh(np.cov(tissue.T))
    plane = eigvecs[:, 1:3]  # top-2 principal directions
    # Orient so projections are mostly positive; keeps angles stable.
    proj = tissue @ plane
    flip = np.where(proj.mean(axis=0) < 0, -1.0, 1.0)
    plane = plane * flip
    proj = proj * flip

    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, alpha)
    hi = np.percentile(phi, 100.0 - alpha)
    v_lo = plane @ np.array([math.cos(lo), math.sin(lo)])
    v_hi = plane @ np.array([math.cos(hi), math.sin(hi)])

    cols = []
    for v in (v_lo, v_hi):
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm <= 0:
            raise DataError("degenerate stain direction (no nonnegative component)")
        cols.append(v / norm)
    # Hematoxylin first: the column with the larger red-channel OD.
    if cols[0][0] >= cols[1][0]:
        matrix = np.column_stack([cols[0], cols[1]])
    else:
        matrix = np.column_stack([cols[1], cols[0]])

    conc = np.clip(np.linalg.pinv(matrix) @ od_pixels.T, 0.0, None)
    max_c = np.percentile(conc, CONCENTRATION_PERCENTILE, axis=1)
    return StainProfile(stain_matrix=matrix, max_concentrations=max_c)


def macenko_fit(
    patch: np.ndarray,
    beta: float = OD_BETA,
    alpha: float = ANGLE_PERCENTILE,
) -> StainProfile:
    """Estimate the stain profile of one RGB patch."""
    od = rgb_to_od(np.asarray(patch).reshape(-1, 3))
    return _fit_od_pixels(od, beta=beta, alpha=alpha)


def fit_profile_from_patches(
    patches: Iterable[np.ndarray],
    beta: float = OD_BETA,
    alpha: float = ANGLE_PERCENTILE,
    pixel_stride: int = 4,
) -> StainProfile:
    """Slide-level profile from a sample of patches (pixels strided for speed)."""
    chunks = []
    for patch in patches:
        flat = np.asarray(patch).reshape(-1, 3)
        chunks.append(flat[::pixel_stride])
    if not chunks:
        raise NoTissueError("no patches supplied for stain fitting")
    od = rgb_to_od(np.concatenate(chunks, axis=0))
    return _fit_od_pixels(od, beta=beta, alpha=alpha)


def stain_angle_degrees(profile: StainProfile) -> float:
    u, v = profile.stain_matrix[:, 0], profile.stain_matrix[:, 1]
    cosine = float(np.clip(np.dot(u, v), -1.0, 1.0))
    return math.degrees(math.acos(cosine))


def macenko_apply(
    patch: np.ndarray,
    source: StainProfile,
    reference: StainProfile,
) -> np.ndarray:
    """Map a patch's stain concentrations onto the reference profile."""
    if stain_angle_degrees(source) < 1.0:
        raise DegenerateStainsError(
            f"source stain columns are {stain_angle_degrees(source):.3f} deg apart"
        )
    if np.any(source.max_concentrations <= 0):
        raise DataError("source profile has non-positive max concentration")
    arr = np.asarray(patch)
    shape = arr.shape
    od = rgb_to_od(arr.reshape(-1, 3)).T  # 3 x N
    conc = np.clip(np.linalg.pinv(source.stain_matrix) @ od, 0.0, None)
    conc *= (reference.max_concentrations / source.max_concentrations)[:, None]
    od_out = reference.stain_matrix @ conc
    return od_to_rgb(od_out.T).reshape(shape)
