"""Synthetic slide corpus so the whole pipeline runs offline.

Each slide is a grid of 512x512 patches:

  * informative patches render the slide class's signature: stripes at one
    of four fixed orientation/frequency pairs with a class hue tint;
  * the remaining tissue patches are class-agnostic distractors drawn from
    a continuous style manifold (orientation arcs between the class
    angles, free frequency and hue). Each slide anchors one style and its
    patches jitter around it, so distractor looks are correlated within a
    slide, overlap across slides, and are fresh on held-out slides. That
    combination is what degrades unfiltered probability averaging while
    leaving a recoverable signal for uncertainty filtering and subset
    search;
  * optional background (white) patches exercise the tissue QC.

Both roles share the same stripe contrast so neither is a feature-space
outlier. Sparse dark speckle keeps every tissue patch above the focus
threshold without filling the rasters with incompressible noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError
from .evaluation import SUBTYPES
from .tiling import PATCH_SIZE

BASE_GRAY = (150.0, 148.0, 146.0)
SIGNATURE_AMPLITUDE = 85.0
# share of signature energy spent on a per-patch random secondary texture:
# keeps informative patches mutually diverse without hurting their identity
SIGNATURE_SECONDARY = 0.4
# distractor texture energy budget, shared between the slide-anchor stripes
# and a faint admixture of one randomly drawn class signature (coherent
# within a slide, independent of the slide's label)
DISTRACTOR_ENERGY = 70.0
MIMIC_FACTOR = 0.35

# (hue tint, stripe angle in radians, stripe cycles per patch); tints stay
# inside the distractor hue range so class patches are not feature outliers
# all classes share one mid-band frequency: orientation and hue carry the
# identity, so no class is an energy outlier relative to the others
CLASS_SIGNATURES = (
    ((12.0, -6.0, -6.0), math.radians(20.0), 3.75),
    ((-6.0, 12.0, -6.0), math.radians(65.0), 3.75),
    ((-6.0, -6.0, 12.0), math.radians(110.0), 3.75),
    ((10.0, -8.0, 10.0), math.radians(155.0), 3.75),
)
CLASS_ANGLE_WINDOW = 0.21  # anchor angles stay this far from class angles
DISTRACTOR_FREQ_RANGE = (3.2, 4.3)
DISTRACTOR_TINT_RANGE = 15.0
SPECKLE_DENSITY = 0.005
SPECKLE_AMPLITUDE = 45.0


def _allowed_arcs() -> list[tuple[float, float]]:
    angles = sorted(a % math.pi for _, a, _ in CLASS_SIGNATURES)
    arcs = []
    for i, a in enumerate(angles):
        nxt = angles[(i + 1) % len(angles)]
        span = (nxt - a) % math.pi
        lo = a + CLASS_ANGLE_WINDOW
        hi = a + span - CLASS_ANGLE_WINDOW
        if hi > lo:
            arcs.append((lo, hi))
    return arcs


_ARCS = _allowed_arcs()


@dataclass
class SyntheticSpec:
    n_slides_per_class: int = 12
    patches_per_slide: int = 150
    informative_fraction: float = 0.1
    signal_strength: float = 1.0
    noise_level: float = 1.0
    seed: int = 0
    tissue_fraction: float = 0.95  # share of grid patches that are tissue

    def __post_init__(self):
        if not 0.0 < self.informative_fraction <= 1.0:
            raise UsageError("informative_fraction must be in (0, 1]")
        if not 0.0 <= self.tissue_fraction <= 1.0:
            raise UsageError("tissue_fraction must be in [0, 1]")
        if self.n_slides_per_class < 1 or self.patches_per_slide < 1:
            raise UsageError("need at least one slide and one patch per slide")


_AXIS = np.arange(PATCH_SIZE, dtype=np.float32)


def _stripes(angle: float, cycles: float, phase: float) -> np.ndarray:
    # sin(A_i + B_j) via outer products; ~3x cheaper than a full-grid sin
    a = 2.0 * np.pi * cycles * np.sin(angle) * _AXIS / PATCH_SIZE
    b = 2.0 * np.pi * (cycles * np.cos(angle) * _AXIS / PATCH_SIZE + phase)
    return np.outer(np.sin(a), np.cos(b)) + np.outer(np.cos(a), np.sin(b))


def _smooth_field(rng: np.random.Generator, amplitude: float) -> np.ndarray:
    coarse = amplitude * rng.standard_normal((8, 8))
    block = PATCH_SIZE // 8
    return np.repeat(np.repeat(coarse.astype(np.float32), block, axis=0), block, axis=1)


def _speckle(field: np.ndarray, rng: np.random.Generator) -> None:
    n = int(SPECKLE_DENSITY * PATCH_SIZE * PATCH_SIZE)
    flat = rng.integers(0, PATCH_SIZE * PATCH_SIZE, size=n)  # duplicates harmless
    ys, xs = np.unravel_index(flat, (PATCH_SIZE, PATCH_SIZE))
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
    field[ys, xs] += signs * SPECKLE_AMPLITUDE


def _finish(
    field: np.ndarray,
    base: np.ndarray,
    rng: np.random.Generator,
    noise_level: float,
) -> np.ndarray:
    # one scalar field shared by all channels keeps the render cheap
    if noise_level > 0:
        field = field + _smooth_field(rng, 6.0 * noise_level)
    field += np.float32(rng.uniform(-8.0, 8.0))  # per-patch brightness offset
    _speckle(field, rng)
    patch = np.empty((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    for c in range(3):
        patch[..., c] = np.clip(field + base[c], 0, 255)
    return patch


def _render(
    rng: np.random.Generator,
    angle: float,
    cycles: float,
    base: np.ndarray,
    amplitude: float,
    noise_level: float,
) -> np.ndarray:
    field = amplitude * _stripes(angle, cycles, phase=rng.random())
    return _finish(field, base, rng, noise_level)


def render_signature_patch(
    rng: np.random.Generator,
    class_index: int,
    strength: float,
    noise_level: float,
) -> np.ndarray:
    """One tissue patch carrying the given class signature plus a random
    secondary texture (informative regions are heterogeneous)."""
    tint, angle, cycles = CLASS_SIGNATURES[class_index]
    base = np.asarray(BASE_GRAY) + strength * np.asarray(tint) + rng.uniform(-3, 3, 3)
    amp = SIGNATURE_AMPLITUDE * strength
    field = (amp * math.sqrt(1.0 - SIGNATURE_SECONDARY**2)) * _stripes(
        angle + rng.uniform(-0.07, 0.07),
        cycles * rng.uniform(0.96, 1.04),
        phase=rng.random(),
    )
    field += (amp * SIGNATURE_SECONDARY) * _stripes(
        _draw_arc_angle(rng),
        float(rng.uniform(*DISTRACTOR_FREQ_RANGE)),
        phase=rng.random(),
    )
    return _finish(field, base, rng, noise_level)


def _draw_arc_angle(rng: np.random.Generator) -> float:
    lo, hi = _ARCS[int(rng.integers(0, len(_ARCS)))]
    return float(rng.uniform(lo, hi))


@dataclass
class SlideStyle:
    """Per-slide distractor look; drawn independently of the true class.

    Combines a slide *anchor* (two phase-locked stripe components with
    slide-specific orientation/frequency/phase: memorizable on training
    slides, fresh directions on held-out slides) with a faint *family*
    admixture of one randomly drawn class signature (what the slide's
    distractor votes lean toward, uncorrelated with the true label)."""

    mimic_class: int
    components: tuple[tuple[float, float, float], ...]  # (angle, cycles, phase)
    tint: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n_components: int = 2) -> "SlideStyle":
        def comp():
            return (
                _draw_arc_angle(rng),
                float(rng.uniform(*DISTRACTOR_FREQ_RANGE)),
                float(rng.random()),
            )

        return cls(
            mimic_class=int(rng.integers(0, len(CLASS_SIGNATURES))),
            components=tuple(comp() for _ in range(n_components)),
            tint=rng.uniform(-DISTRACTOR_TINT_RANGE, DISTRACTOR_TINT_RANGE, size=3),
        )


def render_distractor_patch(
    rng: np.random.Generator,
    style: SlideStyle,
    strength: float,
    noise_level: float,
) -> np.ndarray:
    """Anchor stripes plus the family's weak mimic signature; total texture
    energy stays just below the signature patches'."""
    m_tint, m_angle, m_cycles = CLASS_SIGNATURES[style.mimic_class]
    mimic = MIMIC_FACTOR * strength
    base = (
        np.asarray(BASE_GRAY)
        + mimic * np.asarray(m_tint)
        + 0.6 * style.tint
        + rng.uniform(-3, 3, 3)
    )
    anchor_amp = DISTRACTOR_ENERGY * math.sqrt(
        max(0.0, 1.0 - mimic**2) / len(style.components)
    )
    field = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    for angle, cycles, phase in style.components:
        field += (anchor_amp + rng.uniform(-2, 2)) * _stripes(
            angle + rng.uniform(-0.02, 0.02),
            cycles + rng.uniform(-0.05, 0.05),
            phase=phase + rng.uniform(-0.015, 0.015),
        )
    field += (mimic * DISTRACTOR_ENERGY) * _stripes(
        m_angle + rng.uniform(-0.1, 0.1),
        m_cycles * rng.uniform(0.95, 1.05),
        phase=rng.random(),
    )
    return _finish(field, base, rng, noise_level)


def make_slide_pixels(
    rng: np.random.Generator,
    class_index: int,
    spec: SyntheticSpec,
) -> tuple[np.ndarray, dict]:
    """Raster a full slide; returns pixels and ground-truth patch roles."""
    n = spec.patches_per_slide
    n_cols = int(np.ceil(np.sqrt(n)))
    n_rows = int(np.ceil(n / n_cols))
    total = n_rows * n_cols
    n_tissue = int(round(n * spec.tissue_fraction))
    n_informative = int(round(n_tissue * spec.informative_fraction)) if n_tissue else 0
    if n_tissue and spec.informative_fraction > 0:
        n_informative = max(n_informative, 1)

    roles = ["background"] * total
    tissue_cells = rng.permutation(total)[:n_tissue]
    for i, cell in enumerate(tissue_cells):
        roles[cell] = "informative" if i < n_informative else "distractor"

    style = SlideStyle.draw(rng)
    pixels = np.full((n_rows * PATCH_SIZE, n_cols * PATCH_SIZE, 3), 255, dtype=np.uint8)
    for cell in range(total):
        role = roles[cell]
        if role == "background":
            continue
        row, col = divmod(cell, n_cols)
        if role == "informative":
            patch = render_signature_patch(
                rng, class_index, spec.signal_strength, spec.noise_level
            )
        else:
            patch = render_distractor_patch(rng, style, spec.signal_strength, spec.noise_level)
        pixels[
            row * PATCH_SIZE : (row + 1) * PATCH_SIZE,
            col * PATCH_SIZE : (col + 1) * PATCH_SIZE,
        ] = patch
    truth = {
        "mimic_class": style.mimic_class,
        "roles": roles,
        "grid": [n_rows, n_cols],
    }
    return pixels, truth


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path, image_format: str = "tif") -> Path:
    """Write slide rasters, a labels manifest and per-slide ground truth.

    Deterministic given ``spec.seed``; returns the labels manifest path.
    Uncompressed TIFF is the default (content-independent write speed);
    pass ``image_format="png"`` for smaller, slower files.
    """
    from PIL import Image

    if image_format not in ("tif", "png"):
        raise UsageError(f"image_format must be 'tif' or 'png', got {image_format!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    truths = {}
    idx = 0
    for class_index, class_name in enumerate(SUBTYPES):
        for k in range(spec.n_slides_per_class):
            slide_id = f"{class_name}_{k:03d}"
            patient_id = f"patient_{idx:04d}"
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_index, k]))
            pixels, truth = make_slide_pixels(rng, class_index, spec)
            image = Image.fromarray(pixels)
            if image_format == "png":
                image.save(out / f"{slide_id}.png", compress_level=1)
            else:
                image.save(out / f"{slide_id}.tif")
            rows.append((slide_id, patient_id, class_name))
            truths[slide_id] = truth
            idx += 1
    labels_path = out / "labels.csv"
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "patient_id", "label"])
        writer.writerows(rows)
    (out / "ground_truth.json").write_text(json.dumps(truths, indent=1, sort_keys=True))
    return labels_path


def read_labels(path: str | Path) -> list[dict]:
    """Rows of the labels manifest with class indices resolved."""
    from .errors import InputError

    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"slide_id", "patient_id", "label"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise InputError(f"{path}: labels manifest needs columns {sorted(required)}")
        for entry in reader:
            label = entry["label"]
            if label not in SUBTYPES:
                raise InputError(f"{path}: unknown label {label!r}")
            rows.append(
                {
                    "slide_id": entry["slide_id"],
                    "patient_id": entry["patient_id"],
                    "label": label,
                    "class_index": SUBTYPES.index(label),
                }
            )
    if not rows:
        raise InputError(f"{path}: empty labels manifest")
    return rows
