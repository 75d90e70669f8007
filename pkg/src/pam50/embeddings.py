"""Bit-exact persistence of patch embeddings plus a deterministic toy embedder.

PEMB file layout (little-endian):

    magic   4 bytes  b"PEMB"
    version u32      1
    dim     u32
    count   u64
    ids     count * u64
    payload count * dim * float32, row-major

A JSON sidecar ``<path>.json`` carries ``{"slide_id", "source", "model"}``.
The binary layout is the contract between this engine and external
embedding exporters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    DataError,
    TruncatedStoreError,
    VersionMismatchError,
)

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1
EMBED_DIM = 512

_HEADER = struct.Struct("<4sIIQ")


@dataclass
class EmbeddingStore:
    """Fixed-dimension real vectors keyed by slide and patch."""

    slide_id: str
    dim: int
    patch_ids: list[int]
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float32)
        if self.dim < 1:
            raise DataError("embedding dim must be >= 1")
        if vec.ndim != 2 or vec.shape[1] != self.dim:
            raise DataError(f"vectors must be (count, {self.dim}), got {vec.shape}")
        if len(self.patch_ids) != vec.shape[0]:
            raise DataError(
                f"{len(self.patch_ids)} patch ids but {vec.shape[0]} vectors"
            )
        ids = list(self.patch_ids)
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise DataError("patch ids must be strictly increasing")
        if not np.all(np.isfinite(vec)):
            raise DataError("embedding vectors must be finite")
        self.patch_ids = ids
        self.vectors = vec

    def vector_for(self, patch_id: int) -> np.ndarray:
        return self.vectors[self.patch_ids.index(patch_id)]


def write_store(
    store: EmbeddingStore,
    path: str | Path,
    source: str = "toy",
    model: str | None = None,
) -> None:
    path = Path(path)
    header = _HEADER.pack(PEMB_MAGIC, PEMB_VERSION, store.dim, len(store.patch_ids))
    ids = np.asarray(store.patch_ids, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    path.write_bytes(header + ids + payload)
    sidecar = {"slide_id": store.slide_id, "source": source, "model": model}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")


def read_store(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != PEMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedStoreError(f"{path}: header truncated at {len(blob)} bytes")
    _, version, dim, count = _HEADER.unpack_from(blob)
    if version != PEMB_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {PEMB_VERSION}")
    ids_end = _HEADER.size + 8 * count
    payload_end = ids_end + 4 * count * dim
    if len(blob) < payload_end:
        raise TruncatedStoreError(
            f"{path}: need {payload_end} bytes for dim={dim} count={count}, "
            f"have {len(blob)}"
        )
    if len(blob) > payload_end:
        raise CountMismatchError(
            f"{path}: {len(blob) - payload_end} trailing bytes beyond dim*count payload"
        )
    ids = np.frombuffer(blob, dtype="<u8", count=count, offset=_HEADER.size)
    vectors = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=ids_end)
    vectors = vectors.reshape(count, dim).copy()
    if not np.all(np.isfinite(vectors)):
        raise DataError(f"{path}: payload contains non-finite values")

    slide_id = path.stem
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        slide_id = json.loads(sidecar.read_text()).get("slide_id", slide_id)
    return EmbeddingStore(
        slide_id=slide_id, dim=dim, patch_ids=[int(i) for i in ids], vectors=vectors
    )


@lru_cache(maxsize=8)
def _projection(seed: int, dim: int, n_features: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim, n_features)) / np.sqrt(n_features)


def _pooled_features(tensor: np.ndarray, grid: int = 4) -> np.ndarray:
    """Channel-wise pooled statistics: channel means, centered grid means,
    stds and gradient energies.

    Grid means are centered per channel and the contrast terms upweighted so
    the feature (and hence embedding) norm tracks texture energy rather than
    the shared color baseline, mirroring how CNN activation energy grows
    with feature-rich content.
    """
    t = np.asarray(tensor, dtype=np.float64)
    c, h, w = t.shape
    gh, gw = h // grid, w // grid
    cells = t[:, : gh * grid, : gw * grid].reshape(c, grid, gh, grid, gw)
    channel_means = t.mean(axis=(1, 2))
    grid_means = (cells.mean(axis=(2, 4)) - channel_means[:, None, None]).reshape(-1)
    stds = t.std(axis=(1, 2))
    grad_v = np.abs(np.diff(t, axis=1)).mean(axis=(1, 2))
    grad_h = np.abs(np.diff(t, axis=2)).mean(axis=(1, 2))
    return np.concatenate([6.0 * channel_means, grid_means, 3.0 * stds, 20.0 * grad_v, 20.0 * grad_h])


def toy_embed(prepared, seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Fixed random projection of pooled patch statistics; a stand-in embedder.

    Deterministic in (pixel content, seed); the projection matrix depends on
    the seed only, so embeddings of different patches stay comparable.
    """
    tensor = getattr(prepared, "tensor", prepared)
    feats = _pooled_features(np.asarray(tensor))
    proj = _projection(int(seed), dim, feats.shape[0])
    return (proj @ feats).astype(np.float32)


def augment_tensor(tensor: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and 90-degree rotation in the image domain."""
    out = tensor
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    k = int(rng.integers(0, 4))
    if k:
        out = np.rot90(out, k=k, axes=(1, 2))
    return np.ascontiguousarray(out)
