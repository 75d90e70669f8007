"""Run a frozen ImageNet-style ResNet-18 over prepared patches and write
embedding stores in the engine's PEMB byte format.

The exporter is intentionally standalone: it re-implements the patch
preparation (plain bilinear 512->224 resize, [0,1] scaling, ImageNet channel
normalization) and the PEMB layout, both of which are fixed cross-component
contracts:

    magic   4 bytes  b"PEMB"
    version u32      1
    dim     u32      512
    count   u64
    ids     count * u64
    payload count * dim * float32, row-major (little-endian throughout)

plus a JSON sidecar ``<out>.json`` with ``{"slide_id", "source", "model"}``.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1
EMBED_DIM = 512
MODEL_SIZE = 224

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_HEADER = struct.Struct("<4sIIQ")
_PATCH_NAME = re.compile(r"patch_(\d+)\.(png|tif|tiff|jpg|jpeg)$", re.IGNORECASE)


class SetupError(RuntimeError):
    """Weights or environment problem, not a data problem."""


class ContractError(RuntimeError):
    """Output would violate the PEMB interface contract."""


@dataclass
class ExportJob:
    patch_dir: Path
    manifest: Path
    out_path: Path
    weights: str = "imagenet"  # "imagenet" | "random:<seed>" | path to a state dict
    batch_size: int = 64
    device: str = "cpu"
    slide_id: str | None = None


def read_pass_ids(manifest: Path) -> tuple[str, list[int]]:
    """Slide id and QC-passing patch ids from the engine's manifest CSV."""
    slide_id = ""
    ids = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"slide_id", "patch_id", "qc_status"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{manifest}: not a tiling manifest")
        for row in reader:
            slide_id = row["slide_id"]
            if row["qc_status"] == "pass":
                ids.append(int(row["patch_id"]))
    return slide_id, sorted(ids)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain (non-antialiased) bilinear resample with half-pixel centers;
    matches the engine's patch preparation."""
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


def prepare_tensor(rgb: np.ndarray) -> np.ndarray:
    """(3, 224, 224) float32, ImageNet-normalized; constants identical to the
    engine's prepare_patch."""
    resized = bilinear_resize(rgb, MODEL_SIZE, MODEL_SIZE) / 255.0
    normalized = (resized - np.asarray(IMAGENET_MEAN)) / np.asarray(IMAGENET_STD)
    return np.ascontiguousarray(normalized.transpose(2, 0, 1).astype(np.float32))


def load_backbone(weights: str, device: str = "cpu"):
    """ResNet-18 with the classification head removed; eval mode, frozen."""
    import torch
    from torchvision.models import resnet18

    if weights == "imagenet":
        try:
            from torchvision.models import ResNet18_Weights

            model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise SetupError(
                f"could not load ImageNet weights ({exc}); pass a local state "
                "dict path or random:<seed>"
            ) from exc
    elif weights.startswith("random:"):
        seed = int(weights.split(":", 1)[1])
        torch.manual_seed(seed)
        model = resnet18(weights=None)
    else:
        path = Path(weights)
        if not path.exists():
            raise SetupError(f"weights file not found: {path}")
        model = resnet18(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.fc = torch.nn.Identity()
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model.to(device)


def _patch_files(job: ExportJob, ids: list[int]) -> dict[int, Path]:
    available = {}
    for path in sorted(Path(job.patch_dir).iterdir()):
        match = _PATCH_NAME.search(path.name)
        if match:
            available[int(match.group(1))] = path
    missing = [i for i in ids if i not in available]
    if missing:
        raise ValueError(
            f"{job.patch_dir}: {len(missing)} passing patches missing "
            f"(first: patch_{missing[0]:06d})"
        )
    return {i: available[i] for i in ids}


def write_store(out_path: Path, slide_id: str, ids: list[int], vectors: np.ndarray,
                model_tag: str) -> None:
    if vectors.shape != (len(ids), EMBED_DIM):
        raise ContractError(
            f"embedding block is {vectors.shape}, contract requires (n, {EMBED_DIM})"
        )
    if not np.all(np.isfinite(vectors)):
        raise ContractError("non-finite embedding values")
    header = _HEADER.pack(PEMB_MAGIC, PEMB_VERSION, EMBED_DIM, len(ids))
    blob = header
    blob += np.asarray(ids, dtype="<u8").tobytes()
    blob += np.ascontiguousarray(vectors, dtype="<f4").tobytes()
    out_path = Path(out_path)
    out_path.write_bytes(blob)
    sidecar = {"slide_id": slide_id, "source": "exporter", "model": model_tag}
    Path(str(out_path) + ".json").write_text(json.dumps(sidecar) + "\n")


def export_embeddings(job: ExportJob) -> Path:
    """Embed every QC-passing patch and write the PEMB store."""
    import torch
    from PIL import Image

    slide_id, ids = read_pass_ids(Path(job.manifest))
    if job.slide_id:
        slide_id = job.slide_id
    files = _patch_files(job, ids)
    model = load_backbone(job.weights, job.device)

    chunks = []
    for start in range(0, len(ids), job.batch_size):
        batch_ids = ids[start : start + job.batch_size]
        tensors = [
            prepare_tensor(np.asarray(Image.open(files[i]).convert("RGB")))
            for i in batch_ids
        ]
        with torch.no_grad():
            feats = model(torch.from_numpy(np.stack(tensors)).to(job.device))
        if feats.shape[1] != EMBED_DIM:
            raise ContractError(
                f"backbone produced dim {feats.shape[1]}, contract requires {EMBED_DIM}"
            )
        chunks.append(feats.cpu().numpy().astype(np.float32))
    vectors = (
        np.concatenate(chunks, axis=0) if chunks else np.zeros((0, EMBED_DIM), np.float32)
    )
    write_store(Path(job.out_path), slide_id, ids, vectors, f"resnet18/{job.weights}")
    return Path(job.out_path)
