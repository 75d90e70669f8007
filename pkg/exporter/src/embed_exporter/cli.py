"""Command line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 setup error (weights or
environment).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .exporter import ContractError, ExportJob, SetupError, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-embeddings",
        description="Embed QC-passing patches with a frozen ResNet-18 into a PEMB store.",
    )
    parser.add_argument("--patches", required=True, help="directory of patch_XXXXXX.png tiles")
    parser.add_argument("--manifest", required=True, help="tiling manifest CSV")
    parser.add_argument("--out", required=True, help="output .pemb path")
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument(
        "--weights", default="imagenet",
        help="'imagenet', 'random:<seed>', or a path to a state dict",
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--slide-id", default=None, help="override the sidecar slide id")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        patch_dir=Path(args.patches),
        manifest=Path(args.manifest),
        out_path=Path(args.out),
        weights=args.weights,
        batch_size=args.batch,
        device=args.device,
        slide_id=args.slide_id,
    )
    try:
        out = export_embeddings(job)
    except SetupError as exc:
        print(f"export-embeddings: setup error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ContractError, OSError) as exc:
        print(f"export-embeddings: data error: {exc}", file=sys.stderr)
        return 2
    print(f"export-embeddings: wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
