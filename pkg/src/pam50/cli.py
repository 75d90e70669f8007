"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 dependency error
(a stage invoked before its upstream stage ran).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

from . import pipeline
from .config import FilterSettings, PipelineConfig, default_config
from .errors import DataError, DependencyError, Pam50Error, UsageError
from .synthetic import SyntheticSpec, gen_synthetic

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DEPENDENCY = 3

PIPELINE_COMMANDS = {
    "tile", "embed-toy", "train", "uncertainty", "select",
    "predict", "evaluate", "ablate", "run-all",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _add_pipeline_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="pipeline config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--force", action="store_true", help="re-run even if up to date")
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--tau", type=float, default=None, help="absolute uncertainty cutoff")
    group.add_argument("--keep-frac", type=float, default=None, help="keep-fraction policy")
    sub.add_argument("--pop", type=int, default=None, help="override GA population size")
    sub.add_argument("--gens", type=int, default=None, help="override GA generations")
    sub.add_argument("--k-min", type=int, default=None, help="override minimum subset size")


def build_parser() -> _Parser:
    parser = _Parser(prog="pam50", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("init-config", help="write a config file with full defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--slides-dir", default="slides")
    p.add_argument("--work-dir", default="work")
    p.add_argument("--seed", type=int, required=True)

    p = subs.add_parser("synth", help="generate a synthetic slide corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-per-class", type=int, default=12)
    p.add_argument("--patches-per-slide", type=int, default=150)
    p.add_argument("--informative-frac", type=float, default=0.1)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--tissue-frac", type=float, default=0.95)
    p.add_argument("--format", choices=("tif", "png"), default="tif")

    for name, text in [
        ("tile", "tile and QC all slides"),
        ("embed-toy", "embed passing patches with the toy embedder"),
        ("uncertainty", "MC-dropout uncertainty per patch"),
        ("select", "uncertainty filter + NSGA-II subset per slide"),
        ("ablate", "full pipeline vs no-selection baseline"),
        ("run-all", "chain every stage end to end"),
    ]:
        p = subs.add_parser(name, help=text)
        _add_pipeline_options(p)
        if name == "tile":
            p.add_argument(
                "--dump-patches", action="store_true",
                help="also write passing 512x512 tiles as PNGs for exporters",
            )

    p = subs.add_parser("train", help="train the classification head")
    _add_pipeline_options(p)
    p.add_argument("--phase", choices=("auto", "provisional", "final", "baseline"), default="auto")

    p = subs.add_parser("predict", help="slide-level predictions")
    _add_pipeline_options(p)
    p.add_argument("--all-patches", action="store_true", help="ignore the selection")
    p.add_argument("--head", choices=("final", "provisional", "baseline"), default="final")

    p = subs.add_parser("evaluate", help="metrics over a split")
    _add_pipeline_options(p)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    return parser


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.tau is not None:
        config = replace(config, filter=FilterSettings(tau=args.tau, keep_fraction=None))
    elif args.keep_frac is not None:
        config = replace(config, filter=FilterSettings(tau=None, keep_fraction=args.keep_frac))
    ga = config.ga
    if args.pop is not None:
        ga = replace(ga, population=args.pop)
    if args.gens is not None:
        ga = replace(ga, generations=args.gens)
    config = replace(config, ga=ga)
    if args.k_min is not None:
        config = replace(config, k_min=args.k_min)
    return config


def _timed(label: str, fn, *fn_args, **fn_kwargs):
    start = time.perf_counter()
    result = fn(*fn_args, **fn_kwargs)
    print(f"[pam50] {label}: {time.perf_counter() - start:.1f}s")
    return result


def _run_pipeline_command(args) -> None:
    config = _load_config(args)
    force = args.force
    if args.command == "tile":
        _timed("tile", pipeline.stage_tile, config, force,
               dump_patches=getattr(args, "dump_patches", False))
    elif args.command == "embed-toy":
        _timed("embed", pipeline.stage_embed, config, force)
    elif args.command == "train":
        phase = pipeline.resolve_train_phase(config, args.phase)
        _timed(f"train/{phase}", pipeline.stage_train, config, phase, force)
    elif args.command == "uncertainty":
        _timed("uncertainty", pipeline.stage_uncertainty, config, force)
    elif args.command == "select":
        _timed("select", pipeline.stage_select, config, force)
    elif args.command == "predict":
        _timed(
            "predict", pipeline.stage_predict, config, force,
            all_patches=args.all_patches, head_phase=args.head,
        )
    elif args.command == "evaluate":
        payload = _timed("evaluate", pipeline.stage_evaluate, config, force, split=args.split)
        print(
            f"[pam50] split={payload['split']} accuracy={payload['accuracy']:.4f} "
            f"macro_f1={payload['macro_f1']:.4f} macro_auc={payload['macro_auc']}"
        )
    elif args.command == "ablate":
        summary = _timed("ablate", pipeline.run_ablation, config, force)
        print(
            "[pam50] full macro_f1={:.4f}  baseline macro_f1={:.4f}  delta={:+.4f}".format(
                summary["full"]["macro_f1"],
                summary["baseline"]["macro_f1"],
                summary["delta"]["macro_f1"],
            )
        )
    elif args.command == "run-all":
        for label, fn, fargs in [
            ("tile", pipeline.stage_tile, (config, force)),
            ("embed", pipeline.stage_embed, (config, force)),
            ("split", pipeline.stage_split, (config, force)),
            ("train/provisional", pipeline.stage_train, (config, "provisional", force)),
            ("uncertainty", pipeline.stage_uncertainty, (config, force)),
            ("select", pipeline.stage_select, (config, force)),
            ("train/final", pipeline.stage_train, (config, "final", force)),
            ("predict", pipeline.stage_predict, (config, force)),
        ]:
            _timed(label, fn, *fargs)
        payload = _timed("evaluate", pipeline.stage_evaluate, config, force)
        print(
            f"[pam50] accuracy={payload['accuracy']:.4f} macro_f1={payload['macro_f1']:.4f} "
            f"macro_auc={payload['macro_auc']}"
        )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "init-config":
            config = default_config(args.slides_dir, args.work_dir, args.seed)
            config.save(args.out)
            print(f"[pam50] wrote {args.out}")
        elif args.command == "synth":
            spec = SyntheticSpec(
                n_slides_per_class=args.n_per_class,
                patches_per_slide=args.patches_per_slide,
                informative_fraction=args.informative_frac,
                signal_strength=args.signal,
                noise_level=args.noise,
                seed=args.seed,
                tissue_fraction=args.tissue_frac,
            )
            labels = _timed(
                "synth", gen_synthetic, spec, args.out_dir, image_format=args.format
            )
            print(f"[pam50] labels manifest: {labels}")
        else:
            _run_pipeline_command(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"pam50: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"pam50: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DataError as exc:
        print(f"pam50: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Pam50Error as exc:
        print(f"pam50: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
