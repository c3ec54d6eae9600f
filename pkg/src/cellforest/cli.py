"""Command-line front end for the segmentation pipeline and its tools.

Subcommands::

    cellforest segment  input.mvol.json --output-prefix out --v-min-um3 ... --v-max-um3 ...
    cellforest synth    --output-prefix phantom --dims 64 --n-cells 30 --seed 7
    cellforest train    --dataset patches/ --model-out model.cnn
    cellforest eval     pred.mvol.json truth.mvol.json

``segment`` runs normalize -> Gaussian smoothing -> iterative closing ->
minima detection -> watershed -> region graph -> agglomeration ->
optional classifier-guided resolution -> final labels. Only the volume
bounds (v_min / v_max, or r_min to derive v_min) are mandatory;
everything else defaults. Options can come from a ``key = value`` config
file (``--config``), with command-line flags taking precedence.

Exit codes: 0 success, 2 bad configuration, 3 I/O failure, 4 stage
failure; errors name the stage that failed.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager

from .classify import hypothesis_classifier
from .cnn import DatasetError, TrainConfig, load_model, save_model, train
from .graph import build_region_graph
from .merging import MergeParams, agglomerate, load_forest, save_forest, v_min_from_radius
from .metrics import format_table, layer_report, match_segments, report_json
from .phantom import (
    PhantomParams,
    generate_patch_dataset,
    generate_phantom,
    load_patch_dataset,
    save_patch_dataset,
)
from .preprocess import gaussian_smooth, iterative_closing
from .resolve import finalize, resolution_report, resolve, resolve_trivial
from .volume import LabelVolume, ScalarVolume, normalize, read_volume, write_volume
from .watershed import find_local_minima, seeded_watershed


class CliError(Exception):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(message)
        self.stage = stage
        self.code = code


@contextmanager
def stage(name: str, code: int = 4):
    """Convert any failure inside the block into a named-stage exit."""
    try:
        yield
    except CliError:
        raise
    except FileNotFoundError as exc:
        raise CliError("io", 3, str(exc)) from exc
    except DatasetError as exc:
        raise CliError("data", 4, str(exc)) from exc
    except Exception as exc:
        raise CliError(name, code, str(exc)) from exc


def _triple(text: str, cast=float) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"expected 1 or 3 comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _int_set(text: str) -> frozenset[int]:
    return frozenset(int(p) for p in text.replace(",", " ").split() if p)


def load_config(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, keys match the
    long flag names (hyphens and underscores interchangeable)."""
    cfg = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


# segment options that a config file may set, with their parsers.
_CONFIG_KEYS = {
    "input": str,
    "output_prefix": str,
    "v_min_um3": float,
    "v_max_um3": float,
    "r_min_um": float,
    "sigma": str,
    "r_cl_max": int,
    "classifier": str,
    "model_path": str,
    "seed": int,
    "threads": int,
    "dump_stages": lambda s: s.lower() in ("1", "true", "yes"),
    "preprocessed_in": str,
    "supervoxels_in": str,
    "forest_in": str,
}


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    with stage("config", 2):
        cfg = load_config(args.config)
    for key, raw in cfg.items():
        if key not in _CONFIG_KEYS:
            raise CliError("config", 2, f"unknown config key {key!r}")
        if getattr(args, key, None) in (None, False):
            try:
                setattr(args, key, _CONFIG_KEYS[key](raw))
            except ValueError as exc:
                raise CliError("config", 2, f"config key {key!r}: {exc}") from exc


def _read_scalar(path: str) -> ScalarVolume:
    vol = read_volume(path)
    if not isinstance(vol, ScalarVolume):
        raise CliError("data", 4, f"{path}: expected a scalar volume, found labels")
    return vol


def _read_labels(path: str) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise CliError("data", 4, f"{path}: expected a label volume (u32 payload)")
    return vol


def cmd_segment(args: argparse.Namespace) -> int:
    _apply_config(args)
    if args.seed is None:
        args.seed = 0
    if args.r_cl_max is None:
        args.r_cl_max = 3
    if args.classifier is None:
        args.classifier = "none"
    if args.classifier not in ("none", "heuristic", "cnn"):
        raise CliError("config", 2, f"unknown classifier {args.classifier!r}")
    if args.classifier == "cnn" and not args.model_path:
        raise CliError("config", 2, "--classifier cnn requires --model-path")
    if not args.output_prefix:
        raise CliError("config", 2, "--output-prefix is required")
    if args.v_min_um3 is not None:
        v_min = args.v_min_um3
    elif args.r_min_um is not None:
        with stage("config", 2):
            v_min = v_min_from_radius(args.r_min_um)
    else:
        raise CliError("config", 2, "need --v-min-um3 or --r-min-um")
    if args.v_max_um3 is None:
        raise CliError("config", 2, "need --v-max-um3")
    with stage("config", 2):
        params = MergeParams(v_min=v_min, v_max=args.v_max_um3)
        sigma = _triple(args.sigma) if args.sigma else (1.0, 1.0, 1.0)
    if args.threads is not None and args.threads < 1:
        raise CliError("config", 2, "--threads must be >= 1")

    pre = sv = None
    if args.supervoxels_in and not args.preprocessed_in:
        raise CliError("config", 2, "--supervoxels-in requires --preprocessed-in")
    if args.forest_in:
        if not args.supervoxels_in:
            raise CliError("config", 2, "--forest-in requires --supervoxels-in")
        if args.classifier != "none" and not args.preprocessed_in:
            raise CliError("config", 2, "--forest-in with a classifier requires --preprocessed-in")
    if not (args.input or args.preprocessed_in):
        raise CliError("config", 2, "need an input volume or a stage artifact to resume from")

    prefix = args.output_prefix
    if args.preprocessed_in:
        with stage("io", 3):
            pre = _read_scalar(args.preprocessed_in)
    else:
        with stage("io", 3):
            raw = _read_scalar(args.input)
        with stage("preprocess"):
            pre = iterative_closing(
                gaussian_smooth(normalize(raw), sigma), args.r_cl_max
            )
        if args.dump_stages:
            with stage("io", 3):
                write_volume(pre, f"{prefix}.pre.mvol.json")

    if args.supervoxels_in:
        with stage("io", 3):
            sv = _read_labels(args.supervoxels_in)
    else:
        with stage("watershed"):
            sv = seeded_watershed(pre, find_local_minima(pre))
        if args.dump_stages:
            with stage("io", 3):
                write_volume(sv, f"{prefix}.sv.mvol.json")

    if args.forest_in:
        with stage("io", 3):
            forest = load_forest(args.forest_in)
    else:
        with stage("merge"):
            graph = build_region_graph(sv, pre)
            forest = agglomerate(graph, params)

    with stage("resolve"):
        if args.classifier == "none":
            resolution = resolve_trivial(forest)
        else:
            model = None
            if args.classifier == "cnn":
                with stage("io", 3):
                    model = load_model(args.model_path)
            classify_fn = hypothesis_classifier(
                pre, forest, sv, model=model, merge_params=params
            )
            resolution = resolve(forest, classify_fn)
        final = finalize(forest, resolution, sv)

    with stage("io", 3):
        write_volume(final, f"{prefix}.labels.mvol.json")
        save_forest(forest, f"{prefix}.forest.txt")
        report = (
            f"classifier: {args.classifier}\n"
            f"seed: {args.seed}\n"
            f"supervoxels: {forest.n_leaves}\n"
            f"forest roots: {len(forest.roots)}\n"
            + resolution_report(forest, resolution)
        )
        with open(f"{prefix}.report.txt", "w") as fh:
            fh.write(report)
    print(f"wrote {prefix}.labels.mvol.json ({len(resolution.selected)} segments)")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    with stage("config", 2):
        params = PhantomParams(
            dims=_triple(args.dims, int),
            spacing=_triple(args.spacing),
            n_cells=args.n_cells,
            membrane_width=args.membrane_width,
            membrane_intensity=args.membrane_intensity,
            interior_intensity=args.interior_intensity,
            attenuation=args.attenuation,
            noise_sigma=args.noise_sigma,
            blur_sigma=args.blur_sigma,
            seed=args.seed,
        )
    with stage("synth"):
        v, gt = generate_phantom(params)
    with stage("io", 3):
        write_volume(v, f"{args.output_prefix}.image.mvol.json")
        write_volume(gt, f"{args.output_prefix}.truth.mvol.json")
    if args.patches_dir:
        with stage("synth"):
            patches, classes = generate_patch_dataset(
                params, *(args.patches_per_class,) * 3
            )
        with stage("io", 3):
            save_patch_dataset(args.patches_dir, patches, classes)
        print(f"wrote {len(patches)} patches to {args.patches_dir}")
    print(f"wrote {args.output_prefix}.image.mvol.json and .truth.mvol.json")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    with stage("io", 3):
        x, classes = load_patch_dataset(args.dataset)
    config = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        keep_prob=args.keep_prob,
        seed=args.seed,
    )
    with stage("train"):
        model, trace = train(x, classes, config)
    with stage("io", 3):
        save_model(model, args.model_out)
        with open(f"{args.model_out}.loss.txt", "w") as fh:
            fh.writelines(f"{float(v)!r}\n" for v in trace)
    print(f"wrote {args.model_out} (loss {trace[0]:.4f} -> {trace[-1]:.4f})")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    with stage("io", 3):
        pred = _read_labels(args.pred)
        truth = _read_labels(args.truth)
        mask = _read_labels(args.layer_mask) if args.layer_mask else None
    background = _int_set(args.background) if args.background else frozenset()
    with stage("eval"):
        if mask is None:
            rows = [(args.name, match_segments(pred, truth, background))]
        else:
            rows = [
                (f"{args.name}[layer {layer}]", rep)
                for layer, rep in layer_report(pred, truth, mask, background).items()
            ]
    print(format_table(rows), end="")
    if args.json_out:
        with stage("io", 3):
            with open(args.json_out, "w") as fh:
                fh.writelines(report_json(name, rep) + "\n" for name, rep in rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellforest", description="membrane-stained volume segmentation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="run the segmentation pipeline")
    p.add_argument("input", nargs="?", help="input MVOL intensity volume")
    p.add_argument("--config", help="key = value options file")
    p.add_argument("--output-prefix", help="prefix for labels/forest/report outputs")
    p.add_argument("--v-min-um3", type=float, help="minimum cell volume (um^3)")
    p.add_argument("--v-max-um3", type=float, help="maximum cell volume (um^3)")
    p.add_argument("--r-min-um", type=float, help="derive v_min from a minimum radius (um)")
    p.add_argument("--sigma", help="Gaussian sigma in voxels, one value or x,y,z")
    p.add_argument("--r-cl-max", type=int, default=None, help="largest closing radius (voxels)")
    p.add_argument(
        "--classifier", default=None, choices=("none", "heuristic", "cnn"),
        help="under-segmentation correction (default none)",
    )
    p.add_argument("--model-path", help="trained model file for --classifier cnn")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap (outputs unaffected)")
    p.add_argument("--dump-stages", action="store_true", help="also write stage artifacts")
    p.add_argument("--preprocessed-in", help="resume from a preprocessed volume")
    p.add_argument("--supervoxels-in", help="resume from a supervoxel volume")
    p.add_argument("--forest-in", help="resume from a merge-forest file")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("synth", help="generate a synthetic phantom")
    p.add_argument("--output-prefix", required=True)
    p.add_argument("--dims", default="64", help="volume size, one value or x,y,z")
    p.add_argument("--spacing", default="1", help="voxel spacing in um, one value or x,y,z")
    p.add_argument("--n-cells", type=int, default=30)
    p.add_argument("--membrane-width", type=int, default=1)
    p.add_argument("--membrane-intensity", type=float, default=0.9)
    p.add_argument("--interior-intensity", type=float, default=0.15)
    p.add_argument("--attenuation", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--blur-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patches-dir", help="also cut a labeled training-patch dataset")
    p.add_argument("--patches-per-class", type=int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the patch classifier")
    p.add_argument("--dataset", required=True, help="patch dataset directory")
    p.add_argument("--model-out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a labeling against ground truth")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--layer-mask", help="label volume assigning truth cells to layers")
    p.add_argument("--background", help="truth labels to exclude, e.g. '0,5'")
    p.add_argument("--name", default="segmentation", help="algorithm column label")
    p.add_argument("--json-out", help="also write one JSON object per row")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error [stage {exc.stage}]: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
