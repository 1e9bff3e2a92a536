"""Command-line interface: prepare, synth, train, eval, grid, report, project.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._util import stable_u64
from .data import (
    CLASS_KEYS,
    PATCH_SIZE,
    VIEWS,
    CropPatchSource,
    ImageFolder,
    PackedPatchSource,
    build_manifest,
    build_view,
    gen_synthetic_dataset,
    ingest_images,
    load_manifest,
    save_manifest,
    write_patches_packed,
    write_synthetic_corpus,
)
from .episodes import EpisodeSpec, apply_budget, episode_stream
from .metrics import aggregate, export_embeddings, write_embedding_text
from .protonet import (
    ENCODER_DIMS,
    evaluate,
    init_train_state,
    load_checkpoint,
    make_encoder,
    save_checkpoint,
    train_episodic,
)
from .runner import (
    GridSpec,
    export_results_csv,
    load_results,
    render_table,
    run_grid,
)

TINY_ITERATIONS = 60
TINY_EVAL_EPISODES = 20


class CliError(Exception):
    """Validation problem in arguments or inputs; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.format_usage().strip()}\n{message}")


def _load_config_file(path) -> dict:
    """key=value lines (or a JSON object); values parsed as JSON when possible."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
    else:
        doc = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            doc[key.strip()] = value.strip()
    out = {}
    for key, value in doc.items():
        key = key.strip().replace("-", "_")
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        out[key] = value
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="protopatch", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument("--tiny", action="store_true",
                        help="tiny encoder and shrunken iteration counts for CI-scale runs")
    common.add_argument("--config", type=Path, default=None,
                        help="key=value file supplying defaults for this subcommand")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic corpus in the ingestible layout")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--images-per-class", type=int, default=10)
    p.add_argument("--image-size", type=int, default=288)
    p.add_argument("--separability", type=float, default=1.5)
    p.add_argument("--views", nargs="+", default=list(VIEWS), choices=list(VIEWS))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common],
                       help="ingest a corpus, extract patches, split, write manifests")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--views", nargs="+", default=list(VIEWS), choices=list(VIEWS))
    p.add_argument("--mix", action="store_true", help="also build the MIX manifest")
    p.add_argument("--quota", type=int, default=1000, help="patches per class")
    p.add_argument("--patch-size", type=int, default=PATCH_SIZE)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--pack", action="store_true",
                   help="also write standardized patches as packed float32 files")
    p.set_defaults(func=cmd_prepare)

    episode_flags = argparse.ArgumentParser(add_help=False)
    episode_flags.add_argument("--manifest", type=Path, required=True)
    episode_flags.add_argument("--root", type=Path, default=None,
                               help="corpus root for on-demand cropping")
    episode_flags.add_argument("--packed", type=Path, default=None,
                               help="packed patch file from prepare --pack")
    episode_flags.add_argument("--ways", type=int, default=6)
    episode_flags.add_argument("--shots", type=int, default=10)
    episode_flags.add_argument("--queries", type=int, default=10)

    p = sub.add_parser("train", parents=[common, episode_flags],
                       help="episodic training on the budgeted train split")
    p.add_argument("--backbone", default="resnet34", choices=sorted(ENCODER_DIMS))
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--out", type=Path, default=None, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, episode_flags],
                       help="evaluate a checkpoint on test-split episodes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--out", type=Path, default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", parents=[common],
                       help="run the experiment grid with incremental persistence")
    p.add_argument("--manifest-dir", type=Path, required=True,
                   help="directory holding manifest_<VIEW>.json from prepare")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--views", nargs="+", default=["SUR"])
    p.add_argument("--backbones", nargs="+", default=["resnet34"],
                   choices=sorted(ENCODER_DIMS))
    p.add_argument("--shots", nargs="+", type=int, default=[5, 10, 15, 20])
    p.add_argument("--budgets", nargs="+", type=float, default=[1.0, 0.75, 0.5, 0.25])
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--ways", type=int, default=6)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--eval-episodes", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--include-baseline", action="store_true")
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--out", type=Path, default=None, help="results JSONL path")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", parents=[common], help="render result tables")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--layout", default="detailed",
                   choices=["detailed", "backbone_summary"])
    p.add_argument("--csv", type=Path, default=None, help="also export CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("project", parents=[common, episode_flags],
                       help="export test-split embeddings for external projection")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--max-per-class", type=int, default=100)
    p.add_argument("--text", action="store_true", help="also write the text variant")
    p.add_argument("--out", type=Path, default=None, help="dump path")
    p.set_defaults(func=cmd_project)

    return parser


def _require_exists(path, what: str):
    if path is None:
        raise CliError(f"{what} is required")
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _patch_source(manifest, root, packed):
    if packed is not None:
        return PackedPatchSource(manifest, _require_exists(packed, "--packed file"))
    if root is not None:
        return CropPatchSource.for_manifest(
            manifest, ImageFolder(_require_exists(root, "--root directory"))
        )
    raise CliError("either --root or --packed is required to read patch pixels")


def cmd_synth(args) -> int:
    out = args.out_dir
    total = 0
    for view in args.views:
        images = gen_synthetic_dataset(
            n_classes=args.classes, images_per_class=args.images_per_class,
            image_size=args.image_size, separability=args.separability,
            seed=args.seed, view=view,
        )
        total += write_synthetic_corpus(out, images)
    print(f"wrote {total} synthetic images under {out}")
    return 0


def cmd_prepare(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    quota = min(args.quota, 120) if args.tiny else args.quota
    built = {}
    for view in args.views:
        images = ingest_images(args.root, view)
        if not images:
            raise CliError(f"no images found for view {view} under {args.root}")
        manifest, source = build_manifest(
            images, per_class_quota=quota, train_fraction=args.train_fraction,
            seed=args.seed, patch_size=args.patch_size,
        )
        path = args.out_dir / f"manifest_{view}.json"
        save_manifest(manifest, path)
        built[view] = (manifest, source)
        counts = manifest.class_counts()
        print(f"{view}: {len(manifest.records)} patches "
              f"({', '.join(f'{k}={v}' for k, v in counts.items())}) -> {path}")
        if args.pack:
            packed = args.out_dir / f"patches_{view}.psc"
            write_patches_packed(manifest, source, packed)
            print(f"{view}: packed standardized patches -> {packed}")
    if args.mix:
        if set(args.views) != set(VIEWS):
            raise CliError("--mix needs both SUR and SEC views prepared")
        mix = build_view(built["SUR"][0], built["SEC"][0])
        path = args.out_dir / "manifest_MIX.json"
        save_manifest(mix, path)
        print(f"MIX: {len(mix.records)} patches -> {path}")
        if args.pack:
            images = {**built["SUR"][1].images, **built["SEC"][1].images}
            source = CropPatchSource.for_manifest(mix, images)
            packed = args.out_dir / "patches_MIX.psc"
            write_patches_packed(mix, source, packed)
            print(f"MIX: packed standardized patches -> {packed}")
    return 0


def cmd_train(args) -> int:
    backbone = "tiny_test_cnn" if args.tiny else args.backbone
    iterations = min(args.iterations, TINY_ITERATIONS) if args.tiny else args.iterations
    manifest = load_manifest(_require_exists(args.manifest, "--manifest"))
    source = _patch_source(manifest, args.root, args.packed)
    budget = apply_budget(manifest, args.budget, args.seed)
    encoder = make_encoder(backbone, getattr(args, "pretrained", False), args.seed)
    state = init_train_state(encoder, args.lr)
    spec = EpisodeSpec(args.ways, args.shots, args.queries, seed=args.seed)
    train_episodic(
        state, episode_stream(budget, spec, iterations, split="train"),
        source, iterations,
    )
    out = args.out or (args.out_dir / f"{backbone}_{manifest.view}.pt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, state)
    first = np.mean(state.loss_history[: min(20, len(state.loss_history))])
    last = np.mean(state.loss_history[-min(20, len(state.loss_history)) :])
    print(f"trained {backbone} for {iterations} iterations "
          f"(loss {first:.4f} -> {last:.4f}); checkpoint -> {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(_require_exists(args.manifest, "--manifest"))
    source = _patch_source(manifest, args.root, args.packed)
    encoder, descriptor = load_checkpoint(_require_exists(args.checkpoint, "--checkpoint"))
    episodes = min(args.episodes, TINY_EVAL_EPISODES) if args.tiny else args.episodes
    budget = apply_budget(manifest, 1.0, args.seed)
    spec = EpisodeSpec(args.ways, args.shots, args.queries,
                       seed=stable_u64(f"eval:{args.seed}") % (2**31))
    results = evaluate(
        encoder, episode_stream(budget, spec, episodes, split="test"), source
    )
    report = {}
    for name in ("accuracy", "precision_macro", "recall_macro", "f1_macro"):
        values = [getattr(r, name) for r in results]
        summary = aggregate(values) if len(values) >= 2 else None
        report[name] = {
            "mean": float(np.mean(values)),
            "std": None if summary is None else summary.std,
        }
    doc = {"checkpoint": str(args.checkpoint), "step": descriptor.get("step", 0),
           "episodes": episodes, "metrics": report}
    text = json.dumps(doc, indent=1)
    if args.out:
        args.out.write_text(text)
    print(text)
    return 0


def cmd_grid(args) -> int:
    store = {}
    _require_exists(args.manifest_dir, "--manifest-dir")
    for view in args.views:
        path = args.manifest_dir / f"manifest_{view}.json"
        if not path.exists():
            raise CliError(f"missing manifest for view {view}: {path}")
        manifest = load_manifest(path)
        packed = args.manifest_dir / f"patches_{view}.psc"
        source = _patch_source(manifest, args.root, packed if packed.exists() else None)
        store[view] = (manifest, source)
    grid = GridSpec(
        views=tuple(args.views),
        backbones=("tiny_test_cnn",) if args.tiny else tuple(args.backbones),
        shots=tuple(args.shots),
        budgets=tuple(args.budgets),
        seed=args.seed,
        n_way=args.ways,
        n_query=args.queries,
        train_iterations=min(args.iterations, TINY_ITERATIONS) if args.tiny else args.iterations,
        eval_episodes=min(args.eval_episodes, TINY_EVAL_EPISODES) if args.tiny else args.eval_episodes,
        learning_rate=args.lr,
        include_baseline=args.include_baseline,
        pretrained=args.pretrained,
    )
    out = args.out or (args.out_dir / "results.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = run_grid(grid, store, out_path=out, resume=not args.no_resume)
    failed = sum(1 for r in rows if r.status == "failed")
    print(f"grid: {len(rows)} new rows ({failed} failed) -> {out}")
    return 0


def cmd_report(args) -> int:
    rows = load_results(_require_exists(args.results, "--results"))
    if not rows:
        raise CliError(f"no rows in {args.results}")
    print(render_table(rows, layout=args.layout))
    if args.csv:
        export_results_csv(rows, args.csv)
        print(f"csv -> {args.csv}")
    return 0


def cmd_project(args) -> int:
    manifest = load_manifest(_require_exists(args.manifest, "--manifest"))
    source = _patch_source(manifest, args.root, args.packed)
    encoder, descriptor = load_checkpoint(_require_exists(args.checkpoint, "--checkpoint"))
    rng = np.random.default_rng(args.seed)
    ids, keys = [], []
    for class_key, pool in manifest.ids_by_class(args.split).items():
        take = min(len(pool), args.max_per_class)
        chosen = rng.choice(len(pool), size=take, replace=False)
        ids.extend(pool[i] for i in sorted(chosen))
        keys.extend([class_key] * take)
    if not ids:
        raise CliError(f"no patches in split {args.split!r}")
    out = args.out or (args.out_dir / f"embeddings_{manifest.view}_{args.split}.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump = export_embeddings(
        encoder, source.batch(ids), keys, out,
        view=manifest.view, config_hash=descriptor.get("config_hash", ""),
    )
    print(f"wrote {dump.vectors.shape[0]} x {dump.vectors.shape[1]} embeddings -> {out}")
    if args.text:
        text_path = Path(str(out) + ".txt")
        write_embedding_text(dump, text_path)
        print(f"text variant -> {text_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        if "--config" in argv:
            config = _load_config_file(argv[argv.index("--config") + 1])
            args = parser.parse_args(argv)
            for key, value in config.items():
                # explicit flags win: only fill values left at their defaults
                if key in vars(args) and _is_default(parser, argv, key):
                    setattr(args, key, value)
        else:
            args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _is_default(parser, argv, dest) -> bool:
    flag = "--" + dest.replace("_", "-")
    return flag not in argv


if __name__ == "__main__":
    sys.exit(main())
