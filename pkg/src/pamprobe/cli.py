"""Command-line entry point: ``pamprobe <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .bench import DEFAULT_BATCH_GRID, DEFAULT_WORKER_GRID, bench_inference
from .corpus import (
    DEFAULT_MIN_TOTAL,
    DatasetRegistry,
    SplitSpec,
    amalgamate_labels,
    export_csv,
    load_manifest,
    save_manifest,
    split_train_test,
    summarize_registry,
)
from .dsp_frontend import FRONTEND_PRESETS
from .embedder import (
    PRESETS,
    AudioLoader,
    CacheBackend,
    EmbeddingBackend,
    EmbeddingCache,
    MockBackend,
    embedder_preset,
    wav_loader,
)
from .errors import EXIT_USAGE, ConfigError, FileIoError, PamProbeError
from .eval_protocol import (
    DEFAULT_KS,
    SWEEP_PRESETS,
    DregConfig,
    EvalReport,
    FewshotConfig,
    PretrainSweep,
    dreg,
    embed_dataset,
    fewshot_eval,
    sweep,
    sweep_preset,
)
from .io import json_dump, load_json, validate_payload, write_csv_rows, write_run_config
from .mixture_pretrain import (
    MixtureConfig,
    PretrainHparams,
    ToyEmbedderModel,
    build_heads,
    pretrain_toy,
)
from .probe import AUC_CONVENTION, ProbeHparams, evaluate_probe, train_probe
from .reference import published_auc
from .reports import (
    emit_aggregates,
    emit_bench,
    emit_reductions,
    emit_report,
    emit_rotations,
    emit_sweep,
    merge_reports,
    reduction_rows,
)
from .settings import configure_logging, default_cache_dir
from .synthetic import corpus_names, named_corpus, write_corpus

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], int]
BACKENDS = ("mock", "cache", "toy")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _path(value: str | Path | None) -> Path | None:
    return Path(value) if value is not None else None


def _require(value: Any, field: str) -> Any:
    if value is None or value == []:
        raise ConfigError(f"--{field.replace('_', '-')} is required", field=field)
    return value


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FileIoError(f"could not create {out}: {exc}", path=str(out)) from exc
    return out


def _recordable_value(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value.resolve())
    if isinstance(value, list | tuple):
        return [_recordable_value(item) for item in value]
    return value


def _recordable(args: argparse.Namespace) -> dict[str, Any]:
    """Namespace as JSON with absolute paths, so a replay works from any directory."""
    return {key: _recordable_value(value) for key, value in sorted(vars(args).items()) if key != "verbose"}


def _start(args: argparse.Namespace) -> Path:
    out = _out_dir(args)
    write_run_config(out, args.command, _recordable(args))
    return out


def _registry(args: argparse.Namespace) -> tuple[DatasetRegistry, AudioLoader]:
    manifest = _path(_require(args.manifest, "manifest"))
    registry = load_manifest(manifest)
    return registry, wav_loader(manifest.parent)


def _backend(args: argparse.Namespace) -> EmbeddingBackend:
    spec = embedder_preset(args.spec) if args.spec else None
    if args.backend == "mock":
        return MockBackend(spec)
    if args.backend == "cache":
        cache_path = _path(_require(args.cache, "cache"))
        return CacheBackend(EmbeddingCache.load(cache_path, cache_path.stem), spec)
    if args.backend == "toy":
        return ToyEmbedderModel.load(_path(_require(args.model, "model")))
    raise ConfigError(f"unknown backend {args.backend!r} (known: {', '.join(BACKENDS)})", field="backend")


def _model_name(args: argparse.Namespace, backend: EmbeddingBackend) -> str:
    if args.model_name:
        return args.model_name
    name = getattr(backend, "name", backend.spec.name)
    return f"{name}:{args.spec}" if args.backend == "mock" and args.spec else name


def _probe_hparams(args: argparse.Namespace) -> ProbeHparams:
    return ProbeHparams(
        epochs=args.epochs,
        batch_size=args.probe_batch_size,
        lr=args.probe_lr,
        optimizer=args.optimizer,
        l2=args.l2,
    )


def _fewshot_config(args: argparse.Namespace) -> FewshotConfig:
    return FewshotConfig(
        ks=tuple(args.ks),
        repeats=args.repeats,
        base_seed=args.seed,
        min_test=args.min_test,
        max_train=args.max_train,
        min_total=args.min_total or None,
        hparams=_probe_hparams(args),
    )


def _pretrain_hparams(args: argparse.Namespace) -> PretrainHparams:
    return PretrainHparams(
        lr=args.lr,
        arch=args.arch,
        sample_rate=args.sample_rate,
        window_s=args.window_s,
        frontend=args.frontend_preset,
        log_every=args.log_every,
    )


def _mixture(args: argparse.Namespace, registry: DatasetRegistry) -> MixtureConfig:
    overrides = {
        key: value
        for key, value in (("steps", args.steps), ("batch_size", args.batch_size))
        if value is not None
    }
    if args.mixture:
        return replace(MixtureConfig.load(args.mixture), **overrides)
    datasets = args.datasets or registry.dataset_ids
    return MixtureConfig.single("reef", datasets, **overrides)


def cmd_manifest(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, _ = _registry(args)
    if args.action == "validate":
        print(json.dumps(summarize_registry(registry), indent=2, sort_keys=True))
        return 0
    target = out / Path(_require(args.to, "to"))
    if target.suffix.lower() == ".csv":
        export_csv(registry, target)
    elif target.suffix.lower() == ".json":
        save_manifest(registry, target)
    else:
        raise ConfigError(f"cannot convert to {target.suffix or 'a file without suffix'}", field="to")
    print(f"wrote {target}")
    return 0


def cmd_synth_corpus(args: argparse.Namespace) -> int:
    out = _start(args)
    corpus = named_corpus(args.corpus, seed=args.seed, clips_per_class=args.clips_per_class)
    registry = write_corpus(corpus, out)
    print(f"wrote {len(registry.all_clips())} clips and {out / 'manifest.json'}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    out = _start(args)
    cache_path = _path(args.cache) or default_cache_dir() / f"{args.spec or args.backend}.ppec"
    cache = (
        EmbeddingCache.load(cache_path, cache_path.stem)
        if cache_path.exists()
        else EmbeddingCache(spec_name=cache_path.stem)
    )
    if args.import_csv:
        count = cache.import_csv(args.import_csv)
        cache.save(cache_path)
        print(f"imported {count} embeddings into {cache_path}")
        return 0
    registry, loader = _registry(args)
    backend = _backend(args)
    clips = registry.all_clips(args.datasets or None)
    embed_dataset(clips, backend, loader=loader, cache=cache, workers=args.workers)
    cache.save(cache_path)
    json_dump(out / "embed.json", {"cache": str(cache_path), "clips": len(clips), "dim": cache.dim})
    print(f"{len(cache)} embeddings in {cache_path}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, loader = _registry(args)
    dataset = _require(args.dataset, "dataset")
    clips = list(registry.clips(dataset))
    if args.min_total:
        clips = amalgamate_labels(clips, args.min_total)
    backend = _backend(args)
    embeddings = embed_dataset(clips, backend, loader=loader, workers=args.workers)
    train, test = split_train_test(clips, SplitSpec(args.k, args.seed, args.min_test, args.max_train))
    model = train_probe(
        np.stack([embeddings[clip.clip_id] for clip in train]),
        [clip.class_name for clip in train],
        _probe_hparams(args),
        args.seed,
        ids=[clip.clip_id for clip in train],
    )
    result = evaluate_probe(
        model,
        np.stack([embeddings[clip.clip_id] for clip in test]),
        [clip.class_name for clip in test],
    )
    model.save(out / "probe.json")
    json_dump(
        out / "probe_eval.json",
        {
            "model": _model_name(args, backend),
            "dataset": dataset,
            "k": args.k,
            "seed": args.seed,
            "train": len(train),
            "test": len(test),
            "macro_auc": result.macro,
            "per_class": dict(result.per_class),
            "auc": AUC_CONVENTION,
        },
    )
    print(f"{dataset} k={args.k}: macro AUC {result.macro:.4f} on {len(test)} clips")
    return 0


def cmd_fewshot(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, loader = _registry(args)
    backend = _backend(args)
    cfg = _fewshot_config(args)
    name = _model_name(args, backend)
    report = EvalReport()
    for dataset_id in args.datasets or registry.dataset_ids:
        report.extend(
            fewshot_eval(
                registry, dataset_id, backend, cfg, loader=loader, workers=args.workers, model_name=name
            )
        )
    emit_report(report, out / f"fewshot.{args.format}", args.format)
    emit_aggregates(report, out / "aggregates.csv")
    mean = report.mean_auc()
    print(f"{name}: {len(report.ok())}/{len(report.records)} cells ok, mean AUC "
          + (f"{mean:.4f}" if mean is not None else "n/a"))
    return 0


def cmd_dreg(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, loader = _registry(args)
    config = DregConfig(
        mixture=_mixture(args, registry) if args.mixture else None,
        hparams=_pretrain_hparams(args),
        fewshot=_fewshot_config(args),
        seed=args.seed,
        steps=args.steps or 2000,
        batch_size=args.batch_size or 32,
    )
    results = dreg(registry, config, holdouts=args.holdouts or None, loader=loader, workers=args.workers)
    report = EvalReport()
    for result in results:
        if result.report is not None:
            report.extend(result.report)
    emit_report(report, out / f"dreg.{args.format}", args.format)
    emit_aggregates(report, out / "aggregates.csv")
    emit_rotations(results, out / "rotations.csv")
    for result in results:
        mean = result.report.mean_auc() if result.report is not None else None
        print(f"{result.holdout}: {result.status} " + (f"mean AUC {mean:.4f}" if mean is not None else ""))
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, loader = _registry(args)
    mixture = _mixture(args, registry)
    json_dump(out / "mixture.json", mixture.to_payload())
    model = pretrain_toy(
        mixture,
        registry,
        build_heads(mixture, registry),
        _pretrain_hparams(args),
        args.seed,
        loader=loader,
        workers=args.workers,
    )
    saved = model.save(out / "toy")
    write_csv_rows(
        out / "pretrain_loss.csv",
        ["step", "loss"],
        [{"step": step, "loss": loss} for step, loss in enumerate(model.history, start=1)],
    )
    final = model.history[-1] if model.history else float("nan")
    print(f"wrote {saved} after {len(model.history)} steps, final loss {final:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    out = _start(args)
    registry, loader = _registry(args)
    validation = _require(args.validation, "validation")
    bird, freesound = args.bird or [], args.freesound or []
    reef = args.reef or [d for d in registry.dataset_ids if d not in bird and d not in freesound]
    domains = {"reef": reef, "bird": bird, "freesound": freesound}
    training = [d for datasets in domains.values() for d in datasets if d not in validation]
    stages = sweep_preset(args.preset, validation, training)
    runner = PretrainSweep(
        registry,
        args.preset,
        domains,
        hparams=_pretrain_hparams(args),
        fewshot=_fewshot_config(args),
        steps=args.steps or 2000,
        seed=args.seed,
        loader=loader,
        workers=args.workers,
    )
    rows = sweep(stages, runner.train, runner.evaluate)
    emit_sweep(rows, out / "sweep.csv")
    best = next((row for row in rows if row.auc is not None), None)
    print(f"{len(rows)} configurations; best AUC " + (f"{best.auc:.4f}" if best else "n/a"))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    out = _start(args)
    backend = _backend(args)
    result = bench_inference(
        backend,
        args.duration,
        args.rate,
        args.batch_grid,
        args.worker_grid,
        seed=args.seed,
    )
    emit_bench(result, out / "bench.csv")
    print(result.summary())
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out = _start(args)
    report = merge_reports(args.inputs)
    emit_aggregates(report, out / "aggregates.csv")
    if args.format:
        emit_report(report, out / f"records.{args.format}", args.format)
    if args.reference:
        reference_auc = args.reference_auc if args.reference_auc is not None else published_auc(args.reference)
        rows = reduction_rows(report, args.reference, reference_auc)
        emit_reductions(rows, out / "reductions.csv")
        for row in rows:
            reduction = row["error_reduction"]
            rendered = f"{reduction:+.1f}%" if reduction is not None else "undefined"
            print(f"{row['model']} k={row['k']}: {rendered} vs {args.reference}")
    for aggregate in report.aggregates():
        if aggregate.dataset == "*":
            print(f"{aggregate.model} k={aggregate.k}: {aggregate.mean:.4f} +/- {aggregate.std:.4f} (n={aggregate.n})")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    payload = load_json(args.run_config)
    validate_payload(payload, "run-config")
    command = payload["command"]
    if command not in COMMANDS or command == "replay":
        raise ConfigError(f"cannot replay command {command!r}", field="command")
    recorded = argparse.Namespace(**payload["args"])
    recorded.verbose = args.verbose
    if args.out is not None:
        recorded.out = args.out
    logger.info("replaying %s from %s", command, args.run_config)
    return COMMANDS[command](recorded)


COMMANDS: dict[str, Handler] = {
    "manifest": cmd_manifest,
    "synth-corpus": cmd_synth_corpus,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "dreg": cmd_dreg,
    "pretrain": cmd_pretrain,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    common.add_argument("--out", type=Path, default=Path("."), help="Output directory (run_config.json goes here)")
    common.add_argument("--workers", type=int, help="Worker bound for parallel stages (default: all cores)")
    common.add_argument("--seed", type=int, default=0, help="Base seed")
    return common


def _manifest_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--manifest", type=Path, help="Manifest JSON; clip paths resolve against its directory")
    return parser


def _backend_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--backend", choices=BACKENDS, default="mock")
    parser.add_argument("--spec", choices=sorted(PRESETS), help="Input spec of a published network")
    parser.add_argument("--cache", type=Path, help="Embedding cache file")
    parser.add_argument("--model", type=Path, help="Toy embedder saved by 'pretrain'")
    parser.add_argument("--model-name", help="Model name written into records")
    return parser


def _probe_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("probe")
    group.add_argument("--epochs", type=int, default=128)
    group.add_argument("--probe-lr", type=float, default=1e-3)
    group.add_argument("--probe-batch-size", type=int, default=32)
    group.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    group.add_argument("--l2", type=float, default=0.0)
    group.add_argument("--min-test", type=int, default=10)
    group.add_argument("--max-train", type=int, default=32)
    group.add_argument(
        "--min-total", type=int, default=DEFAULT_MIN_TOTAL, help="Amalgamation threshold; 0 disables"
    )
    return parser


def _fewshot_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS), help="Shots per class, e.g. 4,8,16,32")
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _pretrain_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("pretraining")
    group.add_argument("--mixture", type=Path, help="Mixture config JSON")
    group.add_argument("--steps", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--arch", default="t1")
    group.add_argument("--lr", type=float, default=1e-3)
    group.add_argument("--sample-rate", type=int, default=32_000)
    group.add_argument("--window-s", type=float, default=5.0)
    group.add_argument("--frontend-preset", choices=sorted(FRONTEND_PRESETS), default="default")
    group.add_argument("--log-every", type=int, default=200)
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    manifest = _manifest_parser()
    backend = _backend_parser()
    probe = _probe_parser()
    fewshot = _fewshot_parser()
    pretrain = _pretrain_parser()

    parser = argparse.ArgumentParser(prog="pamprobe", description="Passive acoustic monitoring probe harness")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("manifest", parents=[common, manifest], help="Validate or convert a manifest")
    sub.add_argument("action", choices=("validate", "convert"))
    sub.add_argument("--to", help="Conversion target (.csv or .json)")

    sub = commands.add_parser("synth-corpus", parents=[common], help="Write a synthetic corpus and manifest")
    sub.add_argument("--corpus", choices=list(corpus_names()), default="tones")
    sub.add_argument("--clips-per-class", type=int, default=42)

    sub = commands.add_parser("embed", parents=[common, manifest, backend], help="Fill an embedding cache")
    sub.add_argument("--datasets", type=_str_list)
    sub.add_argument("--import-csv", type=Path, help="Import clip_id,v0..v{d-1} rows instead of embedding")

    sub = commands.add_parser("probe", parents=[common, manifest, backend, probe], help="Train and evaluate one split")
    sub.add_argument("--dataset")
    sub.add_argument("--k", type=int, default=32)

    sub = commands.add_parser("fewshot", parents=[common, manifest, backend, probe, fewshot], help="Few-shot protocol")
    sub.add_argument("--datasets", type=_str_list)

    sub = commands.add_parser(
        "dreg", parents=[common, manifest, probe, fewshot, pretrain], help="Leave-one-dataset-out rotation"
    )
    sub.add_argument("--holdouts", type=_str_list)
    sub.add_argument("--datasets", type=_str_list, help=argparse.SUPPRESS)

    sub = commands.add_parser("pretrain", parents=[common, manifest, pretrain], help="Pretrain the toy embedder")
    sub.add_argument("--datasets", type=_str_list, help="Single-source datasets when no --mixture is given")

    sub = commands.add_parser("sweep", parents=[common, manifest, probe, fewshot, pretrain], help="Staged sweep")
    sub.add_argument("--preset", choices=SWEEP_PRESETS, default="reefset")
    sub.add_argument("--validation", type=_str_list)
    sub.add_argument("--reef", type=_str_list)
    sub.add_argument("--bird", type=_str_list)
    sub.add_argument("--freesound", type=_str_list)

    sub = commands.add_parser("bench", parents=[common, backend], help="Inference speed grid")
    sub.add_argument("--duration", type=float, default=3600.0, help="Seconds of synthetic audio")
    sub.add_argument("--rate", type=int, default=32_000)
    sub.add_argument("--batch-grid", type=_int_list, default=list(DEFAULT_BATCH_GRID))
    sub.add_argument("--worker-grid", type=_int_list, default=list(DEFAULT_WORKER_GRID))

    sub = commands.add_parser("report", parents=[common], help="Aggregate record files")
    sub.add_argument("inputs", nargs="+", type=Path)
    sub.add_argument("--reference", help="Published model to compute error reductions against")
    sub.add_argument("--reference-auc", type=float, help="Override the published reference AUC")
    sub.add_argument("--format", choices=("csv", "json"), help="Also write the merged records")

    sub = commands.add_parser("replay", help="Re-run a command from its run_config.json")
    sub.add_argument("run_config", type=Path)
    sub.add_argument("--out", type=Path, help="Write outputs here instead of the recorded directory")
    sub.add_argument("-v", "--verbose", action="count", default=0)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 for --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    configure_logging(args.verbose)
    handler = cmd_replay if args.command == "replay" else COMMANDS[args.command]
    try:
        return handler(args)
    except PamProbeError as exc:
        print(json.dumps(exc.to_payload(), sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        error = FileIoError(str(exc), path=getattr(exc, "filename", None))
        print(json.dumps(error.to_payload(), sort_keys=True), file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
