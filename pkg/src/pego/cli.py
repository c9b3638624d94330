"""Command-line front end.

Subcommands tie generation, training, evaluation, the leave-one-domain-out
harness, the ablation grid, the group-size sweep, gradient auditing, and
the weight/feature diagnostics into reproducible runs. Every run writes a
manifest recording the effective config, its hash, the seeds, and the
artifact paths; re-running a manifest's config reproduces the summary CSV
byte for byte in single-job mode.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O or format
error, 4 degenerate input. ``PEGO_THREADS`` caps the numeric thread pools
when set before startup.

Heavy imports happen inside the command handlers so that the thread cap
can be applied before numpy loads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4

DEFAULT_ALPHA = 1e-3
DEFAULT_RANK = 4
FULL_RUN_ITERS = 5000
GRADCHECK_THRESHOLDS = {0.0: 1e-6, 1e-3: 1e-5}


def entry() -> None:
    threads = os.environ.get("PEGO_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    sys.exit(main(sys.argv[1:]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pego", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-domain dataset file")
    p.add_argument("--config", help="JSON with dataset spec fields (domains, classes, per_class, image_size)")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    def train_like(name, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--config", help="JSON mirroring the training config fields")
        q.add_argument("--dataset", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--seed", type=int)
        q.add_argument("--alpha", type=float)
        q.add_argument("--rank", type=int)
        q.add_argument("--group-n", type=int, dest="group_n")
        q.add_argument("--lr", type=float)
        q.add_argument("--iters", type=int)
        q.add_argument("--full-iters", action="store_true", help=f"run the full {FULL_RUN_ITERS} iterations")
        q.add_argument("--jobs", type=int, default=1)
        return q

    p = train_like("train", "train on every domain of a dataset, write checkpoints and metrics")
    p.add_argument("--base", help="checkpoint to use as the frozen base (default: built-in pretrained stand-in)")
    p.set_defaults(func=cmd_train)

    p = train_like("lodo", "leave-one-domain-out evaluation across seeds")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    p.set_defaults(func=cmd_lodo)

    p = train_like("ablate", "on/off grid over the two penalties plus a single-module reference")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = train_like("sweep", "select the group size by training-domain validation accuracy")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--values", default="2,4,6", help="candidate group sizes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on one domain of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--domain", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="audit analytic gradients against central differences")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="weight principal-component and feature-projection reports")
    p.add_argument("--ckpt", required=True, help="checkpoint with adapters, or the post-merge of a pair")
    p.add_argument("--pre", help="pre-merge or base checkpoint when --ckpt has no adapters")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", default="last.wv", help="BLOCK.PROJ, e.g. 0.wq or last.wv")
    p.add_argument("--top-k", type=int, default=10, dest="top_k")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    from .errors import (
        CheckpointError,
        ConfigError,
        DegenerateInputError,
        InconclusiveCheckError,
        InputError,
        NumericError,
        ShapeError,
        SplitError,
    )

    try:
        return args.func(args)
    except (ConfigError, SplitError, InputError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DegenerateInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NumericError, InconclusiveCheckError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


def _read_json(path) -> dict:
    from .errors import ConfigError

    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _ensure_outdir(raw) -> Path:
    from .errors import ConfigError

    path = Path(raw)
    if path.is_dir():
        return path
    if not path.parent.is_dir():
        raise ConfigError(f"output directory {path} cannot be created: {path.parent} does not exist")
    path.mkdir()
    return path


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _write_manifest(out_dir: Path, command: str, argv_like: dict, config: dict, seeds, artifacts, t0: float) -> Path:
    manifest = {
        "command": command,
        "options": argv_like,
        "config": config,
        "config_hash": _config_hash(config),
        "seeds": list(seeds),
        "artifacts": [str(a) for a in artifacts],
        "wall_clock_seconds": time.monotonic() - t0,
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _options_dict(args) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_train_config(args, dataset):
    from .errors import ConfigError
    from .trainer import TrainConfig, canonical_vit_config
    from .vit import VitConfig

    if args.config:
        cfg = TrainConfig.from_dict(_read_json(args.config))
    else:
        image_size = next(iter(dataset.images.values())).shape[1]
        vit_cfg = canonical_vit_config(num_classes=dataset.num_classes)
        if image_size != vit_cfg.image_size:
            vit_cfg = VitConfig(
                image_size=image_size,
                patch_size=vit_cfg.patch_size,
                embed_dim=vit_cfg.embed_dim,
                num_blocks=vit_cfg.num_blocks,
                num_heads=vit_cfg.num_heads,
                mlp_ratio=vit_cfg.mlp_ratio,
                num_classes=dataset.num_classes,
            )
        cfg = TrainConfig(batch_per_domain=8, vit=vit_cfg)
    overrides = {}
    for name in ("seed", "alpha", "rank", "group_n", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "full_iters", False):
        if getattr(args, "iters", None) is not None:
            raise ConfigError("--iters and --full-iters are mutually exclusive")
        overrides["iterations"] = FULL_RUN_ITERS
    elif getattr(args, "iters", None) is not None:
        overrides["iterations"] = args.iters
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    cfg.validate()
    image_size = next(iter(dataset.images.values())).shape[1]
    if cfg.vit.image_size != image_size:
        raise ConfigError(f"model expects {cfg.vit.image_size}px images but the dataset has {image_size}px")
    if cfg.vit.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {cfg.vit.num_classes} classes but the dataset has {dataset.num_classes}")
    if cfg.alpha != DEFAULT_ALPHA:
        print(f"warning: alpha={cfg.alpha!r} differs from the recommended default {DEFAULT_ALPHA!r}", file=sys.stderr)
    if cfg.rank != DEFAULT_RANK:
        print(f"warning: rank={cfg.rank} differs from the recommended default {DEFAULT_RANK}", file=sys.stderr)
    return cfg


def _parse_seeds(raw: str) -> list[int]:
    from .errors import ConfigError

    try:
        seeds = [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {raw!r}: {exc}") from exc
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _history_csv(path, history) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss_cls", "loss_preserve", "loss_diversify", "loss_or", "val_acc"])
        for row in history:
            writer.writerow(
                [
                    row.iteration,
                    repr(row.loss_cls),
                    repr(row.loss_preserve),
                    repr(row.loss_diversify),
                    repr(row.loss_or),
                    "" if row.val_acc is None else repr(row.val_acc),
                ]
            )


def cmd_gen(args) -> int:
    from .checkpoint import save_dataset
    from .data import DatasetSpec, generate_dataset
    from .errors import ConfigError

    t0 = time.monotonic()
    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - set(DatasetSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
    spec = DatasetSpec(**raw)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise ConfigError(f"output directory {out.parent} does not exist")
    dataset = generate_dataset(spec, args.seed)
    save_dataset(out, dataset)
    for dom in dataset.domains:
        labels = dataset.labels[dom]
        counts = ", ".join(f"class {c}: {int((labels == c).sum())}" for c in range(dataset.num_classes))
        print(f"{dom}: {counts}")
    print(f"wrote {dataset.total_samples()} samples to {out}")
    manifest_dir = out.parent
    _write_manifest(
        manifest_dir, "gen", _options_dict(args), {"dataset": spec.__dict__, "seed": args.seed}, [args.seed], [out], t0
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_dataset, load_model, save_model
    from .trainer import pretrain_base, train

    t0 = time.monotonic()
    dataset = load_dataset(args.dataset)
    cfg = _load_train_config(args, dataset)
    out = _ensure_outdir(args.out)
    base = load_model(args.base) if args.base else pretrain_base(cfg.vit, cfg.seed)
    result = train(base, dataset, cfg)
    adapted_path = out / "adapted.ckpt"
    merged_path = out / "merged.ckpt"
    run_path = out / "run.csv"
    save_model(adapted_path, result.adapted)
    save_model(merged_path, result.model)
    _history_csv(run_path, result.history)
    print(f"selected iteration {result.selected_iter} with validation accuracy {result.best_val_acc!r}")
    artifacts = [adapted_path, merged_path, run_path]
    _write_manifest(out, "train", _options_dict(args), cfg.to_dict(), [cfg.seed], artifacts, t0)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_dataset, load_model
    from .errors import ConfigError
    from .trainer import evaluate

    model = load_model(args.ckpt)
    dataset = load_dataset(args.dataset)
    if args.domain not in dataset.domains:
        raise ConfigError(f"domain {args.domain!r} not in dataset (has {dataset.domains})")
    acc = evaluate(model, dataset, domains=[args.domain])
    print(f"domain={args.domain} samples={len(dataset.labels[args.domain])} accuracy={acc!r}")
    return EXIT_OK


def cmd_lodo(args) -> int:
    from .checkpoint import load_dataset
    from .trainer import leave_one_domain_out

    t0 = time.monotonic()
    dataset = load_dataset(args.dataset)
    cfg = _load_train_config(args, dataset)
    seeds = _parse_seeds(args.seeds)
    out = _ensure_outdir(args.out)
    result = leave_one_domain_out(dataset, cfg, seeds, jobs=args.jobs)
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["test_domain", "seed", "accuracy", "selected_iter"])
        for rec in result.records:
            writer.writerow([rec.test_domain, rec.seed, repr(rec.accuracy), rec.selected_iter])
    artifacts = [summary_path]
    for rec in result.records:
        run_path = out / f"run_{rec.test_domain}_{rec.seed}.csv"
        _history_csv(run_path, rec.history)
        artifacts.append(run_path)
    means = result.per_domain_mean()
    errs = result.per_domain_stderr()
    for dom in dataset.domains:
        print(f"{dom}: {means[dom]:.4f} +/- {errs[dom]:.4f}")
    print(f"average: {result.average:.4f}")
    _write_manifest(out, "lodo", _options_dict(args), cfg.to_dict(), seeds, artifacts, t0)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .checkpoint import load_dataset
    from .trainer import ablate

    t0 = time.monotonic()
    dataset = load_dataset(args.dataset)
    cfg = _load_train_config(args, dataset)
    seeds = _parse_seeds(args.seeds)
    out = _ensure_outdir(args.out)
    rows = ablate(dataset, cfg, seeds, jobs=args.jobs)
    table_path = out / "ablate.csv"
    with open(table_path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "preserve", "diversify", "group_n", "mean_acc", "stderr"])
        for row in rows:
            writer.writerow(
                [row.label, int(row.preserve_on), int(row.diversify_on), row.group_n, repr(row.mean_acc), repr(row.stderr)]
            )
    for row in rows:
        print(f"{row.label}: {row.mean_acc:.4f} +/- {row.stderr:.4f}")
    _write_manifest(out, "ablate", _options_dict(args), cfg.to_dict(), seeds, [table_path], t0)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .checkpoint import load_dataset
    from .errors import ConfigError
    from .trainer import sweep_n

    t0 = time.monotonic()
    dataset = load_dataset(args.dataset)
    cfg = _load_train_config(args, dataset)
    seeds = _parse_seeds(args.seeds)
    try:
        values = tuple(int(v) for v in args.values.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad group size list {args.values!r}: {exc}") from exc
    out = _ensure_outdir(args.out)
    result = sweep_n(dataset, cfg, values, seeds, jobs=args.jobs)
    table_path = out / "sweep.csv"
    with open(table_path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "mean_val_acc", "stderr", "selected"])
        for row in result.rows:
            writer.writerow([row.n, repr(row.mean_val_acc), repr(row.stderr), int(row.n == result.best_n)])
    print(f"selected group size {result.best_n}")
    _write_manifest(out, "sweep", _options_dict(args), cfg.to_dict(), seeds, [table_path], t0)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check, make_probe_model
    from .numerics import make_rng

    model, batch = make_probe_model(args.seed)
    ok = True
    for alpha, threshold in GRADCHECK_THRESHOLDS.items():
        err = grad_check(model, batch, alpha, args.samples, make_rng(args.seed, 5))
        passed = err < threshold
        ok = ok and passed
        print(
            f"alpha={alpha!r} samples={args.samples} max_rel_error={err!r} "
            f"threshold={threshold!r} {'ok' if passed else 'FAIL'}"
        )
    return EXIT_OK if ok else EXIT_CHECK


def _resolve_layer(model, spec: str):
    from .errors import ConfigError

    parts = spec.split(".")
    if len(parts) != 2 or parts[1] not in ("wq", "wv"):
        raise ConfigError(f"bad layer spec {spec!r}; expected BLOCK.PROJ with PROJ in (wq, wv)")
    block_raw, proj = parts
    if block_raw == "last":
        index = len(model.blocks) - 1
    else:
        try:
            index = int(block_raw)
        except ValueError as exc:
            raise ConfigError(f"bad block index {block_raw!r}") from exc
        if not 0 <= index < len(model.blocks):
            raise ConfigError(f"block index {index} outside [0, {len(model.blocks) - 1}]")
    return index, proj


def cmd_analyze(args) -> int:
    import numpy as np

    from .adapters import group_delta
    from .checkpoint import load_dataset, load_model
    from .diagnostics import (
        SIGNIFICANT_PC_REL_TOL,
        feature_projection,
        weight_pc_report,
        write_feature_projection_csv,
        write_pc_report_csvs,
    )
    from .errors import ConfigError, DegenerateInputError

    t0 = time.monotonic()
    out = _ensure_outdir(args.out)
    model = load_model(args.ckpt)
    index, proj = _resolve_layer(model, args.layer)
    layer = getattr(model.blocks[index].attn, proj)
    models = [(Path(args.ckpt).stem, model)]
    if args.pre:
        pre_model = load_model(args.pre)
        models.insert(0, (Path(args.pre).stem, pre_model))
        pre_layer = getattr(pre_model.blocks[index].attn, proj)
        w_pre = pre_layer.base.data
        delta = layer.base.data - pre_layer.base.data
        if layer.group is not None:
            delta = delta + group_delta(layer.group)
    elif layer.group is not None:
        w_pre = layer.base.data
        delta = group_delta(layer.group)
    else:
        raise ConfigError("checkpoint has no adapters at the requested layer; provide --pre for a merged pair")
    if not np.any(delta):
        raise DegenerateInputError("the adapter update at the requested layer is identically zero")
    k = min(args.top_k, min(w_pre.shape))
    report = weight_pc_report(w_pre, delta, k)
    dataset = load_dataset(args.dataset)
    images = np.concatenate([dataset.images[d] for d in dataset.domains])
    labels = np.concatenate([dataset.labels[d] for d in dataset.domains])
    projection = feature_projection(models, images, labels)
    artifacts = write_pc_report_csvs(report, out)
    artifacts.append(write_feature_projection_csv(projection, out))
    meta_path = out / "analyze_meta.json"
    with open(meta_path, "w") as fh:
        json.dump(
            {
                "layer": f"{index}.{proj}",
                "top_k": k,
                "numerical_rank": report.numerical_rank,
                "significance_rel_tol": SIGNIFICANT_PC_REL_TOL,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    artifacts.append(meta_path)
    print(f"layer {index}.{proj}: numerical rank {report.numerical_rank} at rel tol {SIGNIFICANT_PC_REL_TOL!r}")
    _write_manifest(out, "analyze", _options_dict(args), {"layer": args.layer, "top_k": k}, [], artifacts, t0)
    return EXIT_OK
