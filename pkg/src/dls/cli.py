"""``dls`` command-line entry point.

Commands: ``toy-generate``, ``pretrain``, ``finetune``, ``eval-knn``, ``report``.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config, set_dotted
from .datasets import ManifestError, build_pretrain_pool, generate_toy_dataset, load_manifest
from .encoder import EncoderSpec
from .finetune import FeatureSource, FinetuneConfig, cross_validate, knn_on_features, pretrain
from .metrics import MetricRow, read_aggregate, write_aggregate, write_metrics, write_report
from .npid import NpidConfig


class UsageError(Exception):
    """Bad flags, invalid config or unusable inputs (exit code 2)."""


# -- configuration ------------------------------------------------------------------------------

_SEED_KEY = {"pretrain": "pretrain.seed", "finetune": "finetune.seed", "toy-generate": "datasets.toy.seed"}
_EPOCHS_KEY = {"pretrain": "pretrain.epochs", "finetune": "finetune.epochs"}
_CHECKPOINT_KEY = {"finetune": "finetune.checkpoint", "eval-knn": "eval.checkpoint"}


def _validation_message(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<config>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def resolve_config(args) -> RunConfig:
    try:
        data = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    except (yaml.YAMLError, ValueError) as exc:
        raise UsageError(f"cannot parse config: {exc}")
    cmd = args.command
    overrides = {
        "output_dir": args.output_dir,
        "run_id": args.run_id,
        _SEED_KEY.get(cmd): args.seed,
        _EPOCHS_KEY.get(cmd): getattr(args, "epochs", None),
        _CHECKPOINT_KEY.get(cmd): getattr(args, "checkpoint", None),
        "datasets.manifests": getattr(args, "manifest", None),
        "finetune.init_mode": getattr(args, "init_mode", None),
        "eval.k": getattr(args, "k", None),
    }
    if getattr(args, "exclude_eval_folds", False):
        overrides["datasets.exclude_eval_folds"] = True
    for key, value in overrides.items():
        if key is not None and value is not None:
            set_dotted(data, key, value)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            set_dotted(data, key, yaml.safe_load(raw))
        except ValueError as exc:
            raise UsageError(str(exc))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise UsageError(_validation_message(err))


def _manifests(cfg: RunConfig, exactly_one: bool = False):
    paths = cfg.datasets.manifests
    if not paths:
        raise UsageError("datasets.manifests is empty (pass --manifest or set it in the config)")
    if exactly_one and len(paths) != 1:
        raise UsageError(f"this command takes exactly one manifest, got {len(paths)}")
    out = []
    for p in paths:
        try:
            out.append(load_manifest(p))
        except FileNotFoundError as exc:
            raise UsageError(f"manifest not found: {exc.filename or p}")
        except ManifestError as exc:
            raise UsageError(str(exc))
    return out


def _folds(requested, manifest) -> list[int]:
    folds = list(requested) if requested else list(range(1, manifest.fold_scheme + 1))
    bad = [f for f in folds if f > manifest.fold_scheme]
    if bad:
        raise UsageError(f"folds {bad} exceed fold_scheme {manifest.fold_scheme} of {manifest.name}")
    return folds


def _encoder_spec(cfg: RunConfig) -> EncoderSpec:
    e = cfg.encoder
    return EncoderSpec(e.architecture, e.embedding_dim, cfg.input_channels, e.width)


def _npid(cfg: RunConfig) -> NpidConfig:
    n = cfg.npid
    return NpidConfig(cfg.encoder.embedding_dim, n.temperature, n.nce_k, n.bank_momentum, n.noise_renormalization_z)


def _load_checkpoint_arg(path, cfg: RunConfig):
    if path is None:
        raise UsageError("a checkpoint is required (pass --checkpoint)")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if ckpt.spec.input_channels != cfg.input_channels:
        raise UsageError(
            f"checkpoint expects {ckpt.spec.input_channels} input channels, "
            f"config gives {cfg.input_channels} (spectro.stereo)"
        )
    return ckpt


def _prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


# -- commands -------------------------------------------------------------------------------------

def cmd_toy_generate(cfg: RunConfig) -> int:
    t = cfg.datasets.toy
    m = generate_toy_dataset(cfg.output_dir, t.num_classes, t.clips_per_class, t.seed)
    print(f"wrote {len(m)} clips and {Path(cfg.output_dir) / 'toy.csv'}")
    return 0


def _run_pretrain(cfg, pool, clip_length_s, out: Path, knn=None):
    p = cfg.pretrain
    if p.objective == "nce" and cfg.npid.nce_k >= len(pool):
        raise UsageError(f"npid.nce_k ({cfg.npid.nce_k}) must be smaller than the pool size ({len(pool)})")
    stft = cfg.spectro.stft_kwargs()
    features = FeatureSource(pool, clip_length_s, p.seed, **stft)
    rows, timing = [], []
    t0 = time.perf_counter()

    def on_epoch(epoch, est):
        timing.append((epoch, time.perf_counter() - t0))
        if knn is not None and (epoch % p.knn_every == 0 or epoch == p.epochs):
            manifest, X = knn
            for fold in cfg.datasets.eval_folds:
                rep = knn_on_features(
                    est.encoder_, X, manifest.labels, manifest.folds, fold, cfg.eval.k, cfg.eval.temperature,
                    manifest.num_classes,
                )
                rows.append(MetricRow(cfg.run_id, "pretrain", fold, epoch, "knn_accuracy", rep.accuracy))

    est = pretrain(
        pool, _encoder_spec(cfg), _npid(cfg), epochs=p.epochs, batch_size=p.batch_size, seed=p.seed,
        clip_length_s=clip_length_s, objective=p.objective, learning_rate=p.learning_rate, features=features,
        epoch_callback=on_epoch, lr_schedule=p.lr_schedule, momentum=p.momentum, weight_decay=p.weight_decay,
    )
    loss_rows = [MetricRow(cfg.run_id, "pretrain", 0, e + 1, "loss", float(v)) for e, v in enumerate(est.loss_curve_)]
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", sorted(loss_rows + rows, key=lambda r: (r.epoch, r.fold, r.metric)))
    _write_timing(out / "timing.csv", ("epoch", "wall_clock_s"), timing)
    est.save(out / "checkpoint.dlsc", {"run_id": cfg.run_id, "pool_size": len(pool)})
    return est


def _write_timing(path, header, rows):
    # wall-clock numbers live apart from the metrics so reruns keep metrics byte-identical
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")


def cmd_pretrain(cfg: RunConfig) -> int:
    manifests = _manifests(cfg)
    for m in manifests:
        _folds(cfg.datasets.eval_folds, m)
    exclude = {m.name: cfg.datasets.eval_folds for m in manifests} if cfg.datasets.exclude_eval_folds else None
    out = _prepare_output(cfg)
    if cfg.pretrain.phase == "combined":
        pool = build_pretrain_pool(manifests, exclude)
        _run_pretrain(cfg, pool, cfg.pretrain.clip_length_s, out)
        print(f"pre-trained on {len(pool)} clips; checkpoint {out / 'checkpoint.dlsc'}")
        return 0
    for m in manifests:
        pool = build_pretrain_pool([m], exclude)
        X = FeatureSource(m.entries, m.clip_length_s, cfg.pretrain.seed, **cfg.spectro.stft_kwargs()).static()
        _run_pretrain(cfg, pool, m.clip_length_s, out / m.name, knn=(m, X))
        print(f"pre-trained on {m.name} ({len(pool)} clips); checkpoint {out / m.name / 'checkpoint.dlsc'}")
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    (manifest,) = _manifests(cfg, exactly_one=True)
    f = cfg.finetune
    folds = _folds(f.folds, manifest)
    ckpt = None
    if f.init_mode != "from-scratch":
        ckpt = _load_checkpoint_arg(f.checkpoint, cfg)
    ft = FinetuneConfig(
        f.epochs, f.batch_size, f.learning_rate, f.lr_schedule, f.seed, f.init_mode, f.momentum, f.weight_decay
    )
    out = _prepare_output(cfg)
    features = FeatureSource(manifest.entries, manifest.clip_length_s, f.seed, **cfg.spectro.stft_kwargs())
    result = cross_validate(manifest, ft, ckpt, _encoder_spec(cfg), folds, features)
    timing = []
    for fold, curve in result.curves.items():
        rows = []
        for r in curve.records:
            rows.append(MetricRow(cfg.run_id, "finetune", fold, r.epoch, "train_loss", float(r.train_loss)))
            rows.append(MetricRow(cfg.run_id, "finetune", fold, r.epoch, "eval_accuracy", float(r.eval_accuracy)))
            timing.append((fold, r.epoch, float(r.wall_clock_s)))
        write_metrics(out / f"fold_{fold}.csv", rows)
    write_aggregate(out / "aggregate.csv", result.epochs, result.mean_accuracy, result.std_accuracy)
    _write_timing(out / "timing.csv", ("fold", "epoch", "wall_clock_s"), timing)
    print(f"{f.init_mode}: final mean accuracy {result.mean_accuracy[-1]:.4f} over {len(folds)} folds")
    return 0


def cmd_eval_knn(cfg: RunConfig) -> int:
    (manifest,) = _manifests(cfg, exactly_one=True)
    folds = _folds(cfg.eval.folds, manifest)
    for fold in folds:
        n_train = int(np.sum(manifest.folds != fold))
        if cfg.eval.k > n_train:
            raise UsageError(f"eval.k ({cfg.eval.k}) exceeds the training-set size ({n_train}) for fold {fold}")
    ckpt = _load_checkpoint_arg(cfg.eval.checkpoint, cfg)
    out = _prepare_output(cfg)
    encoder = ckpt.encoder()
    X = FeatureSource(manifest.entries, manifest.clip_length_s, 0, **cfg.spectro.stft_kwargs()).static()
    epoch = int(ckpt.metadata.get("epochs_completed", 0))
    rows = []
    for fold in folds:
        rep = knn_on_features(
            encoder, X, manifest.labels, manifest.folds, fold, cfg.eval.k, cfg.eval.temperature, manifest.num_classes
        )
        rows += [MetricRow(cfg.run_id, "eval-knn", fold, epoch, m, float(v)) for m, v in rep.metric_rows()]
        print(f"fold {fold}: knn accuracy {rep.accuracy:.4f} (n={rep.n_eval})")
    write_metrics(out / "knn_report.csv", rows)
    return 0


def _condition_name(run_dir: Path) -> str:
    cfg_path = run_dir / "config.yaml"
    if cfg_path.is_file():
        data = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}
        if isinstance(data, dict) and data.get("run_id"):
            return str(data["run_id"])
    return run_dir.name


def cmd_report(cfg: RunConfig, run_dirs, labels) -> int:
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    if labels is not None and len(labels) != len(run_dirs):
        raise UsageError(f"--labels has {len(labels)} names for {len(run_dirs)} run directories")
    conditions = []
    for i, d in enumerate(map(Path, run_dirs)):
        agg = d / "aggregate.csv"
        if not agg.is_file():
            raise UsageError(f"{d}: no aggregate.csv (is this a finetune output directory?)")
        rows = read_aggregate(agg)
        if not rows:
            raise UsageError(f"{agg}: no rows")
        conditions.append((labels[i] if labels else _condition_name(d), rows))
    names = [c for c, _ in conditions]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate condition names {names}; pass --labels")
    grid = [e for e, _, _ in conditions[0][1]]
    for name, rows in conditions[1:]:
        other = [e for e, _, _ in rows]
        if other != grid:
            missing = sorted(set(grid) - set(other))
            extra = sorted(set(other) - set(grid))
            raise UsageError(
                f"epoch grid of {name!r} differs from {conditions[0][0]!r}: missing {missing}, extra {extra}"
            )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.csv", [(name, e, m, s) for name, rows in conditions for e, m, s in rows])
    _plot(conditions, out / "report.png")
    print(f"wrote {out / 'report.csv'} and {out / 'report.png'}")
    return 0


def _plot(conditions, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in conditions:
        e, m, s = (np.array(c) for c in zip(*rows))
        ax.plot(e, m, label=name)
        ax.fill_between(e, m - s, m + s, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("evaluation accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


# -- argument parsing -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dls", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run config (all keys optional)")
        p.add_argument("--output-dir", help="overrides output_dir")
        p.add_argument("--run-id", help="overrides run_id")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the command's seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. finetune.epochs=5")

    p = sub.add_parser("toy-generate", help="write the synthetic toy dataset and its manifest")
    common(p)

    p = sub.add_parser("pretrain", help="instance-discrimination pre-training")
    common(p)
    p.add_argument("--manifest", action="append", help="manifest CSV (repeatable; replaces datasets.manifests)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--exclude-eval-folds", action="store_true", help="drop datasets.eval_folds from the pool")

    p = sub.add_parser("finetune", help="cross-validated fine-tuning")
    common(p)
    p.add_argument("--manifest", action="append")
    p.add_argument("--epochs", type=int)
    p.add_argument("--init-mode", choices=["pretrained-dls", "from-scratch", "external-checkpoint"])
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval-knn", help="weighted k-NN evaluation of a checkpoint")
    common(p, seed=False)
    p.add_argument("--manifest", action="append")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int)

    p = sub.add_parser("report", help="merge aggregate CSVs and plot accuracy over epochs")
    common(p, seed=False)
    p.add_argument("run_dirs", nargs="*", help="finetune output directories")
    p.add_argument("--labels", help="comma-separated condition names, one per run dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        cfg = resolve_config(args)
        if args.command == "toy-generate":
            return cmd_toy_generate(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg)
        if args.command == "eval-knn":
            return cmd_eval_knn(cfg)
        labels = args.labels.split(",") if args.labels else None
        return cmd_report(cfg, args.run_dirs, labels)
    except UsageError as exc:
        print(f"dls {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"dls {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
