"""Command-line interface.

Commands: ``synth``, ``train``, ``eval``, ``interpret``, ``ablate``,
``gradcheck``. All stdout reporting is line-delimited JSON. Settings
resolve as built-in defaults, overridden by a ``--config`` JSON file,
overridden by explicit flags; unknown config keys are rejected. Exit codes:
0 success, 1 computation failure, 2 usage or I/O error.

Runs with identical flags and seeds write byte-identical data artifacts.
Commands that produce files also render matplotlib figures next to them
(``--no-figures`` turns that off); every plotted value is read back from
the CSV/JSON artifacts, never computed separately.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from . import gradcheck as gc
from . import interpret as it
from . import model as md
from . import numerics as nm
from . import plots
from . import training as tr

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
ABLATION_DESIGNS = ("cls", "pool", "moe")
_CORRUPT_ENV = "FCMOE_CORRUPT_BACKWARD"

_MODEL_KEYS = {f.name for f in dataclasses.fields(md.ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(tr.TrainConfig)}


class UsageError(Exception):
    """Bad flags, unreadable inputs, or incompatible artifacts (exit 2)."""


def _emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def _fail(message: str) -> None:
    print(json.dumps({"event": "error", "message": message}), file=sys.stderr, flush=True)


def _metrics_dict(metrics: tr.Metrics) -> dict:
    return {
        "auroc": metrics.auroc,
        "accuracy": metrics.accuracy,
        "sensitivity": metrics.sensitivity,
        "specificity": metrics.specificity,
        "confusion": {"tp": metrics.tp, "fp": metrics.fp, "tn": metrics.tn, "fn": metrics.fn},
    }


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = set(payload) - (_MODEL_KEYS | _TRAIN_KEYS)
    if unknown:
        raise UsageError(f"config file {path} has unknown keys: {sorted(unknown)}")
    return payload


def _resolve_configs(args, dataset: dt.ConnectomeDataset | None = None):
    """Defaults < config file < flags; returns (ModelConfig, TrainConfig)."""
    file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    model_kwargs = {k: v for k, v in file_cfg.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    if "topk" in model_kwargs and isinstance(model_kwargs["topk"], list):
        model_kwargs["topk"] = tuple(model_kwargs["topk"])

    for key in ("lr", "weight_decay", "batch_size", "max_epochs", "patience"):
        value = getattr(args, key, None)
        if value is not None:
            train_kwargs[key] = value
    seed = getattr(args, "seed", None)
    if seed is not None:
        model_kwargs["seed"] = seed
        train_kwargs["seed"] = seed

    if dataset is not None:
        if "n_rois" not in model_kwargs:
            model_kwargs["n_rois"] = dataset.n_rois
        elif model_kwargs["n_rois"] != dataset.n_rois:
            raise UsageError(
                f"config says n_rois={model_kwargs['n_rois']}, dataset has {dataset.n_rois}"
            )
    try:
        model_config = md.ModelConfig(**model_kwargs)
        train_config = tr.TrainConfig(**train_kwargs)
    except md.ConfigError as exc:
        raise UsageError(str(exc)) from None
    return model_config, train_config


def _load_dataset(path: str) -> dt.ConnectomeDataset:
    if not Path(path).exists():
        raise UsageError(f"dataset manifest {path} does not exist")
    return dt.load_dataset(path)


def _load_checkpoint(path: str):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return md.load_checkpoint(path)
    except (md.ConfigError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _check_rois(config: md.ModelConfig, dataset: dt.ConnectomeDataset) -> None:
    if config.n_rois != dataset.n_rois:
        raise UsageError(
            f"checkpoint expects {config.n_rois} ROIs, dataset has {dataset.n_rois}"
        )


def _resolved_config_payload(model_config, train_config, split_seed) -> dict:
    return {
        "model": model_config.to_dict(),
        "train": dataclasses.asdict(train_config),
        "split": {"fractions": list(SPLIT_FRACTIONS), "seed": split_seed},
    }


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    dataset = dt.synth_generate(
        n_subjects=args.subjects,
        n_rois=args.rois,
        n_communities=args.communities,
        effect=args.delta,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = dt.save_dataset(dataset, out_dir)
    _emit(
        {
            "event": "dataset",
            "manifest": str(manifest),
            "subjects": len(dataset),
            "rois": dataset.n_rois,
            "positives": int(dataset.labels().sum()),
        }
    )
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args.dataset)
    model_config, train_config = _resolve_configs(args, dataset)
    split_seed = train_config.seed
    train_set, val_set, test_set = dt.stratified_split(
        dataset, fractions=SPLIT_FRACTIONS, seed=split_seed
    )

    params = md.init_params(model_config)
    result = tr.train(params, model_config, train_set, val_set, train_config)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.json"
    history_path = out_dir / "history.csv"
    md.save_checkpoint(
        checkpoint_path, model_config, result.params, rng_state={"seed": split_seed}
    )
    tr.save_history(result.history, history_path)
    _write_json(
        out_dir / "config.json",
        _resolved_config_payload(model_config, train_config, split_seed),
    )
    _write_json(
        out_dir / "splits.json",
        {
            "train": [s.id for s in train_set.subjects],
            "val": [s.id for s in val_set.subjects],
            "test": [s.id for s in test_set.subjects],
        },
    )
    artifacts = [checkpoint_path, history_path, out_dir / "config.json", out_dir / "splits.json"]
    if not args.no_figures:
        artifacts.append(plots.save_history_figure(tr.load_history(history_path), out_dir / "history.png"))

    for row in result.history:
        _emit(
            {
                "event": "epoch",
                "epoch": row.epoch,
                "train_loss": row.train_loss,
                "val_auroc": row.val_auroc,
                "cv2": row.cv2,
                "gate_means": list(row.gate_means),
            }
        )
    _emit(
        {
            "event": "best",
            "epoch": result.best_epoch,
            "val_auroc": result.best_val_auroc,
            "stopped_early": result.stopped_early,
        }
    )
    val_metrics = tr.evaluate(result.params, model_config, val_set)
    test_metrics = tr.evaluate(result.params, model_config, test_set)
    _emit({"event": "val_metrics", **_metrics_dict(val_metrics)})
    _emit({"event": "test_metrics", **_metrics_dict(test_metrics)})
    _emit({"event": "artifacts", "files": [str(p) for p in artifacts]})
    return 0


def _split_subset(dataset, which: str, seed: int):
    if which == "all":
        return dataset
    subsets = dict(
        zip(("train", "val", "test"), dt.stratified_split(dataset, SPLIT_FRACTIONS, seed=seed))
    )
    return subsets[which]


def cmd_eval(args) -> int:
    config, params, rng_state = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.dataset)
    _check_rois(config, dataset)
    seed = args.seed if args.seed is not None else int(rng_state.get("seed", 0))
    subset = _split_subset(dataset, args.split, seed)
    try:
        metrics = tr.evaluate(params, config, subset)
    except tr.MetricError as exc:
        raise UsageError(f"cannot evaluate split {args.split!r}: {exc}") from None
    _emit({"event": "metrics", "split": args.split, "subjects": len(subset), **_metrics_dict(metrics)})
    return 0


def cmd_interpret(args) -> int:
    config, params, _ = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.dataset)
    _check_rois(config, dataset)
    if args.subjects:
        wanted = [sid.strip() for sid in args.subjects.split(",") if sid.strip()]
        if not wanted:
            raise UsageError("--subjects lists no ids")
    else:
        wanted = [s.id for s in dataset.subjects]
    subjects = []
    for sid in wanted:
        try:
            subjects.append(dataset.subject_by_id(sid))
        except dt.DataError as exc:
            raise UsageError(str(exc)) from None

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for subject in subjects:
        report = it.build_report(
            subject,
            dataset.communities,
            params,
            config,
            layer=args.layer,
            head_mode=args.head_mode,
        )
        files = it.emit_report(report, out_dir, format=args.format)
        if not args.no_figures:
            files.append(plots.save_report_figure(report, out_dir / f"{subject.id}.png"))
        _emit(
            {
                "event": "report",
                "subject": subject.id,
                "prediction": report.predicted_label,
                "prob_asd": report.prob_asd,
                "gate_probs": list(report.gate_probs),
                "files": [str(p) for p in files],
            }
        )
    return 0


def _design_config(base: md.ModelConfig, design: str) -> md.ModelConfig:
    fields = {**base.to_dict(), "n_layers": 1}
    if design == "cls":
        fields["decoder"] = "cls"
    elif design == "pool":
        fields.update(decoder="pool", n_experts=1, topk=(base.topk[0],))
    else:
        fields["decoder"] = "moe"
    return md.ModelConfig(**fields)


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args.dataset)
    base_config, train_config = _resolve_configs(args, dataset)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds lists no seeds")
    configs = {design: _design_config(base_config, design) for design in ABLATION_DESIGNS}

    rows = []
    for design in ABLATION_DESIGNS:
        for seed in seeds:
            config = md.ModelConfig(**{**configs[design].to_dict(), "seed": seed})
            run_cfg = dataclasses.replace(train_config, seed=seed)
            train_set, val_set, test_set = dt.stratified_split(dataset, SPLIT_FRACTIONS, seed=seed)
            params = md.init_params(config)
            result = tr.train(params, config, train_set, val_set, run_cfg)
            metrics = tr.evaluate(result.params, config, test_set)
            rows.append((design, seed, metrics))
            _emit({"event": "run", "design": design, "seed": seed, **_metrics_dict(metrics)})

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("design,seed,auroc,accuracy,sensitivity,specificity\n")
        for design, seed, metrics in rows:
            fh.write(
                f"{design},{seed},{metrics.auroc!r},{metrics.accuracy!r},"
                f"{metrics.sensitivity!r},{metrics.specificity!r}\n"
            )
    summary = {}
    for design in ABLATION_DESIGNS:
        values = np.array([m.auroc for d, _, m in rows if d == design])
        summary[design] = {"mean": float(values.mean()), "sd": float(values.std())}
        _emit(
            {
                "event": "summary",
                "design": design,
                "mean_auroc": summary[design]["mean"],
                "sd_auroc": summary[design]["sd"],
            }
        )
    files = [csv_path]
    if not args.no_figures:
        files.append(plots.save_ablation_figure(summary, out_dir / "ablation.png"))
    _emit({"event": "artifacts", "files": [str(p) for p in files]})
    return 0


def _gradcheck_config(args) -> md.ModelConfig:
    toy = dict(
        n_rois=6,
        embed_dim=8,
        n_heads=2,
        n_layers=1,
        reduced_dim=4,
        n_experts=2,
        topk=(2, 1),
        cv_coef=0.23,
        embed_hidden=8,
        ffn_hidden=8,
        reduce_hidden=8,
        attn_hidden=4,
        cls_hidden=8,
        gate_hidden=8,
        seed=0,
    )
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        extra = set(file_cfg) - _MODEL_KEYS
        if extra:
            raise UsageError(f"gradcheck config accepts model keys only, got {sorted(extra)}")
        if "topk" in file_cfg and isinstance(file_cfg["topk"], list):
            file_cfg["topk"] = tuple(file_cfg["topk"])
        toy.update(file_cfg)
    if args.seed is not None:
        toy["seed"] = args.seed
    try:
        return md.ModelConfig(**toy)
    except md.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _maybe_corrupt_backward():
    """Test-only hook: wrap one backward rule so gradcheck must fail."""
    true_gelu = nm.gelu

    def corrupted_gelu(a):
        out = true_gelu(a)
        tape = nm._current_tape()
        if tape is not None and out.requires_grad:
            record = tape.records[-1]
            original = record.fn
            record.fn = lambda g: tuple(None if gi is None else 1.1 * gi for gi in original(g))
        return out

    nm.gelu = corrupted_gelu
    return true_gelu


def cmd_gradcheck(args) -> int:
    config = _gradcheck_config(args)
    rng = np.random.default_rng(config.seed)
    raw = rng.normal(size=(3, config.n_rois, config.n_rois))
    sym = np.clip((raw + raw.transpose(0, 2, 1)) / 2.0, -1.0, 1.0)
    for i in range(sym.shape[0]):
        np.fill_diagonal(sym[i], 1.0)
    x = nm.Tensor(sym)
    labels = np.array([0, 1, 0])
    params = md.init_params(config)

    def loss_fn(p):
        result = md.forward(x, p, config)
        return md.total_loss(result.logits, labels, result.gate_probs, config.cv_coef, config.cv_eps)

    restore = _maybe_corrupt_backward() if os.environ.get(_CORRUPT_ENV) else None
    try:
        results = gc.check_model(params, loss_fn, seed=config.seed)
    finally:
        if restore is not None:
            nm.gelu = restore

    for group in results:
        _emit(
            {
                "event": "group",
                "group": group.group,
                "max_rel_err": group.max_rel_err,
                "n_checked": group.n_checked,
                "ok": group.ok,
            }
        )
    failing = sorted(g.group for g in results if not g.ok)
    ok = not failing
    _emit({"event": "gradcheck", "ok": ok, "failing_groups": failing})
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def _add_common_flags(parser, *, config=False, seed=False, out=False, dataset=False, checkpoint=False, figures=False):
    if config:
        parser.add_argument("--config", help="JSON file of model/training settings")
    if seed:
        parser.add_argument("--seed", type=int, default=None, help="run seed (init, shuffle, split)")
    if out:
        parser.add_argument("--out", required=True, help="output directory")
    if dataset:
        parser.add_argument("--dataset", required=True, help="dataset manifest path")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True, help="checkpoint JSON path")
    if figures:
        parser.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def _add_train_flags(parser):
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcmoe",
        description="Connectome classification with a mixture of pooling experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a planted signal")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--rois", type=int, required=True)
    p.add_argument("--delta", type=float, default=0.4, help="planted between-community effect")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--communities", type=int, default=4)
    _add_common_flags(p, seed=True, out=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="split, train, and save a checkpoint")
    _add_common_flags(p, config=True, seed=True, out=True, dataset=True, figures=True)
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common_flags(p, seed=True, dataset=True, checkpoint=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("interpret", help="write per-subject interpretability reports")
    _add_common_flags(p, out=True, dataset=True, checkpoint=True, figures=True)
    p.add_argument("--subjects", default=None, help="comma-separated subject ids (default: all)")
    p.add_argument("--layer", type=int, default=-1, help="encoder layer for attention rows")
    p.add_argument("--head-mode", dest="head_mode", choices=it.HEAD_MODES, default="mean")
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.set_defaults(handler=cmd_interpret)

    p = sub.add_parser("ablate", help="train cls/pool/moe decoders across seeds")
    _add_common_flags(p, config=True, out=True, dataset=True, figures=True)
    _add_train_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_common_flags(p, config=True, seed=True)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        _fail(str(exc))
        return 2
    except (dt.DataError, dt.SplitError, md.ConfigError, tr.MetricError, it.InterpretError) as exc:
        _fail(str(exc))
        return 2
    except nm.ShapeError as exc:
        _fail(str(exc))
        return 2
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        _fail(str(exc))
        return 2
    except json.JSONDecodeError as exc:
        _fail(f"invalid JSON input: {exc}")
        return 2
    except tr.TrainingError as exc:
        _fail(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
