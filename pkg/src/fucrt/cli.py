"""Experiment runner: pretrain / unlearn / report subcommands."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    build_datasets,
    build_partition,
    config_as_json,
    parse_config,
)
from .errors import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    NumericError,
    ProtocolError,
)
from .evaluation import export_embeddings, group_metrics, merge_diagnostic, mia_asr, overall_accuracy
from .federation import (
    BASELINES,
    RunResult,
    pretrain,
    rounds_to_target,
    run_baseline,
    run_fucrt,
)
from .nn import load_params, save_params, serialize_params
from .rng import derive_seed

METHODS = ("fucrt",) + BASELINES


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fucrt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="client worker threads")
    common.add_argument("--out", default=None, help="override the config output directory")

    sub.add_parser("pretrain", parents=[common], help="train the original federated model")

    unlearn = sub.add_parser("unlearn", parents=[common], help="run an unlearning method")
    unlearn.add_argument("--method", required=True, choices=METHODS)
    unlearn.add_argument("--origin", required=True, help="pretrained model checkpoint")

    report = sub.add_parser("report", help="tabulate summaries from run directories")
    report.add_argument("dirs", nargs="+", help="run directories holding summary.json")
    report.add_argument("--csv", default=None, help="also write the table as CSV")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _round_writer(fh, run_dir: Path, interval: int):
    def callback(record, model):
        fh.write(json.dumps(record.as_json()) + "\n")
        fh.flush()
        if interval and record.round > 0 and record.round % interval == 0:
            ckpt_dir = run_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_params(model, ckpt_dir / f"round_{record.round:04d}.bin")

    return callback


def _groups_json(model, test, forget) -> dict:
    unl, rem = group_metrics(model, test, forget)
    return {
        "unlearning": None if unl is None else unl.as_json(),
        "remaining": None if rem is None else rem.as_json(),
    }


def cmd_pretrain(config: ExperimentConfig) -> Path:
    train, test = build_datasets(config)
    partition = build_partition(config, train)
    run_dir = Path(config.out_dir) / "pretrain"
    run_dir.mkdir(parents=True, exist_ok=True)
    forget = set(config.resolved_forget_classes())

    with open(run_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        result = pretrain(
            config, train, test, partition,
            on_round=_round_writer(fh, run_dir, config.checkpoint_interval),
        )

    save_params(result.model, run_dir / "model.bin")
    summary = {
        "kind": "pretrain",
        "config": config_as_json(config),
        "overall_acc": overall_accuracy(result.model, test),
        "groups": _groups_json(result.model, test, forget) if forget else None,
        "training_rounds": config.pretrain_rounds,
        "model_bytes": len(serialize_params(result.model)),
    }
    _write_json(run_dir / "summary.json", summary)
    return run_dir


def _mia_report(model, train, test, forget, seed):
    labels_train = train.original_labels if train.original_labels is not None else train.labels
    labels_test = test.original_labels if test.original_labels is not None else test.labels
    forget_list = sorted(forget)
    members = train.features[np.isin(labels_train, forget_list)]
    nonmembers = test.features[np.isin(labels_test, forget_list)]
    cal_members = train.features[~np.isin(labels_train, forget_list)]
    cal_nonmembers = test.features[~np.isin(labels_test, forget_list)]
    return mia_asr(model, members, nonmembers, cal_members, cal_nonmembers, seed=seed)


def cmd_unlearn(config: ExperimentConfig, method: str, origin_path) -> Path:
    train, test = build_datasets(config)
    partition = build_partition(config, train)
    forget = set(config.resolved_forget_classes())
    if not forget:
        raise ConfigurationError("forget_classes: unlearning requires a non-empty target")

    origin = load_params(origin_path)
    if origin.dims != config.model_dims():
        raise ConfigurationError(
            f"checkpoint dims {origin.dims} do not match config dims {config.model_dims()}"
        )

    run_dir = Path(config.out_dir) / method
    run_dir.mkdir(parents=True, exist_ok=True)
    export_embeddings(origin, test, run_dir / "embeddings_pre.csv")

    with open(run_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        writer = _round_writer(fh, run_dir, config.checkpoint_interval)
        if method == "fucrt":
            result: RunResult = run_fucrt(origin, config, train, test, partition, on_round=writer)
        else:
            result = run_baseline(method, origin, config, train, test, partition, on_round=writer)

    save_params(result.model, run_dir / "model.bin")
    export_embeddings(result.model, test, run_dir / "embeddings_post.csv")

    if result.global_ts is not None:
        _write_json(
            run_dir / "global_ts.json",
            {"strategy": result.ts_strategy, "per_class": result.global_ts.as_json()},
        )

    model_bytes = len(serialize_params(result.model))
    proto_bytes = config.classes * config.rep_dim * 8
    training_rounds = config.unlearn_rounds - 1
    comm = {
        "model_bytes": model_bytes,
        "prototype_bytes": proto_bytes,
        "prototype_model_ratio": proto_bytes / model_bytes,
        "per_client_bytes": (model_bytes + proto_bytes) if method == "fucrt" else model_bytes,
        "total_bytes": sum(rec.comm_total_bytes for rec in result.records),
    }

    efficiency = None
    scratch_summary = Path(config.out_dir) / "from_scratch" / "summary.json"
    if method != "from_scratch" and scratch_summary.exists():
        ref = json.loads(scratch_summary.read_text(encoding="utf-8"))
        ref_rem = (ref.get("groups") or {}).get("remaining")
        ref_rounds = ref.get("training_rounds")
        if ref_rem is not None and ref_rounds:
            target = ref_rem["accuracy"] - 1.0
            reached = rounds_to_target(result.records, target)
            efficiency = {
                "target_remaining_acc": target,
                "rounds_to_target": reached,
                "reference_rounds": ref_rounds,
                "round_ratio": None if reached is None else reached / ref_rounds,
            }

    summary = {
        "kind": "unlearn",
        "method": method,
        "config": config_as_json(config),
        "groups": _groups_json(result.model, test, forget),
        "pre_groups": _groups_json(origin, test, forget),
        "mia": _mia_report(result.model, train, test, forget, derive_seed(config.seed, "mia")).as_json(),
        "merge": {
            str(u): info
            for u, info in merge_diagnostic(result.model, test, forget, result.global_ts).items()
        },
        "global_ts": None if result.global_ts is None else result.global_ts.as_json(),
        "ts_strategy": result.ts_strategy,
        "training_rounds": training_rounds,
        "comm": comm,
        "efficiency": efficiency,
    }
    _write_json(run_dir / "summary.json", summary)
    return run_dir


_REPORT_COLUMNS = (
    "run",
    "method",
    "unlearning_acc",
    "unlearning_f1",
    "remaining_acc",
    "remaining_f1",
    "asr",
    "rounds",
    "comm_total_bytes",
)


def _report_row(run_dir: Path, summary: dict) -> dict:
    groups = summary.get("groups") or {}
    unl = groups.get("unlearning") or {}
    rem = groups.get("remaining") or {}
    mia = summary.get("mia") or {}
    comm = summary.get("comm") or {}
    return {
        "run": run_dir.name,
        "method": summary.get("method", summary.get("kind", "?")),
        "unlearning_acc": unl.get("accuracy"),
        "unlearning_f1": unl.get("f1"),
        "remaining_acc": rem.get("accuracy"),
        "remaining_f1": rem.get("f1"),
        "asr": mia.get("asr"),
        "rounds": summary.get("training_rounds"),
        "comm_total_bytes": comm.get("total_bytes"),
    }


def cmd_report(dirs: list[str], csv_path: str | None = None) -> int:
    rows = []
    failures = 0
    for d in sorted(dirs):
        run_dir = Path(d)
        summary_path = run_dir / "summary.json"
        try:
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"warning: skipping {run_dir}: {exc}", file=sys.stderr)
            failures += 1
            continue
        rows.append(_report_row(run_dir, summary))

    if rows:
        def fmt(value):
            if value is None:
                return "-"
            if isinstance(value, float):
                return f"{value:.2f}"
            return str(value)

        table = [list(_REPORT_COLUMNS)] + [[fmt(r[c]) for c in _REPORT_COLUMNS] for r in rows]
        widths = [max(len(line[i]) for line in table) for i in range(len(_REPORT_COLUMNS))]
        for line in table:
            print("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())

    if csv_path and rows:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                                 for k, v in r.items()})

    return 2 if rows == [] and failures else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "pretrain":
            run_dir = cmd_pretrain(_load_config(args))
            print(f"pretrain artifacts written to {run_dir}")
        elif args.command == "unlearn":
            run_dir = cmd_unlearn(_load_config(args), args.method, args.origin)
            print(f"{args.method} artifacts written to {run_dir}")
        elif args.command == "report":
            return cmd_report(args.dirs, args.csv)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProtocolError, NumericError, InsufficientDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
