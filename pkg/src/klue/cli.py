"""Command-line entry point for reproducible experiments.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Logging goes to
stderr (level via KLUE_LOG={error|info|debug}); data goes to files or
stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradchecks
from . import metrics as mx
from . import rulebase as rbm
from . import synthetic
from . import training

log = logging.getLogger("klue")

CURVE_HEADER = ["epoch", "variant", "split", "auc_initial", "auc_refined"]


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("KLUE_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# commands


def cmd_rulegen(args) -> int:
    try:
        rb = rbm.generate(
            T=args.T, K=args.K, l=args.l, q_min=args.qmin, q_max=args.qmax,
            p_neg=args.pneg, seed=args.seed,
            phase2_negatives=args.phase2_negatives,
        )
    except rbm.RuleBaseError as exc:
        return _fail(str(exc))
    Path(args.out).write_bytes(rbm.serialize(rb))
    counts = rbm.per_class_counts(rb)
    n_fwd = len(rb.forward_rules())
    print(f"rule base written to {args.out}")
    print(f"total rules: {len(rb.rules)} ({n_fwd} forward, "
          f"{len(rb.rules) - n_fwd} converse)")
    if rb.stats is not None:
        print(f"phase-2 coverage rules: {rb.stats.phase2_rules}")
    for k in range(rb.K):
        print(f"class {k}: positive={counts[k]['positive']} "
              f"negative={counts[k]['negative']}")
    return 0


def cmd_validate_rules(args) -> int:
    try:
        rb = rbm.deserialize(Path(args.rules).read_bytes())
    except (OSError, rbm.RuleBaseParseError) as exc:
        return _fail(str(exc))
    violations = rbm.validate(rb)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 1
    print("rule base valid")
    return 0


def _load_inputs(config_path, rules_path):
    cfg = training.ExperimentConfig.from_json(
        Path(config_path).read_text(encoding="utf-8")
    )
    rb = rbm.deserialize(Path(rules_path).read_bytes())
    cfg.check_dims(rb)
    return cfg, rb


def cmd_train(args) -> int:
    try:
        cfg, rb = _load_inputs(args.config, args.rules)
    except (OSError, rbm.RuleBaseParseError, training.ConfigError) as exc:
        return _fail(str(exc))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task = synthetic.generate_task(cfg.task)
    lines = []

    def sink(record):
        lines.append(training.metrics_record_line(record, cfg))

    try:
        model, history = training.train_model(cfg, task, rb, metrics_sink=sink)
    except training.TrainingDiverged as exc:
        return _fail(str(exc))
    (out_dir / "metrics.ndjson").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")
    training.save_checkpoint(out_dir / "checkpoint.json", model, None, cfg,
                             epoch=cfg.optimizer.epochs)
    final = history[-1]
    summary = {
        "tool_version": training.TOOL_VERSION,
        "config_hash": cfg.config_hash(),
        "variant": cfg.klue_variant,
        "epochs": cfg.optimizer.epochs,
        "final_val": final["val"],
        "final_train": final["train"],
        "final_loss": final["loss_total"],
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def cmd_eval(args) -> int:
    try:
        cfg, model, _ = training.load_checkpoint(args.checkpoint)
        rb = rbm.deserialize(Path(args.rules).read_bytes())
        cfg.check_dims(rb)
    except (OSError, rbm.RuleBaseParseError, training.ConfigError) as exc:
        return _fail(str(exc))
    task = synthetic.generate_task(cfg.task)
    splits = {"val": task.val, "shifted_val": task.shifted_val}
    report = {
        name: training.evaluate(model, ds, rb, cfg.uses_dku())
        for name, ds in splits.items()
    }
    report["config_hash"] = cfg.config_hash()
    report["tool_version"] = training.TOOL_VERSION
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradchecks.run_suite(args.target, seed=args.seed)
    ok = True
    for name, report in reports.items():
        for entry in report.entries:
            print(f"{args.target}.{name}.{entry.name}: "
                  f"max_rel_err={entry.max_rel_err:.3e}")
        status = "PASS" if report.passed else "FAIL"
        print(f"{args.target}.{name}: {status} (tol {report.tol})")
        ok = ok and report.passed
    return 0 if ok else 1


def cmd_hard_split(args) -> int:
    try:
        cfg, model, _ = training.load_checkpoint(args.checkpoint)
        rb = rbm.deserialize(Path(args.rules).read_bytes())
        cfg.check_dims(rb)
        task = synthetic.generate_task(cfg.task)
        probs, _, _ = training.predict(model, task.val.x, rb, use_dku=False)
        full, hard = mx.hard_sample_split(probs, args.percentile)
    except (OSError, rbm.RuleBaseParseError, training.ConfigError,
            mx.MetricsError) as exc:
        return _fail(str(exc))
    doc = {
        "tool_version": training.TOOL_VERSION,
        "config_hash": cfg.config_hash(),
        "percentile": args.percentile,
        "n_total": int(full.size),
        "hard_indices": [int(i) for i in hard],
    }
    payload = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"{hard.size} hard samples of {full.size} written to {args.out}")
    else:
        print(payload, end="")
    return 0


def cmd_concept_report(args) -> int:
    try:
        cfg, model, _ = training.load_checkpoint(args.checkpoint)
        rb = rbm.deserialize(Path(args.rules).read_bytes())
        cfg.check_dims(rb)
    except (OSError, rbm.RuleBaseParseError, training.ConfigError) as exc:
        return _fail(str(exc))
    task = synthetic.generate_task(cfg.task)
    report = training.concept_recovery_score(model, task.val, rb)
    doc = {
        "tool_version": training.TOOL_VERSION,
        "config_hash": cfg.config_hash(),
        "mean_matched_auc": report.mean_matched_auc,
        "matching": [
            {"head": h, "latent": t, "auc": auc} for h, t, auc in report.matching
        ],
    }
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def cmd_export_curves(args) -> int:
    rows = []
    for path in args.metrics:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            return _fail(str(exc))
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                variant = record["variant"]
                epoch = record["epoch"]
                for split in ("train", "val"):
                    rows.append([
                        epoch, variant, split,
                        repr(record[split]["AUC_initial"]),
                        repr(record[split]["AUC_refined"]),
                    ])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                return _fail(f"{path}:{lineno}: malformed metrics record: {exc}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    writer.writerows(rows)
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    print(f"{len(rows)} rows written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="klue", description="KLUE neuro-symbolic experiment toolkit"
    )
    parser.add_argument("--version", action="version",
                        version=f"klue {training.TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rulegen", help="generate a synthetic rule base")
    p.add_argument("--T", type=int, required=True, help="concept count")
    p.add_argument("--K", type=int, required=True, help="class count")
    p.add_argument("--l", type=int, default=5, help="positive rules per class")
    p.add_argument("--qmin", type=int, default=2)
    p.add_argument("--qmax", type=int, default=4)
    p.add_argument("--pneg", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase2-negatives", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rulegen)

    p = sub.add_parser("validate-rules", help="check rule-base invariants")
    p.add_argument("--rules", required=True)
    p.set_defaults(func=cmd_validate_rules)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run a gradient-check suite")
    p.add_argument("--target", choices=sorted(gradchecks.SUITES), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("hard-split", help="entropy-based hard-sample split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--percentile", type=float, default=90.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_hard_split)

    p = sub.add_parser("concept-report", help="concept-recovery oracle report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", required=True)
    p.set_defaults(func=cmd_concept_report)

    p = sub.add_parser("export-curves",
                       help="convert metrics streams to plot-ready CSV")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_curves)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure -> exit 1 with message
        log.debug("unhandled error", exc_info=True)
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
