"""Command line: ``bilevel-select {gen-instance,train,verify,report}``.

Exit codes: 0 ok, 1 a requested check failed, 2 runtime or input error.
Errors are printed to stderr as one JSON object (and saved as
``error.json`` in the run directory when one exists).
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

from .config import parse_config
from .errors import BilevelSelectError
from .experiment import OUTPUT_ROOT_ENV, build_instance, run_dir_for, run_experiment
from .io import read_metrics, write_dataset

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("bilevel_select")


def _config_args(p):
    p.add_argument("--config", "-c", help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.epochs=3 (repeatable; wins over the file)")
    p.add_argument("--out", help="run directory (default: $%s/<mode>)" % OUTPUT_ROOT_ENV)


def build_parser():
    parser = argparse.ArgumentParser(prog="bilevel-select", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-instance", help="write a synthetic instance as JSONL")
    _config_args(p)
    p.add_argument("--seed", type=int, help="instance seed (default: first configured seed)")

    p = sub.add_parser("train", help="train with the configured mode and write metrics CSVs")
    _config_args(p)

    p = sub.add_parser("verify", help="run the theory checks and write report.json")
    _config_args(p)

    p = sub.add_parser("report", help="summarise a finished run directory")
    p.add_argument("run_dir")
    return parser


def _load(args, mode=None):
    overrides = list(args.overrides)
    if mode is not None:
        overrides.append(f"mode={mode}")
    return parse_config(args.config, overrides)


def cmd_gen_instance(args):
    cfg = _load(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    ds, spec = build_instance(cfg, seed)
    out = Path(args.out) if args.out else run_dir_for(cfg) / f"instance_seed{seed}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(json.dumps({"path": str(out), "sft": len(ds.sft), "val": len(ds.val), "eval": len(ds.eval),
                      "spec": spec.to_dict()}))
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    if cfg.mode == "verify":
        return cmd_verify(args)
    run_dir = Path(args.out) if args.out else run_dir_for(cfg)
    args.run_dir = run_dir
    code, summary = run_experiment(cfg, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "final": summary}, default=str))
    return code


def cmd_verify(args):
    cfg = _load(args, mode="verify")
    run_dir = Path(args.out) if args.out else run_dir_for(cfg)
    args.run_dir = run_dir
    code, report = run_experiment(cfg, run_dir)
    for name, c in report.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}: value={c['value']} tolerance={c['tolerance']}")
    return code


def cmd_report(args):
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no run directory {run_dir}")
    args.run_dir = run_dir
    out = {}
    report = run_dir / "report.json"
    if report.exists():
        out["checks"] = json.loads(report.read_text())
    finals = {}
    for csv_path in sorted(run_dir.glob("seed_*/metrics.csv")):
        rows = read_metrics(csv_path)
        if rows:
            finals[csv_path.parent.name] = rows[-1]
    if finals:
        keys = sorted({k for r in finals.values() for k in r})
        out["final"] = finals
        out["mean_final"] = {k: statistics.fmean(r[k] for r in finals.values() if k in r) for k in keys}
    if not out:
        raise FileNotFoundError(f"{run_dir} holds neither metrics nor a report")
    (run_dir / "summary_report.json").write_text(json.dumps(out, indent=2, sort_keys=True, default=str) + "\n")
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    if "checks" in out and not all(c["pass"] for c in out["checks"].values()):
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMANDS = {"gen-instance": cmd_gen_instance, "train": cmd_train, "verify": cmd_verify, "report": cmd_report}


def _error_doc(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "key", None):
        doc["key"] = exc.key
    if getattr(exc, "step", None) is not None:
        doc["step"] = exc.step
    return doc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (BilevelSelectError, OSError, ValueError) as exc:
        doc = _error_doc(exc)
        print(json.dumps(doc), file=sys.stderr)
        run_dir = getattr(args, "run_dir", None)
        if run_dir is not None and Path(run_dir).is_dir():
            (Path(run_dir) / "error.json").write_text(json.dumps(doc) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
