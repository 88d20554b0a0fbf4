"""Command line entry point.

Exit codes: 0 success, 1 a check failed (gradient tolerance, bottleneck
violation), 2 usage or config errors. Diagnostics go to stderr;
machine-readable results go to files under the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import blocks as B
from . import gradflow, harness
from .matcher import SiameseModel

DEFAULT_OUT_ENV = "SFATTN_OUT"


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(path: str, overrides) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    return harness.apply_overrides(doc, overrides or [])


def _out_root(args) -> str:
    return args.out or os.environ.get(DEFAULT_OUT_ENV, "runs")


def cmd_train(args) -> int:
    doc = _load_config(args.config, args.set)
    gen, cfg = harness.config_from_dict(doc)
    data = harness.generate_dataset(gen)
    run_dir = harness.run_dir_name(doc, _out_root(args))
    report = harness.train(gen, cfg, data, run_dir=run_dir)
    _err(f"run dir: {run_dir}")
    if report.aborted:
        _err(f"run aborted: {report.abort_reason}")
        return 1
    _err(f"test accuracy: {report.final_test_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    doc = _load_config(args.config, args.set)
    gen, cfg = harness.config_from_dict(doc)
    data = harness.generate_dataset(gen)
    model = SiameseModel.from_checkpoint(args.checkpoint)
    split = getattr(data, args.split)
    loss, acc = harness.evaluate(model, split, gen.max_len)
    result = {"split": args.split, "loss": loss, "accuracy": acc}
    out = os.path.join(_out_root(args), "eval.json")
    os.makedirs(_out_root(args), exist_ok=True)
    with open(out, "w") as f:
        json.dump(result, f, indent=2)
    _err(f"{args.split} accuracy: {acc:.4f} (written to {out})")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradflow.run_gradcheck_suite(D=args.D, L=args.L, N=args.N,
                                           seeds=args.seeds, tol=args.tol)
    os.makedirs(_out_root(args), exist_ok=True)
    out = os.path.join(_out_root(args), "gradcheck.json")
    gradflow.write_report(results, out)
    _err(f"gradcheck {'passed' if results['passed'] else 'FAILED'}; "
         f"report at {out}")
    return 0 if results["passed"] else 1


def cmd_ablate(args) -> int:
    doc = _load_config(args.config, args.set)
    gen, cfg = harness.config_from_dict(doc)
    if cfg.block != "sfa":
        raise ValueError("ablation requires block=sfa in the config")
    components = [c for c in args.components.split(",") if c]
    data = harness.generate_dataset(gen)
    run_dir = harness.run_dir_name(doc, _out_root(args))
    harness.run_ablation(gen, cfg, data, components, run_dir=run_dir)
    _err(f"ablation outputs under {run_dir}")
    return 0


def cmd_heatmap(args) -> int:
    doc = _load_config(args.config, args.set)
    gen, _ = harness.config_from_dict(doc)
    data = harness.generate_dataset(gen)
    model = SiameseModel.from_checkpoint(args.checkpoint)
    pair = data.test[args.pair_index]
    os.makedirs(_out_root(args), exist_ok=True)
    out = os.path.join(_out_root(args), f"heatmap_{args.pair_index}.csv")
    harness.export_heatmap(model, pair, gen.max_len, path=out)
    _err(f"heatmap written to {out}")
    return 0


def cmd_bottleneck(args) -> int:
    rep = B.check_bottleneck(args.D, args.r, args.r1, args.r2, args.L,
                             log_base=args.log_base)
    print(json.dumps({"threshold": rep.threshold,
                      "quantities": rep.quantities,
                      "margins": rep.margins(),
                      "passed": rep.passed, "ok": rep.ok}, indent=2))
    return 0 if rep.ok else 1


def cmd_param_count(args) -> int:
    doc = _load_config(args.config, args.set)
    gen, cfg = harness.config_from_dict(doc)
    model = harness.build_model(gen, cfg)
    counts = model.param_count()
    if cfg.block == "fa":
        counts["closed_form"] = B.fa_param_count(cfg.D, cfg.r)
    elif cfg.block == "sfa":
        counts["closed_form"] = B.sfa_param_count(cfg.D, cfg.r1, cfg.r2,
                                                  cfg.branches, cfg.ablation)
    print(json.dumps(counts, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfattn",
                                description="feature-attention experiment driver")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON config path")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="dot-path config override, last one wins")
        sp.add_argument("--out", help="output directory root "
                                      f"(default ${DEFAULT_OUT_ENV} or ./runs)")

    sp = sub.add_parser("train", help="train one model per the config")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "dev", "test"], default="test")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="run the gradient-flow check suite")
    common(sp, config=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--D", type=int, default=8)
    sp.add_argument("--L", type=int, default=4)
    sp.add_argument("--N", type=int, default=2)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run component ablations")
    common(sp)
    sp.add_argument("--components", default="ae,gmp,gap,selection",
                    help="comma list from {ae,gmp,gap,selection}")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("heatmap", help="export an interaction heatmap CSV")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pair-index", type=int, default=0)
    sp.set_defaults(fn=cmd_heatmap)

    sp = sub.add_parser("bottleneck-check",
                        help="evaluate the bottleneck-width constraint")
    sp.add_argument("--D", type=int, required=True)
    sp.add_argument("--r", type=int, default=1)
    sp.add_argument("--r1", type=int, required=True)
    sp.add_argument("--r2", type=int, required=True)
    sp.add_argument("--L", type=int, required=True)
    sp.add_argument("--log-base", choices=["e", "2", "10"], default="e")
    sp.set_defaults(fn=cmd_bottleneck)

    sp = sub.add_parser("param-count", help="parameter accounting for a config")
    common(sp)
    sp.set_defaults(fn=cmd_param_count)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as e:
        _err(f"error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
