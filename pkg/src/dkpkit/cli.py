"""Command-line interface.

Subcommands mirror the experiment workflow: ``train`` one configuration,
``eval`` a checkpoint, ``gradcheck`` the configured method's gradients,
``report`` the compression arithmetic without training, and ``sweep`` a
method x factor matrix.  Exit codes: 0 ok, 1 configuration error, 2 numeric
failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, parse_config
from .nn import NumericError
from .experiment import (
    GRADCHECK_GATE,
    build_model,
    evaluate_ppl,
    gradcheck_probe,
    load_corpora,
    restore_model_params,
    run_experiment,
    sweep,
)
from .report import gate_report

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkpkit",
        description="Doped Kronecker-product compression for LSTM language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="runs/out",
                       help="directory for artifacts")

    common(sub.add_parser("train", help="train one configuration"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    common(sub.add_parser("gradcheck", help="finite-difference gate on the configured method"))
    common(sub.add_parser("report", help="compression arithmetic only, no training"))
    common(sub.add_parser("sweep", help="run the method x factor matrix"))
    return parser


def _load_config(args) -> TrainConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg, args.out)
    print(f"artifacts in {result.out_dir}")
    if result.exit_code == 0:
        print(f"test perplexity: {result.test_ppl:.3f}")
    return result.exit_code


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    vocab, _, valid_ids, test_ids = load_corpora(cfg)
    rng = np.random.default_rng(cfg.seed)
    model, _ = build_model(cfg, vocab.size, rng)
    restore_model_params(model, load_checkpoint(args.checkpoint))
    valid = evaluate_ppl(model, valid_ids, cfg.batch_size, cfg.bptt)
    test = evaluate_ppl(model, test_ids, cfg.batch_size, cfg.bptt)
    print(f"valid perplexity: {valid:.3f}")
    print(f"test perplexity: {test:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    report = gradcheck_probe(cfg)
    print(report.render())
    if report.max_rel > GRADCHECK_GATE:
        name, worst = report.worst()
        print(f"FAIL: {name} relative error {worst:.3e} exceeds {GRADCHECK_GATE:.0e}")
        return EXIT_NUMERIC
    print(f"OK: max relative error {report.max_rel:.3e} within {GRADCHECK_GATE:.0e}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    # The accounting covers the compressed gate matrices, so no corpus is
    # needed: build the gates against a placeholder vocabulary.
    rng = np.random.default_rng(cfg.seed)
    model, plan = build_model(cfg, 2, rng)
    from .overlay import prune_to_sparsity
    for overlay in _prunable(model):
        if plan.target_sparsity > 0.0:
            prune_to_sparsity(overlay, plan.target_sparsity)
    rep = gate_report(model)
    print(rep.render())
    if not plan.feasible:
        print(f"note: requested factor is infeasible ({plan.note})")
    return EXIT_OK


def _prunable(model):
    from .experiment import masked_structures
    return masked_structures(model)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    path = sweep(cfg, args.out)
    print(f"sweep table: {path}")
    print(path.read_text(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
                "report": cmd_report, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
