"""Command-line interface.

Verbs: train, compare, sweep-mask, sweep-drop, grad-check, saliency-check,
flops. Configuration comes from --config key=value files with flag
overrides (flags win). Exit codes: 0 success, 2 config error, 3 numeric
failure (NaN/divergence), 4 check failure in grad-check/saliency-check.
"""

import argparse
import sys
from dataclasses import replace

from gradmask import harness
from gradmask.harness import ConfigError, build_config
from gradmask.optim import DivergenceError
from gradmask.tensor import NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


def _add_common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--task", choices=["regression", "gaussians", "modadd", "charlm"])
    p.add_argument("--model", choices=["mlp", "tinytf"])
    p.add_argument("--strategy", choices=["none", "gmt", "rmt", "hft"])
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--scope", choices=["global", "per-tensor"])
    p.add_argument("--accum-N", dest="accum_n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--n-examples", dest="n_examples", type=int)
    p.add_argument("--warm-steps", dest="warm_steps", type=int)
    p.add_argument("--masked-mode", dest="masked_mode", choices=["skip", "zero"])
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--dump-masks", dest="dump_masks", help="true/false")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--exempt-groups", dest="exempt_groups",
                   help="comma-separated parameter groups excluded from masking")
    p.add_argument("--hidden-sizes", dest="hidden_sizes", help="comma-separated MLP widths")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--context-len", dest="context_len", type=int)
    p.add_argument("--modulus", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="gradmask",
                                     description="masked sparse-update training harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one training run")
    _add_common(p)

    p = sub.add_parser("compare", help="paired strategy comparison across seeds")
    _add_common(p)
    p.add_argument("--strategies", help="comma list from none,gmt,rmt,hft,drop")
    p.add_argument("--rescale", help="true/false: DARE-style 1/(1-p) rescale for drop rows")

    p = sub.add_parser("sweep-mask", help="mask-ratio sweep")
    _add_common(p)
    p.add_argument("--ratios", help="comma-separated mask ratios")

    p = sub.add_parser("sweep-drop", help="delta-drop strategy/rate sweep")
    _add_common(p)
    p.add_argument("--drop-rates", dest="drop_rates", help="comma-separated drop rates")
    p.add_argument("--drop-strategy", dest="drop_strategy",
                   choices=["trivial", "salient", "random"])
    p.add_argument("--drop-rate", dest="drop_rate", type=float)
    p.add_argument("--rescale", help="true/false")

    p = sub.add_parser("grad-check", help="autodiff vs finite differences")
    p.add_argument("--quick", action="store_true", help="skip the transformer cases")

    p = sub.add_parser("saliency-check", help="first-order saliency vs ablation oracle")

    p = sub.add_parser("flops", help="analytic per-step FLOP breakdown")
    _add_common(p)

    return parser


_CONFIG_KEYS = [
    "task", "model", "strategy", "strategies", "mask_ratio", "scope", "accum_n",
    "steps", "lr", "seed", "seeds", "out", "ratios", "drop_strategy", "drop_rate",
    "drop_rates", "rescale", "batch_size", "eval_every", "optimizer", "n_examples",
    "warm_steps", "weight_decay", "masked_mode", "exempt_groups", "dump_masks",
    "checkpoint_every", "noise", "modulus", "context_len", "hidden_sizes",
    "d_model", "n_heads", "n_layers",
]


def _config_from_args(args):
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    return build_config(args.config, overrides)


def cmd_train(args):
    cfg = _config_from_args(args)
    report = harness.run_train_command(cfg)
    print(f"final train loss {report.losses[-1]:.6g}  "
          f"eval loss {report.final_eval_loss:.6g}  "
          f"metric {report.final_eval_metric:.6g}  "
          f"throughput {report.throughput:.1f} samples/s")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _config_from_args(args)
    rows = harness.run_compare(cfg)
    for row in rows:
        print(f"{row['strategy']:>5} seed {row['seed']}: "
              f"eval_loss {row['eval_loss']:.6g}  metric {row['eval_metric']:.6g}  "
              f"throughput {row['throughput']:.1f}")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_sweep_mask(args):
    cfg = _config_from_args(args)
    rows = harness.run_mask_ratio_sweep(cfg)
    for row in rows:
        print(f"ratio {row['mask_ratio']:<5} seed {row['seed']}: "
              f"eval_loss {row['eval_loss']:.6g}")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_sweep_drop(args):
    cfg = _config_from_args(args)
    rows = harness.run_drop_sweep_command(cfg)
    for row in rows:
        print(f"{row['strategy']:>8} rate {row['rate']:<5} seed {row['seed']}: "
              f"eval_loss {row['eval_loss']:.6g}")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_grad_check(args):
    from gradmask.acceptance import grad_check_cases

    worst = 0.0
    ok = True
    for case in grad_check_cases(quick=args.quick):
        status = "ok" if case.max_rel_err < case.tolerance else "FAIL"
        ok = ok and case.max_rel_err < case.tolerance
        worst = max(worst, case.max_rel_err)
        print(f"[{status}] {case.name}: {case.checked} entries, "
              f"max rel err {case.max_rel_err:.3e} (tol {case.tolerance:g})")
    print(f"grad-check {'passed' if ok else 'FAILED'}; worst {worst:.3e}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_saliency_check(args):
    from gradmask.acceptance import saliency_check

    result = saliency_check()
    status = "ok" if result.passed else "FAIL"
    print(f"[{status}] spearman(exact ablation, first-order prediction) = "
          f"{result.spearman:.4f} over {result.n_params} params (threshold 0.8)")
    print(f"[{'ok' if result.small_param_ok else 'FAIL'}] "
          f"first-order error for |theta| <= {result.small_cut:g}: "
          f"max {result.small_max_err:.3e}")
    return EXIT_OK if result.passed and result.small_param_ok else EXIT_CHECK


def cmd_flops(args):
    cfg = _config_from_args(args)
    one_step = replace(cfg, steps=1, eval_every=0, warm_steps=0, out=None)
    report, _, _ = harness.run_single(one_step, cfg.seed, cfg.strategy,
                                      cfg.keep_fraction, None)
    print(f"per-step analytic FLOPs ({cfg.task}/{cfg.model}, strategy {cfg.strategy}):")
    for kind, count in report.flop_counters.items():
        print(f"  {kind:<12} {count}")
    print(f"  {'model total':<12} {report.model_flops}")
    total = report.model_flops * cfg.steps
    sel = report.selection_flops * cfg.steps
    print(f"extrapolated over {cfg.steps} steps: model {total}, selection {sel}"
          f" ({100.0 * sel / total if total else 0.0:.4f}%)")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "compare": cmd_compare,
        "sweep-mask": cmd_sweep_mask,
        "sweep-drop": cmd_sweep_drop,
        "grad-check": cmd_grad_check,
        "saliency-check": cmd_saliency_check,
        "flops": cmd_flops,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
