"""Command line interface: train, eval, cost, gradcheck, oracle."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import checks
from .cost import CountingConvention, compare_schedules, emit_table, model_cost
from .data import SyntheticTaskSpec, generate
from .encoder import (build, config_from_manifest, load_model, parse_manifest)
from .train import TrainConfig, evaluate, train


def _load_manifest(path: str) -> dict[str, str]:
    with open(path) as f:
        return parse_manifest(f.read())


def _task_spec(task: str, kv: dict[str, str], cfg, input_shape,
               seed: int) -> SyntheticTaskSpec:
    common = dict(seed=seed, classes=cfg.num_classes)
    if task == "freq1d":
        return SyntheticTaskSpec(kind="freq1d", length=int(input_shape),
                                 snr=float(kv.get("task.snr", "inf")), **common)
    if task == "pattern2d":
        return SyntheticTaskSpec(kind="pattern2d", grid=tuple(input_shape),
                                 snr=float(kv.get("task.snr", "inf")), **common)
    if task == "multilabel":
        occ = tuple(int(x) for x in kv.get("task.occurrences", "4,12").split(","))
        return SyntheticTaskSpec(
            kind="multilabel", length=int(input_shape),
            labels_per_sample=int(kv.get("task.labels_per_sample", "3")),
            noise_symbols=int(kv.get("task.noise_symbols", "8")),
            occurrences=occ, **common)
    raise SystemExit(f"unknown task {task!r}")


def _train_config(kv: dict[str, str], task: str, seed: int) -> TrainConfig:
    return TrainConfig(
        lr_peak=float(kv.get("train.lr_peak", "1e-3")),
        warmup_epochs=int(kv.get("train.warmup_epochs", "3")),
        total_epochs=int(kv.get("train.total_epochs", "30")),
        weight_decay=float(kv.get("train.weight_decay", "0.05")),
        batch_size=int(kv.get("train.batch_size", "32")),
        label_smoothing=float(kv.get("train.label_smoothing", "0.0")),
        loss_kind="wbce" if task == "multilabel" else "ce",
        bce_alpha=float(kv.get("train.bce_alpha", "0.5")),
        seed=seed,
    )


_POLICY_FLAGS = {"mixed": "mixed", "alldot": "alldot", "allapprox": "allapprox"}
_MERGE_FLAGS = {"conv": "conv", "pool": "pool", "linear": "linear"}
_PSI_FLAGS = {"elu": "elu", "relu": "relu", "softplus": "softplus"}


def _apply_overrides(cfg, args):
    from dataclasses import replace
    if getattr(args, "policy", None):
        cfg = replace(cfg, attention_policy=_POLICY_FLAGS[args.policy])
    if getattr(args, "merge", None):
        cfg = replace(cfg, reduction=_MERGE_FLAGS[args.merge])
    if getattr(args, "psi", None):
        cfg = replace(cfg, feature_map=_PSI_FLAGS[args.psi])
    return cfg


def cmd_train(args) -> int:
    kv = _load_manifest(args.config)
    cfg, input_shape = config_from_manifest(kv)
    cfg = _apply_overrides(cfg, args)
    spec = _task_spec(args.task, kv, cfg, input_shape, args.seed)
    n_train = int(kv.get("train.n_train", "2000"))
    n_test = int(kv.get("train.n_test", "500"))
    train_ds = generate(spec, n_train)
    from dataclasses import replace as dc_replace
    test_ds = generate(dc_replace(spec, seed=spec.seed + 1), n_test)
    tcfg = _train_config(kv, args.task, args.seed)

    model = build(cfg, input_shape, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)

    def log(entry):
        msg = f"epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}"
        for k in ("top1", "ebf", "mif"):
            if k in entry:
                msg += f"  {k} {entry[k]:.4f}"
        print(msg, flush=True)

    history = train(model, train_ds, tcfg, val_ds=test_ds, out_dir=args.out, log=log)

    # carry task/train settings into the checkpoint manifest so `eval`
    # regenerates the same data distribution
    ckpt_manifest = os.path.join(args.out, "checkpoint", "manifest.txt")
    with open(ckpt_manifest, "a") as f:
        for key in sorted(kv):
            if key.startswith(("task.", "train.")):
                f.write(f"{key} = {kv[key]}\n")

    keys = sorted({k for h in history for k in h})
    with open(os.path.join(args.out, "history.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(history)
    from .plots import save_training_curves
    save_training_curves(history, os.path.join(args.out, "training_curves.png"))
    print(f"checkpoint and reports written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    kv = _load_manifest(os.path.join(args.checkpoint, "manifest.txt"))
    from dataclasses import replace as dc_replace
    spec = _task_spec(args.task, kv, model.config, model.input_shape, args.seed)
    ds = generate(dc_replace(spec, seed=spec.seed + 1),
                  int(kv.get("train.n_test", "500")))
    m = evaluate(model, ds)
    if model.config.multilabel:
        print(f"ebf {m.ebf:.4f}")
        print(f"mif {m.mif:.4f}")
    else:
        print(f"top1 {m.top1:.4f}")
    return 0


def cmd_cost(args) -> int:
    kv = _load_manifest(args.config)
    cfg, input_shape = config_from_manifest(kv)
    cfg = _apply_overrides(cfg, args)
    if args.tokens:
        if cfg.stem.kind != "seq1d":
            raise SystemExit("--tokens only applies to seq1d configs")
        input_shape = args.tokens
    conv = CountingConvention()
    if args.compare:
        reports = compare_schedules(cfg, input_shape, conv)
    else:
        reports = [(cfg.attention_policy, model_cost(cfg, input_shape, conv))]
    sys.stdout.write(emit_table(reports, args.format))
    if args.figure:
        from .plots import save_cost_figure
        save_cost_figure(reports, args.figure)
        print(f"figure written to {args.figure}", file=sys.stderr)
    return 0


_GRADCHECK_TOL = 1e-4


def cmd_gradcheck(args) -> int:
    batteries = {
        "ops": checks.gradcheck_ops,
        "attention": checks.gradcheck_attention,
        "reduction": checks.gradcheck_reduction,
        "encoder": checks.gradcheck_encoder,
    }
    selected = batteries if args.module == "all" else {args.module: batteries[args.module]}
    failed = False
    for name, fn in selected.items():
        for check, err in fn().items():
            ok = err <= _GRADCHECK_TOL
            failed |= not ok
            print(f"{name}/{check}: max_rel_err {err:.3e} "
                  f"{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_oracle(args) -> int:
    failed = False
    for fm, err in checks.oracle_attention(trials=args.trials).items():
        ok = err <= 1e-10
        failed |= not ok
        print(f"approx_attention[{fm}] vs naive: {err:.3e} {'ok' if ok else 'FAIL'}")
    tau_err = checks.oracle_tau_invariance(trials=max(1, args.trials // 2))
    ok = tau_err <= 1e-10
    failed |= not ok
    print(f"tau invariance: {tau_err:.3e} {'ok' if ok else 'FAIL'}")
    for name, err in checks.oracle_conv(trials=max(1, args.trials // 10)).items():
        ok = err <= 1e-12
        failed |= not ok
        print(f"{name} vs loop oracle: {err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lre",
                                 description="Long-range encoder toolkit")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train on a synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True,
                   choices=["freq1d", "pattern2d", "multilabel"])
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=list(_POLICY_FLAGS))
    p.add_argument("--merge", choices=list(_MERGE_FLAGS))
    p.add_argument("--psi", choices=list(_PSI_FLAGS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True,
                   choices=["freq1d", "pattern2d", "multilabel"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cost", help="analytic cost report")
    p.add_argument("--config", required=True)
    p.add_argument("--tokens", type=int)
    p.add_argument("--compare", action="store_true")
    p.add_argument("--format", default="csv", choices=["csv", "markdown"])
    p.add_argument("--figure", help="also render a bar-chart PNG")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all",
                   choices=["all", "ops", "attention", "reduction", "encoder"])
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle", help="attention/conv oracle equivalence suites")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(fn=cmd_oracle)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
