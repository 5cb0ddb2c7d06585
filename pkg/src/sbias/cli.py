"""Command-line entry point ``sb``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attacks import AttackConfig, adversarial_train, uap
from .datagen import SpecificationError, generate_dataset, load_dataset, preset, save_dataset
from .harness import ConfigError, RunManifest, config_hash, default_config, emit_report, load_config, run_experiment
from .lsn_theory import verify_theorem
from .metrics import evaluate
from .mlp import DivergenceError, InitSpec, OptimizerSpec, TrainConfig, init_model, load_model, save_model, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _arch(text: str) -> tuple[int, int]:
    try:
        w, dep = text.lower().split("x")
        return int(w), int(dep)
    except ValueError:
        raise argparse.ArgumentTypeError(f"architecture must look like 100x1, got {text!r}")


def _robust_list(text: str) -> list[tuple[str, float]]:
    out = []
    for item in filter(None, text.split(",")):
        norm, _, delta = item.partition(":")
        out.append((norm.lower(), float(delta)))
    return out


def _write_json(obj, path) -> None:
    if path is None:
        print(json.dumps(obj, indent=2, sort_keys=True))
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--arch", type=_arch, default=(100, 1))
    p.add_argument("--activation", default="relu")
    p.add_argument("--loss", default="logistic", choices=["logistic", "hinge"])
    p.add_argument("--opt", default="sgd:0.1", help="optimizer:learning_rate, e.g. sgd:0.1 or adam:0.001")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--wd", type=float, default=5e-7)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--init", default="kaiming")
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _train_setup(args):
    data = load_dataset(args.data)
    model = init_model(data.d, args.arch, InitSpec(args.init, args.init_scale), seed=args.seed,
                       activation=args.activation)
    opt = OptimizerSpec.parse(args.opt, momentum=args.momentum, weight_decay=args.wd)
    cfg = TrainConfig(loss=args.loss, optimizer=opt, batch_size=args.batch, epochs=args.epochs,
                      max_steps=args.max_steps, dropout=args.dropout, seed=args.seed)
    return data, model, cfg


def _finish_train(model, hist, out) -> int:
    save_model(model, out)
    print(json.dumps(hist.to_dict(), sort_keys=True))
    if hist.diverged:
        raise DivergenceError("training diverged")
    return EXIT_OK


def cmd_gen(args) -> int:
    kw = {}
    if args.noise is not None:
        kw["noise"] = args.noise
    if args.gamma is not None:
        kw["gamma"] = args.gamma
    rot = args.rotation_seed if args.rotation_seed is not None else (args.seed if args.rotate else None)
    spec = preset(args.preset, args.d, rotation_seed=rot, **kw)
    data = generate_dataset(spec, args.n, args.seed)
    bin_path, meta_path = save_dataset(data, args.out)
    print(json.dumps({"features": str(bin_path), "header": str(meta_path), "n": data.n, "d": data.d}))
    return EXIT_OK


def cmd_train(args) -> int:
    data, model, cfg = _train_setup(args)
    model, hist = train(model, data, cfg)
    return _finish_train(model, hist, args.out)


def cmd_advtrain(args) -> int:
    data, model, cfg = _train_setup(args)
    step = args.attack_step_size if args.attack_step_size is not None else 2.5 * args.eps / args.attack_steps
    atk = AttackConfig(args.norm, args.eps, args.attack_steps, step if step > 0 else 0.1, seed=args.seed)
    model, hist = adversarial_train(model, data, atk, cfg)
    return _finish_train(model, hist, args.out)


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = load_dataset(args.data)
    groups = [g for g in args.groups.split(",") if g]
    report = evaluate(model, data, groups, args.repeats, args.seed, _robust_list(args.robust or ""))
    out = report.to_dict()
    out["config_hash"] = config_hash({"model": str(args.model), "data": str(args.data), "groups": groups,
                                      "repeats": args.repeats, "seed": args.seed, "robust": args.robust})
    _write_json(out, args.out)
    return EXIT_OK


def cmd_uap(args) -> int:
    model = load_model(args.model)
    data = load_dataset(args.data)
    cfg = AttackConfig(args.norm, args.budget, args.steps, args.step_size)
    res = uap(model, data, cfg, per_class=args.per_class, method=args.method, max_passes=args.passes)
    _write_json(res.to_dict(), args.out)
    return EXIT_OK


def cmd_theory(args) -> int:
    rep = verify_theorem(d=args.d, k=args.k, eta=args.eta, c=args.c, t_steps=args.steps, seed=args.seed,
                         n_test=args.n_test)
    _write_json(rep.to_dict(), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(args.experiment).validate()
    if args.experiment and cfg.experiment != args.experiment:
        raise ConfigError(f"--experiment {args.experiment} does not match config experiment {cfg.experiment}")
    manifest = run_experiment(cfg)
    for p in emit_report(manifest, args.out):
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    manifest = RunManifest.load(args.manifest)
    for p in emit_report(manifest, args.out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sb", description="Simplicity-bias testbed")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--preset", required=True)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotate", action="store_true", help="apply a random rotation seeded by --seed")
    p.add_argument("--rotation-seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an MLP on a dataset file")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("advtrain", help="PGD adversarial training")
    _add_train_args(p)
    p.add_argument("--norm", default="l2", choices=["l2", "linf"])
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--attack-steps", type=int, default=40)
    p.add_argument("--attack-step-size", type=float)
    p.set_defaults(func=cmd_advtrain)

    p = sub.add_parser("eval", help="standard, randomized and robust metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--groups", default="S,Sc")
    p.add_argument("--robust", default="", help="comma list of norm:budget, e.g. l2:0.1,l2:0.3")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uap", help="universal adversarial perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--norm", default="l2", choices=["l2", "linf"])
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=400, help="steps for the ascent method")
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--method", default="ascent", choices=["deepfool", "ascent"])
    p.add_argument("--passes", type=int, default=5, help="data passes for the deepfool method")
    p.add_argument("--out")
    p.set_defaults(func=cmd_uap)

    p = sub.add_parser("theory", help="check weight trajectories on LSN against the predicted bands")
    p.add_argument("--d", type=int, default=400)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--eta", type=float, default=0.4)
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-test", type=int, default=100_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--experiment")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-emit CSV tables from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "run" and not (args.experiment or args.config):
        print("sb run: give --experiment or --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"sb: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FloatingPointError as exc:
        print(f"sb: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"sb: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SpecificationError, ValueError, KeyError) as exc:
        print(f"sb: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
