"""Command-line entry point: ``dfan {synth,train,eval,gradcheck,ablate,sweep}``.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O or
input-file error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data as D
from .evaluation import (
    DEFAULT_BETA_GRID,
    DEFAULT_GAMMA_GRID,
    DEFAULT_PLAN,
    LOSS_VARIANTS,
    MODULE_VARIANTS,
    ablation_csv,
    evaluate,
    run_ablation,
    sweep,
    sweep_csv,
    variant_config,
)
from .gradcheck import gradient_check
from .inference import BETA_PRESETS, CombineConfig
from .model import ATTENTION_AXES, ConfigError, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# flag name -> (TrainConfig field, type)
HYPER_FLAGS = {
    "lambda": ("lam", float),
    "beta1": ("beta1", float),
    "beta2": ("beta2", float),
    "gamma": ("gamma", float),
    "epochs": ("epochs", int),
    "batch": ("batch_size", int),
    "lr": ("lr", float),
    "wd": ("weight_decay", float),
    "hidden1": ("hidden1", int),
    "hidden2": ("hidden2", int),
    "seed": ("seed", int),
    "attention_axis": ("attention_axis", str),
}
PATH_FLAGS = ("features_train", "features_test_seen", "features_test_unseen", "semantic", "split", "checkpoint", "out")


@dataclass
class RunConfig:
    features_train: str | None = None
    features_test_seen: str | None = None
    features_test_unseen: str | None = None
    semantic: str | None = None
    split: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    train: TrainConfig = None

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig()


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", help="directory written by 'dfan synth'; fills any unset data path")
    g.add_argument("--features-train")
    g.add_argument("--features-test-seen")
    g.add_argument("--features-test-unseen")
    g.add_argument("--semantic", help="semantic matrix file; manifest is <stem>.manifest.txt")
    g.add_argument("--split", help="JSON split {'seen': [...], 'unseen': [...]}")


def _add_hyper_flags(p):
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    g.add_argument("--lambda", type=float, dest="lambda")
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--beta-preset", choices=sorted(BETA_PRESETS))
    g.add_argument("--gamma", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--wd", type=float)
    g.add_argument("--hidden1", type=int)
    g.add_argument("--hidden2", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--attention-axis", choices=ATTENTION_AXES)
    g.add_argument("--normalize-input", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic zero-shot dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-seen", type=int, default=10)
    p.add_argument("--n-unseen", type=int, default=5)
    p.add_argument("--samples-per-class", type=int, default=30)
    p.add_argument("--attributes", "-M", type=int, default=20)
    p.add_argument("--regions", "-N", type=int, default=9)
    p.add_argument("--dim", "-D", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("train", help="train the head and write a checkpoint")
    _add_data_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.add_argument("--out", help="also write the JSON-lines training log here")

    p = sub.add_parser("eval", help="evaluate a checkpoint (JSON report on stdout)")
    _add_data_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--regions", "-N", type=int, default=6)
    p.add_argument("--dim", "-D", type=int, default=8)
    p.add_argument("--attributes", "-M", type=int, default=4)
    p.add_argument("--n-seen", type=int, default=3)
    p.add_argument("--lambda", type=float, default=0.1, dest="lambda")
    p.add_argument("--attention-axis", choices=ATTENTION_AXES, default="region")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", metavar="GROUP", help=argparse.SUPPRESS)

    p = sub.add_parser("ablate", help="module and loss-term ablation tables (CSV)")
    _add_data_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--plan", help=f"comma-separated variants (default: {','.join(DEFAULT_PLAN)})")
    p.add_argument("--select-gamma", action="store_true", help="report each row at its best gamma on the default grid")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="beta1 or gamma sweep of one trained model (CSV)")
    _add_data_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--axis", choices=("beta", "gamma"), required=True)
    p.add_argument("--grid", help="comma-separated values (default depends on axis)")
    p.add_argument("--checkpoint", help="sweep this checkpoint instead of training")
    p.add_argument("--out")
    return parser


# -- config assembly ----------------------------------------------------------------


def _normalise_key(k: str) -> str:
    return k.lstrip("-").replace("-", "_")


def run_config(args) -> RunConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}", EXIT_CONFIG) from exc
        if not isinstance(file_cfg, dict):
            raise CliError(f"config {args.config} must hold a JSON object", EXIT_CONFIG)
        file_cfg = {_normalise_key(k): v for k, v in file_cfg.items()}
    known = set(HYPER_FLAGS) | set(PATH_FLAGS) | {"data_dir", "normalize_input", "beta_preset"}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_CONFIG)

    merged = dict(file_cfg)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value

    tc = TrainConfig()
    preset = merged.get("beta_preset")
    if preset is not None:
        if preset not in BETA_PRESETS:
            raise CliError(f"unknown beta preset {preset!r}", EXIT_CONFIG)
        tc.beta1, tc.beta2 = BETA_PRESETS[preset]
    for flag, (attr, typ) in HYPER_FLAGS.items():
        if flag in merged and merged[flag] is not None:
            try:
                setattr(tc, attr, typ(merged[flag]))
            except (TypeError, ValueError) as exc:
                raise CliError(f"bad value for {flag}: {merged[flag]!r}", EXIT_CONFIG) from exc
    if merged.get("normalize_input"):
        tc.normalize_input = True
    try:
        tc.validate()
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc

    rc = RunConfig(train=tc, **{k: merged.get(k) for k in PATH_FLAGS})
    data_dir = merged.get("data_dir")
    if data_dir:
        defaults = {
            "features_train": D.SYNTH_FILES["train"],
            "features_test_seen": D.SYNTH_FILES["test_seen"],
            "features_test_unseen": D.SYNTH_FILES["test_unseen"],
            "semantic": D.SYNTH_FILES["semantic"],
            "split": D.SYNTH_FILES["split"],
        }
        for k, name in defaults.items():
            if getattr(rc, k) is None:
                setattr(rc, k, str(Path(data_dir) / name))
    return rc


def _require(rc: RunConfig, *names):
    missing = [n for n in names if getattr(rc, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise CliError(f"missing required input: {flags}", EXIT_CONFIG)


def load_data(rc: RunConfig, need_train=True) -> D.ZSLData:
    _require(rc, "semantic", "split", "features_test_seen", "features_test_unseen")
    if need_train:
        _require(rc, "features_train")
    try:
        sm = D.load_semantic_matrix(rc.semantic)
        split = D.read_split(rc.split, sm)
        train_ds = D.read_feature_file(rc.features_train, "train") if need_train else None
        seen = D.read_feature_file(rc.features_test_seen, "test-seen")
        unseen = D.read_feature_file(rc.features_test_unseen, "test-unseen")
        D.validate_split(split, sm, train_ds)
    except (OSError, D.FormatError, D.ConsistencyError, D.SplitError) as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return D.ZSLData(sm, split, train_ds, seen, unseen)


def _emit(text: str, out: str | None):
    sys.stdout.write(text)
    if out:
        try:
            Path(out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from exc


def _check_writable(out: str | None):
    if out is None:
        return
    target = Path(out)
    parent = target.parent if str(target.parent) else Path(".")
    if target.is_dir() or not parent.is_dir() or not os.access(parent, os.W_OK):
        raise CliError(f"cannot write {out}", EXIT_IO)
    if target.exists() and not os.access(target, os.W_OK):
        raise CliError(f"cannot write {out}", EXIT_IO)


def _parse_grid(text: str | None, default) -> list[float]:
    if text is None:
        return list(default)
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"bad grid {text!r}", EXIT_CONFIG) from exc
    if not grid:
        raise CliError("grid is empty", EXIT_CONFIG)
    return grid


# -- commands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = D.SynthSpec(
        n_seen=args.n_seen,
        n_unseen=args.n_unseen,
        samples_per_class=args.samples_per_class,
        M=args.attributes,
        N=args.regions,
        D=args.dim,
        sigma=args.sigma,
        seed=args.seed,
        test_fraction=args.test_fraction,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    data = D.generate_synthetic(spec)
    try:
        paths = D.write_synthetic(data, args.out_dir)
    except OSError as exc:
        raise CliError(f"cannot write synthetic data: {exc}", EXIT_IO) from exc
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = run_config(args)
    _require(rc, "checkpoint")
    _check_writable(rc.checkpoint)
    data = load_data(rc, need_train=True)
    sink = None
    if rc.out:
        try:
            sink = open(rc.out, "w", encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {rc.out}: {exc}", EXIT_IO) from exc

    def emit(entry):
        line = json.dumps(entry)
        print(line, flush=True)
        if sink:
            sink.write(line + "\n")

    try:
        try:
            params, _ = train(data.train, data.semantic, data.split, rc.train, log=emit)
        except ConfigError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from exc
        try:
            save_checkpoint(params, rc.checkpoint)
        except OSError as exc:
            raise CliError(f"cannot write checkpoint {rc.checkpoint}: {exc}", EXIT_IO) from exc
        emit({"checkpoint": str(rc.checkpoint)})
    finally:
        if sink:
            sink.close()
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, D.FormatError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_IO) from exc


def cmd_eval(args) -> int:
    rc = run_config(args)
    _require(rc, "checkpoint")
    params = _load_checkpoint(rc.checkpoint)
    data = load_data(rc, need_train=False)
    tc = rc.train
    if params.M != data.semantic.n_attributes:
        raise CliError(
            f"checkpoint predicts {params.M} attributes, semantic matrix has {data.semantic.n_attributes}", EXIT_IO
        )
    report = evaluate(
        params,
        [data.test_seen, data.test_unseen],
        data.split,
        data.semantic,
        CombineConfig(tc.beta1, tc.beta2, tc.gamma),
        tc.attention_axis,
        tc.normalize_input,
        echo={"lam": tc.lam, "seed": tc.seed, "checkpoint": str(rc.checkpoint)},
    )
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", rc.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        result = gradient_check(
            N=args.regions,
            D=args.dim,
            M=args.attributes,
            n_seen=args.n_seen,
            lam=getattr(args, "lambda"),
            attention_axis=args.attention_axis,
            seed=args.seed,
            corrupt=args.corrupt,
        )
    except (KeyError, ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    print(result.table())
    print(f"{'PASS' if result.passed else 'FAIL'} in {result.seconds:.2f}s")
    return EXIT_OK if result.passed else EXIT_CHECK


def cmd_ablate(args) -> int:
    rc = run_config(args)
    _check_writable(rc.out)
    plan = [v.strip() for v in args.plan.split(",") if v.strip()] if args.plan else list(DEFAULT_PLAN)
    if not plan:
        raise CliError("ablation plan is empty", EXIT_CONFIG)
    try:
        for name in plan:
            variant_config(name, rc.train)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    data = load_data(rc, need_train=True)
    grid = DEFAULT_GAMMA_GRID if args.select_gamma else None
    try:
        rows = run_ablation(plan, data, rc.train, gamma_grid=grid)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    module_rows = [r for r in rows if r.variant in MODULE_VARIANTS]
    loss_rows = [r for r in rows if r.variant in LOSS_VARIANTS]
    if args.plan is None:
        text = ablation_csv(module_rows) + "\n" + ablation_csv(loss_rows)
    else:
        text = ablation_csv(rows)
    _emit(text, rc.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = run_config(args)
    _check_writable(rc.out)
    grid = _parse_grid(args.grid, DEFAULT_BETA_GRID if args.axis == "beta" else DEFAULT_GAMMA_GRID)
    data = load_data(rc, need_train=rc.checkpoint is None)
    model = _load_checkpoint(rc.checkpoint) if rc.checkpoint else None
    try:
        points = sweep(args.axis, grid, rc.train, data, model=model)
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    _emit(sweep_csv(args.axis, points), rc.out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"dfan {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
