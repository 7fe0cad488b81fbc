"""Command-line entry point.

    isoprop generate OUT [--topology segregated --seed 3 ...]
    isoprop train   --config cfg.json [--epochs 10 --lr 1e-3 ...]
    isoprop eval    --checkpoint RUN/checkpoint [--protocols gzsl zsl --hit-at-k 1 2]
    isoprop ablate  --config cfg.json --variants full no-propagation --seeds 5
    isoprop sweep   --config cfg.json --param steps --values 0 1 2 3
    isoprop gradcheck

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from isoprop import __version__, kernels
from isoprop.datasets import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from isoprop.errors import ConfigError, IsopropError, ManifestError, NumericError
from isoprop.evaluation import PROTOCOLS, evaluate, export_prototypes, test_time_trace
from isoprop.experiments import SWEEP_PARAMS, ablation, parse_threshold, sweep
from isoprop.gradcheck import TOLERANCE, run_gradcheck
from isoprop.model import load_checkpoint, save_checkpoint
from isoprop.training import VARIANTS, FitResult, Hyperparams, OptimizerState, fit

FIGURE3_VARIANTS = ("full", "visual-proto-only", "semantic-proto-only", "no-propagation",
                    "visual-prop-only", "semantic-prop-only", "shared-attention-visual",
                    "shared-attention-semantic", "no-consistency")


@dataclass
class RunConfig:
    dataset: str | None = None
    synthetic: dict | None = None
    hyperparams: dict = field(default_factory=dict)
    variant: str = "full"
    output_dir: str = "runs/default"
    protocols: list = field(default_factory=lambda: ["gzsl", "zsl"])
    hit_at_k: list = field(default_factory=list)
    zsl_context: str = "all"
    export_prototypes: bool = False
    eval_every: int = 0
    variants: list = field(default_factory=lambda: list(FIGURE3_VARIANTS))
    seeds: int = 1
    workers: int = 1
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def validate(self, need_dataset=True):
        if need_dataset and (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("specify exactly one dataset source: 'dataset' or 'synthetic'")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        return self

    def hp(self):
        d = dict(self.hyperparams)
        if "edge_threshold" in d:
            d["edge_threshold"] = parse_threshold(d["edge_threshold"])
        return Hyperparams.from_dict(d)

    def load_data(self):
        if self.dataset is not None:
            return load_dataset(self.dataset)
        return generate_synthetic(SyntheticSpec(**self.synthetic))

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# argument plumbing

def _flag(name):
    return "--" + name.replace("_", "-")


def _add_hp_flags(p):
    g = p.add_argument_group("hyperparameters (override the config file)")
    for f in fields(Hyperparams):
        kind = type(f.default)
        if f.name == "edge_threshold":
            g.add_argument(_flag(f.name), dest=f"hp_{f.name}", type=parse_threshold, metavar="X|cosNN")
        elif kind is bool:
            g.add_argument(_flag(f.name), dest=f"hp_{f.name}", type=lambda s: s.lower() in ("1", "true", "yes"))
        else:
            g.add_argument(_flag(f.name), dest=f"hp_{f.name}", type=kind)


def _add_common(p, dataset=True):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--output-dir", type=Path)
    if dataset:
        p.add_argument("--dataset", type=Path, help="dataset directory (overrides the config)")
    _add_hp_flags(p)


def _load_config(args, need_dataset=True):
    raw = {}
    if getattr(args, "config", None) is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from exc
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "dataset", None) is not None:
        cfg.dataset, cfg.synthetic = str(args.dataset), None
    if getattr(args, "output_dir", None) is not None:
        cfg.output_dir = str(args.output_dir)
    for f in fields(Hyperparams):
        v = getattr(args, f"hp_{f.name}", None)
        if v is not None:
            cfg.hyperparams[f.name] = v
    for key in ("variant", "protocols", "hit_at_k", "zsl_context", "export_prototypes", "eval_every",
                "variants", "seeds", "workers"):
        v = getattr(args, key, None)
        if v is not None and v is not False:
            setattr(cfg, key, v)
    return cfg.validate(need_dataset)


def _write_run_record(out, command, cfg, hp):
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config_hash": cfg.digest(), "seed": hp.seed,
              "version": __version__, "kernel_backend": kernels.BACKEND, "config": asdict(cfg),
              "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), quoting=csv.QUOTE_MINIMAL)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands

def cmd_generate(args):
    spec = SyntheticSpec()
    if args.config is not None:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        spec = SyntheticSpec(**(cfg.synthetic or {}))
    for f in fields(SyntheticSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(spec, f.name, v)
    ds = generate_synthetic(spec)
    out = save_dataset(ds, args.out)
    print(f"wrote {out}: {ds.n_samples} samples, {ds.n_classes} classes "
          f"({len(ds.split.seen)} seen / {len(ds.split.unseen)} unseen), topology={spec.topology}, "
          f"train={ds.split.train.size} test_seen={ds.split.test_seen.size} "
          f"test_unseen={ds.split.test_unseen.size}")
    return 0


def _resume_state(path, hp):
    params, manifest = load_checkpoint(path)
    if "optimizer" not in manifest or "rng_state" not in manifest:
        raise ManifestError(f"{path} holds no optimizer/RNG state to resume from")
    opt = OptimizerState.load(path, manifest["optimizer"])
    log = manifest.get("log", [])
    return FitResult(params, log, opt, manifest["rng_state"], manifest["epoch"], manifest["variant"])


def cmd_train(args):
    cfg = _load_config(args)
    hp = cfg.hp()
    ds = cfg.load_data()
    out = Path(cfg.output_dir)
    _write_run_record(out, "train", cfg, hp)
    log_path = out / "train_log.jsonl"
    evals = []

    def periodic(record, params):
        if cfg.eval_every and record["epoch"] % cfg.eval_every == 0:
            rep = evaluate(params, hp, ds, "gzsl", cfg.variant)
            evals.append({"epoch": record["epoch"], **rep.to_dict()})
            print(f"epoch {record['epoch']}: S={rep.acc_seen:.4f} U={rep.acc_unseen:.4f} "
                  f"H={rep.harmonic:.4f}", file=sys.stderr)

    resume = _resume_state(args.resume, hp) if args.resume else None
    last = {"epoch": resume.epochs_done if resume else 0}

    def track(record, params):
        last["epoch"] = record["epoch"]

    try:
        result = fit(ds, hp, cfg.variant, callbacks=(track, periodic), resume=resume)
    except NumericError as exc:
        raise NumericError(f"training diverged after epoch {last['epoch']} (last finite): {exc}") from exc
    with open(log_path, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    extra = {"variant": cfg.variant, "hyperparams": hp.to_dict(), "epoch": result.epochs_done,
             "rng_state": _jsonable(result.rng_state), "log": _jsonable(result.log),
             "dataset": {"path": cfg.dataset} if cfg.dataset else {"synthetic": cfg.synthetic},
             "dims": {"d_feat": ds.d_feat, "d_attr": ds.d_attr}, "version": __version__}
    save_checkpoint(out / "checkpoint", result.params, extra, result.optimizer)
    if evals:
        (out / "periodic_eval.json").write_text(json.dumps(evals, indent=1))
    final = result.log[-1] if result.log else {}
    print(f"trained {result.epochs_done} epochs ({cfg.variant}); final "
          + " ".join(f"{k}={v:.4g}" for k, v in final.items() if k in ("ce", "consistency", "query_acc")))
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args):
    params, manifest = load_checkpoint(args.checkpoint)
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = RunConfig.from_dict(raw)
    if args.dataset is not None:
        cfg.dataset, cfg.synthetic = str(args.dataset), None
    elif cfg.dataset is None and cfg.synthetic is None:
        src = manifest.get("dataset", {})
        cfg.dataset, cfg.synthetic = src.get("path"), src.get("synthetic")
    cfg.variant = args.variant or manifest.get("variant", cfg.variant)
    for key in ("protocols", "hit_at_k", "zsl_context"):
        v = getattr(args, key)
        if v:
            setattr(cfg, key, v)
    cfg.export_prototypes = cfg.export_prototypes or args.export_prototypes
    cfg.output_dir = str(args.output_dir or Path(args.checkpoint).parent)
    cfg.hyperparams = {**manifest.get("hyperparams", {}), **cfg.hyperparams}
    cfg.validate()
    hp = cfg.hp()
    ds = cfg.load_data()
    d_feat, d_attr = params["W"].shape[1], params["experts.0.weight"].shape[1]
    if (d_feat, d_attr) != (ds.d_feat, ds.d_attr) or params["W"].shape[0] != hp.d:
        raise ManifestError(f"checkpoint expects d_feat={d_feat}, d_attr={d_attr}, d={params['W'].shape[0]}; "
                            f"dataset has d_feat={ds.d_feat}, d_attr={ds.d_attr}, config d={hp.d}")
    reports = {}
    for protocol in cfg.protocols:
        rep = evaluate(params, hp, ds, protocol, cfg.variant, cfg.zsl_context,
                       ks=cfg.hit_at_k if protocol == "zsl" else None)
        reports[protocol] = rep.to_dict()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(reports, indent=1, sort_keys=True)
    (out / "eval.json").write_text(text)
    if cfg.export_prototypes:
        trace, _ = test_time_trace(params, hp, ds, cfg.variant)
        export_prototypes(trace, out / "prototypes.csv", list(ds.class_names))
    print(text)
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    hp = cfg.hp()
    ds = cfg.load_data()
    out = Path(cfg.output_dir)
    _write_run_record(out, "ablate", cfg, hp)
    rows, runs = ablation(ds, hp, cfg.variants, cfg.seeds, cfg.workers)
    _write_csv(out / "ablation.csv", rows)
    (out / "ablation_runs.json").write_text(json.dumps(_jsonable(runs), indent=1))
    for r in rows:
        print(f"{r['variant']:<26} S={r['S_mean']:.4f} U={r['U_mean']:.4f} H={r['H_mean']:.4f}")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    hp = cfg.hp()
    param = args.param or cfg.sweep.get("param")
    if param is None:
        raise ConfigError(f"--param required; valid parameters: {', '.join(SWEEP_PARAMS)}")
    values = args.values or cfg.sweep.get("values", [])
    from isoprop.experiments import parse_sweep_values
    parse_sweep_values(param, values)
    ds = cfg.load_data()
    out = Path(cfg.output_dir)
    _write_run_record(out, "sweep", cfg, hp)
    rows = sweep(ds, hp, param, values, cfg.workers)
    _write_csv(out / f"sweep_{param}.csv", rows)
    for r in rows:
        print(f"{param}={r['value']:.6g} S={r['S']:.4f} U={r['U']:.4f} H={r['H']:.4f}")
    return 0


def cmd_gradcheck(args):
    hook = None
    if args.corrupt:
        def hook(name, grad):
            return grad + 1e-2 if name == "W" else grad
    start = time.perf_counter()
    report = run_gradcheck(args.seed, args.h, hook)
    ok = all(err <= TOLERANCE for err in report.values())
    for group, err in report.items():
        print(f"{group:<8} max_rel_err={err:.3e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    print(f"{'PASS' if ok else 'FAIL'} (tolerance {TOLERANCE:g}, {time.perf_counter() - start:.1f}s)")
    return 0 if ok else NumericError.exit_code


# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="isoprop", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--config", type=Path)
    for f in fields(SyntheticSpec):
        if f.name == "topology":
            p.add_argument("--topology", choices=("mixed", "segregated"))
        else:
            p.add_argument(_flag(f.name), dest=f.name, type=type(f.default))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="episodic training; writes checkpoint and log")
    _add_common(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--protocols", nargs="+", choices=PROTOCOLS)
    p.add_argument("--hit-at-k", nargs="+", type=int)
    p.add_argument("--zsl-context", choices=("all", "unseen"))
    p.add_argument("--export-prototypes", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate several variants under shared seeds")
    _add_common(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--seeds", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train and evaluate across values of one hyperparameter")
    _add_common(p)
    p.add_argument("--param")
    p.add_argument("--values", nargs="+")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except IsopropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
