"""Train-then-evaluate runs shared by the ablation and sweep commands."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from isoprop.errors import ConfigError
from isoprop.evaluation import evaluate
from isoprop.training import VARIANTS, Hyperparams, fit

VARIANT_GROUPS = {
    "full": "full",
    "visual-proto-only": "prototypes",
    "semantic-proto-only": "prototypes",
    "no-propagation": "propagation",
    "visual-prop-only": "propagation",
    "semantic-prop-only": "propagation",
    "shared-attention-visual": "alignment",
    "shared-attention-semantic": "alignment",
    "no-consistency": "alignment",
}

SWEEP_PARAMS = ("gamma", "edge_threshold", "steps", "ways", "shots", "weight_decay",
                "consistency_weight", "init_neighbors")

THRESHOLD_PRESETS = ("cos30", "cos40", "cos50")


def parse_threshold(value):
    """Accept a number or ``cosNN`` (cosine of NN degrees)."""
    if isinstance(value, str) and value.lower().startswith("cos"):
        return math.cos(math.radians(float(value[3:])))
    return float(value)


def parse_sweep_values(param, values):
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; valid parameters: {', '.join(SWEEP_PARAMS)}")
    if not values:
        if param != "edge_threshold":
            raise ConfigError(f"no values given for sweep over {param}")
        values = THRESHOLD_PRESETS
    if param == "edge_threshold":
        return [parse_threshold(v) for v in values]
    kind = type(getattr(Hyperparams(), param))
    try:
        return [kind(v) if kind is not int else int(float(v)) for v in values]
    except ValueError as exc:
        raise ConfigError(f"bad value for {param}: {exc}") from exc


def train_and_eval(dataset, hp, variant="full"):
    result = fit(dataset, hp, variant)
    g = evaluate(result.params, hp, dataset, "gzsl", variant)
    return {"variant": variant, "seed": hp.seed, "S": g.acc_seen, "U": g.acc_unseen, "H": g.harmonic,
            "final_ce": result.log[-1]["ce"] if result.log else None}


def _run(args):
    return train_and_eval(*args)


def run_many(jobs, workers=1):
    """Run ``(dataset, hp, variant)`` jobs, in worker processes when ``workers > 1``."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run, jobs))
    return [_run(j) for j in jobs]


def ablation(dataset, hp, variants, n_seeds=1, workers=1):
    """Every variant trained and evaluated under the same seeds ``hp.seed .. hp.seed + n_seeds - 1``."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    seeds = [hp.seed + i for i in range(n_seeds)]
    jobs = [(dataset, replace(hp, seed=s), v) for v in variants for s in seeds]
    runs = run_many(jobs, workers)
    rows = []
    for v in variants:
        mine = [r for r in runs if r["variant"] == v]
        row = {"variant": v, "group": VARIANT_GROUPS[v], "seeds": ";".join(str(s) for s in seeds),
               "n_seeds": len(seeds)}
        for key in ("S", "U", "H"):
            vals = np.array([r[key] for r in mine])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows, runs


def sweep(dataset, hp, param, values, workers=1):
    values = parse_sweep_values(param, values)
    jobs = [(dataset, replace(hp, **{param: v}), "full") for v in values]
    runs = run_many(jobs, workers)
    return [{"param": param, "value": v, "seed": hp.seed, "S": r["S"], "U": r["U"], "H": r["H"]}
            for v, r in zip(values, runs)]
