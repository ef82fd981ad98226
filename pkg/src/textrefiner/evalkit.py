"""Accuracy / harmonic-mean metrics, base-to-novel reports, sweeps and the throughput bench."""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from . import objective as obj
from .dataio import EmbeddingBundle, View, split_views
from .refiner import effective_embeddings, refine
from .training import TrainConfig, TrainState, fit


class EvalError(ValueError):
    pass


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise EvalError("accuracy of an empty prediction set")
    if p.shape != y.shape:
        raise EvalError(f"{p.size} predictions for {y.size} labels")
    return 100.0 * float(np.count_nonzero(p == y)) / p.size


def harmonic_mean(base: float, novel: float) -> float:
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


@dataclass
class B2NReport:
    base: float
    novel: float
    hm: float
    per_class: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _per_class(pred: np.ndarray, labels: np.ndarray, names: Sequence[str]) -> dict[str, float]:
    out = {}
    for c, name in enumerate(names):
        mask = labels == c
        out[name] = accuracy(pred[mask], labels[mask]) if mask.any() else 0.0
    return out


def _class_names(bundle: EmbeddingBundle) -> list[str]:
    if bundle.class_names:
        return list(bundle.class_names)
    return [f"class_{j}" for j in range(bundle.n_classes)]


def view_predictions(state: TrainState, view: View, class_delta, refined: bool = True) -> np.ndarray:
    """Predictions on a view against a frozen copy of the cache.

    With ``refined=False`` the classifier uses the effective embeddings
    directly, i.e. the unrefined baseline path.
    """
    params = state.params.with_tensors({"class_delta": class_delta})
    if refined:
        protos = refine(view.class_embeddings, params, state.cache.copy().freeze()).refined
    else:
        protos = effective_embeddings(view.class_embeddings, class_delta)
    pred, _ = obj.predict(view.globals_, protos, state.config.tau)
    return pred


def b2n_eval(state: TrainState, bundle: EmbeddingBundle, refined: bool = True) -> B2NReport:
    """Base accuracy on base_test, novel accuracy on novel_test.

    Novel classes were never trained, so they use a zero class_delta while
    the cache, alignment MLP and aggregation head carry over.
    """
    _, base_test, novel_test = split_views(bundle)
    if len(base_test) == 0 or len(novel_test) == 0:
        raise EvalError("bundle needs non-empty base_test and novel_test splits")
    delta = nk.value_of(state.params.class_delta)
    if delta.shape != (bundle.n_base, bundle.d):
        raise EvalError(f"state has class_delta {delta.shape}, bundle has {bundle.n_base} base classes x d={bundle.d}")
    pb = view_predictions(state, base_test, delta, refined)
    pn = view_predictions(state, novel_test, np.zeros((bundle.n_novel, bundle.d)), refined)
    base, novel = accuracy(pb, base_test.labels), accuracy(pn, novel_test.labels)
    names = _class_names(bundle)
    per_class = _per_class(pb, base_test.labels, names[: bundle.n_base])
    per_class.update(_per_class(pn, novel_test.labels, names[bundle.n_base :]))
    return B2NReport(base, novel, harmonic_mean(base, novel), per_class, state.config.to_json())


# -- throughput ---------------------------------------------------------------


@dataclass
class BenchReport:
    qps_refined: float
    qps_baseline: float
    precompute_seconds: float
    overhead_ratio: float
    n_classes: int
    n_queries: int
    repetitions: int
    precompute_by_classes: dict[str, float]
    precompute_slope: float
    precompute_r2: float

    def to_json(self) -> dict:
        return asdict(self)


def _linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    pred = slope * np.asarray(x, float) + intercept
    ss_res = float(np.sum((np.asarray(y) - pred) ** 2))
    ss_tot = float(np.sum((np.asarray(y) - np.mean(y)) ** 2))
    return float(slope), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def bench(
    state: TrainState,
    bundle: EmbeddingBundle,
    repetitions: int = 5,
    n_queries: int = 1000,
    n_classes: int = 128,
    class_counts: Sequence[int] = (8, 32, 128),
    seed: int = 0,
) -> BenchReport:
    """Time the one-off refinement precompute and per-query prediction.

    Per-query latency is measured for the refined and the raw class
    embeddings with the same predict path, alternating the two per query.
    """
    if repetitions < 3:
        raise EvalError(f"bench needs at least 3 repetitions, got {repetitions}")
    if n_queries < 1:
        raise EvalError("bench needs at least one query")
    rng = np.random.default_rng(seed)
    d = bundle.d
    cache = state.cache.copy().freeze()
    tau = state.config.tau

    def class_bank(c: int) -> np.ndarray:
        return nk.row_l2_normalize(rng.standard_normal((c, d))).value

    def precompute(e: np.ndarray) -> tuple[np.ndarray, float]:
        params = state.params.with_tensors({"class_delta": np.zeros_like(e)})
        t0 = time.perf_counter()
        out = refine(e, params, cache).refined.value
        return out, time.perf_counter() - t0

    banks = {c: class_bank(c) for c in sorted(set(class_counts) | {n_classes})}
    pre_times = {c: [] for c in banks}
    per_ref, per_base = [], []
    queries = bundle.globals_[rng.integers(0, bundle.globals_.shape[0], n_queries)]
    for _ in range(repetitions):
        for c, e in banks.items():
            pre_times[c].append(precompute(e)[1])
        e_raw = banks[n_classes]
        e_hat, _ = precompute(e_raw)
        lat_r, lat_b = [], []
        for q in queries:
            q = q[None, :]
            t0 = time.perf_counter()
            obj.predict(q, e_hat, tau)
            t1 = time.perf_counter()
            obj.predict(q, e_raw, tau)
            t2 = time.perf_counter()
            lat_r.append(t1 - t0)
            lat_b.append(t2 - t1)
        per_ref.append(statistics.median(lat_r))
        per_base.append(statistics.median(lat_b))

    med_pre = {c: statistics.median(v) for c, v in pre_times.items()}
    xs = sorted(set(class_counts))
    slope, r2 = _linear_fit(xs, [med_pre[c] for c in xs])
    ref_lat, base_lat = statistics.median(per_ref), statistics.median(per_base)
    return BenchReport(
        qps_refined=1.0 / ref_lat,
        qps_baseline=1.0 / base_lat,
        precompute_seconds=med_pre[n_classes],
        overhead_ratio=ref_lat / base_lat,
        n_classes=n_classes,
        n_queries=n_queries,
        repetitions=repetitions,
        precompute_by_classes={str(c): med_pre[c] for c in xs},
        precompute_slope=slope,
        precompute_r2=r2,
    )


# -- sweeps -------------------------------------------------------------------

SWEEP_AXES = {"M": "M", "alpha": "alpha", "lambda1": "lambda1", "lambda2": "lambda2", "k": "k", "gamma": "gamma"}

# Component ablation: which of refiner / semantic loss / regularizer are on.
COMPONENTS = {
    "baseline": (False, False, False),
    "refiner": (True, False, False),
    "refiner+sem": (True, True, False),
    "refiner+reg": (True, False, True),
    "refiner+sem+reg": (True, True, True),
}


def component_config(config: TrainConfig, name: str) -> TrainConfig:
    if name not in COMPONENTS:
        raise EvalError(f"unknown component set {name!r}; choose from {list(COMPONENTS)}")
    use_ref, use_sem, use_reg = COMPONENTS[name]
    return replace(
        config,
        alpha=config.alpha if use_ref else 0.0,
        lambda1=config.lambda1 if use_sem else 0.0,
        lambda2=config.lambda2 if use_reg else 0.0,
    )


def axis_config(config: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "components":
        return component_config(config, str(value))
    if axis not in SWEEP_AXES:
        raise EvalError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES) + ['components']}")
    field_name = SWEEP_AXES[axis]
    cast = int if field_name in ("M", "k") else float
    return replace(config, **{field_name: cast(value)})


def sweep(
    axis: str,
    values: Sequence,
    config: TrainConfig,
    bundle: EmbeddingBundle,
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    """Retrain and evaluate once per (value, seed); one table row each."""
    if not values:
        raise EvalError("sweep needs at least one value")
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for value in values:
        for seed in seeds:
            cfg = replace(axis_config(config, axis, value), seed=seed)
            state, _ = fit(cfg, bundle)
            rep = b2n_eval(state, bundle)
            rows.append({"axis": axis, "value": value, "seed": seed, "base": rep.base, "novel": rep.novel, "hm": rep.hm})
    return rows


def best_by_seed(rows: list[dict]) -> dict[int, object]:
    """Axis value with the highest HM per seed (first listed value wins ties)."""
    best: dict[int, tuple[float, object]] = {}
    for r in rows:
        cur = best.get(r["seed"])
        if cur is None or r["hm"] > cur[0]:
            best[r["seed"]] = (r["hm"], r["value"])
    return {s: v for s, (_, v) in best.items()}


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def write_json(obj_, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj_, indent=2, sort_keys=True) + "\n")
    return path
