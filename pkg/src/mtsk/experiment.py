"""Reproducible benchmark runner and dataset interchange.

The runner fits the hierarchical model and the requested baselines on a
bundled benchmark (or a dataset file), replicates the run over seeds, and
writes diff-able delimited reports.  All floating-point output uses 17
significant digits so identical configurations reproduce identical bytes.

Dataset interchange schema (JSON, one file per experiment)::

    {
      "fidelities": [
        {"id": str, "sigma": float, "declared_variance_known": bool},
        ...
      ],
      "tasks": [
        {
          "task_id": int,
          "domain_lo": [float, ...],
          "domain_hi": [float, ...],
          "basis": {"kind": "constant"}
                   | {"kind": "linear"}
                   | {"kind": "tabulated",
                      "grid": [[float, ...], ...],
                      "values": [...nested per grid axis...]},
          "measurements": [
            {"location": [float, ...],
             "replicates": [float, ...],
             "fidelity_id": str},
            ...
          ]
        },
        ...
      ]
    }

``grid`` lists per-axis coordinates of a rectangular table and ``values``
the tabulated covariate on their product, nested row-major.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy

from . import __version__
from .baselines import homoscedastic_mtl_fit, sk_fit, sk_predict
from .basis import ConstantBasis, LinearBasis, TabulatedBasis
from .data import (
    FidelitySpec,
    HyperParams,
    Measurement,
    TaskDataset,
    default_tau_dup,
    pool_designs,
)
from .errors import ConfigurationError
from .kernels import KernelConfig
from .noise import build_noise_matrix
from .predict import predict, predict_mean, predict_variance
from .synth import (
    Bench1DConfig,
    EngineBenchConfig,
    gauge_pairs_table,
    gen_1d_tasks,
    gen_engine_tasks,
)
from .trend import TrendConfig, iterate_model

METHODS = ("hmtmf", "egmtl", "sk")
BENCHMARKS = ("one_d", "engine", "file")


def _g17(value: float) -> str:
    return format(float(value), ".17g")


def rmse(pred, truth) -> float:
    """Root-mean-square error between two equal-length vectors."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.size != truth.size or pred.size < 1:
        raise ConfigurationError(
            f"rmse needs two equal-length vectors, got {pred.size} and {truth.size}"
        )
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def delta_rmse(rmse_baseline: float, rmse_model: float) -> float:
    """Percent improvement of the model over a baseline; negative when worse."""
    if rmse_baseline <= 0:
        raise ConfigurationError("delta_rmse needs a positive baseline error")
    return 100.0 * (rmse_baseline - rmse_model) / rmse_baseline


@dataclass(frozen=True)
class FitSettings:
    """Everything needed to fit the model family on one benchmark."""

    kernel_cfg: KernelConfig
    hyper: HyperParams
    trend_cfg: TrendConfig
    noise_policy: str


def bench1d_settings() -> FitSettings:
    """Default fit settings for the 1D three-task study."""
    return FitSettings(
        kernel_cfg=KernelConfig(delta_sq=0.5),
        hyper=HyperParams(delta_sq=0.5, nu=20.0, lam=0.001, k1_max=3, k2_max=1),
        trend_cfg=TrendConfig(regression="ols", k2_max=1),
        noise_policy="sample_variance_only",
    )


def engine_settings() -> FitSettings:
    """Default fit settings for the machined-surface study."""
    return FitSettings(
        kernel_cfg=KernelConfig(delta_sq=16.0),
        hyper=HyperParams(delta_sq=16.0, nu=20.0, lam=0.001, k1_max=3, k2_max=1),
        trend_cfg=TrendConfig(regression="huber_irls", k2_max=1),
        noise_policy="declared_variance_fallback",
    )


def _apply_overrides(settings: FitSettings, cfg: "ExperimentConfig") -> FitSettings:
    kernel_cfg = settings.kernel_cfg
    hyper = settings.hyper
    if cfg.delta_sq is not None:
        kernel_cfg = replace(kernel_cfg, delta_sq=cfg.delta_sq)
        hyper = replace(hyper, delta_sq=cfg.delta_sq)
    if cfg.nu is not None:
        hyper = replace(hyper, nu=cfg.nu)
    if cfg.lam is not None:
        hyper = replace(hyper, lam=cfg.lam)
    if cfg.k1_max is not None:
        hyper = replace(hyper, k1_max=cfg.k1_max)
    trend_cfg = settings.trend_cfg
    if cfg.k2_max is not None:
        hyper = replace(hyper, k2_max=cfg.k2_max)
        trend_cfg = replace(trend_cfg, k2_max=cfg.k2_max)
    return FitSettings(
        kernel_cfg=kernel_cfg,
        hyper=hyper,
        trend_cfg=trend_cfg,
        noise_policy=settings.noise_policy,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """One reproducible experiment: benchmark, methods, replication plan."""

    benchmark: str
    out_dir: str | Path
    methods: tuple[str, ...] = METHODS
    gauge_pairs: tuple[tuple[float, float], ...] | None = None
    n_replications: int = 10
    base_seed: int = 0
    n_test: int = 15000
    n_grid_1d: int = 400
    dataset_path: str | Path | None = None
    delta_sq: float | None = None
    nu: float | None = None
    lam: float | None = None
    k1_max: int | None = None
    k2_max: int | None = None

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigurationError(
                f"benchmark must be one of {BENCHMARKS}, got {self.benchmark!r}"
            )
        methods = tuple(self.methods)
        if not methods:
            raise ConfigurationError("at least one method is required")
        for m in methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r} (have {METHODS})")
        if len(set(methods)) != len(methods):
            raise ConfigurationError("duplicate method names")
        object.__setattr__(self, "methods", methods)
        if self.n_replications < 1:
            raise ConfigurationError("n_replications must be >= 1")
        if self.benchmark == "file" and self.dataset_path is None:
            raise ConfigurationError("file benchmark needs dataset_path")
        if self.gauge_pairs is not None:
            pairs = tuple((float(a), float(b)) for a, b in self.gauge_pairs)
            if not pairs:
                raise ConfigurationError("gauge_pairs must not be empty")
            object.__setattr__(self, "gauge_pairs", pairs)

    @property
    def pairs(self) -> tuple[tuple[float, float], ...]:
        if self.benchmark != "engine":
            return ((None, None),)
        if self.gauge_pairs is not None:
            return self.gauge_pairs
        return tuple(gauge_pairs_table())


@dataclass(frozen=True)
class CellResult:
    """Per-task errors of one (pair, replication, method) fit, or its failure."""

    pair: tuple
    replication: int
    method: str
    rmse_by_task: Mapping[int, float]
    status: str


@dataclass(frozen=True)
class ExperimentResult:
    """All cell results plus the aggregated improvement table and file paths."""

    config: ExperimentConfig
    cells: tuple[CellResult, ...]
    delta: Mapping[tuple, Mapping[str, object]]
    files: tuple[Path, ...]


def _fit_multitask(method, tasks, fidelities, settings):
    noises = {
        t.task_id: build_noise_matrix(t, fidelities, settings.noise_policy)
        for t in tasks
    }
    pooled = pool_designs(tasks, default_tau_dup(tasks))
    if method == "hmtmf":
        state, _ = iterate_model(
            tasks,
            pooled,
            settings.kernel_cfg,
            settings.hyper,
            noises,
            trend_cfg=settings.trend_cfg,
        )
    else:
        state, _ = homoscedastic_mtl_fit(
            tasks,
            pooled,
            settings.kernel_cfg,
            settings.hyper,
            trend_cfg=settings.trend_cfg,
        )
    return state, noises


def _method_predictions(method, tasks, fidelities, settings, grid):
    """Fit one method and return {task_id: (mean, variance)} on the grid."""
    out = {}
    if method == "sk":
        for task in tasks:
            noise = build_noise_matrix(task, fidelities, settings.noise_policy)
            pred = sk_predict(sk_fit(task, noise), grid)
            out[task.task_id] = (pred.mean, pred.variance)
        return out
    state, _ = _fit_multitask(method, tasks, fidelities, settings)
    m = len(tasks)
    for task in tasks:
        mean = predict_mean(state, task.task_id, grid, task.basis, settings.kernel_cfg)
        var = predict_variance(
            state, task.task_id, grid, task.basis, settings.kernel_cfg,
            m, settings.hyper.nu,
        )
        out[task.task_id] = (mean, var)
    return out


def _one_d_instance(cfg: ExperimentConfig, replication: int):
    bench = gen_1d_tasks(Bench1DConfig(seed=cfg.base_seed + replication))
    lo = float(bench.tasks[0].domain_lo[0])
    hi = float(bench.tasks[0].domain_hi[0])
    grid = np.linspace(lo, hi, cfg.n_grid_1d)[:, None]
    truth = {
        t.task_id: bench.truths[i](grid[:, 0]) for i, t in enumerate(bench.tasks)
    }
    return bench.tasks, bench.fidelities, grid, truth


def _engine_instance(cfg: ExperimentConfig, pair, replication: int):
    bench = gen_engine_tasks(
        EngineBenchConfig(
            n_test=cfg.n_test,
            seed=cfg.base_seed + replication,
            gauge_pair=pair,
        )
    )
    truth = {
        t.task_id: bench.test_truth[i] for i, t in enumerate(bench.tasks)
    }
    return bench.tasks, bench.fidelities, bench.test_points, truth


def _aggregate_delta(cfg, cells):
    """Per-(pair, baseline) mean improvement per task plus replication spread."""
    by_key = {(c.pair, c.replication, c.method): c for c in cells}
    table = {}
    if "hmtmf" not in cfg.methods:
        return table
    for pair in cfg.pairs:
        for baseline in cfg.methods:
            if baseline == "hmtmf":
                continue
            per_task: dict[int, list[float]] = {}
            averages = []
            for r in range(cfg.n_replications):
                ours = by_key.get((pair, r, "hmtmf"))
                theirs = by_key.get((pair, r, baseline))
                if ours is None or theirs is None:
                    continue
                if ours.status != "ok" or theirs.status != "ok":
                    continue
                deltas = []
                for tid, base_err in theirs.rmse_by_task.items():
                    d = delta_rmse(base_err, ours.rmse_by_task[tid])
                    per_task.setdefault(tid, []).append(d)
                    deltas.append(d)
                averages.append(float(np.mean(deltas)))
            entry: dict[str, object] = {"n_used": len(averages)}
            if averages:
                entry["per_task"] = {
                    tid: float(np.mean(v)) for tid, v in sorted(per_task.items())
                }
                entry["average"] = float(np.mean(averages))
                entry["average_std"] = (
                    float(np.std(averages, ddof=1)) if len(averages) > 1 else 0.0
                )
            table[(pair, baseline)] = entry
    return table


def _write_raw(path: Path, cfg, cells) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["benchmark", "pair_high", "pair_low", "replication", "method",
             "task", "rmse", "status"]
        )
        for c in cells:
            ph = "" if c.pair[0] is None else _g17(c.pair[0])
            pl = "" if c.pair[1] is None else _g17(c.pair[1])
            if c.rmse_by_task:
                for tid in sorted(c.rmse_by_task):
                    w.writerow(
                        [cfg.benchmark, ph, pl, c.replication, c.method,
                         tid, _g17(c.rmse_by_task[tid]), c.status]
                    )
            else:
                w.writerow(
                    [cfg.benchmark, ph, pl, c.replication, c.method, "", "",
                     c.status]
                )


def _write_delta(path: Path, cfg, delta, task_ids) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["pair_high", "pair_low", "baseline"]
            + [f"task_{tid}" for tid in task_ids]
            + ["average", "average_std", "n_used"]
        )
        for (pair, baseline), entry in delta.items():
            ph = "" if pair[0] is None else _g17(pair[0])
            pl = "" if pair[1] is None else _g17(pair[1])
            if entry["n_used"] == 0:
                row = [ph, pl, baseline] + ["failed"] * (len(task_ids) + 2) + [0]
            else:
                per_task = entry["per_task"]
                row = (
                    [ph, pl, baseline]
                    + [_g17(per_task[tid]) if tid in per_task else "failed"
                       for tid in task_ids]
                    + [_g17(entry["average"]), _g17(entry["average_std"]),
                       entry["n_used"]]
                )
            w.writerow(row)


def _write_curves(out_dir: Path, cfg, tasks, fidelities, grid, truth) -> list[Path]:
    """First-replication per-task curves: truth and per-method mean with bands."""
    settings = _apply_overrides(bench1d_settings(), cfg)
    columns = {}
    for method in cfg.methods:
        columns[method] = _method_predictions(
            method, tasks, fidelities, settings, grid
        )
    paths = []
    for task in tasks:
        path = out_dir / f"curves_task{task.task_id}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            header = ["x", "truth"]
            for method in cfg.methods:
                header += [f"{method}_mean", f"{method}_lo", f"{method}_hi"]
            w.writerow(header)
            for i in range(grid.shape[0]):
                row = [_g17(grid[i, 0]), _g17(truth[task.task_id][i])]
                for method in cfg.methods:
                    mean, var = columns[method][task.task_id]
                    band = 2.0 * np.sqrt(max(float(var[i]), 0.0))
                    row += [_g17(mean[i]), _g17(mean[i] - band), _g17(mean[i] + band)]
                w.writerow(row)
        paths.append(path)
    path = out_dir / "design_points.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "x", "sample_mean", "fidelity"])
        for task in tasks:
            for m in task.measurements:
                w.writerow(
                    [task.task_id, _g17(m.location[0]), _g17(m.mean), m.fidelity_id]
                )
    paths.append(path)
    return paths


def _write_summary(path: Path, cfg, cells, delta, extra_files) -> None:
    ok = sum(1 for c in cells if c.status == "ok")
    lines = [
        "experiment summary",
        "==================",
        f"benchmark: {cfg.benchmark}",
        f"methods: {', '.join(cfg.methods)}",
        f"n_replications: {cfg.n_replications}",
        f"base_seed: {cfg.base_seed}",
        "generator seeds: "
        + ", ".join(str(cfg.base_seed + r) for r in range(cfg.n_replications)),
        f"n_test: {cfg.n_test}",
        f"n_grid_1d: {cfg.n_grid_1d}",
        f"dataset_path: {cfg.dataset_path or ''}",
        "hyper overrides: "
        + ", ".join(
            f"{k}={getattr(cfg, k)}"
            for k in ("delta_sq", "nu", "lam", "k1_max", "k2_max")
            if getattr(cfg, k) is not None
        ),
    ]
    if cfg.benchmark == "engine":
        lines.append(
            "gauge pairs: "
            + "; ".join(f"({_g17(a)}, {_g17(b)})" for a, b in cfg.pairs)
        )
    lines += [
        f"cells: {ok} ok, {len(cells) - ok} failed",
        f"package: mtsk {__version__}",
        f"python: {sys.version.split()[0]}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
        f"platform: {platform.platform()}",
        "files: " + ", ".join(p.name for p in extra_files),
    ]
    path.write_text("\n".join(lines) + "\n")


def _run_benchmark(cfg: ExperimentConfig) -> ExperimentResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = bench1d_settings() if cfg.benchmark == "one_d" else engine_settings()
    settings = _apply_overrides(base, cfg)
    cells = []
    task_ids: list[int] = []
    curve_files: list[Path] = []
    for pair in cfg.pairs:
        for r in range(cfg.n_replications):
            if cfg.benchmark == "one_d":
                tasks, fidelities, grid, truth = _one_d_instance(cfg, r)
            else:
                tasks, fidelities, grid, truth = _engine_instance(cfg, pair, r)
            if not task_ids:
                task_ids = sorted(t.task_id for t in tasks)
            if cfg.benchmark == "one_d" and r == 0 and not curve_files:
                curve_files = _write_curves(
                    out_dir, cfg, tasks, fidelities, grid, truth
                )
            for method in cfg.methods:
                try:
                    preds = _method_predictions(
                        method, tasks, fidelities, settings, grid
                    )
                    errors = {
                        tid: rmse(preds[tid][0], truth[tid]) for tid in task_ids
                    }
                    cells.append(
                        CellResult(pair, r, method, errors, "ok")
                    )
                except Exception as exc:  # per-cell isolation, never abort the sweep
                    cells.append(
                        CellResult(pair, r, method, {},
                                   f"failed: {type(exc).__name__}")
                    )
    delta = _aggregate_delta(cfg, cells)
    raw_path = out_dir / "raw_results.csv"
    _write_raw(raw_path, cfg, cells)
    delta_path = out_dir / "delta_table.csv"
    _write_delta(delta_path, cfg, delta, task_ids)
    files = [raw_path, delta_path] + curve_files
    summary_path = out_dir / "summary.txt"
    _write_summary(summary_path, cfg, cells, delta, files)
    files.append(summary_path)
    return ExperimentResult(
        config=cfg, cells=tuple(cells), delta=delta, files=tuple(files)
    )


def _prediction_lattice(task: TaskDataset) -> np.ndarray:
    if task.dimension == 1:
        return np.linspace(task.domain_lo[0], task.domain_hi[0], 200)[:, None]
    if task.dimension == 2:
        axes = [
            np.linspace(task.domain_lo[i], task.domain_hi[i], 45) for i in range(2)
        ]
        xx, yy = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])
    raise ConfigurationError(
        "file benchmark predictions support 1- and 2-dimensional tasks only"
    )


def _run_file(cfg: ExperimentConfig) -> ExperimentResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks, fidelities = load_dataset(cfg.dataset_path)
    d = tasks[0].dimension
    base = bench1d_settings() if d == 1 else engine_settings()
    settings = _apply_overrides(base, cfg)
    files = []
    cells = []
    m = len(tasks)
    for method in cfg.methods:
        try:
            if method == "sk":
                fitted = {
                    t.task_id: sk_fit(
                        t, build_noise_matrix(t, fidelities, settings.noise_policy)
                    )
                    for t in tasks
                }
                preds = {
                    t.task_id: sk_predict(fitted[t.task_id], _prediction_lattice(t))
                    for t in tasks
                }
            else:
                state, _ = _fit_multitask(method, tasks, fidelities, settings)
                preds = {
                    t.task_id: predict(
                        state, t.task_id, _prediction_lattice(t), t.basis,
                        settings.kernel_cfg, m, settings.hyper.nu,
                        with_components=True,
                    )
                    for t in tasks
                }
        except Exception as exc:
            cells.append(
                CellResult((None, None), 0, method, {},
                           f"failed: {type(exc).__name__}")
            )
            continue
        cells.append(CellResult((None, None), 0, method, {}, "ok"))
        for tid, pred in sorted(preds.items()):
            path = out_dir / f"predictions_task{tid}_{method}.tsv"
            path.write_text(pred.to_table())
            files.append(path)
    summary_path = out_dir / "summary.txt"
    _write_summary(summary_path, cfg, cells, {}, files)
    files.append(summary_path)
    return ExperimentResult(
        config=cfg, cells=tuple(cells), delta={}, files=tuple(files)
    )


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run one full experiment and write its report files.

    Cells are processed in deterministic (pair, replication, method) order;
    a failing fit marks its cell and the run continues.  Identical
    configurations produce byte-identical files.
    """
    if cfg.benchmark == "file":
        return _run_file(cfg)
    return _run_benchmark(cfg)


# --- dataset interchange -------------------------------------------------


def _basis_to_json(basis) -> dict:
    if isinstance(basis, ConstantBasis):
        return {"kind": "constant"}
    if isinstance(basis, LinearBasis):
        return {"kind": "linear"}
    if isinstance(basis, TabulatedBasis):
        return {
            "kind": "tabulated",
            "grid": [g.tolist() for g in basis.grid],
            "values": basis.values.tolist(),
        }
    raise ConfigurationError(
        f"basis of type {type(basis).__name__} has no file representation; "
        "tabulate it first"
    )


def _basis_from_json(spec: dict):
    kind = spec.get("kind")
    if kind == "constant":
        return ConstantBasis()
    if kind == "linear":
        return LinearBasis()
    if kind == "tabulated":
        return TabulatedBasis(spec["grid"], np.asarray(spec["values"], dtype=float))
    raise ConfigurationError(f"unknown basis kind {kind!r} in dataset file")


def tabulate_basis(basis, domain_lo, domain_hi, n_per_axis: int = 64) -> TabulatedBasis:
    """Sample a callable basis's covariate onto a rectangular table."""
    lo = np.asarray(domain_lo, dtype=float).reshape(-1)
    hi = np.asarray(domain_hi, dtype=float).reshape(-1)
    axes = [np.linspace(lo[i], hi[i], n_per_axis) for i in range(lo.size)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    u = np.atleast_2d(np.asarray(basis(points), dtype=float))
    if u.shape[1] != 2:
        raise ConfigurationError(
            "only [1, g(x)] bases can be tabulated; "
            f"got {u.shape[1]} basis columns"
        )
    values = u[:, 1].reshape([n_per_axis] * lo.size)
    return TabulatedBasis(axes, values)


def save_dataset(
    path: str | Path,
    tasks: Sequence[TaskDataset],
    fidelities: Mapping[str, FidelitySpec],
) -> Path:
    """Write tasks and the fidelity table to the JSON interchange format."""
    doc = {
        "fidelities": [
            {
                "id": f.id,
                "sigma": f.sigma,
                "declared_variance_known": f.declared_variance_known,
            }
            for _, f in sorted(fidelities.items())
        ],
        "tasks": [
            {
                "task_id": t.task_id,
                "domain_lo": t.domain_lo.tolist(),
                "domain_hi": t.domain_hi.tolist(),
                "basis": _basis_to_json(t.basis),
                "measurements": [
                    {
                        "location": m.location.tolist(),
                        "replicates": m.replicates.tolist(),
                        "fidelity_id": m.fidelity_id,
                    }
                    for m in t.measurements
                ],
            }
            for t in tasks
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(
    path: str | Path,
) -> tuple[tuple[TaskDataset, ...], dict[str, FidelitySpec]]:
    """Read tasks and the fidelity table back from the interchange format."""
    doc = json.loads(Path(path).read_text())
    fidelities = {
        f["id"]: FidelitySpec(
            id=f["id"],
            sigma=float(f["sigma"]),
            declared_variance_known=bool(f["declared_variance_known"]),
        )
        for f in doc["fidelities"]
    }
    tasks = []
    for t in doc["tasks"]:
        measurements = tuple(
            Measurement(
                location=np.asarray(m["location"], dtype=float),
                replicates=np.asarray(m["replicates"], dtype=float),
                fidelity_id=m["fidelity_id"],
            )
            for m in t["measurements"]
        )
        tasks.append(
            TaskDataset(
                task_id=int(t["task_id"]),
                measurements=measurements,
                basis=_basis_from_json(t["basis"]),
                domain_lo=np.asarray(t["domain_lo"], dtype=float),
                domain_hi=np.asarray(t["domain_hi"], dtype=float),
            )
        )
    return tuple(tasks), fidelities


# --- hyperparameter selection --------------------------------------------


def _holdout_split(task: TaskDataset, rng) -> tuple[TaskDataset, list[Measurement]]:
    n = task.n_points
    k = max(1, int(round(0.2 * n)))
    if n - k < 2:
        raise ConfigurationError(
            f"task {task.task_id}: too few points ({n}) for a 20% holdout"
        )
    order = rng.permutation(n)
    held = sorted(order[:k].tolist())
    kept = sorted(order[k:].tolist())
    train = TaskDataset(
        task_id=task.task_id,
        measurements=tuple(task.measurements[i] for i in kept),
        basis=task.basis,
        domain_lo=task.domain_lo,
        domain_hi=task.domain_hi,
    )
    return train, [task.measurements[i] for i in held]


def delta_sq_grid(tasks: Sequence[TaskDataset], n: int = 8) -> tuple[float, ...]:
    """Geometric ladder of squared length scales spanning the task domains."""
    span = max(
        float(np.max(t.domain_hi - t.domain_lo)) for t in tasks
    )
    top = span**2 / 8.0
    return tuple(top * 0.5**k for k in range(n))


def tune_settings(
    tasks: Sequence[TaskDataset],
    fidelities: Mapping[str, FidelitySpec],
    base: FitSettings,
    seed: int,
    delta_grid: Sequence[float] | None = None,
    nu_grid: Sequence[float] = (0.5, 1.0, 2.0, 5.0),
    lam_grid: Sequence[float] = (1e-4, 1e-3, 1e-2),
) -> tuple[FitSettings, list[tuple[float, float, float, float]]]:
    """Pick (delta_sq, nu, lam) by held-out squared error of the fitted mean.

    Holds out 20% of each task's points (seeded), scores every grid
    combination on the held-out sample means, and returns the winner (ties
    break toward the earliest combination) plus the full score table.
    """
    if delta_grid is None:
        delta_grid = delta_sq_grid(tasks)
    rng = np.random.default_rng(seed)
    splits = [_holdout_split(t, rng) for t in tasks]
    trains = [s[0] for s in splits]
    scores = []
    best = None
    best_score = np.inf
    for ds in delta_grid:
        for nu in nu_grid:
            for lam in lam_grid:
                candidate = FitSettings(
                    kernel_cfg=replace(base.kernel_cfg, delta_sq=float(ds)),
                    hyper=replace(
                        base.hyper, delta_sq=float(ds), nu=float(nu), lam=float(lam)
                    ),
                    trend_cfg=base.trend_cfg,
                    noise_policy=base.noise_policy,
                )
                try:
                    state, _ = _fit_multitask(
                        "hmtmf", trains, fidelities, candidate
                    )
                    sq = 0.0
                    cnt = 0
                    for (train, held), task in zip(splits, tasks):
                        locs = np.vstack([m.location for m in held])
                        want = np.array([m.mean for m in held])
                        got = predict_mean(
                            state, task.task_id, locs, task.basis,
                            candidate.kernel_cfg,
                        )
                        sq += float(np.sum((got - want) ** 2))
                        cnt += len(held)
                    score = sq / cnt
                except Exception:
                    score = np.inf
                scores.append((float(ds), float(nu), float(lam), score))
                if score < best_score:
                    best_score = score
                    best = candidate
    if best is None or not np.isfinite(best_score):
        raise ConfigurationError("every tuning candidate failed to fit")
    return best, scores
