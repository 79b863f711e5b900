"""Simulated pricing economy with a tunable amount of endogeneity.

Sales depend on time-of-day ``t``, customer segment ``s`` and price ``p``;
the seller moves prices with the same time profile ``psi(t)`` that drives
price sensitivity, and ``rho`` couples the price shock to the sales shock.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import child_rng
from .data import Dataset, format_float
from .errors import ParameterError

log = logging.getLogger(__name__)

BASE_SALES = 100.0
N_SEGMENTS = 7


def psi(t):
    """Time profile of prices and price sensitivity."""
    t = np.asarray(t, dtype=np.float64)
    out = 2.0 * ((t - 5.0) ** 4 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 2.0)
    return float(out) if out.ndim == 0 else out


def true_h(t, s, p):
    """Structural effect ``s*psi(t) + (psi(t) - 2)*p`` (excludes the constant sales level)."""
    pt = psi(t)
    return np.asarray(s) * pt + (pt - 2.0) * np.asarray(p)


@dataclass
class SimConfig:
    n: int
    rho: float
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [0, 1], got {self.rho}")


def simulate(config: SimConfig) -> Dataset:
    """Draw ``n`` rows of the economy; latent ``v`` and ``e`` are kept in ``Dataset.latent``."""
    rng = np.random.default_rng(config.seed)
    n, rho = config.n, config.rho
    t = rng.uniform(0.0, 10.0, n)
    s = rng.integers(1, N_SEGMENTS + 1, n).astype(np.float64)
    z = rng.standard_normal(n)
    v = rng.standard_normal(n)
    e = rho * v + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n)
    pt = psi(t)
    p = 25.0 + (z + 3.0) * pt + v
    y = BASE_SALES + s * pt + (pt - 2.0) * p + e
    return Dataset(np.column_stack([t, s]), z[:, None], p, y, ["t", "s"], ["cost"],
                   latent={"v": v, "e": e})


@dataclass
class StructuralGrid:
    prices: np.ndarray  # (n_prices,)
    t: np.ndarray  # (n_points,)
    s: np.ndarray  # (n_points,)

    @property
    def truth(self) -> np.ndarray:
        return true_h(self.t[:, None], self.s[:, None], self.prices[None, :])

    def flat(self):
        """Cross product of (t, s) points and prices as three flat arrays."""
        k = len(self.prices)
        return np.repeat(self.t, k), np.repeat(self.s, k), np.tile(self.prices, len(self.t))


def make_structural_grid(train_prices: np.ndarray, rng: np.random.Generator,
                         n_points: int = 1000, n_prices: int = 20) -> StructuralGrid:
    """Evenly spaced prices over the 1st-99th percentile, crossed with fresh (t, s) draws."""
    lo, hi = np.percentile(train_prices, [1.0, 99.0])
    t = rng.uniform(0.0, 10.0, n_points)
    s = rng.integers(1, N_SEGMENTS + 1, n_points).astype(np.float64)
    return StructuralGrid(np.linspace(lo, hi, n_prices), t, s)


def structural_mse(predict_fn: Callable, grid: StructuralGrid) -> float:
    """Mean squared gap between ``predict_fn(t, s, p)`` and the true effect over the grid."""
    t, s, p = grid.flat()
    pred = np.asarray(predict_fn(t, s, p), dtype=np.float64)
    return float(np.mean((pred - true_h(t, s, p)) ** 2))


# -- sweeps -----------------------------------------------------------------

RESULT_COLUMNS = ("rho", "n", "method", "seed", "structural_mse", "oos_deviance",
                  "oos_causal_loss", "wall_ms", "status")
METHODS = ("deepiv", "2sls", "ffnet")


@dataclass
class ResultRow:
    rho: float
    n: int
    method: str
    seed: int
    structural_mse: float = float("nan")
    oos_deviance: float = float("nan")
    oos_causal_loss: float = float("nan")
    wall_ms: float = 0.0
    status: str = "ok"


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, **where) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]

    def median_mse(self, method: str, rho: float, n: int) -> float:
        vals = [r.structural_mse for r in self.select(method=method, rho=rho, n=n) if r.status == "ok"]
        return float(np.median(vals)) if vals else float("nan")

    def to_csv(self, include_wall_time: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in self.rows:
            def num(v):
                return "" if not np.isfinite(v) else format_float(v)
            writer.writerow([format_float(r.rho), r.n, r.method, r.seed, num(r.structural_mse),
                             num(r.oos_deviance), num(r.oos_causal_loss),
                             "%.3f" % r.wall_ms if include_wall_time else "", r.status])
        return buf.getvalue()


@dataclass
class SweepSettings:
    """Training settings used inside each sweep cell."""

    first_stage: object = None  # FirstStageConfig
    second_stage: object = None  # SecondStageConfig
    ffnet: object = None  # SecondStageConfig for the plain regression
    holdout_fraction: float = 0.2
    grid_points: int = 1000
    grid_prices: int = 20
    eval_draws: int = 500
    master_seed: int = 0


def desk_epochs(n: int, steps: int = 30000, batch_size: int = 100, lo: int = 20, hi: int = 400) -> int:
    """Epoch count giving roughly ``steps`` optimiser updates at sample size ``n``."""
    return int(np.clip(round(steps * batch_size / max(n, 1)), lo, hi))


def default_settings(n: int, master_seed: int = 0, steps: int = 30000) -> SweepSettings:
    """One hidden layer of 50 units, no dropout, epochs set by ``steps``.

    The outcome network averages four treatment draws per factor of the
    gradient, which lowers gradient noise in the sharp regions of ``psi``.
    """
    from .outcome import SecondStageConfig
    from .treatment import FirstStageConfig

    epochs = desk_epochs(n, steps)
    outcome = SecondStageConfig(hidden=(50,), epochs=epochs)
    return SweepSettings(
        first_stage=FirstStageConfig(hidden=(50,), epochs=epochs),
        second_stage=replace(outcome, n_draws=4),
        ffnet=outcome,
        master_seed=master_seed,
    )


def four_layer_settings(n: int, master_seed: int = 0) -> SweepSettings:
    """Four hidden layers (256, 128, 64, 32) at keep probability 0.99."""
    from .outcome import SecondStageConfig
    from .treatment import FirstStageConfig

    epochs = desk_epochs(n, steps=60000)
    return SweepSettings(
        first_stage=FirstStageConfig(hidden=(256, 128, 64, 32), epochs=epochs, keep_probability=0.99),
        second_stage=SecondStageConfig(hidden=(256, 128, 64, 32), epochs=epochs, keep_probability=0.99),
        ffnet=SecondStageConfig(hidden=(256, 128, 64, 32), epochs=epochs),
        master_seed=master_seed,
    )


def _with_seed(cfg, seed: int):
    return replace(cfg, seed=seed)


def cell_data(rho: float, n: int, seed: int, settings: SweepSettings):
    """Training data, holdout and structural grid for one (rho, n, seed) cell.

    Everything is derived from ``(master_seed, seed, n)`` so the draws are
    shared by every method evaluated in the cell.
    """
    data_seed = int(np.random.SeedSequence([settings.master_seed, seed, n, int(round(rho * 1e6))])
                    .generate_state(1)[0])
    n_hold = max(int(round(settings.holdout_fraction * n)), 1)
    full = simulate(SimConfig(n + n_hold, rho, data_seed))
    train, holdout = full.subset(np.arange(n)), full.subset(np.arange(n, n + n_hold))
    grid = make_structural_grid(train.p, child_rng(data_seed, 7), settings.grid_points, settings.grid_prices)
    return train, holdout, grid, data_seed


def structural_predictor(predict: Callable) -> Callable:
    """Adapt ``predict(p, x)`` in sales units to the grid signature, removing the sales level."""
    def fn(t, s, p):
        return predict(p, np.column_stack([t, s])) - BASE_SALES
    return fn


def run_cell(rho: float, n: int, method: str, seed: int, settings: SweepSettings) -> ResultRow:
    """Train and evaluate one method on one cell; errors land in the status column."""
    from .baselines import fit_2sls, fit_ffnet, predict_2sls, predict_ffnet
    from .outcome import oos_causal_loss, predict_h, train_second_stage
    from .treatment import oos_deviance, train_first_stage

    row = ResultRow(rho, n, method, seed)
    start = time.perf_counter()
    try:
        train, holdout, grid, data_seed = cell_data(rho, n, seed, settings)
        if method == "deepiv":
            tmodel = train_first_stage(train, _with_seed(settings.first_stage, data_seed % 2**31))
            omodel = train_second_stage(train, tmodel, _with_seed(settings.second_stage, (data_seed + 1) % 2**31))
            row.structural_mse = structural_mse(structural_predictor(lambda p, x: predict_h(omodel, p, x)), grid)
            row.oos_deviance = oos_deviance(tmodel, holdout)
            row.oos_causal_loss = oos_causal_loss(omodel, tmodel, holdout, settings.eval_draws,
                                                  child_rng(data_seed, 8))
        elif method == "2sls":
            model = fit_2sls(train)
            row.structural_mse = structural_mse(structural_predictor(lambda p, x: predict_2sls(model, p, x)), grid)
        elif method == "ffnet":
            model = fit_ffnet(train, _with_seed(settings.ffnet, (data_seed + 2) % 2**31))
            row.structural_mse = structural_mse(structural_predictor(lambda p, x: predict_ffnet(model, p, x)), grid)
        else:
            raise ParameterError(f"unknown method {method!r}")
    except Exception as exc:  # noqa: BLE001 - recorded per cell, sweep continues
        log.warning("cell rho=%s n=%s %s seed=%s failed: %s", rho, n, method, seed, exc)
        row.status = f"error: {type(exc).__name__}: {exc}"
    row.wall_ms = (time.perf_counter() - start) * 1e3
    return row


def run_sweep(rhos: Sequence[float], ns: Sequence[int], methods: Sequence[str], seeds: Sequence[int],
              settings: SweepSettings | Callable[[int], SweepSettings] | None = None) -> ResultsTable:
    """Evaluate every (rho, n, method, seed) combination; one row each."""
    if not (rhos and ns and methods and seeds):
        raise ParameterError("sweep axes must be nonempty")
    table = ResultsTable()
    for rho in rhos:
        for n in ns:
            cell_settings = settings(n) if callable(settings) else (settings or default_settings(n))
            for seed in seeds:
                for method in methods:
                    row = run_cell(float(rho), int(n), method, int(seed), cell_settings)
                    log.info("rho=%.2f n=%d %-6s seed=%d mse=%.4f (%s, %.0f ms)", rho, n, method, seed,
                             row.structural_mse, row.status, row.wall_ms)
                    table.rows.append(row)
    return table
