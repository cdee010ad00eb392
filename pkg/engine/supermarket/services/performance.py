"""Closed-form performance measures and the tables behind the numerical examples."""

from __future__ import annotations

import logging
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from supermarket.errors import DomainError
from supermarket.models import ModelSpec, PerfReport, PhDistribution
from supermarket.sample_data import erlang, exponential, mmpp_example, ph_example
from supermarket.services.fixedpoint import FixedPointSolution, tail
from supermarket.utils.stochkit import map_rate, ph_mean, ph_residual, traffic_intensity

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-14
MAX_TERMS = 100_000
EXAMPLE_IDS = (1, 2, 3, 4)


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise DomainError(f"Model is unstable or empty: rho={rho!r} must lie in (0, 1).")


def tail_series(
    rho: float, d: int, start: int = 1, eps: float = DEFAULT_EPS
) -> tuple[float, int, float]:
    """
    Σ_{k>=start} ρ^((d^k−1)/(d−1)), stopped once the next term drops below ``eps``.

    Returns (sum, terms summed, bound on the dropped remainder). For d = 1 the
    geometric series is summed in closed form.
    """
    _check_rho(rho)
    if d == 1:
        return rho**start / (1.0 - rho), 0, 0.0
    total = 0.0
    terms = 0
    k = start
    while True:
        term = tail(rho, d, k)
        if term < eps:
            return total, terms, 2.0 * term
        total += term
        terms += 1
        k += 1
        if terms > MAX_TERMS:
            raise DomainError(f"Tail series did not drop below eps={eps:g} in {MAX_TERMS} terms.")


def mean_queue_length(rho: float, d: int, eps: float = DEFAULT_EPS) -> float:
    """E[Q_d] = Σ_{k>=1} ρ^((d^k−1)/(d−1)); ρ/(1−ρ) when d = 1."""
    return tail_series(rho, d, start=1, eps=eps)[0]


def mean_sojourn(ph: PhDistribution, lam: float, d: int, eps: float = DEFAULT_EPS) -> float:
    """E[T_d] = E[X] + ρE[X_R] + E[X]·Σ_{k>=2} ρ^((d^k−1)/(d−1))."""
    mean = ph_mean(ph)
    rho = lam * mean
    _check_rho(rho)
    _, mean_residual = ph_residual(ph)
    queue_tail, _, _ = tail_series(rho, d, start=2, eps=eps)
    return mean + rho * mean_residual + mean * queue_tail


def performance_report(model: ModelSpec, eps: float = DEFAULT_EPS) -> PerfReport:
    rho, _ = traffic_intensity(model)
    _check_rho(rho)
    lam = map_rate(model.map)
    queue, terms, bound = tail_series(rho, model.d, eps=eps)
    _, mean_residual = ph_residual(model.ph)
    return PerfReport(
        rho=rho,
        d=model.d,
        EQ=queue,
        ET=mean_sojourn(model.ph, lam, model.d, eps=eps),
        EX=ph_mean(model.ph),
        EXR=mean_residual,
        terms=terms,
        truncation_bound=bound,
    )


def little_gap(ph: PhDistribution, lam: float, d: int, eps: float = DEFAULT_EPS) -> float:
    """E[T_d] − E[Q_d]/λ: zero for d = 1 with exponential service."""
    rho = lam * ph_mean(ph)
    return mean_sojourn(ph, lam, d, eps) - mean_queue_length(rho, d, eps) / lam


def fixed_point_report(
    solution: FixedPointSolution, eps: float = DEFAULT_EPS
) -> dict[str, float]:
    """Mean queue length from the solved fixed point next to the closed form."""
    closed = mean_queue_length(solution.rho, solution.model.d, eps)
    solved = solution.mean_queue_length
    return {
        "rho": solution.rho,
        "d": float(solution.model.d),
        "EQ_closed_form": closed,
        "EQ_fixed_point": solved,
        "difference": solved - closed,
        "tail_deviation": solution.tail_deviation,
    }


def _row(
    example: int,
    parameters: dict[str, Any],
    ph: PhDistribution,
    lam: float,
    d: int,
    eps: float,
) -> dict[str, Any]:
    rho = lam * ph_mean(ph)
    stable = 0.0 < rho < 1.0
    return {
        "example": example,
        **parameters,
        "rho": rho,
        "stable": stable,
        "EQ": mean_queue_length(rho, d, eps) if stable else np.nan,
        "ET": mean_sojourn(ph, lam, d, eps) if stable else np.nan,
    }


def example_tables(
    which: int,
    d_list: Sequence[int] | None = None,
    grid: Iterable[float] | None = None,
    eps: float = DEFAULT_EPS,
) -> pd.DataFrame:
    """
    Data behind the four numerical examples.

    1: Erlang E[m, η] service with λ = 1 over η, for (m, d) pairs.
    2: exponential twin versus the two-phase PH over λ in [1, 3], d in {1, 2}.
    3: PH matrices T(1..3) at λ = 1.
    4: two-phase MAP input with unit-rate exponential service over λ in (0, 1).
    Grid points outside the stability region are kept and marked unstable.
    """
    if which not in EXAMPLE_IDS:
        raise DomainError(f"Unknown example {which}; choose one of {EXAMPLE_IDS}.")
    rows: list[dict[str, Any]] = []

    if which == 1:
        pairs = [(2, 2), (3, 2), (4, 2), (2, 10)]
        etas = np.arange(2.5, 10.0 + 1e-9, 0.5) if grid is None else np.asarray(list(grid))
        for m, d in pairs:
            for eta in etas:
                ph = erlang(m, float(eta))
                rows.append(_row(1, {"m": m, "d": d, "eta": float(eta)}, ph, 1.0, d, eps))

    elif which == 2:
        twin_ph = ph_example(1)
        twin = exponential(1.0 / ph_mean(twin_ph))
        lams = np.linspace(1.0, 3.0, 21) if grid is None else np.asarray(list(grid))
        for service, ph in (("exponential", twin), ("ph", twin_ph)):
            for d in d_list or (1, 2):
                for lam in lams:
                    parameters = {"service": service, "d": d, "lam": float(lam)}
                    rows.append(_row(2, parameters, ph, float(lam), d, eps))

    elif which == 3:
        lams = [1.0] if grid is None else list(grid)
        for index in (1, 2, 3):
            ph = ph_example(index)
            for d in d_list or (1, 2, 5, 10):
                for lam in lams:
                    parameters = {"T_index": index, "d": d, "lam": float(lam)}
                    rows.append(_row(3, parameters, ph, float(lam), d, eps))

    else:
        lams = np.linspace(0.05, 0.95, 19) if grid is None else np.asarray(list(grid))
        service = exponential(1.0)
        for d in d_list or (1, 2, 5, 10):
            for lam in lams:
                rate = map_rate(mmpp_example(float(lam))) if lam > 0 else 0.0
                rows.append(_row(4, {"d": d, "lam": float(lam)}, service, rate, d, eps))

    table = pd.DataFrame(rows)
    unstable = int((~table["stable"]).sum())
    if unstable:
        logger.info("Example %d: %d grid point(s) outside the stability region", which, unstable)
    return table


TREND_TOL = 1e-12
# (group columns, varied column, increasing) per example
TRENDS: dict[int, list[tuple[tuple[str, ...], str, bool]]] = {
    1: [(("m", "d"), "eta", False), (("m", "eta"), "d", False)],
    2: [(("service", "d"), "lam", True), (("service", "lam"), "d", False)],
    3: [(("T_index", "lam"), "d", False)],
    4: [(("d",), "lam", True), (("lam",), "d", False)],
}


def table_trends(table: pd.DataFrame) -> pd.DataFrame:
    """
    Check that EQ and ET move the expected way across an example table.

    Both measures decrease in d; they increase in λ and decrease in the
    service rate η. Only stable rows are compared.
    """
    which = int(table["example"].iloc[0])
    stable = table[table["stable"]]
    rows = []
    for by, along, increasing in TRENDS[which]:
        for measure in ("EQ", "ET"):
            worst = 0.0
            for _, group in stable.groupby(list(by)):
                steps = np.diff(group.sort_values(along)[measure].to_numpy())
                if steps.size:
                    worst = max(worst, float((-steps if increasing else steps).max()))
            rows.append(
                {
                    "example": which,
                    "measure": measure,
                    "along": along,
                    "direction": "increasing" if increasing else "decreasing",
                    "worst_step": worst,
                    "holds": worst <= TREND_TOL,
                }
            )
    return pd.DataFrame(rows)
