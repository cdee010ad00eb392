"""Mean-field ODEs for the expected fraction vector: drift, Jacobian, bound and integration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from supermarket.errors import IntegrationError, ModelValidationError, ResourceLimitError
from supermarket.models import ModelSpec
from supermarket.utils.envfactor import env_factor_gradient, env_factor_levels
from supermarket.utils.stochkit import (
    exit_vector,
    kron_product,
    kron_sum,
    stationary_vector,
    traffic_intensity,
)

logger = logging.getLogger(__name__)

INVARIANT_TOL = 1e-8
# Negative entries within this multiple of the RMS error bound sqrt(n)*atol are step noise.
ROUNDOFF_FACTOR = 10.0


@dataclass(frozen=True)
class FractionVector:
    """
    Truncated expected-fraction state (u₀, u₁, …, u_K).

    ``u0`` has one entry per MAP phase; row k−1 of ``levels`` holds u_k
    flattened (MAP phase, service phase)-major.
    """

    u0: np.ndarray
    levels: np.ndarray

    def __post_init__(self) -> None:
        u0 = np.asarray(self.u0, dtype=float).ravel()
        levels = np.atleast_2d(np.asarray(self.levels, dtype=float))
        if levels.size == 0:
            levels = np.zeros((0, u0.size))
        if levels.shape[1] % max(u0.size, 1):
            raise ModelValidationError(
                f"Level width {levels.shape[1]} is not a multiple of the MAP order {u0.size}."
            )
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "levels", levels)

    @property
    def K(self) -> int:
        return self.levels.shape[0]

    @property
    def m_A(self) -> int:
        return self.u0.size

    @property
    def m_B(self) -> int:
        return self.levels.shape[1] // self.m_A

    @property
    def tails(self) -> np.ndarray:
        """u_k e for k = 1..K."""
        return self.levels.sum(axis=1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.u0, self.levels.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, m_A: int, width: int) -> "FractionVector":
        flat = np.asarray(flat, dtype=float)
        return cls(u0=flat[:m_A], levels=flat[m_A:].reshape(-1, width))

    def padded(self, K: int) -> "FractionVector":
        """Copy with zero levels appended up to K (never truncates)."""
        if K <= self.K:
            return self
        extra = np.zeros((K - self.K, self.levels.shape[1]))
        return FractionVector(self.u0, np.vstack([self.levels, extra]))

    def truncated(self, K: int) -> "FractionVector":
        return FractionVector(self.u0, self.levels[:K])

    def aggregated(self) -> "FractionVector":
        """Sum levels over MAP phases, leaving one entry per service phase."""
        summed = self.levels.reshape(self.K, self.m_A, self.m_B).sum(axis=1)
        return FractionVector(np.ones(1), summed)

    def violations(self, tol: float = INVARIANT_TOL) -> dict[str, int]:
        """Count breaches of normalisation, non-negativity and monotonicity."""
        prev = np.vstack([np.kron(self.u0, np.ones(self.m_B)), self.levels[:-1]])
        tails = self.tails
        return {
            "normalisation": int(abs(self.u0.sum() - 1.0) > tol),
            "negative": int(np.sum(self.levels < -tol) + np.sum(self.u0 < -tol)),
            "componentwise": int(np.sum(self.levels[1:] > self.levels[:-1] + tol)),
            "level_one": int(np.sum(self.levels[:1] > prev[:1] + tol)),
            "tails": int(np.sum(np.diff(np.concatenate([[1.0], tails])) > tol)),
        }

    def validate(self, tol: float = INVARIANT_TOL) -> None:
        counts = self.violations(tol)
        broken = {name: count for name, count in counts.items() if count}
        if broken:
            raise ModelValidationError(f"Fraction vector violates its invariants: {broken}.")

    @classmethod
    def empty(cls, model: ModelSpec, K: int = 1, u0: np.ndarray | None = None) -> "FractionVector":
        """All servers idle; the MAP starts from ``u0`` (stationary by default)."""
        m_A, m_B = model.dims
        start = _stationary_map_phase(model) if u0 is None else np.asarray(u0, dtype=float)
        return cls(start, np.zeros((K, m_A * m_B)))

    @classmethod
    def saturated(
        cls, model: ModelSpec, full_levels: int, u0: np.ndarray | None = None
    ) -> "FractionVector":
        """Every server holds ``full_levels`` customers; service phases are drawn from alpha."""
        start = _stationary_map_phase(model) if u0 is None else np.asarray(u0, dtype=float)
        alpha, _ = model.ph.arrays()
        entry = np.kron(start, alpha)
        return cls(start, np.tile(entry, (full_levels, 1)))

    @classmethod
    def from_tails(
        cls, model: ModelSpec, tails: np.ndarray, u0: np.ndarray | None = None
    ) -> "FractionVector":
        """Levels proportional to u₀⊗α with the given non-increasing tail masses."""
        start = _stationary_map_phase(model) if u0 is None else np.asarray(u0, dtype=float)
        alpha, _ = model.ph.arrays()
        tails = np.asarray(tails, dtype=float)
        return cls(start, tails[:, None] * np.kron(start, alpha)[None, :])

    @classmethod
    def random(
        cls, model: ModelSpec, K: int, rng: np.random.Generator, low: float = 0.2
    ) -> "FractionVector":
        """Componentwise non-increasing levels below u₀⊗α, each entry shrunk by U(low, 1)."""
        top = cls.saturated(model, 1).levels[0]
        levels = np.empty((K, top.size))
        previous = top
        for k in range(K):
            previous = previous * rng.uniform(low, 1.0, top.size)
            levels[k] = previous
        return cls(_stationary_map_phase(model), levels)


def _stationary_map_phase(model: ModelSpec) -> np.ndarray:
    C, D = model.map.matrices()
    return stationary_vector(C + D)


def metric(u: FractionVector, v: FractionVector) -> float:
    """Weighted sup distance: level k entries are divided by k + 1."""
    if u.u0.shape != v.u0.shape or u.levels.shape[1] != v.levels.shape[1]:
        raise ModelValidationError("metric needs fraction vectors of the same phase dimensions.")
    K = max(u.K, v.K)
    a = u.padded(K)
    b = v.padded(K)
    boundary = float(np.max(np.abs(a.u0 - b.u0))) if a.u0.size else 0.0
    if K == 0:
        return boundary
    weights = 1.0 / (np.arange(1, K + 1) + 1.0)
    levels = float(np.max(np.abs(a.levels - b.levels) * weights[:, None]))
    return max(boundary, levels)


@dataclass
class JacobianBlocks:
    """
    Block-tridiagonal Jacobian in the row-vector convention dF = du·J.

    ``A[k-1]`` is ∂F_k/∂u_{k−1} (for k = 1 the derivative with respect to u₀,
    of shape m_A × m), ``B[k-1]`` is ∂F_k/∂u_k and ``C[k-1]`` is ∂F_k/∂u_{k+1}.
    ``boundary`` is ∂F₀/∂u₀ = C + D.
    """

    boundary: np.ndarray
    A: list[np.ndarray]
    B: list[np.ndarray]
    C: list[np.ndarray]

    @property
    def K(self) -> int:
        return len(self.B)

    def assemble(self) -> np.ndarray:
        m_A = self.boundary.shape[0]
        width = self.B[0].shape[0] if self.B else 0
        size = m_A + self.K * width
        J = np.zeros((size, size))
        J[:m_A, :m_A] = self.boundary

        def span(level: int) -> slice:
            start = m_A + (level - 1) * width
            return slice(start, start + width)

        for k in range(1, self.K + 1):
            rows_prev = slice(0, m_A) if k == 1 else span(k - 1)
            J[rows_prev, span(k)] = self.A[k - 1]
            J[span(k), span(k)] = self.B[k - 1]
            if k < self.K:
                J[span(k + 1), span(k)] = self.C[k - 1]
        return J


def jacobian_norm(blocks: JacobianBlocks) -> float:
    """Max-row-sum norm of the Jacobian restricted to level inputs (k >= 1)."""
    J = blocks.assemble()
    m_A = blocks.boundary.shape[0]
    if J.shape[0] == m_A:
        return 0.0
    return float(np.abs(J[m_A:, :]).sum(axis=1).max())


@dataclass
class Trajectory:
    """Sampled solution of the mean-field ODEs plus integrator statistics."""

    times: np.ndarray
    states: list[FractionVector]
    clamped: int = 0
    projected: int = 0
    monotone_violations: int = 0
    nfev: int = 0
    k_history: list[int] = field(default_factory=list)
    model: ModelSpec | None = None

    @property
    def final(self) -> FractionVector:
        return self.states[-1]

    def state_at(self, t: float) -> FractionVector:
        """Sample closest to time t."""
        return self.states[int(np.argmin(np.abs(self.times - t)))]

    def to_frame(self, k_report: int = 10, per_entry: bool = False) -> pd.DataFrame:
        """Trajectory CSV layout: t, u0 entries, tails, then optional per-entry columns."""
        rows = []
        for t, state in zip(self.times, self.states):
            row: dict[str, float] = {"t": float(t)}
            for i, value in enumerate(state.u0, start=1):
                row[f"u0_{i}"] = float(value)
            tails = state.tails
            for k in range(1, k_report + 1):
                row[f"tail_{k}"] = float(tails[k - 1]) if k <= state.K else 0.0
            if per_entry:
                for k in range(1, k_report + 1):
                    for i in range(state.m_A):
                        for j in range(state.m_B):
                            value = state.levels[k - 1, i * state.m_B + j] if k <= state.K else 0.0
                            row[f"u_{k}_{i + 1}_{j + 1}"] = float(value)
            rows.append(row)
        return pd.DataFrame(rows)


class MeanFieldSystem:
    """
    Drift, Jacobian and integrator of the mean-field equations for one model.

    Level k ≥ 1 evolves as
    du_k = {u_{k−1}(D⊗I) − u_k(diag(De)⊗I)}·L_k + u_k{[C+diag(De)]⊕T} + u_{k+1}(I⊗T⁰α),
    with u₀⊗α in place of u_{k−1} at level 1 and L_k = L(u_{k−1}e, u_ke).
    """

    def __init__(self, model: ModelSpec) -> None:
        self.model = model
        self.d = model.d
        self.m_A, self.m_B = model.dims
        self.width = self.m_A * self.m_B
        C, D = model.map.matrices()
        alpha, T = model.ph.arrays()
        self.alpha = alpha
        self.generator = C + D
        arrivals = D.sum(axis=1)
        eye_b = np.eye(self.m_B)
        self.D_kron = kron_product(D, eye_b)
        self.arrival_kron = kron_product(np.diag(arrivals), eye_b)
        self.local = kron_sum(C + np.diag(arrivals), T)
        self.service = kron_product(np.eye(self.m_A), np.outer(exit_vector(T), alpha))
        self.restart = kron_product(np.eye(self.m_A), alpha[None, :])
        self._C, self._D, self._T = C, D, T

    def _check(self, u: FractionVector) -> None:
        if u.m_A != self.m_A or u.levels.shape[1] != self.width:
            raise ModelValidationError(
                f"Fraction vector has dims (m_A={u.m_A}, width={u.levels.shape[1]}) but the "
                f"model needs (m_A={self.m_A}, width={self.width})."
            )

    def _previous(self, u0: np.ndarray, levels: np.ndarray) -> np.ndarray:
        first = (u0 @ self.restart)[None, :]
        return np.vstack([first, levels[:-1]]) if levels.shape[0] else first[:0]

    def _drift(self, u0: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        du0 = u0 @ self.generator
        if levels.shape[0] == 0:
            return du0, levels.copy()
        prev = self._previous(u0, levels)
        nxt = np.vstack([levels[1:], np.zeros((1, self.width))])
        factor = env_factor_levels(prev.sum(axis=1), levels.sum(axis=1), self.d)
        joining = prev @ self.D_kron - levels @ self.arrival_kron
        dlevels = joining * factor[:, None] + levels @ self.local + nxt @ self.service
        return du0, dlevels

    def rhs(self, u: FractionVector) -> FractionVector:
        """Time derivative of ``u``; the level above K is treated as empty."""
        self._check(u)
        du0, dlevels = self._drift(u.u0, u.levels)
        return FractionVector(du0, dlevels)

    def jacobian(self, u: FractionVector) -> JacobianBlocks:
        """Exact derivative blocks of ``rhs`` at ``u``."""
        self._check(u)
        levels = u.levels
        prev = self._previous(u.u0, levels)
        a = prev.sum(axis=1)
        b = levels.sum(axis=1)
        factor = env_factor_levels(a, b, self.d)
        grad_a, grad_b = env_factor_gradient(a, b, self.d)
        joining = prev @ self.D_kron - levels @ self.arrival_kron
        ones = np.ones(self.width)

        A: list[np.ndarray] = []
        B: list[np.ndarray] = []
        C: list[np.ndarray] = []
        for index in range(u.K):
            w = joining[index]
            if index == 0:
                lower = factor[0] * (self.restart @ self.D_kron) + grad_a[0] * np.outer(
                    np.ones(self.m_A), w
                )
            else:
                lower = factor[index] * self.D_kron + grad_a[index] * np.outer(ones, w)
            diagonal = -factor[index] * self.arrival_kron + grad_b[index] * np.outer(ones, w)
            A.append(lower)
            B.append(diagonal + self.local)
            if index < u.K - 1:
                C.append(self.service.copy())
        return JacobianBlocks(boundary=self.generator.copy(), A=A, B=B, C=C)

    def lipschitz_bound(self) -> float:
        """M = ‖C+diag(De)‖ + 2[d+(d−1)(d−2)]‖D‖ + ‖T‖ + ‖T⁰α‖ in the max-row-sum norm."""
        d = self.d

        def norm(matrix: np.ndarray) -> float:
            return float(np.abs(matrix).sum(axis=1).max())

        arrivals = np.diag(self._D.sum(axis=1))
        alpha_exit = np.outer(exit_vector(self._T), self.alpha)
        return (
            norm(self._C + arrivals)
            + 2 * (d + (d - 1) * (d - 2)) * norm(self._D)
            + norm(self._T)
            + norm(alpha_exit)
        )

    def integrate(
        self,
        g: FractionVector,
        t_end: float,
        sample_times: np.ndarray | list[float] | None = None,
        tol: float = 1e-8,
        trunc_eps: float = 1e-12,
        atol: float | None = None,
        max_step: float = np.inf,
        check_every: float = 1.0,
        max_levels: int = 2000,
        negative_tol: float = 1e-12,
    ) -> Trajectory:
        """
        Integrate from ``g`` to ``t_end`` with adaptive RK45 and adaptive truncation.

        The truncation starts at max(20, first level whose tail is below
        ``trunc_eps``) and grows by 10 levels, redoing the current segment,
        whenever u_K e exceeds ``trunc_eps`` at a segment boundary. Negative
        entries inside the step error bound are projected to zero silently,
        those down to ``negative_tol`` are clamped and counted, deeper ones abort.
        """
        self._check(g)
        if t_end <= 0:
            raise ModelValidationError("t_end must be positive.")
        rho, stable = traffic_intensity(self.model)
        if not stable:
            logger.warning("Integrating an unstable model (rho=%.4f); tails will not settle.", rho)

        samples = (
            np.linspace(0.0, t_end, 101)
            if sample_times is None
            else np.unique(np.clip(np.asarray(sample_times, dtype=float), 0.0, t_end))
        )
        if samples.size == 0 or samples[-1] < t_end:
            samples = np.append(samples, t_end)
        checkpoints = np.unique(
            np.concatenate([samples, np.arange(0.0, t_end, check_every), [0.0, t_end]])
        )
        atol = tol * 1e-6 if atol is None else atol

        K = self._initial_truncation(g, trunc_eps)
        if K > max_levels:
            raise ResourceLimitError(
                f"Initial truncation K={K} already exceeds max_levels={max_levels}."
            )
        state = g.truncated(K).padded(K)
        y = state.flatten()
        trajectory = Trajectory(times=np.zeros(0), states=[], k_history=[K], model=self.model)
        recorded_times: list[float] = []

        if samples[0] == 0.0:
            recorded_times.append(0.0)
            trajectory.states.append(state)

        for t_start, t_stop in zip(checkpoints[:-1], checkpoints[1:]):
            while True:
                solution = solve_ivp(
                    self._flat_drift,
                    (t_start, t_stop),
                    y,
                    method="RK45",
                    rtol=tol,
                    atol=atol,
                    max_step=max_step,
                )
                trajectory.nfev += int(solution.nfev)
                if not solution.success:
                    raise IntegrationError(
                        f"Integrator failed at t={t_start:.6g}: {solution.message}",
                        last_time=float(t_start),
                        last_state=FractionVector.from_flat(y, self.m_A, self.width),
                    )
                y_end = solution.y[:, -1]
                top = y_end[-self.width :].sum()
                if top <= trunc_eps:
                    break
                if K + 10 > max_levels:
                    raise ResourceLimitError(
                        f"Truncation would exceed max_levels={max_levels} at t={t_stop:.6g}."
                    )
                K += 10
                y = np.concatenate([y, np.zeros(10 * self.width)])
                trajectory.k_history.append(K)
                logger.debug("Extended truncation to K=%d at t=%.4g", K, t_start)

            severe = y_end < -negative_tol
            if np.any(severe):
                raise IntegrationError(
                    f"State entry fell to {y_end.min():.3e} at t={t_stop:.6g}, "
                    "below the roundoff band.",
                    last_time=float(t_start),
                    last_state=FractionVector.from_flat(y, self.m_A, self.width),
                )
            roundoff = min(negative_tol, ROUNDOFF_FACTOR * np.sqrt(y_end.size) * atol)
            trajectory.projected += int(np.sum((y_end < 0) & (y_end >= -roundoff)))
            trajectory.clamped += int(np.sum(y_end < -roundoff))
            y = np.where(y_end < 0, 0.0, y_end)

            if np.any(np.isclose(samples, t_stop, rtol=0.0, atol=1e-12)):
                current = FractionVector.from_flat(y, self.m_A, self.width)
                recorded_times.append(float(t_stop))
                trajectory.states.append(current)
                counts = current.violations(INVARIANT_TOL)
                if counts["componentwise"] or counts["tails"]:
                    trajectory.monotone_violations += 1

        trajectory.times = np.asarray(recorded_times)
        if trajectory.clamped:
            logger.warning(
                "Clamped %d negative entries beyond the step error bound to zero.",
                trajectory.clamped,
            )
        logger.debug("Projected %d step-noise negatives to zero.", trajectory.projected)
        logger.info(
            "Integrated to t=%.4g with final K=%d (%d drift evaluations).",
            t_end,
            K,
            trajectory.nfev,
        )
        return trajectory

    def _initial_truncation(self, g: FractionVector, trunc_eps: float) -> int:
        below = np.flatnonzero(g.tails < trunc_eps)
        first_small = int(below[0]) + 1 if below.size else g.K + 1
        return max(20, first_small)

    def _flat_drift(self, _t: float, y: np.ndarray) -> np.ndarray:
        u0 = y[: self.m_A]
        levels = y[self.m_A :].reshape(-1, self.width)
        du0, dlevels = self._drift(u0, levels)
        return np.concatenate([du0, dlevels.ravel()])
