"""
Fixed point of the mean-field equations through its level-dependent QBD structure.

Levels are numbered from 1. ``R[i]`` maps π_{i+1} to π_{i+2} and ``U[i]`` is
U_{i+1}, so π_{k+1} = π_k R_k with R_k = ζ_{k+1}(D⊗I)(−U_{k+1})⁻¹.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import brentq

from supermarket.errors import DomainError, NumericalError, ResourceLimitError, SolverError
from supermarket.models import ModelSpec, PhDistribution
from supermarket.services.meanfield import FractionVector, MeanFieldSystem
from supermarket.utils.envfactor import env_factor_levels
from supermarket.utils.stochkit import (
    exit_vector,
    kron_product,
    kron_sum,
    ph_mean,
    require_stable,
    stationary_vector,
)

logger = logging.getLogger(__name__)

TAIL_EPS = 1e-16
LEVEL_MARGIN = 10
MAX_EXPONENT = 10**7
ROOT_GRID = 200
ROOT_XTOL = 1e-14
ROOT_MAXITER = 200


class IndexConvention(str, Enum):
    """Which ζ multiplies the upward block of level k in the R recursion."""

    STANDARD = "standard"  # R_k = ζ_{k+1}(D⊗I)(−U_{k+1})⁻¹
    SHIFTED = "shifted"  # R_k = ζ_k(D⊗I)(−U_{k+1})⁻¹, U unchanged


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise DomainError(f"Traffic intensity must lie in (0, 1), got rho={rho!r}.")


def _tail_exponent(d: int, k: int) -> float:
    exponent = k if d == 1 else (d**k - 1) // (d - 1)
    return float(min(exponent, MAX_EXPONENT))


def tail(rho: float, d: int, k: int) -> float:
    """ρ^((d^k−1)/(d−1)), or ρ^k when d = 1."""
    _check_rho(rho)
    if d < 1 or k < 0:
        raise DomainError(f"tail needs d >= 1 and k >= 0, got d={d}, k={k}.")
    return float(rho ** _tail_exponent(d, k))


def tails_formula(rho: float, d: int, K: int) -> np.ndarray:
    """Formula tails for k = 0..K."""
    return np.array([tail(rho, d, k) for k in range(K + 1)])


def zeta(rho: float, d: int, k: int) -> float:
    """ζ_k = L(t_{k−1}, t_k) on consecutive formula tails; ζ₁ = (1−ρ^d)/(1−ρ)."""
    if k < 1:
        raise DomainError(f"zeta is defined for k >= 1, got k={k}.")
    return float(env_factor_levels(tail(rho, d, k - 1), tail(rho, d, k), d))


def zetas_from_tails(tails: np.ndarray, d: int) -> np.ndarray:
    """ζ_1..ζ_n from tails η_0..η_n."""
    tails = np.asarray(tails, dtype=float)
    return env_factor_levels(tails[:-1], tails[1:], d)


def default_truncation(
    rho: float, d: int, eps: float = TAIL_EPS, margin: int = LEVEL_MARGIN
) -> int:
    """First level whose formula tail falls below ``eps``, plus ``margin``."""
    _check_rho(rho)
    if d == 1:
        first = int(np.ceil(np.log(eps) / np.log(rho)))
    else:
        first = 1
        while tail(rho, d, first) >= eps:
            first += 1
    return max(first, 1) + margin


@dataclass(frozen=True)
class QbdBlockRow:
    """Row k of the truncated level-dependent QBD generator."""

    level: int
    zeta: float
    zeta_next: float
    diag: np.ndarray
    upper: np.ndarray
    lower: np.ndarray | None
    arrivals: np.ndarray
    service_exit: np.ndarray

    def row_sums(self) -> np.ndarray:
        total = self.diag + self.upper
        if self.lower is not None:
            total = total + self.lower
        return total.sum(axis=1)

    def expected_defect(self) -> np.ndarray:
        """−(ζ_k−ζ_{k+1})(De⊗e), with an extra −e⊗T⁰ on the first row."""
        m_B = self.service_exit.size
        defect = -(self.zeta - self.zeta_next) * np.kron(self.arrivals, np.ones(m_B))
        if self.lower is None:
            defect = defect - np.kron(np.ones(self.arrivals.size), self.service_exit)
        return defect


class _Blocks:
    """Level-independent building blocks shared by the recursions."""

    def __init__(self, model: ModelSpec) -> None:
        C, D = model.map.matrices()
        alpha, T = model.ph.arrays()
        m_A, m_B = model.dims
        self.m_A, self.m_B = m_A, m_B
        self.width = m_A * m_B
        self.arrivals = D.sum(axis=1)
        self.service_exit = exit_vector(T)
        self.D_kron = kron_product(D, np.eye(m_B))
        self.arrival_kron = kron_product(np.diag(self.arrivals), np.eye(m_B))
        self.local = kron_sum(C + np.diag(self.arrivals), T)
        self.service = kron_product(np.eye(m_A), np.outer(self.service_exit, alpha))
        self.omega = stationary_vector(C + D)
        self.entry = np.kron(self.omega, alpha)

    def diagonal(self, zeta_k: float) -> np.ndarray:
        return self.local - zeta_k * self.arrival_kron


def qbd_blocks(model: ModelSpec, K: int, zetas: np.ndarray | None = None) -> list[QbdBlockRow]:
    """Rows 1..K of the QBD generator; ``zetas`` holds ζ_1..ζ_{K+1} (formula by default)."""
    rho = require_stable(model)
    blocks = _Blocks(model)
    z = _zeta_vector(rho, model.d, K, zetas)
    rows = []
    for k in range(1, K + 1):
        rows.append(
            QbdBlockRow(
                level=k,
                zeta=float(z[k - 1]),
                zeta_next=float(z[k]),
                diag=blocks.diagonal(z[k - 1]),
                upper=z[k] * blocks.D_kron,
                lower=None if k == 1 else blocks.service.copy(),
                arrivals=blocks.arrivals,
                service_exit=blocks.service_exit,
            )
        )
    return rows


def _zeta_vector(rho: float, d: int, K: int, zetas: np.ndarray | None) -> np.ndarray:
    if zetas is None:
        return zetas_from_tails(tails_formula(rho, d, K + 1), d)
    z = np.asarray(zetas, dtype=float)
    if z.size != K + 1:
        raise DomainError(f"Expected {K + 1} zeta values (levels 1..K+1), got {z.size}.")
    return z


@dataclass
class FixedPointSolution:
    """Solved fixed point with its measures and diagnostics."""

    model: ModelSpec
    rho: float
    pi0: np.ndarray
    pi: np.ndarray
    zeta: np.ndarray
    R: list[np.ndarray]
    U: list[np.ndarray]
    residual: float
    convention: IndexConvention = IndexConvention.STANDARD
    iterations: int = 0
    refinement_change: float = 0.0
    tail_deviation: float = 0.0
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def U0(self) -> np.ndarray:
        return self.U[0]

    @property
    def tails(self) -> np.ndarray:
        """π_k e for k = 1..K."""
        return self.pi.sum(axis=1)

    @property
    def mean_queue_length(self) -> float:
        return float(self.tails.sum())

    def as_fraction_vector(self) -> FractionVector:
        return FractionVector(self.pi0, self.pi)

    def to_frame(self) -> pd.DataFrame:
        """Fixed-point CSV layout: k, tail_pi_k, tail_formula, then π_k entries (i, j)-major."""
        m_A, m_B = self.model.dims
        formula = tails_formula(self.rho, self.model.d, self.K)[1:]
        frame = pd.DataFrame(
            {
                "k": np.arange(1, self.K + 1),
                "tail_pi_k": self.tails,
                "tail_formula": formula,
            }
        )
        entries = {
            f"pi_{i + 1}_{j + 1}": self.pi[:, i * m_B + j] for i in range(m_A) for j in range(m_B)
        }
        return pd.concat([frame, pd.DataFrame(entries)], axis=1)


class FixedPointSolver:
    """
    Matrix-analytic solver for the fixed point of one model.

    The QBD is solved with ζ from the tail formula, the index convention with
    the smaller residual is kept, and ζ is then refined by Picard iteration on
    ζ_k = L(π_{k−1}e, π_ke) until π solves the nonlinear equations.
    """

    def __init__(
        self,
        model: ModelSpec,
        tol: float = 1e-8,
        max_levels: int = 5000,
        max_iterations: int = 500,
    ) -> None:
        self.model = model
        self.tol = tol
        self.max_levels = max_levels
        self.max_iterations = max_iterations
        self.rho = require_stable(model)
        self.blocks = _Blocks(model)
        self.system = MeanFieldSystem(model)

    def solve_measures(
        self,
        K: int,
        zetas: np.ndarray | None = None,
        convention: IndexConvention = IndexConvention.STANDARD,
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """
        Backward recursion from U_K = B_K with R ≡ 0 beyond level K; returns (R, U).

        U always follows U_k = B_k + ζ_{k+1}(D⊗I)(−U_{k+1})⁻¹(I⊗T⁰α). Under
        ``SHIFTED`` the returned R_k = ζ_k(D⊗I)(−U_{k+1})⁻¹ carries the ζ of
        one level lower, which is the STANDARD R_k scaled by ζ_k/ζ_{k+1}.
        """
        z = _zeta_vector(self.rho, self.model.d, K, zetas)
        b = self.blocks
        U: list[np.ndarray] = [np.zeros((b.width, b.width))] * K
        R: list[np.ndarray] = [np.zeros((b.width, b.width))] * max(K - 1, 0)
        U[K - 1] = b.diagonal(z[K - 1])
        for k in range(K - 1, 0, -1):
            step = self._right_solve(z[k] * b.D_kron, U[k], level=k + 1)
            U[k - 1] = b.diagonal(z[k - 1]) + step @ b.service
            if convention == IndexConvention.STANDARD:
                R[k - 1] = step
            else:
                R[k - 1] = self._right_solve(z[k - 1] * b.D_kron, U[k], level=k + 1)
        return R, U

    def solve_pi(self, K: int | None = None) -> FixedPointSolution:
        """Fixed point with automatic or given truncation, refined in K and in ζ."""
        d = self.model.d
        K = default_truncation(self.rho, d) if K is None else K
        K, change = self._refine_truncation(K)

        candidates = {}
        for convention in IndexConvention:
            R, U = self.solve_measures(K, convention=convention)
            pi = self._pi_from_measures(R, U, zeta_1=zeta(self.rho, d, 1))
            candidates[convention] = (self._residual_of(pi), pi)
        convention = min(candidates, key=lambda name: candidates[name][0])
        pi = candidates[convention][1]
        logger.info(
            "Index convention %s chosen (residuals: %s)",
            convention.value,
            {name.value: f"{value[0]:.2e}" for name, value in candidates.items()},
        )

        pi, z, R, U, iterations = self._picard(pi, K, convention)
        residual = self._residual_of(pi)
        formula = tails_formula(self.rho, d, K)[1:]
        deviation = float(np.max(np.abs(pi.sum(axis=1) - formula)))
        diagnostics = {
            "K": K,
            "convention": convention.value,
            "convention_residuals": {name.value: value[0] for name, value in candidates.items()},
            "picard_iterations": iterations,
            "refinement_change": change,
            "residual": residual,
            "tail_deviation": deviation,
            "min_R": float(min((r.min() for r in R), default=0.0)),
        }
        if residual > self.tol:
            raise SolverError(
                f"Fixed-point residual {residual:.3e} exceeds tol {self.tol:g} under every "
                "index convention.",
                diagnostics=diagnostics,
            )
        if deviation > self.tol:
            logger.warning(
                "Tail law deviates from the solved fixed point by %.3e (diagnostic only).",
                deviation,
            )
        logger.info(
            "Fixed point solved: K=%d, residual=%.2e, Picard iterations=%d",
            K,
            residual,
            iterations,
        )
        return FixedPointSolution(
            model=self.model,
            rho=self.rho,
            pi0=self.blocks.omega.copy(),
            pi=pi,
            zeta=z,
            R=R,
            U=U,
            residual=residual,
            convention=convention,
            iterations=iterations,
            refinement_change=change,
            tail_deviation=deviation,
            diagnostics=diagnostics,
        )

    def residual(self, solution: FixedPointSolution | FractionVector) -> float:
        if isinstance(solution, FixedPointSolution):
            solution = solution.as_fraction_vector()
        state = solution
        drift = self.system.rhs(state)
        return float(max(np.max(np.abs(drift.u0)), np.max(np.abs(drift.levels), initial=0.0)))

    def factorization_error(self, K: int, zetas: np.ndarray | None = None) -> float:
        """Max entry of (I−R_U)U_D(I−G_L) − Q on the truncated generator."""
        z = _zeta_vector(self.rho, self.model.d, K, zetas)
        R, U = self.solve_measures(K, zetas=z)
        b = self.blocks
        n = b.width
        size = K * n
        Q = np.zeros((size, size))
        upper = np.zeros((size, size))
        diag = np.zeros((size, size))
        lower = np.zeros((size, size))
        for row in qbd_blocks(self.model, K, zetas=z):
            k = row.level - 1
            span = slice(k * n, (k + 1) * n)
            Q[span, span] = row.diag
            diag[span, span] = U[k]
            if k + 1 < K:
                below = slice((k + 1) * n, (k + 2) * n)
                Q[span, below] = row.upper
                Q[below, span] = b.service
                upper[span, below] = R[k]
                lower[below, span] = linalg.solve(-U[k + 1], b.service)
        eye = np.eye(size)
        rebuilt = (eye - upper) @ diag @ (eye - lower)
        return float(np.max(np.abs(rebuilt - Q)))

    def _right_solve(self, rhs: np.ndarray, U: np.ndarray, level: int) -> np.ndarray:
        """rhs·(−U)⁻¹."""
        try:
            return linalg.solve((-U).T, rhs.T).T
        except linalg.LinAlgError as exc:
            raise NumericalError(f"U_{level} is singular.") from exc

    def _pi_from_measures(
        self, R: list[np.ndarray], U: list[np.ndarray], zeta_1: float
    ) -> np.ndarray:
        b = self.blocks
        K = len(U)
        pi = np.zeros((K, b.width))
        pi[0] = self._right_solve(zeta_1 * (b.entry @ b.D_kron)[None, :], U[0], level=1)[0]
        for k in range(1, K):
            pi[k] = pi[k - 1] @ R[k - 1]
        pi[np.abs(pi) < 1e-300] = 0.0
        return pi

    def _residual_of(self, pi: np.ndarray) -> float:
        return self.residual(FractionVector(self.blocks.omega, np.clip(pi, 0.0, None)))

    def _picard(
        self, pi: np.ndarray, K: int, convention: IndexConvention
    ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], list[np.ndarray], int]:
        d = self.model.d
        z = zetas_from_tails(tails_formula(self.rho, d, K + 1), d)
        damping = 1.0
        previous_change = np.inf
        R, U = self.solve_measures(K, zetas=z, convention=convention)
        for iteration in range(1, self.max_iterations + 1):
            tails = np.concatenate([[1.0], np.clip(pi.sum(axis=1), 0.0, None), [0.0]])
            target = zetas_from_tails(tails, d)
            z = (1.0 - damping) * z + damping * target
            R, U = self.solve_measures(K, zetas=z, convention=convention)
            updated = self._pi_from_measures(R, U, zeta_1=z[0])
            change = float(np.max(np.abs(updated - pi)))
            pi = updated
            logger.debug("Picard iteration %d: change=%.3e", iteration, change)
            if change <= self.tol * 1e-3:
                return np.clip(pi, 0.0, None), z, R, U, iteration
            if change > previous_change and damping == 1.0:
                logger.info("Picard update grew; switching to damping 0.5")
                damping = 0.5
            previous_change = change
        logger.warning("Picard refinement stopped after %d iterations", self.max_iterations)
        return np.clip(pi, 0.0, None), z, R, U, self.max_iterations

    def _refine_truncation(self, K: int) -> tuple[int, float]:
        """Grow K by 10 until R₁ changes by less than tol."""
        R, _ = self.solve_measures(K)
        while True:
            if K + LEVEL_MARGIN > self.max_levels:
                raise ResourceLimitError(
                    f"Truncation refinement did not settle below max_levels={self.max_levels}."
                )
            R_next, _ = self.solve_measures(K + LEVEL_MARGIN)
            first = R[0] if R else np.zeros((self.blocks.width, self.blocks.width))
            first_next = R_next[0]
            change = float(np.max(np.abs(first_next - first)))
            if change < self.tol:
                return K, change
            logger.debug("K=%d changes R_1 by %.3e; growing", K, change)
            K += LEVEL_MARGIN
            R = R_next


def solve_measures(
    model: ModelSpec, K: int, tol: float = 1e-8
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return FixedPointSolver(model, tol=tol).solve_measures(K)


def solve_pi(model: ModelSpec, K: int | None = None, tol: float = 1e-8) -> FixedPointSolution:
    return FixedPointSolver(model, tol=tol).solve_pi(K)


def residual(pi: FixedPointSolution | FractionVector, model: ModelSpec) -> float:
    """Max norm of the mean-field drift at ``pi``."""
    state = pi.as_fraction_vector() if isinstance(pi, FixedPointSolution) else pi
    drift = MeanFieldSystem(model).rhs(state)
    return float(max(np.max(np.abs(drift.u0)), np.max(np.abs(drift.levels), initial=0.0)))


def poisson_explicit(
    ph: PhDistribution,
    lam: float,
    d: int,
    K: int | None = None,
    self_consistent: bool = True,
) -> np.ndarray:
    """
    Level-by-level fixed point for Poisson input.

    Each level satisfies π_k(λζ_kI − T) = λζ_kπ_{k−1} + λη_k^d α with π₀ = α
    and η_k = π_ke. The seed α is u₀⊗α of the drift when the input has a
    single phase, so the rows match ``FixedPointSolver.solve_pi``. With
    ``self_consistent`` the scalar η_k is the root of that relation with
    ζ_k = L(η_{k−1}, η_k); otherwise η_k and ζ_k come from the tail formula.
    Levels past the first tail below ``TAIL_EPS`` stay zero.
    """
    alpha, T = ph.arrays()
    rho = lam * ph_mean(ph)
    _check_rho(rho)
    K = default_truncation(rho, d) if K is None else K
    eye = np.eye(T.shape[0])

    def level(previous: np.ndarray, eta: float, zeta_k: float) -> np.ndarray:
        rhs = lam * zeta_k * previous + lam * eta**d * alpha
        try:
            return linalg.solve((lam * zeta_k * eye - T).T, rhs)
        except linalg.LinAlgError as exc:
            raise NumericalError("Level matrix λζI − T is singular.") from exc

    pi = np.zeros((K, T.shape[0]))
    previous = alpha
    eta_prev = 1.0
    for k in range(1, K + 1):
        if self_consistent:
            eta = _level_root(lambda x: level(previous, x, _pair_factor(eta_prev, x, d)), eta_prev)
            zeta_k = _pair_factor(eta_prev, eta, d)
        else:
            eta = tail(rho, d, k)
            zeta_k = zeta(rho, d, k)
        current = level(previous, eta, zeta_k)
        pi[k - 1] = current
        previous, eta_prev = current, float(current.sum())
        if eta_prev < TAIL_EPS:
            logger.debug("Poisson levels stop at k=%d with tail %.3e", k, eta_prev)
            break
    return pi


def _pair_factor(a: float, b: float, d: int) -> float:
    return float(env_factor_levels(a, b, d))


def _level_root(solve_level, upper: float) -> float:
    """Smallest root of η ↦ level(η)e − η on [0, upper], located on a grid then by brentq."""

    def gap(x: float) -> float:
        return float(solve_level(x).sum() - x)

    grid = np.linspace(0.0, upper, ROOT_GRID + 1)
    values = [gap(x) for x in grid]
    if values[0] == 0.0:
        return 0.0
    for left, right, f_left, f_right in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if f_right == 0.0:
            return float(right)
        if np.sign(f_left) != np.sign(f_right):
            try:
                root = brentq(
                    gap,
                    left,
                    right,
                    xtol=ROOT_XTOL * max(upper, np.finfo(float).tiny),
                    rtol=4 * np.finfo(float).eps,
                    maxiter=ROOT_MAXITER,
                )
            except (RuntimeError, ValueError) as exc:
                raise NumericalError(
                    f"Level root did not converge on [{left:.3e}, {right:.3e}]: {exc}"
                ) from exc
            logger.debug("Level root %.6e bracketed in [%.3e, %.3e]", root, left, right)
            return float(root)
    raise NumericalError(f"No sign change of the level equation on [0, {upper:.3e}].")


def queue_length_distribution(solution: FixedPointSolution) -> pd.Series:
    """P(a server holds exactly k customers) = π_k e − π_{k+1} e, k = 0..K."""
    tails = np.concatenate([[1.0], solution.tails, [0.0]])
    return pd.Series(tails[:-1] - tails[1:], index=pd.RangeIndex(0, solution.K + 1, name="k"))


def joining_probabilities(solution: FixedPointSolution, d: int | None = None) -> pd.DataFrame:
    """
    Law of the queue length an arriving customer joins, in two forms.

    ``d_choice`` is η_k^d − η_{k+1}^d; ``zeta_form`` is (η_k − η_{k+1})ζ_{k+1}
    with the solver's ζ. They agree when ζ is self-consistent.
    """
    d = solution.model.d if d is None else d
    tails = np.concatenate([[1.0], solution.tails, [0.0]])
    z = np.asarray(solution.zeta, dtype=float)[: solution.K + 1]
    if z.size < solution.K + 1:
        z = np.concatenate([z, np.zeros(solution.K + 1 - z.size)])
    return pd.DataFrame(
        {
            "k": np.arange(0, solution.K + 1),
            "d_choice": tails[:-1] ** d - tails[1:] ** d,
            "zeta_form": (tails[:-1] - tails[1:]) * z,
        }
    )
