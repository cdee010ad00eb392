"""MAP and PH primitives: generator checks, stationary vectors, rates and Kronecker algebra."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from supermarket.errors import DomainError, ModelValidationError, StructuralError

if TYPE_CHECKING:
    from supermarket.models import MapDescriptor, ModelSpec, PhDistribution

DEFAULT_ROW_SUM_TOL = 1e-10
STATIONARY_RESIDUAL_TOL = 1e-12


def as_square(matrix: object, name: str = "matrix") -> np.ndarray:
    """Coerce ``matrix`` to a finite 2-D float array and check that it is square."""
    array = np.atleast_2d(np.asarray(matrix, dtype=float))
    if array.ndim != 2 or array.shape[0] != array.shape[1] or array.size == 0:
        raise ModelValidationError(
            f"{name} must be a non-empty square matrix, got shape {array.shape}."
        )
    if not np.all(np.isfinite(array)):
        raise ModelValidationError(f"{name} contains non-finite entries.")
    return array


def check_generator(Q: np.ndarray, tol: float = DEFAULT_ROW_SUM_TOL, name: str = "Q") -> None:
    """Raise when ``Q`` is not a generator: negative off-diagonals or non-zero row sums."""
    Q = as_square(Q, name)
    off_diagonal = Q - np.diag(np.diag(Q))
    negative = np.argwhere(off_diagonal < -tol)
    if negative.size:
        row, col = negative[0]
        raise ModelValidationError(
            f"{name} has a negative off-diagonal entry at row {row}, column {col}: {Q[row, col]}."
        )
    row_sums = Q.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(row_sums) > tol)
    if bad_rows.size:
        row = int(bad_rows[0])
        raise ModelValidationError(
            f"Row {row} of {name} sums to {row_sums[row]:.3e}; generator rows must sum to 0 "
            f"(tolerance {tol:g})."
        )


def is_irreducible(Q: np.ndarray) -> bool:
    """Return True when the off-diagonal transition pattern of ``Q`` is strongly connected."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape[0] == 1:
        return True
    pattern = (np.abs(Q - np.diag(np.diag(Q))) > 0).astype(int)
    n_components, _ = connected_components(pattern, directed=True, connection="strong")
    return n_components == 1


def stationary_vector(Q: np.ndarray, tol: float = DEFAULT_ROW_SUM_TOL) -> np.ndarray:
    """
    Solve x Q = 0, x e = 1 for an irreducible generator ``Q``.

    The rank-deficient system is augmented with the normalisation row and
    solved directly by LU.
    """
    Q = as_square(Q, "Q")
    check_generator(Q, tol=tol, name="Q")
    n = Q.shape[0]
    if n == 1:
        return np.ones(1)
    if not is_irreducible(Q):
        raise StructuralError("Generator is reducible: more than one communicating class.")

    system = Q.T.copy()
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        x = linalg.solve(system, rhs)
    except linalg.LinAlgError as exc:
        raise StructuralError(
            "Stationary system is singular beyond the rank-one deficiency."
        ) from exc

    x[np.abs(x) < 1e-300] = 0.0
    if np.any(x < -1e-12):
        raise StructuralError(
            "Stationary solve produced negative probabilities; chain is reducible."
        )
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    residual = np.max(np.abs(x @ Q))
    if residual > STATIONARY_RESIDUAL_TOL * max(1.0, np.max(np.abs(Q))):
        # one refinement step
        correction = linalg.solve(system, np.concatenate([-(x @ Q)[:-1], [0.0]]))
        x = np.clip(x + correction, 0.0, None)
        x /= x.sum()
    return x


def exit_vector(T: np.ndarray) -> np.ndarray:
    """Absorption rate vector T⁰ = −T e."""
    T = np.asarray(T, dtype=float)
    return -T.sum(axis=1)


def map_rate(arrivals: "MapDescriptor") -> float:
    """Stationary arrival rate λ = ω D e."""
    C, D = arrivals.matrices()
    omega = stationary_vector(C + D)
    return float(omega @ D.sum(axis=1))


def ph_mean(ph: "PhDistribution") -> float:
    """Mean service time E[X] = −α T⁻¹ e."""
    alpha, T = ph.arrays()
    try:
        inverse_e = linalg.solve(-T, np.ones(T.shape[0]))
    except linalg.LinAlgError as exc:
        raise ModelValidationError("PH matrix T is singular.") from exc
    return float(alpha @ inverse_e)


def ph_residual(ph: "PhDistribution") -> tuple[np.ndarray, float]:
    """
    Residual service law (θ, T): θ is stationary for T + T⁰α.

    Returns θ and E[X_R] = θ(−T)⁻¹e.
    """
    alpha, T = ph.arrays()
    restart = T + np.outer(exit_vector(T), alpha)
    theta = stationary_vector(restart)
    mean_residual = float(theta @ linalg.solve(-T, np.ones(T.shape[0])))
    return theta, mean_residual


def traffic_intensity(model: "ModelSpec") -> tuple[float, bool]:
    """Return ρ = λ E[X] and whether the model is stable (ρ < 1)."""
    rho = map_rate(model.map) * ph_mean(model.ph)
    return rho, bool(rho < 1.0)


def require_stable(model: "ModelSpec") -> float:
    """Return ρ, raising DomainError when the model is not stable."""
    rho, stable = traffic_intensity(model)
    if not stable:
        raise DomainError(f"Model is unstable: traffic intensity rho={rho:.6g} >= 1.")
    return rho


def scaled_map(arrivals: "MapDescriptor", N: int) -> "MapDescriptor":
    """
    Descriptor of the aggregate MAP feeding N servers.

    With ℂ = C + diag(De): C(N) = ℂ − N diag(De) and D(N) = N D.
    """
    if N < 1:
        raise ModelValidationError("N must be at least 1.")
    C, D = arrivals.matrices()
    arrival_diag = np.diag(D.sum(axis=1))
    full = C + arrival_diag
    return type(arrivals)(C=(full - N * arrival_diag).tolist(), D=(N * D).tolist())


def kron_product(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product A⊗B = (a_ij B)."""
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def kron_sum(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker sum A⊕B = A⊗I + I⊗B; both operands must be square."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
        raise ModelValidationError(
            f"kron_sum requires square operands, got {A.shape} and {B.shape}."
        )
    return np.kron(A, np.eye(B.shape[0])) + np.kron(np.eye(A.shape[0]), B)


def boundary_solution(u0: np.ndarray, Q: np.ndarray, t: float) -> np.ndarray:
    """MAP-phase marginal at time t: u₀(t) = u₀(0) exp{Qt}."""
    return np.asarray(u0, dtype=float) @ linalg.expm(np.asarray(Q, dtype=float) * t)
