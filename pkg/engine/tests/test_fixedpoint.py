from __future__ import annotations

from unittest.mock import patch

import numpy as np
import pytest

from supermarket.errors import DomainError, NumericalError, ResourceLimitError, SolverError
from supermarket.models import ModelSpec
from supermarket.sample_data import exponential, load_sample, poisson
from supermarket.services.fixedpoint import (
    FixedPointSolver,
    IndexConvention,
    default_truncation,
    joining_probabilities,
    poisson_explicit,
    qbd_blocks,
    queue_length_distribution,
    residual,
    solve_pi,
    tail,
    tails_formula,
    zeta,
    zetas_from_tails,
)
from supermarket.services.meanfield import FractionVector, MeanFieldSystem, metric
from supermarket.utils.stochkit import ph_mean

MEAN_QUEUE_RHO_HALF_D2 = 0.6328430180437863


def test_tail_formula_values() -> None:
    assert tail(0.5, 2, 0) == 1.0
    assert tail(0.5, 2, 1) == pytest.approx(0.5)
    assert tail(0.5, 2, 3) == pytest.approx(0.5**7)
    assert tail(0.5, 1, 4) == pytest.approx(0.5**4)
    np.testing.assert_allclose(tails_formula(0.5, 3, 2), [1.0, 0.5, 0.5**4])


def test_tail_formula_domain() -> None:
    with pytest.raises(DomainError, match=r"\(0, 1\)"):
        tail(1.0, 2, 1)
    with pytest.raises(DomainError, match="k >= 0"):
        tail(0.5, 2, -1)


def test_zeta_at_first_level() -> None:
    assert zeta(0.5, 2, 1) == pytest.approx((1 - 0.5**2) / (1 - 0.5))
    assert zeta(0.3, 5, 1) == pytest.approx((1 - 0.3**5) / (1 - 0.3))
    np.testing.assert_allclose(zetas_from_tails(np.array([1.0, 0.5, 0.125]), 2), [1.5, 0.625])


def test_default_truncation() -> None:
    assert default_truncation(0.5, 1) == 64
    assert default_truncation(0.5, 2) == 16


@pytest.mark.parametrize("sample", ["ph-t1", "mmpp-d2", "erlang2-d2"])
def test_qbd_row_sums_match_expected_defect(sample: str) -> None:
    for row in qbd_blocks(load_sample(sample), 6):
        np.testing.assert_allclose(row.row_sums(), row.expected_defect(), atol=1e-12)
        assert (row.lower is None) == (row.level == 1)


def test_qbd_blocks_check_zeta_length(mm1_model: ModelSpec) -> None:
    with pytest.raises(DomainError, match="Expected 4 zeta values"):
        qbd_blocks(mm1_model, 3, zetas=np.array([1.0, 2.0]))


def test_solver_rejects_unstable_model() -> None:
    unstable = ModelSpec(map=poisson(1.0), ph=exponential(1.0), d=2)
    with pytest.raises(DomainError, match="unstable"):
        FixedPointSolver(unstable)


def test_solve_pi_recovers_tail_law_for_exponential_service(mm1_model: ModelSpec) -> None:
    solution = solve_pi(mm1_model)
    assert solution.K >= 16
    np.testing.assert_allclose(solution.pi0, [1.0])
    np.testing.assert_allclose(solution.tails[:5], tails_formula(0.5, 2, 5)[1:], atol=1e-8)
    assert solution.residual <= 1e-8
    assert solution.tail_deviation <= 1e-8
    assert solution.mean_queue_length == pytest.approx(MEAN_QUEUE_RHO_HALF_D2, abs=1e-10)
    assert residual(solution, mm1_model) <= 1e-8


@pytest.mark.parametrize("d", [1, 2, 3])
def test_solve_pi_tail_law_for_each_choice_count(mm1_model: ModelSpec, d: int) -> None:
    solution = solve_pi(mm1_model.with_d(d))
    np.testing.assert_allclose(solution.tails[:6], tails_formula(0.5, d, 6)[1:], atol=1e-8)
    assert solution.tails[0] == pytest.approx(0.5, abs=1e-8)


@pytest.mark.parametrize("sample", ["ph-t1", "mmpp-d2", "erlang2-d2"])
def test_solve_pi_is_the_long_run_mean_field_state(sample: str) -> None:
    model = load_sample(sample)
    solution = FixedPointSolver(model).solve_pi()
    assert solution.residual <= 1e-8
    assert np.all(solution.pi >= 0.0)
    assert np.all(np.diff(solution.tails) <= 1e-12)
    assert set(solution.diagnostics) >= {"K", "convention", "residual", "tail_deviation"}

    target = solution.as_fraction_vector()
    system = MeanFieldSystem(model)
    t_end = 200.0 * ph_mean(model.ph)
    m_A = model.dims[0]
    first_phase = np.eye(m_A)[0]
    starts = [
        FractionVector.empty(model, K=1),
        FractionVector.saturated(model, 5, u0=first_phase),
        FractionVector.from_tails(model, tails_formula(0.9, 1, 12)[1:]),
    ]
    for start in starts:
        trajectory = system.integrate(start, t_end, sample_times=[0.0, t_end])
        assert metric(trajectory.final, target) <= 1e-5
        assert abs(trajectory.final.u0.sum() - 1.0) <= 1e-9
        assert trajectory.clamped == 0


def test_shifted_convention_rescales_r_only(ph_model: ModelSpec) -> None:
    solver = FixedPointSolver(ph_model)
    z = zetas_from_tails(tails_formula(solver.rho, 2, 9), 2)
    R_standard, U_standard = solver.solve_measures(8, zetas=z)
    R_shifted, U_shifted = solver.solve_measures(
        8, zetas=z, convention=IndexConvention.SHIFTED
    )
    for standard, shifted in zip(U_standard, U_shifted):
        np.testing.assert_allclose(shifted, standard, atol=1e-14)
    for k, (standard, shifted) in enumerate(zip(R_standard, R_shifted), start=1):
        np.testing.assert_allclose(shifted, standard * z[k - 1] / z[k], rtol=1e-10, atol=1e-15)


def test_solve_pi_picks_the_convention_with_smaller_residual(mm1_model: ModelSpec) -> None:
    solution = solve_pi(mm1_model)
    residuals = solution.diagnostics["convention_residuals"]
    assert solution.diagnostics["convention"] == "standard"
    assert residuals["standard"] < residuals["shifted"]


def test_solution_frame_layout(mmpp_model: ModelSpec) -> None:
    frame = solve_pi(mmpp_model).to_frame()
    assert list(frame.columns) == ["k", "tail_pi_k", "tail_formula", "pi_1_1", "pi_2_1"]
    assert frame["k"].iloc[0] == 1
    np.testing.assert_allclose(frame["pi_1_1"] + frame["pi_2_1"], frame["tail_pi_k"])


def test_measures_have_expected_shapes(ph_model: ModelSpec) -> None:
    solver = FixedPointSolver(ph_model)
    R, U = solver.solve_measures(8)
    assert len(R) == 7
    assert len(U) == 8
    assert all(r.shape == (2, 2) for r in R)
    assert min(r.min() for r in R) >= -1e-12


@pytest.mark.parametrize("sample", ["mm1-d2", "ph-t1", "mmpp-d2"])
def test_rg_factorization_rebuilds_generator(sample: str) -> None:
    solver = FixedPointSolver(load_sample(sample))
    assert solver.factorization_error(10) <= 1e-10


@pytest.mark.parametrize("self_consistent", [True, False])
def test_poisson_explicit_exponential_matches_formula(self_consistent: bool) -> None:
    pi = poisson_explicit(exponential(1.0), 0.5, 2, K=5, self_consistent=self_consistent)
    np.testing.assert_allclose(pi[:, 0], tails_formula(0.5, 2, 5)[1:], rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("sample", ["ph-t1", "ph-t2", "ph-t3", "erlang2-d2"])
def test_poisson_explicit_agrees_with_solver(sample: str) -> None:
    model = load_sample(sample)
    solution = solve_pi(model)
    explicit = poisson_explicit(model.ph, 1.0, model.d, K=solution.K)
    assert explicit.shape == solution.pi.shape
    np.testing.assert_allclose(explicit, solution.pi, atol=1e-8)


def test_poisson_explicit_leaves_levels_past_the_tail_floor_empty(ph_model: ModelSpec) -> None:
    pi = poisson_explicit(ph_model.ph, 1.0, 2, K=40)
    tails = pi.sum(axis=1)
    first_empty = int(np.flatnonzero(tails == 0.0)[0])
    assert 0.0 < tails[first_empty - 1] < 1e-16
    assert np.all(pi[first_empty:] == 0.0)


def test_poisson_explicit_reports_root_failures(ph_model: ModelSpec) -> None:
    failure = RuntimeError("Failed to converge after 200 iterations")
    with patch("supermarket.services.fixedpoint.brentq", side_effect=failure):
        with pytest.raises(NumericalError, match="Level root did not converge"):
            poisson_explicit(ph_model.ph, 1.0, 2, K=5)


def test_queue_length_distribution_sums_to_one(mm1_model: ModelSpec) -> None:
    distribution = queue_length_distribution(solve_pi(mm1_model))
    assert distribution.index[0] == 0
    assert distribution.iloc[0] == pytest.approx(0.5, abs=1e-8)
    assert distribution.sum() == pytest.approx(1.0)


def test_joining_probabilities_agree_at_fixed_point(mm1_model: ModelSpec) -> None:
    frame = joining_probabilities(solve_pi(mm1_model))
    np.testing.assert_allclose(frame["d_choice"], frame["zeta_form"], atol=1e-7)
    assert frame["d_choice"].sum() == pytest.approx(1.0)


def test_truncation_refinement_respects_level_cap(mm1_model: ModelSpec) -> None:
    with pytest.raises(ResourceLimitError, match="max_levels=5"):
        FixedPointSolver(mm1_model, max_levels=5).solve_pi(K=3)


def test_solver_error_carries_diagnostics(mm1_model: ModelSpec) -> None:
    solver = FixedPointSolver(mm1_model)
    with patch.object(FixedPointSolver, "_residual_of", return_value=1.0):
        with pytest.raises(SolverError, match="exceeds tol") as excinfo:
            solver.solve_pi()
    assert excinfo.value.diagnostics["residual"] == 1.0
    assert "K" in excinfo.value.diagnostics
