from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supermarket.errors import ModelValidationError, ResourceLimitError
from supermarket.models import ModelSpec
from supermarket.sample_data import load_sample
from supermarket.services.fixedpoint import tails_formula
from supermarket.services.meanfield import (
    FractionVector,
    MeanFieldSystem,
    jacobian_norm,
    metric,
)
from supermarket.utils.stochkit import boundary_solution


def random_state(model: ModelSpec, K: int, seed: int = 7) -> FractionVector:
    return FractionVector.random(model, K, np.random.default_rng(seed))


def test_empty_state_satisfies_invariants(mmpp_model: ModelSpec) -> None:
    state = FractionVector.empty(mmpp_model, K=3)
    assert state.K == 3
    assert state.m_A == 2 and state.m_B == 1
    np.testing.assert_allclose(state.u0, [7 / 12, 5 / 12])
    assert not any(state.violations().values())


def test_validate_rejects_increasing_tails(mm1_model: ModelSpec) -> None:
    state = FractionVector(np.ones(1), np.array([[0.2], [0.4]]))
    with pytest.raises(ModelValidationError, match="violates its invariants"):
        state.validate()


def test_flatten_and_padding(ph_model: ModelSpec) -> None:
    state = FractionVector.from_tails(ph_model, np.array([0.5, 0.2]))
    assert state.flatten().size == 1 + 2 * 2
    restored = FractionVector.from_flat(state.flatten(), 1, 2)
    np.testing.assert_allclose(restored.levels, state.levels)
    padded = state.padded(5)
    assert padded.K == 5
    np.testing.assert_allclose(padded.tails, [0.5, 0.2, 0.0, 0.0, 0.0])
    assert state.padded(1) is state


def test_aggregated_sums_over_map_phases(mmpp_model: ModelSpec) -> None:
    state = FractionVector.from_tails(mmpp_model, np.array([0.6, 0.3]))
    aggregated = state.aggregated()
    np.testing.assert_allclose(aggregated.u0, [1.0])
    np.testing.assert_allclose(aggregated.tails, [0.6, 0.3])


def test_metric_weights_deeper_levels() -> None:
    u = FractionVector(np.ones(1), np.array([[0.5], [0.2]]))
    v = FractionVector(np.ones(1), np.array([[0.3], [0.2]]))
    assert metric(u, v) == pytest.approx(0.1)
    w = FractionVector(np.ones(1), np.array([[0.5], [0.2], [0.3]]))
    assert metric(u, w) == pytest.approx(0.3 / 4)
    with pytest.raises(ModelValidationError, match="same phase dimensions"):
        metric(u, FractionVector(np.array([0.5, 0.5]), np.zeros((1, 2))))


def test_formula_tails_are_stationary_for_exponential_service(mm1_model: ModelSpec) -> None:
    state = FractionVector.from_tails(mm1_model, tails_formula(0.5, 2, 8)[1:])
    drift = MeanFieldSystem(mm1_model).rhs(state)
    assert np.max(np.abs(drift.u0)) < 1e-14
    assert np.max(np.abs(drift.levels)) < 1e-12


def test_rhs_rejects_mismatched_dimensions(mm1_model: ModelSpec, mmpp_model: ModelSpec) -> None:
    with pytest.raises(ModelValidationError, match="model needs"):
        MeanFieldSystem(mm1_model).rhs(FractionVector.empty(mmpp_model))


@pytest.mark.parametrize("sample", ["mm1-d2", "ph-t1", "mmpp-d2"])
def test_jacobian_matches_finite_differences(sample: str) -> None:
    model = load_sample(sample).with_d(3)
    system = MeanFieldSystem(model)
    state = random_state(model, 4)
    J = system.jacobian(state).assemble()
    y = state.flatten()
    width = state.levels.shape[1]
    h = 1e-6
    numeric = np.zeros_like(J)
    for i in range(y.size):
        step = np.zeros_like(y)
        step[i] = h
        up = system.rhs(FractionVector.from_flat(y + step, state.m_A, width)).flatten()
        down = system.rhs(FractionVector.from_flat(y - step, state.m_A, width)).flatten()
        numeric[i] = (up - down) / (2 * h)
    np.testing.assert_allclose(J, numeric, atol=1e-6)


LIPSCHITZ_STATES = 500


@pytest.mark.parametrize("sample", ["mm1-d2", "erlang2-d2", "ph-t1", "ph-t3"])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_jacobian_norm_stays_below_lipschitz_bound(sample: str, d: int) -> None:
    model = load_sample(sample).with_d(d)
    system = MeanFieldSystem(model)
    bound = system.lipschitz_bound()
    rng = np.random.default_rng(11)
    norms = [
        jacobian_norm(system.jacobian(FractionVector.random(model, 6, rng, low=0.0)))
        for _ in range(LIPSCHITZ_STATES)
    ]
    assert max(norms) <= bound + 1e-12


def test_lipschitz_bound_for_exponential_service(mm1_model: ModelSpec) -> None:
    assert MeanFieldSystem(mm1_model).lipschitz_bound() == pytest.approx(4.0)
    assert MeanFieldSystem(load_sample("ph-t1")).lipschitz_bound() == pytest.approx(18.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 8))
def test_jacobian_bound_holds_for_random_phase_type_states(seed: int, d: int, K: int) -> None:
    model = load_sample("ph-t2").with_d(d)
    system = MeanFieldSystem(model)
    state = FractionVector.random(model, K, np.random.default_rng(seed), low=0.0)
    assert jacobian_norm(system.jacobian(state)) <= system.lipschitz_bound() + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_metric_is_a_distance(seed: int, k_u: int, k_v: int, k_w: int) -> None:
    model = load_sample("mmpp-d2")
    rng = np.random.default_rng(seed)
    u, v, w = (FractionVector.random(model, k, rng) for k in (k_u, k_v, k_w))
    assert metric(u, u) == 0.0
    assert metric(u, v) == pytest.approx(metric(v, u))
    assert metric(u, w) <= metric(u, v) + metric(v, w) + 1e-15
    assert metric(u, v) <= 1.0


@pytest.mark.parametrize("sample", ["mm1-d2", "ph-t1", "mmpp-d2"])
def test_random_states_satisfy_invariants(sample: str) -> None:
    model = load_sample(sample)
    rng = np.random.default_rng(3)
    for _ in range(20):
        state = FractionVector.random(model, 5, rng)
        assert not any(state.violations().values())


def test_integrate_converges_to_fixed_point(mm1_model: ModelSpec) -> None:
    system = MeanFieldSystem(mm1_model)
    times = np.linspace(0.0, 30.0, 7)
    trajectory = system.integrate(FractionVector.empty(mm1_model), 30.0, sample_times=times)
    np.testing.assert_allclose(trajectory.times, times)
    assert len(trajectory.states) == 7
    assert trajectory.k_history[0] == 20
    final = trajectory.final
    np.testing.assert_allclose(final.u0, [1.0])
    np.testing.assert_allclose(final.tails[:4], tails_formula(0.5, 2, 4)[1:], atol=1e-3)
    frame = trajectory.to_frame(k_report=3, per_entry=True)
    assert list(frame.columns) == [
        "t",
        "u0_1",
        "tail_1",
        "tail_2",
        "tail_3",
        "u_1_1_1",
        "u_2_1_1",
        "u_3_1_1",
    ]
    assert trajectory.state_at(29.0) is final


def test_integrate_keeps_map_marginal_on_boundary(mmpp_model: ModelSpec) -> None:
    system = MeanFieldSystem(mmpp_model)
    start = FractionVector.empty(mmpp_model, u0=np.array([1.0, 0.0]))
    trajectory = system.integrate(start, 2.0, sample_times=[0.0, 1.0, 2.0])
    expected = boundary_solution([1.0, 0.0], system.generator, 1.0)
    np.testing.assert_allclose(trajectory.states[1].u0, expected, atol=1e-6)


def test_integrate_validates_arguments(mm1_model: ModelSpec) -> None:
    system = MeanFieldSystem(mm1_model)
    with pytest.raises(ModelValidationError, match="t_end must be positive"):
        system.integrate(FractionVector.empty(mm1_model), 0.0)


def test_integrate_stops_at_level_cap(mm1_model: ModelSpec) -> None:
    # Single-choice queues spread their tails one level per arrival.
    model = mm1_model.with_d(1)
    system = MeanFieldSystem(model)
    crowded = FractionVector.saturated(model, 15)
    with pytest.raises(ResourceLimitError, match="max_levels=20"):
        system.integrate(crowded, 5.0, max_levels=20)


def test_integrate_rejects_start_deeper_than_level_cap(mm1_model: ModelSpec) -> None:
    system = MeanFieldSystem(mm1_model)
    with pytest.raises(ResourceLimitError, match="K=26 already exceeds max_levels=20"):
        system.integrate(FractionVector.saturated(mm1_model, 25), 1.0, max_levels=20)


@pytest.mark.parametrize("sample", ["mm1-d2", "ph-t1", "mmpp-d2", "erlang2-d2"])
def test_integrate_keeps_states_in_state_space(sample: str) -> None:
    model = load_sample(sample)
    system = MeanFieldSystem(model)
    starts = [
        FractionVector.saturated(model, 8),
        FractionVector.from_tails(model, tails_formula(0.9, 1, 12)[1:]),
    ]
    for start in starts:
        trajectory = system.integrate(start, 20.0, sample_times=np.linspace(0.0, 20.0, 11))
        assert trajectory.clamped == 0
        assert trajectory.final.levels.min() >= 0.0
