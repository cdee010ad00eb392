from __future__ import annotations

import pytest
from pydantic import ValidationError

from supermarket.models import (
    Command,
    MapDescriptor,
    ModelSpec,
    PerfReport,
    PhDistribution,
    RunConfig,
    SimConfig,
    row_sum_tolerance,
)
from supermarket.sample_data import exponential, poisson


def base_sim(model: ModelSpec, **overrides) -> dict:
    config = {"model": model, "N": 10, "horizon": 5.0, "warmup": 1.0}
    config.update(overrides)
    return config


def test_map_descriptor_rejects_non_negative_diagonal() -> None:
    with pytest.raises(ValidationError, match="diagonal entry in row 0 must be negative"):
        MapDescriptor(C=[[0.0]], D=[[1.0]])


def test_map_descriptor_rejects_bad_row_sums() -> None:
    with pytest.raises(ValidationError, match="sums to"):
        MapDescriptor(C=[[-2.0]], D=[[1.0]])


def test_map_descriptor_rejects_zero_arrival_matrix() -> None:
    with pytest.raises(ValidationError, match="map.D cannot be the zero matrix"):
        MapDescriptor(C=[[-1.0, 1.0], [1.0, -1.0]], D=[[0.0, 0.0], [0.0, 0.0]])


def test_map_descriptor_rejects_reducible_generator() -> None:
    with pytest.raises(ValidationError, match="reducible"):
        MapDescriptor(C=[[-1.0, 0.0], [0.0, -2.0]], D=[[1.0, 0.0], [0.0, 2.0]])


def test_map_descriptor_rejects_ragged_matrix() -> None:
    with pytest.raises(ValidationError, match="must be square"):
        MapDescriptor(C=[[-1.0, 1.0]], D=[[1.0]])


def test_ph_distribution_alpha_must_sum_to_one() -> None:
    with pytest.raises(ValidationError, match="ph.alpha must sum to 1"):
        PhDistribution(alpha=[0.5, 0.4], T=[[-1.0, 0.0], [0.0, -1.0]])


def test_ph_distribution_needs_an_exit() -> None:
    with pytest.raises(ValidationError, match="zero exit vector"):
        PhDistribution(alpha=[1.0, 0.0], T=[[-1.0, 1.0], [1.0, -1.0]])


def test_ph_distribution_dimension_mismatch() -> None:
    with pytest.raises(ValidationError, match="has 1 entries but ph.T has order 2"):
        PhDistribution(alpha=[1.0], T=[[-1.0, 0.0], [0.0, -1.0]])


def test_row_sum_tolerance_reads_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("SUPERMARKET_ROW_SUM_TOL", "1e-3")
    assert row_sum_tolerance() == pytest.approx(1e-3)
    MapDescriptor(C=[[-1.0005]], D=[[1.0]])

    monkeypatch.setenv("SUPERMARKET_ROW_SUM_TOL", "abc")
    with pytest.raises(ValueError, match="must be a number"):
        row_sum_tolerance()


def test_model_spec_dims_and_with_d(mm1_model: ModelSpec, mmpp_model: ModelSpec) -> None:
    assert mm1_model.dims == (1, 1)
    assert mmpp_model.dims == (2, 1)
    assert mm1_model.with_d(5).d == 5
    with pytest.raises(ValidationError):
        mm1_model.with_d(0)


def test_fingerprint_depends_on_content(mm1_model: ModelSpec) -> None:
    twin = ModelSpec(map=poisson(0.5), ph=exponential(1.0), d=2)
    assert twin.fingerprint() == mm1_model.fingerprint()
    assert mm1_model.with_d(3).fingerprint() != mm1_model.fingerprint()
    assert len(mm1_model.fingerprint()) == 64


def test_sim_config_sorts_sample_times(mm1_model: ModelSpec) -> None:
    cfg = SimConfig(**base_sim(mm1_model, sample_times=[3.0, 0.0, 3.0, 1.5]))
    assert cfg.sample_times == [0.0, 1.5, 3.0]


@pytest.mark.parametrize(
    ("overrides", "message"),
    [
        ({"warmup": 5.0}, "horizon must be greater than warmup"),
        ({"sample_times": [6.0]}, "sample_times cannot exceed the horizon"),
        ({"N": 1, "with_replacement": False}, "without replacement needs d <= N"),
        ({"horizon": 0.0}, "horizon must be greater than zero"),
    ],
)
def test_sim_config_rejects_invalid_windows(
    mm1_model: ModelSpec, overrides: dict, message: str
) -> None:
    with pytest.raises(ValidationError, match=message):
        SimConfig(**base_sim(mm1_model, **overrides))


def test_run_config_requires_exactly_one_model_source(tmp_path) -> None:
    model_file = tmp_path / "model.json"
    model_file.write_text("{}", encoding="utf-8")
    with pytest.raises(ValidationError, match="exactly one of --model or --sample"):
        RunConfig(command=Command.fixed_point)
    with pytest.raises(ValidationError, match="exactly one of --model or --sample"):
        RunConfig(command=Command.fixed_point, sample="mm1-d2", model_file=model_file)


def test_run_config_model_free_commands() -> None:
    config = RunConfig(command=Command.models)
    assert config.sample is None
    assert RunConfig(command=Command.perf, example=2).example == 2


def test_run_config_rejects_missing_model_file(tmp_path) -> None:
    with pytest.raises(ValidationError, match="does not exist"):
        RunConfig(command=Command.fixed_point, model_file=tmp_path / "missing.json")


def test_run_config_normalises_d_list() -> None:
    config = RunConfig(command=Command.perf, d_list=[5, 1, 2, 2])
    assert config.d_list == [1, 2, 5]
    with pytest.raises(ValidationError, match="d_list must contain 1"):
        RunConfig(command=Command.perf, d_list=[2, 3])


def test_perf_report_enforces_ordering() -> None:
    with pytest.raises(ValidationError, match="EQ cannot be smaller than rho"):
        PerfReport(
            rho=0.5, d=2, EQ=0.4, ET=2.0, EX=1.0, EXR=1.0, terms=3, truncation_bound=0.0
        )
