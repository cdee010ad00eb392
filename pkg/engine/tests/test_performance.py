from __future__ import annotations

import numpy as np
import pytest

from supermarket.errors import DomainError
from supermarket.models import ModelSpec
from supermarket.sample_data import exponential, ph_example
from supermarket.services.fixedpoint import solve_pi
from supermarket.services.performance import (
    EXAMPLE_IDS,
    example_tables,
    fixed_point_report,
    little_gap,
    mean_queue_length,
    mean_sojourn,
    performance_report,
    table_trends,
    tail_series,
)


def test_mean_queue_length_power_of_two() -> None:
    assert mean_queue_length(0.5, 2) == pytest.approx(0.6328430180437863, abs=1e-10)


def test_mean_queue_length_single_choice_is_geometric() -> None:
    assert mean_queue_length(0.5, 1) == pytest.approx(1.0)
    assert mean_queue_length(0.9, 1) == pytest.approx(9.0)


def test_mean_queue_length_decreases_in_d() -> None:
    values = [mean_queue_length(0.8, d) for d in (1, 2, 3, 5, 10)]
    assert values == sorted(values, reverse=True)
    assert values[-1] > 0.8


def test_tail_series_reports_truncation() -> None:
    total, terms, bound = tail_series(0.5, 2, eps=1e-14)
    assert terms == 5
    assert 0.0 < bound < 2e-14
    assert tail_series(0.5, 1) == (pytest.approx(1.0), 0, 0.0)
    with pytest.raises(DomainError):
        tail_series(1.2, 2)


def test_mean_sojourn_exponential_single_choice() -> None:
    assert mean_sojourn(exponential(1.0), 0.5, 1) == pytest.approx(2.0)
    assert little_gap(exponential(1.0), 0.5, 1) == pytest.approx(0.0, abs=1e-12)


def test_mean_sojourn_power_of_two() -> None:
    expected = 1.0 + 0.5 + (0.6328430180437863 - 0.5)
    assert mean_sojourn(exponential(1.0), 0.5, 2) == pytest.approx(expected, abs=1e-9)


def test_mean_sojourn_decreases_in_d_for_ph_service() -> None:
    ph = ph_example(1)
    values = [mean_sojourn(ph, 2.0, d) for d in (1, 2, 5)]
    assert values == sorted(values, reverse=True)


def test_performance_report(mm1_model: ModelSpec) -> None:
    report = performance_report(mm1_model)
    assert report.rho == pytest.approx(0.5)
    assert report.EQ == pytest.approx(0.6328430180437863, abs=1e-10)
    assert report.EX == pytest.approx(1.0)
    assert report.EXR == pytest.approx(1.0)
    assert report.ET >= report.EX


def test_fixed_point_report_matches_closed_form(mm1_model: ModelSpec) -> None:
    report = fixed_point_report(solve_pi(mm1_model))
    assert abs(report["difference"]) < 1e-8
    assert report["d"] == 2.0


def test_example_one_marks_unstable_points() -> None:
    table = example_tables(1)
    assert len(table) == 4 * 16
    assert int((~table["stable"]).sum()) == 6
    assert table.loc[~table["stable"], "EQ"].isna().all()
    row = table[(table["m"] == 2) & (table["d"] == 2) & (table["eta"] == 4.0)].iloc[0]
    assert row["rho"] == pytest.approx(0.5)
    assert row["EQ"] == pytest.approx(0.6328430180437863, abs=1e-10)


def test_example_two_compares_ph_with_exponential_twin() -> None:
    table = example_tables(2)
    assert len(table) == 2 * 2 * 21
    at_two = table[(table["lam"] == 2.0) & (table["d"] == 2)].set_index("service")
    assert at_two.loc["ph", "rho"] == pytest.approx(at_two.loc["exponential", "rho"])
    assert at_two.loc["ph", "EQ"] == pytest.approx(at_two.loc["exponential", "EQ"])
    assert at_two.loc["ph", "ET"] != pytest.approx(at_two.loc["exponential", "ET"])


def test_example_three_load_per_matrix() -> None:
    table = example_tables(3)
    assert len(table) == 12
    loads = table.groupby("T_index")["rho"].first()
    np.testing.assert_allclose(loads.values, [17 / 58, 8 / 22, 17 / 40])


def test_example_four_uses_map_rate() -> None:
    table = example_tables(4, d_list=[1, 2])
    assert len(table) == 2 * 19
    np.testing.assert_allclose(table["rho"], table["lam"], rtol=1e-12)
    assert table["stable"].all()


def test_example_tables_rejects_unknown_id() -> None:
    with pytest.raises(DomainError, match="Unknown example 7"):
        example_tables(7)


@pytest.mark.parametrize("which", EXAMPLE_IDS)
def test_example_tables_follow_expected_trends(which: int) -> None:
    trends = table_trends(example_tables(which))
    assert trends["holds"].all(), trends[~trends["holds"]].to_dict("records")
    assert set(trends["measure"]) == {"EQ", "ET"}


def test_table_trends_flag_a_broken_column() -> None:
    table = example_tables(4, d_list=[1, 2])
    table.loc[table["d"] == 2, "EQ"] = table.loc[table["d"] == 2, "EQ"] + 10.0
    trends = table_trends(table).set_index(["measure", "along"])
    assert not trends.loc[("EQ", "d"), "holds"]
    assert trends.loc[("ET", "d"), "holds"]
    assert trends.loc[("EQ", "lam"), "holds"]
