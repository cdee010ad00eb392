"""Pytest configuration and shared model fixtures."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from supermarket.models import ModelSpec  # noqa: E402
from supermarket.sample_data import load_sample  # noqa: E402


@pytest.fixture
def mm1_model() -> ModelSpec:
    """Poisson(0.5) input, unit-rate exponential service, d = 2."""
    return load_sample("mm1-d2")


@pytest.fixture
def ph_model() -> ModelSpec:
    return load_sample("ph-t1")


@pytest.fixture
def mmpp_model() -> ModelSpec:
    return load_sample("mmpp-d2")
