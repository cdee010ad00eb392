"""Pydantic schemas for model descriptors, run configuration and reports."""

from __future__ import annotations

import hashlib
import os
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationInfo, field_validator, model_validator

from .utils.stochkit import (
    DEFAULT_ROW_SUM_TOL,
    check_generator,
    exit_vector,
    is_irreducible,
    ph_mean,
)


def row_sum_tolerance() -> float:
    """Generator row-sum tolerance, overridable through ``SUPERMARKET_ROW_SUM_TOL``."""
    raw = os.getenv("SUPERMARKET_ROW_SUM_TOL")
    if raw is None or not raw.strip():
        return DEFAULT_ROW_SUM_TOL
    try:
        value = float(raw)
    except ValueError as exc:
        raise ValueError(f"SUPERMARKET_ROW_SUM_TOL must be a number, got '{raw}'.") from exc
    if value <= 0:
        raise ValueError("SUPERMARKET_ROW_SUM_TOL must be positive.")
    return value


def _square_rows(matrix: list[list[float]], name: str) -> list[list[float]]:
    """Ensure a nested list is a non-empty square matrix of finite numbers."""
    size = len(matrix)
    if size == 0:
        raise ValueError(f"{name} cannot be empty.")
    for row_index, row in enumerate(matrix):
        if len(row) != size:
            raise ValueError(
                f"{name} must be square: row {row_index} has {len(row)} entries, expected {size}."
            )
    if not np.all(np.isfinite(np.asarray(matrix, dtype=float))):
        raise ValueError(f"{name} contains non-finite entries.")
    return [[float(value) for value in row] for row in matrix]


class MapDescriptor(BaseModel):
    """Markovian arrival process given by its (C, D) pair."""

    C: list[list[float]] = Field(
        ..., description="Phase-change rates without an arrival (1/time), row-major."
    )
    D: list[list[float]] = Field(
        ..., description="Phase-change rates that produce an arrival (1/time), row-major."
    )

    @field_validator("C", "D")
    @classmethod
    def validate_square(
        cls, matrix: list[list[float]], info: ValidationInfo
    ) -> list[list[float]]:
        """Both matrices must be square with finite entries."""
        return _square_rows(matrix, f"map.{info.field_name}")

    @model_validator(mode="after")
    def validate_generator(self) -> "MapDescriptor":
        """Enforce the MAP invariants on C, D and C + D."""
        C, D = self.matrices()
        if C.shape != D.shape:
            raise ValueError(f"map.C has shape {C.shape} but map.D has shape {D.shape}.")
        for row in range(C.shape[0]):
            if C[row, row] >= 0:
                raise ValueError(f"map.C diagonal entry in row {row} must be negative.")
        off_diagonal = C - np.diag(np.diag(C))
        negative = np.argwhere(off_diagonal < 0)
        if negative.size:
            row, col = negative[0]
            raise ValueError(f"map.C off-diagonal entry at row {row}, column {col} is negative.")
        negative = np.argwhere(D < 0)
        if negative.size:
            row, col = negative[0]
            raise ValueError(f"map.D entry at row {row}, column {col} is negative.")
        if not np.any(D > 0):
            raise ValueError("map.D cannot be the zero matrix.")
        check_generator(C + D, tol=row_sum_tolerance(), name="map.C + map.D")
        if not is_irreducible(C + D):
            raise ValueError(
                "map.C + map.D is reducible; the MAP must have one communicating class."
            )
        return self

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (C, D) as float arrays."""
        return np.asarray(self.C, dtype=float), np.asarray(self.D, dtype=float)

    @property
    def order(self) -> int:
        return len(self.C)


class PhDistribution(BaseModel):
    """Phase-type service law given by its representation (alpha, T)."""

    alpha: list[float] = Field(..., description="Initial phase probabilities.")
    T: list[list[float]] = Field(
        ..., description="Sub-generator of phase transitions (1/time), row-major."
    )

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, alpha: list[float]) -> list[float]:
        """alpha must be a probability vector."""
        if not alpha:
            raise ValueError("ph.alpha cannot be empty.")
        values = np.asarray(alpha, dtype=float)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("ph.alpha entries must be finite and non-negative.")
        if abs(values.sum() - 1.0) > row_sum_tolerance():
            raise ValueError(f"ph.alpha must sum to 1, got {values.sum():.12g}.")
        return [float(value) for value in values]

    @field_validator("T")
    @classmethod
    def validate_matrix(cls, T: list[list[float]]) -> list[list[float]]:
        """T must be square with a negative diagonal and non-negative off-diagonal."""
        T = _square_rows(T, "ph.T")
        matrix = np.asarray(T)
        for row in range(matrix.shape[0]):
            if matrix[row, row] >= 0:
                raise ValueError(f"ph.T diagonal entry in row {row} must be negative.")
        negative = np.argwhere(matrix - np.diag(np.diag(matrix)) < 0)
        if negative.size:
            row, col = negative[0]
            raise ValueError(f"ph.T off-diagonal entry at row {row}, column {col} is negative.")
        return T

    @model_validator(mode="after")
    def validate_representation(self) -> "PhDistribution":
        """Check dimensions, exit vector and non-singularity of T."""
        alpha, T = self.arrays()
        if alpha.shape[0] != T.shape[0]:
            raise ValueError(
                f"ph.alpha has {alpha.shape[0]} entries but ph.T has order {T.shape[0]}."
            )
        exits = exit_vector(T)
        low = np.flatnonzero(exits < -row_sum_tolerance())
        if low.size:
            raise ValueError(
                f"Row {int(low[0])} of ph.T sums to a positive value; T0 must be >= 0."
            )
        if not np.any(exits > 0):
            raise ValueError("ph.T has a zero exit vector; service would never complete.")
        if abs(np.linalg.det(T)) < 1e-300 or np.linalg.cond(T) > 1e14:
            raise ValueError("ph.T is singular.")
        return self

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (alpha, T) as float arrays."""
        return np.asarray(self.alpha, dtype=float), np.asarray(self.T, dtype=float)

    @property
    def order(self) -> int:
        return len(self.alpha)


class ModelSpec(BaseModel):
    """Supermarket model: MAP input, PH service and the number of sampled servers."""

    map: MapDescriptor = Field(..., description="Arrival process per server.")
    ph: PhDistribution = Field(..., description="Service time distribution.")
    d: int = Field(..., ge=1, description="Number of servers sampled by each arrival.")

    @model_validator(mode="after")
    def validate_service_rate(self) -> "ModelSpec":
        """The service rate 1/E[X] must be finite and positive."""
        mean = ph_mean(self.ph)
        if not np.isfinite(mean) or mean <= 0:
            raise ValueError(f"Mean service time must be positive and finite, got {mean}.")
        return self

    @property
    def dims(self) -> tuple[int, int]:
        """(m_A, m_B)."""
        return self.map.order, self.ph.order

    def with_d(self, d: int) -> "ModelSpec":
        """Copy of this model with another choice count."""
        return ModelSpec(map=self.map, ph=self.ph, d=d)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form, used in output provenance."""
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class ServiceCoupling(str, Enum):
    """How coupled runs share service requirements across systems."""

    customer = "customer"
    server = "server"


class SimConfig(BaseModel):
    """Configuration of an N-server simulation experiment."""

    model: ModelSpec = Field(..., description="Model being simulated.")
    N: int = Field(..., ge=1, description="Number of servers.")
    horizon: float = Field(..., description="Simulated time span.")
    warmup: float = Field(0.0, ge=0, description="Time discarded before time averaging.")
    seed: int = Field(0, ge=0, lt=2**64, description="Root seed for all random streams.")
    sample_times: list[float] = Field(
        default_factory=list, description="Times at which fraction vectors are recorded."
    )
    replications: int = Field(1, ge=1, description="Independent replications.")
    k_report: int = Field(10, ge=1, description="Tail levels reported in outputs.")
    with_replacement: bool = Field(
        True, description="Sample the d servers with replacement (False: without)."
    )
    service_coupling: ServiceCoupling = Field(
        ServiceCoupling.customer,
        description="Which service requirements coupled runs share across systems.",
    )
    workers: int = Field(1, ge=1, description="Processes used to run replications.")

    @field_validator("horizon")
    @classmethod
    def validate_horizon(cls, horizon: float) -> float:
        """horizon must be a positive finite time."""
        if not np.isfinite(horizon) or horizon <= 0:
            raise ValueError("horizon must be greater than zero.")
        return float(horizon)

    @field_validator("sample_times")
    @classmethod
    def validate_sample_times(cls, times: list[float]) -> list[float]:
        """Sample times are sorted, unique and non-negative."""
        cleaned = sorted(set(float(t) for t in times))
        if cleaned and cleaned[0] < 0:
            raise ValueError("sample_times must be non-negative.")
        return cleaned

    @model_validator(mode="after")
    def validate_window(self) -> "SimConfig":
        """Warm-up and sample times must fit inside the horizon."""
        if self.warmup >= self.horizon:
            raise ValueError("horizon must be greater than warmup.")
        if self.sample_times and self.sample_times[-1] > self.horizon:
            raise ValueError("sample_times cannot exceed the horizon.")
        if self.model.d > self.N and not self.with_replacement:
            raise ValueError("Sampling without replacement needs d <= N.")
        return self


class Command(str, Enum):
    """Command-line subcommands."""

    fixed_point = "fixed-point"
    mean_field = "mean-field"
    simulate = "simulate"
    couple = "couple"
    perf = "perf"
    validate = "validate"
    models = "models"
    dump_model = "dump-model"


MODEL_FREE_COMMANDS = {Command.perf, Command.models}


class RunConfig(BaseModel):
    """Validated options of a single command-line invocation."""

    command: Command = Field(..., description="Subcommand to execute.")
    model_file: Path | None = Field(default=None, description="Model JSON file.")
    sample: str | None = Field(default=None, description="Bundled sample model id.")
    d: int | None = Field(default=None, ge=1, description="Override of the model's d.")
    K: int | None = Field(default=None, ge=1, description="Truncation level.")
    t_end: float = Field(50.0, gt=0, description="Integration end time.")
    tol: float = Field(1e-8, gt=0, description="Solver and integrator tolerance.")
    N: int = Field(100, ge=1, description="Server count for simulations.")
    seed: int = Field(0, ge=0, lt=2**64, description="Root random seed.")
    horizon: float = Field(100.0, gt=0, description="Simulated time span.")
    warmup: float = Field(10.0, ge=0, description="Simulation warm-up time.")
    replications: int = Field(1, ge=1, description="Simulation replications.")
    workers: int = Field(1, ge=1, description="Processes for replications.")
    with_replacement: bool = Field(True, description="Sample the d servers with replacement.")
    service_coupling: ServiceCoupling = Field(
        ServiceCoupling.customer, description="Shared service requirements in coupled runs."
    )
    d_list: list[int] = Field(default_factory=lambda: [1, 2, 5, 10])
    samples: int = Field(21, ge=2, description="Number of evenly spaced sample times.")
    k_report: int = Field(10, ge=1, description="Reported tail levels.")
    per_entry: bool = Field(False, description="Emit per-entry fraction columns.")
    example: int | None = Field(default=None, ge=1, le=4, description="Numerical example id.")
    eps: float = Field(1e-14, gt=0, description="Series truncation threshold.")
    out: Path | None = Field(default=None, description="Output CSV path.")

    @field_validator("d_list")
    @classmethod
    def validate_d_list(cls, d_list: list[int]) -> list[int]:
        """Choice counts are positive, sorted and include 1."""
        values = sorted(set(int(d) for d in d_list))
        if not values or values[0] < 1:
            raise ValueError("d_list entries must be positive integers.")
        if values[0] != 1:
            raise ValueError("d_list must contain 1.")
        return values

    @model_validator(mode="after")
    def validate_sources(self) -> "RunConfig":
        """Exactly one model source for commands that need a model; output dir must exist."""
        if self.command not in MODEL_FREE_COMMANDS:
            if (self.model_file is None) == (self.sample is None):
                raise ValueError("Provide exactly one of --model or --sample.")
        if self.model_file is not None and not self.model_file.is_file():
            raise ValueError(f"Model file '{self.model_file}' does not exist.")
        if self.warmup >= self.horizon:
            raise ValueError("horizon must be greater than warmup.")
        if self.out is not None:
            parent = self.out.resolve().parent
            if not parent.is_dir() or not os.access(parent, os.W_OK):
                raise ValueError(f"Output directory '{parent}' is not writable.")
        return self


class PerfReport(BaseModel):
    """Mean queue length and sojourn time for one model."""

    rho: float = Field(..., description="Traffic intensity.")
    d: int = Field(..., ge=1, description="Choice count.")
    EQ: float = Field(..., description="Mean stationary queue length per server.")
    ET: float = Field(..., description="Mean sojourn time of an arriving customer.")
    EX: float = Field(..., description="Mean service time.")
    EXR: float = Field(..., description="Mean residual service time.")
    terms: int = Field(..., description="Series terms summed.")
    truncation_bound: float = Field(..., description="Bound on the dropped series tail.")

    @model_validator(mode="after")
    def validate_ordering(self) -> "PerfReport":
        """E[Q] >= rho and E[T] >= E[X] hold for every stable model."""
        slack = 1e-12 * max(1.0, self.EQ, self.ET)
        if self.EQ < self.rho - slack:
            raise ValueError("EQ cannot be smaller than rho.")
        if self.ET < self.EX - slack:
            raise ValueError("ET cannot be smaller than EX.")
        return self


class SampleModelInfo(BaseModel):
    """Metadata describing a bundled model."""

    id: str = Field(..., description="Unique model identifier.")
    name: str = Field(..., description="Human-friendly name.")
    description: str = Field(..., description="Short description.")
    rho: float = Field(..., description="Traffic intensity of the bundled parameters.")
    m_A: int = Field(..., description="MAP order.")
    m_B: int = Field(..., description="PH order.")
    d: int = Field(..., description="Default choice count.")
