"""Bundled sample models and the constructors used to build them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

from .models import MapDescriptor, ModelSpec, PhDistribution, SampleModelInfo
from .utils.stochkit import traffic_intensity

PH_ALPHA = [0.5, 0.5]
PH_MATRICES: Dict[int, List[List[float]]] = {
    1: [[-5.0, 3.0], [2.0, -7.0]],
    2: [[-4.0, 3.0], [2.0, -7.0]],
    3: [[-4.0, 4.0], [2.0, -7.0]],
}


def exponential(mu: float) -> PhDistribution:
    """Exponential service with rate ``mu``."""
    return PhDistribution(alpha=[1.0], T=[[-float(mu)]])


def erlang(m: int, eta: float) -> PhDistribution:
    """Erlang E[m, η]: m phases in series, each left at rate η (mean m/η)."""
    if m < 1:
        raise ValueError("Erlang order m must be at least 1.")
    T = [[0.0] * m for _ in range(m)]
    for phase in range(m):
        T[phase][phase] = -float(eta)
        if phase + 1 < m:
            T[phase][phase + 1] = float(eta)
    return PhDistribution(alpha=[1.0] + [0.0] * (m - 1), T=T)


def ph_example(index: int = 1) -> PhDistribution:
    """Two-phase PH with α = (1/2, 1/2) and one of the three example matrices T(1..3)."""
    try:
        T = PH_MATRICES[index]
    except KeyError as exc:
        raise KeyError(f"PH example matrix T({index}) is not defined.") from exc
    return PhDistribution(alpha=PH_ALPHA, T=T)


def poisson(lam: float) -> MapDescriptor:
    """Poisson arrivals at rate ``lam`` as a one-phase MAP."""
    return MapDescriptor(C=[[-float(lam)]], D=[[float(lam)]])


def mmpp_example(lam: float) -> MapDescriptor:
    """Two-phase MAP with ω = (7/12, 5/12) and stationary rate λ."""
    return MapDescriptor(
        C=[[-5.0 - 2.0 * lam / 7.0, 5.0], [7.0, -7.0 - 2.0 * lam]],
        D=[[2.0 * lam / 7.0, 0.0], [0.0, 2.0 * lam]],
    )


@dataclass(frozen=True)
class SampleModel:
    """Static metadata describing a bundled model."""

    id: str
    name: str
    description: str
    loader: Callable[[], ModelSpec]


SAMPLE_MODELS: Dict[str, SampleModel] = {
    "mm1-d2": SampleModel(
        id="mm1-d2",
        name="Poisson / exponential, power of two",
        description="Poisson arrivals at rate 0.5 per server, unit-rate exponential service, d=2.",
        loader=lambda: ModelSpec(map=poisson(0.5), ph=exponential(1.0), d=2),
    ),
    "erlang2-d2": SampleModel(
        id="erlang2-d2",
        name="Erlang E[2, 4] service",
        description="Poisson arrivals at rate 1 with Erlang E[2, 4] service (rho=0.5), d=2.",
        loader=lambda: ModelSpec(map=poisson(1.0), ph=erlang(2, 4.0), d=2),
    ),
    "ph-t1": SampleModel(
        id="ph-t1",
        name="Two-phase PH service T(1)",
        description="Poisson arrivals at rate 1 with PH service T(1), mean 17/58, d=2.",
        loader=lambda: ModelSpec(map=poisson(1.0), ph=ph_example(1), d=2),
    ),
    "ph-t2": SampleModel(
        id="ph-t2",
        name="Two-phase PH service T(2)",
        description="Poisson arrivals at rate 1 with PH service T(2), d=2.",
        loader=lambda: ModelSpec(map=poisson(1.0), ph=ph_example(2), d=2),
    ),
    "ph-t3": SampleModel(
        id="ph-t3",
        name="Two-phase PH service T(3)",
        description="Poisson arrivals at rate 1 with PH service T(3), d=2.",
        loader=lambda: ModelSpec(map=poisson(1.0), ph=ph_example(3), d=2),
    ),
    "mmpp-d2": SampleModel(
        id="mmpp-d2",
        name="Two-phase MAP input",
        description="Bursty two-phase MAP with rate 0.5 and unit-rate exponential service, d=2.",
        loader=lambda: ModelSpec(map=mmpp_example(0.5), ph=exponential(1.0), d=2),
    ),
}


def _build_info(sample: SampleModel, model: ModelSpec) -> SampleModelInfo:
    rho, _ = traffic_intensity(model)
    m_A, m_B = model.dims
    return SampleModelInfo(
        id=sample.id,
        name=sample.name,
        description=sample.description,
        rho=rho,
        m_A=m_A,
        m_B=m_B,
        d=model.d,
    )


def list_models() -> List[SampleModelInfo]:
    """Return metadata for all bundled models."""
    return [_build_info(sample, sample.loader()) for sample in SAMPLE_MODELS.values()]


def load_sample(model_id: str) -> ModelSpec:
    """Load a bundled model by id."""
    try:
        sample = SAMPLE_MODELS[model_id]
    except KeyError as exc:
        raise KeyError(f"Sample model '{model_id}' not found.") from exc
    return sample.loader()
