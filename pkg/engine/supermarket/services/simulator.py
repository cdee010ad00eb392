"""
Discrete-event simulation of N servers fed by one global MAP under JSQ(d) routing.

Each replication draws from Philox streams keyed by (seed, replication, stream),
so identical configurations give bit-identical results and coupled systems can
share the arrival path, the server choices and the service requirements.
"""

from __future__ import annotations

import logging
from bisect import bisect_right
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from supermarket.errors import ModelValidationError
from supermarket.models import ServiceCoupling, SimConfig
from supermarket.services.fixedpoint import FixedPointSolution
from supermarket.services.meanfield import FractionVector, Trajectory, metric
from supermarket.utils.stochkit import exit_vector, scaled_map, stationary_vector

logger = logging.getLogger(__name__)

STREAM_MAP = 0
STREAM_SERVICE = 1
STREAM_CHOICE = 2
STREAM_INIT = 3
SAMPLE_TIME_TOL = 1e-9


def stream(seed: int, replication: int, stream_id: int, *extra: int) -> np.random.Generator:
    """Independent Philox generator for one named substream of one replication."""
    sequence = np.random.SeedSequence(seed, spawn_key=(replication, stream_id, *extra))
    return np.random.Generator(np.random.Philox(sequence))


def _cumulative(rates: np.ndarray) -> tuple[list[float], float]:
    total = float(rates.sum())
    if total <= 0:
        return [1.0] * len(rates), 0.0
    return list(np.cumsum(rates) / total), total


def _pick(cumulative: list[float], u: float) -> int:
    return min(bisect_right(cumulative, u), len(cumulative) - 1)


def sample_ph(alpha: np.ndarray, T: np.ndarray, rng: np.random.Generator) -> float:
    """One PH(α, T) variate by walking the absorbing chain."""
    m = T.shape[0]
    exits = exit_vector(T)
    start = list(np.cumsum(alpha))
    phase = _pick(start, rng.random())
    elapsed = 0.0
    while True:
        rate = -T[phase, phase]
        elapsed += rng.exponential(1.0 / rate)
        outcomes = np.concatenate([T[phase], [exits[phase]]])
        outcomes[phase] = 0.0
        cumulative, _ = _cumulative(outcomes)
        choice = _pick(cumulative, rng.random())
        if choice == m:
            return elapsed
        phase = choice


def initial_profile(
    g: FractionVector, N: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Server lengths and phases realising ``g`` as closely as integer counts allow.

    Tails are aggregated over MAP phases, rounded to counts out of N and made
    non-increasing in k per service phase. The MAP phase is drawn from u₀.
    """
    counts = np.clip(np.rint(N * g.aggregated().levels), 0, N).astype(int)
    if counts.shape[0]:
        counts = np.minimum.accumulate(counts, axis=0)
    while counts.shape[0] and counts[0].sum() > N:
        j = int(np.argmax(counts[0]))
        counts[0, j] -= 1
        counts = np.minimum.accumulate(counts, axis=0)

    lengths = np.zeros(N, dtype=np.int64)
    phases = np.full(N, -1, dtype=np.int64)
    server = 0
    K = counts.shape[0]
    for j in range(counts.shape[1]):
        for k in range(K, 0, -1):
            above = counts[k, j] if k < K else 0
            exactly = counts[k - 1, j] - above
            lengths[server : server + exactly] = k
            phases[server : server + exactly] = j
            server += exactly
    weights = np.clip(g.u0, 0.0, None)
    map_phase = _pick(list(np.cumsum(weights / weights.sum())), rng.random())
    return lengths, phases, map_phase


@dataclass
class ReplicationResult:
    """Samples, time averages and event counts of one replication."""

    replication: int
    seed: int
    frame: pd.DataFrame
    states: list[FractionVector]
    time_average: dict[str, float]
    counts: dict[str, int]
    conservation_ok: bool


@dataclass
class SimResult:
    """All replications of one configuration."""

    config: SimConfig
    replications: list[ReplicationResult] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Simulation CSV layout with a replication column in front."""
        frames = [rep.frame.assign(replication=rep.replication) for rep in self.replications]
        frame = pd.concat(frames, ignore_index=True)
        return frame[["replication", *[c for c in frame.columns if c != "replication"]]]

    def summary_frame(self) -> pd.DataFrame:
        """Per-replication time averages with their seed."""
        rows = [
            {"replication": rep.replication, "seed": rep.seed, **rep.time_average, **rep.counts}
            for rep in self.replications
        ]
        return pd.DataFrame(rows)

    def mean_time_average(self, confidence: float = 0.95) -> pd.DataFrame:
        """Mean over replications and the Student-t half-width of every time average."""
        summary = self.summary_frame()
        columns = [c for c in summary.columns if c not in ("replication", "seed")]
        n = len(summary)
        quantile = stats.t.ppf(0.5 + confidence / 2, n - 1) if n > 1 else np.nan
        means = summary[columns].mean()
        half_widths = summary[columns].std(ddof=1) * quantile / np.sqrt(n) if n > 1 else np.nan
        return pd.DataFrame({"mean": means, "half_width": half_widths})


class _Replication:
    """One independent sample path of the N-server system."""

    def __init__(self, cfg: SimConfig, replication: int, initial: FractionVector) -> None:
        self.cfg = cfg
        self.replication = replication
        model = cfg.model
        self.N = cfg.N
        self.d = model.d
        self.m_A, self.m_B = model.dims
        C, D = scaled_map(model.map, cfg.N).matrices()
        self.alpha, self.T = model.ph.arrays()
        self.alpha_cumulative = list(np.cumsum(self.alpha))

        self.map_outcomes = []
        self.map_total = np.zeros(self.m_A)
        for i in range(self.m_A):
            hidden = C[i].copy()
            hidden[i] = 0.0
            cumulative, total = _cumulative(np.concatenate([hidden, D[i]]))
            self.map_outcomes.append(cumulative)
            self.map_total[i] = total

        exits = exit_vector(self.T)
        self.service_outcomes = []
        self.service_total = np.zeros(self.m_B)
        for j in range(self.m_B):
            moves = np.concatenate([self.T[j], [exits[j]]])
            moves[j] = 0.0
            cumulative, total = _cumulative(moves)
            self.service_outcomes.append(cumulative)
            self.service_total[j] = total

        self.map_rng = stream(cfg.seed, replication, STREAM_MAP)
        self.service_rng = stream(cfg.seed, replication, STREAM_SERVICE)
        self.choice_rng = stream(cfg.seed, replication, STREAM_CHOICE)
        init_rng = stream(cfg.seed, replication, STREAM_INIT)

        self.lengths, self.phases, self.map_phase = initial_profile(initial, cfg.N, init_rng)
        self.members: list[list[int]] = [[] for _ in range(self.m_B)]
        self.position = np.full(self.N, -1, dtype=np.int64)
        for server in np.flatnonzero(self.phases >= 0):
            self._enter_phase(int(server), int(self.phases[server]))

        self.k_report = cfg.k_report
        self.ge = np.zeros(self.k_report + 1)
        for k in range(1, self.k_report + 1):
            self.ge[k] = np.count_nonzero(self.lengths >= k)
        self.total = int(self.lengths.sum())
        self.initial_total = self.total

        self.samples = list(cfg.sample_times)
        self.sample_index = 0
        self.rows: list[dict[str, Any]] = []
        self.states: list[FractionVector] = []
        self.area_tails = np.zeros(self.k_report)
        self.area_total = 0.0
        self.area_u0 = np.zeros(self.m_A)
        self.counts = {"arrivals": 0, "departures": 0, "events": 0, "map_transitions": 0}

    def _enter_phase(self, server: int, phase: int) -> None:
        self.phases[server] = phase
        self.position[server] = len(self.members[phase])
        self.members[phase].append(server)

    def _leave_phase(self, server: int) -> None:
        phase = int(self.phases[server])
        bucket = self.members[phase]
        index = int(self.position[server])
        last = bucket.pop()
        if last != server:
            bucket[index] = last
            self.position[last] = index
        self.position[server] = -1
        self.phases[server] = -1

    def _draw_entry_phase(self) -> int:
        return _pick(self.alpha_cumulative, self.service_rng.random())

    def run(self) -> ReplicationResult:
        horizon = self.cfg.horizon
        t = 0.0
        while True:
            busy = np.array([len(bucket) for bucket in self.members], dtype=float)
            service_rate = float(busy @ self.service_total)
            map_rate = float(self.map_total[self.map_phase])
            total_rate = map_rate + service_rate
            t_next = t + self.map_rng.exponential(1.0 / total_rate)
            self._advance(t, min(t_next, horizon), final=t_next >= horizon)
            if t_next >= horizon:
                break
            t = t_next
            self.counts["events"] += 1
            if self.map_rng.random() * total_rate < map_rate:
                self._map_event()
            else:
                self._service_event(busy, service_rate)

        conservation = (
            self.initial_total + self.counts["arrivals"] - self.counts["departures"] == self.total
            and self.total == int(self.lengths.sum())
        )
        window = horizon - self.cfg.warmup
        time_average: dict[str, float] = {
            f"tail_{k}": float(value / window) for k, value in enumerate(self.area_tails, start=1)
        }
        time_average["mean_total"] = self.area_total / window
        for i in range(self.m_A):
            time_average[f"u0_{i + 1}"] = float(self.area_u0[i] / window)
        frame = pd.DataFrame(self.rows)
        return ReplicationResult(
            replication=self.replication,
            seed=self.cfg.seed,
            frame=frame,
            states=self.states,
            time_average=time_average,
            counts=dict(self.counts),
            conservation_ok=bool(conservation),
        )

    def _advance(self, t0: float, t1: float, final: bool) -> None:
        """Record samples in [t0, t1) (closed at the horizon) and accumulate time averages."""
        while self.sample_index < len(self.samples):
            s = self.samples[self.sample_index]
            if s < t1 or (final and s <= t1 + SAMPLE_TIME_TOL):
                self._record(s)
                self.sample_index += 1
            else:
                break
        start = max(t0, self.cfg.warmup)
        if t1 > start:
            width = t1 - start
            self.area_tails += self.ge[1:] * width / self.N
            self.area_total += self.total * width
            self.area_u0[self.map_phase] += width

    def _record(self, t: float) -> None:
        state = self.empirical_state()
        tails = state.aggregated().tails
        row: dict[str, Any] = {"t": t, "total_customers": self.total}
        for k in range(1, self.k_report + 1):
            row[f"tail_{k}"] = float(tails[k - 1]) if k <= tails.size else 0.0
        row["map_phase"] = self.map_phase + 1
        self.rows.append(row)
        self.states.append(state)

    def empirical_state(self) -> FractionVector:
        """Share of servers with length >= k in service phase j, placed in the active MAP phase."""
        K = max(int(self.lengths.max(initial=0)), 1)
        busy = self.lengths > 0
        histogram = np.zeros((K + 1, self.m_B))
        np.add.at(histogram, (self.lengths[busy], self.phases[busy]), 1.0)
        at_least = np.cumsum(histogram[::-1], axis=0)[::-1][1:]
        levels = np.zeros((K, self.m_A * self.m_B))
        block = slice(self.map_phase * self.m_B, (self.map_phase + 1) * self.m_B)
        levels[:, block] = at_least / self.N
        u0 = np.zeros(self.m_A)
        u0[self.map_phase] = 1.0
        return FractionVector(u0, levels)

    def _map_event(self) -> None:
        outcome = _pick(self.map_outcomes[self.map_phase], self.map_rng.random())
        if outcome < self.m_A:
            self.map_phase = outcome
            self.counts["map_transitions"] += 1
            return
        self.map_phase = outcome - self.m_A
        self._arrival()

    def _choose_server(self) -> int:
        if self.cfg.with_replacement:
            candidates = self.choice_rng.integers(0, self.N, size=self.d)
        else:
            candidates = self.choice_rng.choice(self.N, size=self.d, replace=False)
        lengths = self.lengths[candidates]
        shortest = candidates[lengths == lengths.min()]
        return int(shortest[int(self.choice_rng.random() * shortest.size)])

    def _arrival(self) -> None:
        server = self._choose_server()
        self.counts["arrivals"] += 1
        self.lengths[server] += 1
        self.total += 1
        new_length = int(self.lengths[server])
        if new_length <= self.k_report:
            self.ge[new_length] += 1
        if new_length == 1:
            self._enter_phase(server, self._draw_entry_phase())

    def _service_event(self, busy: np.ndarray, service_rate: float) -> None:
        target = self.service_rng.random() * service_rate
        weights = busy * self.service_total
        # Roundoff can push target past the last positive weight.
        phase = int(np.flatnonzero(weights > 0)[-1])
        running = 0.0
        for j in range(self.m_B):
            running += weights[j]
            if weights[j] > 0 and target < running:
                phase = j
                break
        bucket = self.members[phase]
        server = bucket[min(int(self.service_rng.random() * len(bucket)), len(bucket) - 1)]
        outcome = _pick(self.service_outcomes[phase], self.service_rng.random())
        self._leave_phase(server)
        if outcome < self.m_B:
            self._enter_phase(server, outcome)
            return
        length = int(self.lengths[server])
        if length <= self.k_report:
            self.ge[length] -= 1
        self.lengths[server] -= 1
        self.total -= 1
        self.counts["departures"] += 1
        if length > 1:
            self._enter_phase(server, self._draw_entry_phase())


def _run_replication(args: tuple[SimConfig, int, FractionVector]) -> ReplicationResult:
    cfg, replication, initial = args
    return _Replication(cfg, replication, initial).run()


def _map_replications(
    cfg: SimConfig, worker: Callable[[Any], Any], jobs: Sequence[Any]
) -> list[Any]:
    """Run jobs in a process pool when ``cfg.workers`` > 1, serially otherwise."""
    if cfg.workers > 1 and len(jobs) > 1:
        try:
            with ProcessPoolExecutor(max_workers=cfg.workers) as executor:
                return list(executor.map(worker, jobs))
        except (OSError, BrokenProcessPool) as exc:
            logger.warning("Process pool unavailable (%s); running replications serially", exc)
    return [worker(job) for job in jobs]


@dataclass
class CoupledResult:
    """Per-replication totals of the coupled systems and their comparison with d = 1."""

    frame: pd.DataFrame
    summary: pd.DataFrame

    def non_increasing(self, tol: float = 0.0) -> pd.Series:
        """Per replication: whether the time-averaged total never grows with d."""
        ordered = self.frame.sort_values(["replication", "d"])
        return ordered.groupby("replication")["mean_total"].apply(
            lambda totals: bool(np.all(np.diff(totals.to_numpy()) <= tol))
        )


class SupermarketSimulator:
    """Replicated simulation experiments for one configuration."""

    def __init__(self, cfg: SimConfig) -> None:
        self.cfg = cfg

    def run(self, initial: FractionVector | None = None) -> SimResult:
        start = FractionVector.empty(self.cfg.model) if initial is None else initial
        jobs = [(self.cfg, rep, start) for rep in range(self.cfg.replications)]
        results = _map_replications(self.cfg, _run_replication, jobs)
        if not all(result.conservation_ok for result in results):
            logger.warning("Customer conservation failed in at least one replication")
        logger.info(
            "Simulated %d replication(s) of N=%d to t=%.4g",
            len(results),
            self.cfg.N,
            self.cfg.horizon,
        )
        return SimResult(config=self.cfg, replications=results)

    def replication_gaps(self, trajectory: Trajectory) -> list[float]:
        """Per-replication sup over sample times of the phase-aggregated metric."""
        if trajectory.model is not None and trajectory.model != self.cfg.model:
            raise ModelValidationError("Trajectory was integrated for a different model.")
        if not self.cfg.sample_times:
            raise ModelValidationError("meanfield_gap needs sample_times in the config.")
        if trajectory.times.size == 0 or abs(trajectory.times[0]) > SAMPLE_TIME_TOL:
            raise ModelValidationError("Trajectory must include the initial state at t=0.")
        references = []
        for t in self.cfg.sample_times:
            nearest = int(np.argmin(np.abs(trajectory.times - t)))
            if abs(trajectory.times[nearest] - t) > SAMPLE_TIME_TOL:
                raise ModelValidationError(f"Trajectory has no sample at t={t}.")
            references.append(trajectory.states[nearest].aggregated())

        result = self.run(initial=trajectory.states[0])
        gaps = []
        for rep in result.replications:
            distances = [
                metric(state.aggregated(), reference)
                for state, reference in zip(rep.states, references)
            ]
            gaps.append(float(max(distances)))
        return gaps

    def meanfield_gap(self, trajectory: Trajectory) -> float:
        """Mean over replications of the sup-over-time mean-field deviation."""
        return float(np.mean(self.replication_gaps(trajectory)))

    def gap_by_size(self, trajectory: Trajectory, sizes: Sequence[int]) -> pd.DataFrame:
        """Replication gaps for each N in ``sizes``; replication r shares its seeds across N."""
        rows = []
        for N in sizes:
            sized = SupermarketSimulator(self.cfg.model_copy(update={"N": int(N)}))
            for replication, gap in enumerate(sized.replication_gaps(trajectory)):
                rows.append({"replication": replication, "N": int(N), "gap": gap})
        return pd.DataFrame(rows)

    def coupled_run(self, d_list: Sequence[int]) -> CoupledResult:
        """Common-random-number runs of one system per d, compared against d = 1."""
        d_list = [int(d) for d in d_list]
        if not d_list or d_list != sorted(d_list) or d_list[0] != 1:
            raise ModelValidationError("d_list must be sorted ascending and start with 1.")
        if not self.cfg.with_replacement and d_list[-1] > self.cfg.N:
            raise ModelValidationError("Sampling without replacement needs every d <= N.")
        jobs = [(self.cfg, d_list, rep) for rep in range(self.cfg.replications)]
        chunks = _map_replications(self.cfg, _coupled_replication, jobs)
        rows = [row for chunk in chunks for row in chunk]
        frame = pd.DataFrame(rows)
        return CoupledResult(frame=frame, summary=_dominance_summary(frame, d_list))

    def stationary_check(self, solution: FixedPointSolution, slack: float = 0.02) -> pd.DataFrame:
        """Simulated long-run tails next to the fixed-point tails."""
        if solution.model != self.cfg.model:
            raise ModelValidationError("Fixed point was solved for a different model.")
        table = self.run().mean_time_average()
        rows = []
        for k in range(1, self.cfg.k_report + 1):
            simulated = float(table.loc[f"tail_{k}", "mean"])
            half_width = float(table.loc[f"tail_{k}", "half_width"])
            fixed_point = float(solution.tails[k - 1]) if k <= solution.K else 0.0
            allowed = slack + (3.0 * half_width if np.isfinite(half_width) else 0.0)
            rows.append(
                {
                    "k": k,
                    "simulated": simulated,
                    "half_width": half_width,
                    "fixed_point": fixed_point,
                    "difference": simulated - fixed_point,
                    "within": abs(simulated - fixed_point) <= allowed,
                }
            )
        return pd.DataFrame(rows)


def _map_arrival_path(cfg: SimConfig, replication: int) -> np.ndarray:
    """Arrival epochs of the scaled MAP on [0, horizon], started from its stationary phase."""
    C, D = scaled_map(cfg.model.map, cfg.N).matrices()
    m_A = C.shape[0]
    rng = stream(cfg.seed, replication, STREAM_MAP)
    tables = []
    for i in range(m_A):
        hidden = C[i].copy()
        hidden[i] = 0.0
        tables.append(_cumulative(np.concatenate([hidden, D[i]])))
    phase = _pick(list(np.cumsum(stationary_vector(C + D))), rng.random())
    t = 0.0
    arrivals = []
    while True:
        cumulative, rate = tables[phase]
        t += rng.exponential(1.0 / rate)
        if t >= cfg.horizon:
            break
        outcome = _pick(cumulative, rng.random())
        if outcome >= m_A:
            arrivals.append(t)
        phase = outcome % m_A
    return np.asarray(arrivals)


def _coupled_replication(args: tuple[SimConfig, list[int], int]) -> list[dict[str, Any]]:
    cfg, d_list, replication = args
    alpha, T = cfg.model.ph.arrays()
    arrivals = _map_arrival_path(cfg, replication)
    n = arrivals.size
    d_max = max(d_list)
    choice_rng = stream(cfg.seed, replication, STREAM_CHOICE)
    if cfg.with_replacement:
        choices = choice_rng.integers(0, cfg.N, size=(n, d_max))
    else:
        choices = np.array([choice_rng.choice(cfg.N, size=d_max, replace=False) for _ in range(n)])
        choices = choices.reshape(n, d_max)
    tie_breaks = choice_rng.random(n)

    if cfg.service_coupling == ServiceCoupling.customer:
        service_rng = stream(cfg.seed, replication, STREAM_SERVICE)
        by_customer = np.array([sample_ph(alpha, T, service_rng) for _ in range(n)])
    else:
        by_customer = None
    by_server: dict[int, list[float]] = {}
    server_rngs: dict[int, np.random.Generator] = {}

    def server_requirement(server: int, ordinal: int) -> float:
        drawn = by_server.setdefault(server, [])
        rng = server_rngs.setdefault(server, stream(cfg.seed, replication, STREAM_SERVICE, server))
        while len(drawn) <= ordinal:
            drawn.append(sample_ph(alpha, T, rng))
        return drawn[ordinal]

    window = cfg.horizon - cfg.warmup
    rows = []
    for d in d_list:
        queues: list[deque[float]] = [deque() for _ in range(cfg.N)]
        served = np.zeros(cfg.N, dtype=np.int64)
        area = 0.0
        for index in range(n):
            now = arrivals[index]
            candidates = choices[index, :d]
            for server in candidates:
                queue = queues[server]
                while queue and queue[0] <= now:
                    queue.popleft()
            lengths = np.array([len(queues[server]) for server in candidates])
            shortest = candidates[lengths == lengths.min()]
            server = int(shortest[int(tie_breaks[index] * shortest.size)])
            queue = queues[server]
            begin = max(now, queue[-1]) if queue else now
            if by_customer is not None:
                requirement = by_customer[index]
            else:
                requirement = server_requirement(server, int(served[server]))
            served[server] += 1
            departure = begin + requirement
            queue.append(departure)
            overlap = min(departure, cfg.horizon) - max(now, cfg.warmup)
            if overlap > 0:
                area += overlap
        rows.append(
            {
                "replication": replication,
                "seed": cfg.seed,
                "d": d,
                "mean_total": area / window,
                "arrivals": int(n),
            }
        )
    return rows


def _dominance_summary(frame: pd.DataFrame, d_list: Sequence[int]) -> pd.DataFrame:
    baseline = frame[frame["d"] == 1].set_index("replication")["mean_total"]
    rows = []
    seen: set[int] = set()
    for d in d_list:
        if d in seen:
            continue
        seen.add(d)
        totals = frame[frame["d"] == d].groupby("replication")["mean_total"].first()
        n = totals.size
        mean = float(totals.mean())
        half_width = (
            float(stats.t.ppf(0.975, n - 1) * totals.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan
        )
        paired = baseline.loc[totals.index]
        difference = paired - totals
        if d == 1 or n < 2 or np.allclose(difference, 0.0):
            statistic, p_value = np.nan, np.nan
        else:
            test = stats.ttest_rel(paired, totals, alternative="greater")
            statistic, p_value = float(test.statistic), float(test.pvalue)
        rows.append(
            {
                "d": d,
                "mean_total": mean,
                "half_width": half_width,
                "dominated_fraction": float(np.mean(totals.values <= paired.values)),
                "t_statistic": statistic,
                "p_value": p_value,
            }
        )
    return pd.DataFrame(rows)


def run(cfg: SimConfig, initial: FractionVector | None = None) -> SimResult:
    return SupermarketSimulator(cfg).run(initial)


def meanfield_gap(cfg: SimConfig, trajectory: Trajectory) -> float:
    return SupermarketSimulator(cfg).meanfield_gap(trajectory)


def replication_gaps(cfg: SimConfig, trajectory: Trajectory) -> list[float]:
    return SupermarketSimulator(cfg).replication_gaps(trajectory)


def coupled_run(cfg: SimConfig, d_list: Sequence[int]) -> CoupledResult:
    return SupermarketSimulator(cfg).coupled_run(d_list)


def stationary_check(
    cfg: SimConfig, solution: FixedPointSolution, slack: float = 0.02
) -> pd.DataFrame:
    return SupermarketSimulator(cfg).stationary_check(solution, slack)


def gap_by_size(cfg: SimConfig, trajectory: Trajectory, sizes: Sequence[int]) -> pd.DataFrame:
    return SupermarketSimulator(cfg).gap_by_size(trajectory, sizes)


def shrinking_fraction(gaps: pd.DataFrame) -> float:
    """Share of replications whose gap at the largest N is below the gap at the smallest."""
    table = gaps.pivot(index="replication", columns="N", values="gap")
    smallest, largest = min(table.columns), max(table.columns)
    return float(np.mean(table[largest] < table[smallest]))
