"""Cost model of synchronous batched decoding with segment rollouts.

Every step each busy lane decodes ``min(remaining, segment_len)`` tokens and
the step lasts ``c * max(decoded) + h``.  Lanes holding unfinished samples are
scheduled first; free lanes are then refilled from the workload in whole
groups, the same admission rule the rollout engine uses.

``mean_step_time`` is throughput-normalised: total time divided by the number
of completed samples, times ``lanes``.  It is the cost of producing one full
batch of finished samples, which is what a training step consumes.  For
``segment_count = 1`` it equals the plain time per rollout step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError

FAMILIES = ("empirical", "lognormal", "two_point")


@dataclass
class LengthDistribution:
    """A pmf over response lengths ``1..global_max_len``."""

    family: str
    support: np.ndarray
    probs: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown length family {self.family!r}")
        if self.support.shape != self.probs.shape or self.support.size == 0:
            raise InputError("support and probs must be nonempty and aligned")
        if np.any(self.support < 1):
            raise InputError("lengths must be positive integers")
        if np.any(self.probs < 0) or not math.isclose(self.probs.sum(), 1.0, abs_tol=1e-9):
            raise InputError("length probabilities must be nonnegative and sum to 1")

    @classmethod
    def two_point(cls, short_frac: float, short_len: int, long_len: int) -> "LengthDistribution":
        """``short_frac`` of the mass at ``short_len``, the rest at ``long_len``."""
        if not 0 <= short_frac <= 1:
            raise ConfigError("short_frac must lie in [0, 1]")
        if not 1 <= short_len <= long_len:
            raise ConfigError("need 1 <= short_len <= long_len")
        if short_len == long_len:
            return cls("two_point", [long_len], [1.0], {"short_frac": short_frac, "short_len": short_len, "long_len": long_len})
        return cls(
            "two_point",
            [short_len, long_len],
            [short_frac, 1.0 - short_frac],
            {"short_frac": short_frac, "short_len": short_len, "long_len": long_len},
        )

    @classmethod
    def lognormal(cls, mu: float, sigma: float, global_max_len: int, overflow: str = "renormalize") -> "LengthDistribution":
        """Lognormal discretised onto integers, truncated at ``global_max_len``.

        ``overflow="cap"`` piles the tail mass onto the cap instead of
        renormalising, mimicking responses cut at the length limit.
        """
        from math import erf, log, sqrt

        if sigma <= 0:
            raise ConfigError("lognormal sigma must be positive")
        if overflow not in ("renormalize", "cap"):
            raise ConfigError("overflow must be 'renormalize' or 'cap'")

        def cdf(x):
            return 0.5 * (1 + erf((log(x) - mu) / (sigma * sqrt(2)))) if x > 0 else 0.0

        support = np.arange(1, global_max_len + 1)
        edges = [cdf(k + 0.5) for k in range(0, global_max_len + 1)]
        probs = np.diff(edges)
        probs[0] += edges[0]
        if overflow == "cap":
            probs[-1] += 1.0 - edges[-1]
        total = probs.sum()
        if total <= 0:
            raise ConfigError("lognormal places no mass on 1..global_max_len")
        return cls("lognormal", support, probs / total, {"mu": mu, "sigma": sigma, "overflow": overflow})

    @classmethod
    def empirical(cls, lengths, global_max_len: Optional[int] = None) -> "LengthDistribution":
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size == 0:
            raise InputError("empirical distribution needs at least one length")
        if global_max_len is not None and lengths.max() > global_max_len:
            raise InputError("observed length exceeds global_max_len")
        values, counts = np.unique(lengths, return_counts=True)
        return cls("empirical", values, counts / counts.sum(), {"n": int(lengths.size)})

    @property
    def mean(self) -> float:
        return float((self.support * self.probs).sum())

    def sample(self, n: int, rng) -> np.ndarray:
        """``n`` lengths by stratified inverse-CDF sampling, then shuffled."""
        if n < 0:
            raise InputError("n must be nonnegative")
        u = (np.arange(n) + rng.random(n)) / max(n, 1)
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        out = self.support[np.searchsorted(cdf, u, side="right").clip(max=self.support.size - 1)]
        return out[rng.permutation(n)]


@dataclass(frozen=True)
class CostModel:
    c: float = 1.0
    h: float = 0.0
    lanes: int = 64

    def __post_init__(self):
        problems = []
        if not self.c > 0:
            problems.append("per-token cost c must be positive")
        if not self.h >= 0:
            problems.append("per-step overhead h must be >= 0")
        if self.lanes < 1:
            problems.append("lanes must be positive")
        if problems:
            raise ConfigError("; ".join(problems), problems)


@dataclass
class SimResult:
    segment_count: int
    mean_step_time: float
    mean_rollout_step_time: float
    total_time: float
    tokens_decoded: int
    steps: int
    completed: int
    utilization: float
    workload_key: str

    def to_row(self) -> dict:
        return asdict(self)


def workload_key(lengths, cost: CostModel, global_max_len: int, group_size: int) -> str:
    h = hashlib.sha256(np.asarray(lengths, dtype=np.int64).tobytes())
    h.update(repr((cost.c, cost.h, cost.lanes, global_max_len, group_size)).encode())
    return h.hexdigest()[:16]


def simulate(
    lengths,
    segment_count: int,
    cost: CostModel,
    global_max_len: int,
    group_size: int = 1,
) -> SimResult:
    """Run the synchronous segment scheduler over a fixed workload of lengths."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0:
        raise InputError("empty workload")
    if np.any(lengths < 1) or np.any(lengths > global_max_len):
        raise InputError("workload lengths must lie in [1, global_max_len]")
    if segment_count < 1 or global_max_len % segment_count:
        raise ConfigError(f"segment_count={segment_count} must divide global_max_len={global_max_len}")
    if group_size < 1 or group_size > cost.lanes:
        raise ConfigError("group_size must lie in [1, lanes]")
    if lengths.size % group_size:
        raise InputError("workload size must be a multiple of group_size")
    seg = global_max_len // segment_count
    carry = np.zeros(0, dtype=np.int64)
    nxt = 0
    total_time = 0.0
    decoded = 0
    capacity = 0
    steps = 0
    while carry.size or nxt < lengths.size:
        free = cost.lanes - carry.size
        take = min((free // group_size) * group_size, lengths.size - nxt)
        active = np.concatenate([carry, lengths[nxt : nxt + take]])
        nxt += take
        step = np.minimum(active, seg)
        peak = int(step.max())
        total_time += cost.c * peak + cost.h
        decoded += int(step.sum())
        capacity += cost.lanes * peak
        carry = active - step
        carry = carry[carry > 0]
        steps += 1
    n = int(lengths.size)
    return SimResult(
        segment_count=segment_count,
        mean_step_time=total_time * cost.lanes / n,
        mean_rollout_step_time=total_time / steps,
        total_time=total_time,
        tokens_decoded=decoded,
        steps=steps,
        completed=n,
        utilization=decoded / capacity,
        workload_key=workload_key(lengths, cost, global_max_len, group_size),
    )


def speedup(baseline: SimResult, variant: SimResult) -> float:
    if baseline.workload_key != variant.workload_key:
        raise InputError("speedup needs the same workload and cost model")
    return baseline.mean_step_time / variant.mean_step_time


def two_point_speedup(short_frac: float, short_ratio: float, segment_count: int, lanes: Optional[int] = None) -> float:
    """Closed form for a two-point workload with ``h = 0``.

    A short sample (length ``short_ratio * L``) occupies ``ceil(short_ratio * k)``
    lane-steps of ``L / k`` tokens and a long one ``k``; with ``k > 1`` some lane
    always decodes a full segment.  With ``k = 1`` a step is short only when
    every lane is short, which ``lanes`` accounts for (``None`` = many lanes).
    """
    p, a, k = short_frac, short_ratio, segment_count
    all_short = 0.0 if lanes is None else p**lanes
    baseline = (1 - all_short) + all_short * a
    if k == 1:
        return 1.0
    per_sample = p * math.ceil(a * k - 1e-12) / k + (1 - p)
    return baseline / per_sample


@dataclass
class Calibration:
    short_frac: float
    short_ratio: float
    target: float
    calibrated_k: int
    achieved: float
    error: float
    candidates: int

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate_two_point(
    target: float = 1.6,
    k: int = 2,
    global_max_len: int = 256,
    cost: CostModel = CostModel(),
    n_samples: int = 16384,
    seed: int = 0,
    frac_grid=None,
    ratio_grid=None,
    tie_tol: float = 0.01,
) -> Calibration:
    """Grid search for the two-point mixture whose ``k``-segment speedup hits ``target``.

    Several mixtures reach the target equally well (any short length up to
    ``L / k`` behaves the same at ``k``).  Among candidates within ``tie_tol``
    of the best error the most long-tailed one wins: smallest short length,
    then smallest error.
    """
    if frac_grid is None:
        frac_grid = np.round(np.arange(0.05, 0.96, 0.01), 2)
    if ratio_grid is None:
        ratio_grid = np.arange(1, 8) / 8
    scored = []
    for a in ratio_grid:
        short_len = max(1, int(round(a * global_max_len)))
        for p in frac_grid:
            dist = LengthDistribution.two_point(float(p), short_len, global_max_len)
            lengths = dist.sample(n_samples, np.random.default_rng(seed))
            base = simulate(lengths, 1, cost, global_max_len)
            var = simulate(lengths, k, cost, global_max_len)
            s = speedup(base, var)
            scored.append((abs(s - target), float(a), float(p), s))
    best = min(e for e, *_ in scored)
    ties = [t for t in scored if t[0] <= best + tie_tol]
    err, a, p, s = min(ties, key=lambda t: (t[1], t[0]))
    return Calibration(p, a, target, k, s, err, len(ties))


def speedup_table(lengths, segment_counts, cost: CostModel, global_max_len: int, group_size: int = 1) -> list:
    """One row per segment count with the speedup over ``segment_count = 1``."""
    base = simulate(lengths, 1, cost, global_max_len, group_size)
    rows = []
    for k in segment_counts:
        res = base if k == 1 else simulate(lengths, k, cost, global_max_len, group_size)
        row = res.to_row()
        row["speedup"] = speedup(base, res)
        rows.append(row)
    return rows


SIM_COLUMNS = ("segment_count", "mean_step_time", "speedup", "utilization", "mean_rollout_step_time", "steps", "tokens_decoded")
