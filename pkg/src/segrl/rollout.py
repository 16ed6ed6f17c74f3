"""Segment rollouts with an unfinished pool and an experience pool.

Each call to :func:`rollout_step` decodes at most ``segment_len`` tokens per lane.
Lanes are filled with carried-over unfinished trajectories first, then with
whole groups of ``group_size`` fresh trajectories for new prompts.  A finished
trajectory waits in ``pending`` until every member of its group is done; the
complete group then moves to ``experience_pool`` and its final-rollout
log-probabilities are recomputed under the policy of that step.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, EndOfData, InputError, PreconditionError
from .policy import (
    PAD,
    PolicyParams,
    Vocab,
    log_softmax,
    sample_tokens,
    sequence_logprobs,
    window_logits,
)


class Status(str, enum.Enum):
    IN_PROGRESS = "InProgress"
    FINISHED_EOS = "FinishedEOS"
    TRUNCATED_GLOBAL = "TruncatedGlobal"


class Termination(str, enum.Enum):
    FINISHED_EOS = "FinishedEOS"
    SEGMENT_BOUNDARY = "SegmentBoundary"
    TRUNCATED_GLOBAL = "TruncatedGlobal"


@dataclass(frozen=True)
class Segment:
    tokens: tuple
    gen_version: int
    gen_logprobs: tuple

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise InputError("a segment holds at least one token")
        if len(self.gen_logprobs) != len(self.tokens):
            raise InputError("gen_logprobs must align with tokens")
        lp = np.asarray(self.gen_logprobs, dtype=np.float64)
        if not (np.all(np.isfinite(lp)) and np.all(lp <= 0)):
            raise InputError("generation log-probabilities must be finite and <= 0")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    tokens: tuple
    reference: Optional[str] = None


@dataclass(eq=False)
class Trajectory:
    prompt_id: str
    prompt_tokens: tuple
    segments: list = field(default_factory=list)
    status: Status = Status.IN_PROGRESS
    final_rollout_logprobs: Optional[np.ndarray] = None
    final_version: Optional[int] = None
    reward: Optional[int] = None
    advantage: Optional[float] = None
    member: int = 0
    group_key: Any = None
    reference: Optional[str] = None

    @property
    def response(self) -> list:
        out = []
        for seg in self.segments:
            out.extend(seg.tokens)
        return out

    @property
    def length(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def segment_bounds(self) -> np.ndarray:
        """Cumulative end offsets of the segments (exclusive)."""
        return np.cumsum([len(s) for s in self.segments], dtype=np.int64)

    @property
    def gen_logprobs(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([np.asarray(s.gen_logprobs, dtype=np.float64) for s in self.segments])

    @property
    def completed(self) -> bool:
        return self.status is not Status.IN_PROGRESS


@dataclass
class RolloutConfig:
    global_max_len: int = 256
    segment_count: int = 8
    group_size: int = 8
    prompt_batch: int = 16
    temperature: float = 0.85

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems), problems)

    def problems(self) -> list:
        out = []
        if self.global_max_len < 1:
            out.append("global_max_len must be positive")
        if self.segment_count < 1:
            out.append("segment_count must be positive")
        elif self.global_max_len % self.segment_count:
            out.append(
                f"segment_count={self.segment_count} must divide global_max_len={self.global_max_len}"
            )
        if self.group_size < 2:
            out.append("group_size must be >= 2")
        if self.prompt_batch < 1:
            out.append("prompt_batch must be positive")
        if not self.temperature > 0:
            out.append("temperature must be positive")
        return out

    @property
    def segment_len(self) -> int:
        return self.global_max_len // self.segment_count

    @property
    def lanes(self) -> int:
        return self.prompt_batch * self.group_size


@dataclass
class RolloutState:
    prompt_queue: deque = field(default_factory=deque)
    unfinished_pool: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    experience_pool: list = field(default_factory=list)
    step: int = 0
    admitted: int = 0
    last_completed: int = 0
    last_truncated: int = 0

    @classmethod
    def from_prompts(cls, prompts) -> "RolloutState":
        return cls(prompt_queue=deque(prompts))

    @property
    def exhausted(self) -> bool:
        return not (self.prompt_queue or self.unfinished_pool or self.pending)

    def drain_experience(self) -> list:
        out, self.experience_pool = self.experience_pool, []
        return out


def classify_termination(traj: Trajectory, cfg: RolloutConfig, eos_id: int) -> Termination:
    """Classify a trajectory that was just extended by one segment.

    EOS takes precedence over hitting the global length cap.
    """
    n = traj.length
    if n > cfg.global_max_len:
        raise PreconditionError(f"trajectory length {n} exceeds global_max_len {cfg.global_max_len}")
    if traj.segments and traj.segments[-1].tokens[-1] == eos_id:
        return Termination.FINISHED_EOS
    if n == cfg.global_max_len:
        return Termination.TRUNCATED_GLOBAL
    return Termination.SEGMENT_BOUNDARY


def admit_prompts(state: RolloutState, cfg: RolloutConfig) -> list:
    """Return this step's lanes; carried-over work first, then whole new groups.

    New prompts are popped from ``state.prompt_queue`` only when all
    ``group_size`` rollouts fit in the remaining capacity.
    """
    lanes = list(state.unfinished_pool)
    state.unfinished_pool = []
    G = cfg.group_size
    while state.prompt_queue and cfg.lanes - len(lanes) >= G:
        prompt = state.prompt_queue.popleft()
        key = (state.admitted, prompt.prompt_id)
        state.admitted += 1
        lanes.extend(
            Trajectory(
                prompt.prompt_id,
                tuple(prompt.tokens),
                member=m,
                group_key=key,
                reference=prompt.reference,
            )
            for m in range(G)
        )
    return lanes


def decode_segment(lanes, params: PolicyParams, max_new: int, eos_id: int, temperature: float, rng):
    """Decode up to ``max_new`` tokens on every lane in lock-step.

    Returns per-lane ``(tokens, logprobs)`` lists.  Log-probabilities are
    temperature-1 even though sampling uses ``temperature``.
    """
    n = len(lanes)
    width = params.context_width
    windows = np.full((n, width), PAD, dtype=np.int64)
    for i, traj in enumerate(lanes):
        hist = list(traj.prompt_tokens) + traj.response
        tail = hist[::-1][:width]
        windows[i, : len(tail)] = tail
    tokens = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    active = np.arange(n)
    for _ in range(max_new):
        if active.size == 0:
            break
        logits = window_logits(params, windows[active])
        picks = sample_tokens(logits, temperature, rng)
        lp = log_softmax(logits)[np.arange(active.size), picks]
        for j, lane in enumerate(active):
            tokens[lane].append(int(picks[j]))
            logps[lane].append(float(lp[j]))
        windows[active, 1:] = windows[active, :-1]
        windows[active, 0] = picks
        active = active[picks != eos_id]
    return tokens, logps


def rollout_step(state: RolloutState, params: PolicyParams, cfg: RolloutConfig, rng, eos_id: int) -> RolloutState:
    """Advance every lane by one segment and update the pools in place."""
    lanes = admit_prompts(state, cfg)
    if not lanes:
        raise EndOfData("no queued prompts and no unfinished trajectories")
    budget = [min(cfg.segment_len, cfg.global_max_len - t.length) for t in lanes]
    if min(budget) < 1:
        raise PreconditionError("an unfinished trajectory has no remaining length budget")
    new_tokens, new_logps = decode_segment(lanes, params, cfg.segment_len, eos_id, cfg.temperature, rng)
    completed = truncated = 0
    for traj, toks, lps in zip(lanes, new_tokens, new_logps):
        traj.segments.append(Segment(tuple(toks), params.version, tuple(lps)))
        term = classify_termination(traj, cfg, eos_id)
        if term is Termination.SEGMENT_BOUNDARY:
            state.unfinished_pool.append(traj)
            continue
        traj.status = (
            Status.FINISHED_EOS if term is Termination.FINISHED_EOS else Status.TRUNCATED_GLOBAL
        )
        completed += 1
        truncated += term is Termination.TRUNCATED_GLOBAL
        _stamp_final_logprobs(traj, params)
        state.pending.append(traj)
    _promote_complete_groups(state, params, cfg.group_size)
    state.step += 1
    state.last_completed, state.last_truncated = completed, truncated
    return state


def _stamp_final_logprobs(traj: Trajectory, params: PolicyParams):
    traj.final_rollout_logprobs = sequence_logprobs(params, traj.prompt_tokens, traj.response)
    traj.final_version = params.version


def _promote_complete_groups(state: RolloutState, params: PolicyParams, group_size: int):
    counts = {}
    for traj in state.pending:
        counts[traj.group_key] = counts.get(traj.group_key, 0) + 1
    ready = {k for k, c in counts.items() if c == group_size}
    if not ready:
        return
    keep = []
    for traj in state.pending:
        if traj.group_key in ready:
            if traj.final_version != params.version:
                _stamp_final_logprobs(traj, params)
            state.experience_pool.append(traj)
        else:
            keep.append(traj)
    state.pending = keep
