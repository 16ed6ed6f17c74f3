"""The segment-rollout training loop.

One step is: rollout one segment per lane, score the groups that became
complete, drop zero-spread groups, normalise advantages, then take
``updates_per_step`` ascent steps on the masked clipped objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError, NumericError
from .policy import PolicyParams, entropy_of_probs, log_softmax, response_windows, window_logits
from .reward import RuleBasedChecker, compute_reward
from .rollout import Prompt, RolloutConfig, RolloutState, Segment, Status, Trajectory, decode_segment, rollout_step
from .trainer import (
    Adam,
    TrainerConfig,
    apply_update,
    assign_advantages,
    batch_loss_and_grad,
    dynamic_sampling_filter,
    group_by_prompt,
)

METRIC_COLUMNS = (
    "step",
    "mean_reward",
    "mean_entropy",
    "masked_fraction",
    "clip_fraction",
    "experience_pool_size",
    "unfinished_pool_size",
    "dropped_groups",
    "loss",
    "wall_time",
    "retained_groups",
    "mean_ratio",
    "completed",
    "truncated",
    "mean_length",
)


class PromptStream:
    """Endless supply of prompts: the dataset reshuffled every epoch."""

    def __init__(self, prompts, rng):
        self.prompts = list(prompts)
        if not self.prompts:
            raise InputError("no prompts to train on")
        self.rng = rng
        self.epoch = 0
        self._order = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.prompts)))
                self.epoch += 1
            out.append(self.prompts[self._order.pop(0)])
        return out


def mean_response_entropy(trajectories, params: PolicyParams) -> float:
    """Average over responses of each response's mean token entropy.

    This is the same per-response quantity the masking gate compares with
    ``sigma``, so long responses do not dominate the logged value.
    """
    if not trajectories:
        return float("nan")
    wins = [response_windows(t.prompt_tokens, t.response, params.context_width) for t in trajectories]
    probs = np.exp(log_softmax(window_logits(params, np.concatenate(wins))))
    h = entropy_of_probs(probs)
    lengths = np.array([w.shape[0] for w in wins])
    owner = np.repeat(np.arange(lengths.size), lengths)
    return float((np.bincount(owner, weights=h) / lengths).mean())


@dataclass
class StepRecord:
    row: dict
    pois_max_abs_log_ratio: Optional[float] = None


@dataclass
class LoopState:
    params: PolicyParams
    rollout: RolloutState
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)


class TrainingLoop:
    """Stateful driver; :meth:`step` advances one rollout step plus its updates."""

    def __init__(
        self,
        params: PolicyParams,
        prompts,
        rollout_cfg: RolloutConfig,
        trainer_cfg: TrainerConfig,
        vocab,
        rng,
        checker=None,
        timing: bool = False,
    ):
        if trainer_cfg.ratio_mode.value == "TOIS" and rollout_cfg.segment_count != 1:
            raise InputError("TOIS requires segment_count = 1")
        self.rcfg = rollout_cfg
        self.tcfg = trainer_cfg
        self.vocab = vocab
        self.rng = rng
        self.checker = checker or RuleBasedChecker()
        self.stream = PromptStream(prompts, rng)
        self.timing = timing
        self.state = LoopState(params, RolloutState(), Adam.from_config(trainer_cfg))
        self._t0 = time.perf_counter()

    @property
    def params(self) -> PolicyParams:
        return self.state.params

    def _refill(self):
        rs = self.state.rollout
        need = self.rcfg.prompt_batch - len(rs.prompt_queue)
        if need > 0:
            rs.prompt_queue.extend(self.stream.take(need))

    def step(self) -> StepRecord:
        st = self.state
        self._refill()
        rollout_step(st.rollout, st.params, self.rcfg, self.rng, self.vocab.eos_id)
        experience = st.rollout.drain_experience()
        for traj in experience:
            traj.reward = compute_reward(traj, traj.reference, self.checker, self.vocab)
        groups = group_by_prompt(experience)
        retained, dropped = dynamic_sampling_filter(groups)
        assign_advantages(retained)

        row = {c: 0.0 for c in METRIC_COLUMNS}
        row["step"] = st.step
        row["mean_reward"] = float(np.mean([t.reward for t in experience])) if experience else float("nan")
        row["mean_entropy"] = mean_response_entropy(experience, st.params)
        row["experience_pool_size"] = len(experience)
        row["unfinished_pool_size"] = len(st.rollout.unfinished_pool)
        row["dropped_groups"] = dropped
        row["retained_groups"] = len(retained)
        row["completed"] = st.rollout.last_completed
        row["truncated"] = st.rollout.last_truncated
        row["mean_length"] = float(np.mean([t.length for t in experience])) if experience else float("nan")
        row["mean_ratio"] = float("nan")
        pois_dev = None
        if retained:
            for u in range(self.tcfg.updates_per_step):
                objective, grad, stats = batch_loss_and_grad(retained, st.params, self.tcfg)
                if u == 0:
                    pois_dev = stats["max_abs_log_ratio"]
                    row.update(
                        loss=stats["loss"],
                        masked_fraction=stats["masked_fraction"],
                        clip_fraction=stats["clip_fraction"],
                        mean_ratio=stats["mean_ratio"],
                    )
                try:
                    st.params = apply_update(st.params, grad, st.optimizer)
                except NumericError as exc:
                    raise NumericError(f"step {st.step}: {exc}") from exc
        row["wall_time"] = round(time.perf_counter() - self._t0, 6) if self.timing else 0.0
        st.step += 1
        record = StepRecord(row, pois_dev)
        st.history.append(record)
        return record

    def run(self, steps: int, on_step: Optional[Callable] = None) -> list:
        rows = []
        for _ in range(steps):
            rec = self.step()
            rows.append(rec.row)
            if on_step is not None:
                on_step(self, rec)
        return rows


def sample_responses(params: PolicyParams, prompts, k: int, max_len: int, temperature: float, vocab, rng) -> list:
    """``k`` sampled completions per prompt, decoded in one batch."""
    lanes = [Trajectory(p.prompt_id, tuple(p.tokens), reference=p.reference, member=m) for p in prompts for m in range(k)]
    if not lanes:
        return []
    toks, lps = decode_segment(lanes, params, max_len, vocab.eos_id, temperature, rng)
    for traj, t, lp in zip(lanes, toks, lps):
        traj.segments.append(Segment(tuple(t), params.version, tuple(lp)))
        traj.status = Status.FINISHED_EOS if t[-1] == vocab.eos_id else Status.TRUNCATED_GLOBAL
    return lanes


def evaluate(params: PolicyParams, prompts, vocab, k: int = 8, max_len: int = 256, temperature: float = 0.85, rng=None, checker=None) -> dict:
    """avg@k: mean reward over ``k`` samples per prompt, with a per-prompt breakdown."""
    if rng is None:
        rng = np.random.default_rng(0)
    checker = checker or RuleBasedChecker()
    prompts = list(prompts)
    lanes = sample_responses(params, prompts, k, max_len, temperature, vocab, rng)
    per = {}
    for traj in lanes:
        r = compute_reward(traj, traj.reference, checker, vocab)
        per.setdefault(traj.prompt_id, []).append(r)
    per_prompt = {pid: float(np.mean(v)) for pid, v in per.items()}
    acc = float(np.mean([r for v in per.values() for r in v])) if per else float("nan")
    return {"accuracy": acc, "k": k, "per_prompt": per_prompt}


def prompts_from_records(records, family) -> list:
    out = []
    for r in records:
        try:
            tokens = family.tokenize(r.question)
        except (ValueError, KeyError) as exc:
            raise InputError(f"record {r.id}: cannot tokenize question {r.question!r}: {exc}") from None
        out.append(Prompt(r.id, tokens, r.reference_answer))
    return out
