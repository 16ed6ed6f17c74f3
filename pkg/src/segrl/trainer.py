"""Group-relative policy optimisation with dynamic masking of mastered tokens.

The objective maximised each update is the token-level clipped surrogate

    J = (1 / sum_i |o_i|) * sum_i sum_t (1 - m_it) * min(r_it A_i, clip(r_it, 1-eps_low, 1+eps_high) A_i)

where ``A_i`` is the group-normalised reward and ``m_it`` masks tokens that a
positive response already predicts with probability >= ``tau``, but only while
that response's mean token entropy is below ``sigma``.  Masked tokens still count
in the normaliser.  There is no KL term and no value function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError, NumericError, PreconditionError
from .policy import (
    PolicyParams,
    accumulate_grad,
    entropy_of_probs,
    log_softmax,
    response_windows,
    window_logits,
)
from .ratios import RatioMode, denominator_logprobs

MASKING_MODES = ("none", "always", "dynamic")
ENTROPY_GATES = ("response", "batch")
MPT_SOURCES = ("current", "generation")


@dataclass
class TrainerConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2
    tau: float = 0.99
    sigma: float = 0.2
    learning_rate: float = 0.01
    updates_per_step: int = 1
    ratio_mode: RatioMode = RatioMode.POIS
    masking: str = "dynamic"
    entropy_gate: str = "response"
    mpt_source: str = "current"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        self.ratio_mode = RatioMode.parse(self.ratio_mode)
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems), problems)

    def problems(self) -> list:
        out = []
        for name in ("eps_low", "eps_high"):
            if not 0 < getattr(self, name) < 1:
                out.append(f"{name} must lie in (0, 1)")
        if not 0 < self.tau < 1:
            out.append("tau must lie in (0, 1)")
        if not self.sigma >= 0:
            out.append("sigma must be >= 0")
        if not self.learning_rate > 0:
            out.append("learning_rate must be positive")
        if self.updates_per_step < 1:
            out.append("updates_per_step must be >= 1")
        if self.masking not in MASKING_MODES:
            out.append(f"masking must be one of {MASKING_MODES}")
        if self.entropy_gate not in ENTROPY_GATES:
            out.append(f"entropy_gate must be one of {ENTROPY_GATES}")
        if self.mpt_source not in MPT_SOURCES:
            out.append(f"mpt_source must be one of {MPT_SOURCES}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        return out


@dataclass
class Group:
    prompt_id: str
    trajectories: list
    rewards: np.ndarray = None
    advantages: Optional[np.ndarray] = None
    filtered: bool = False

    def __post_init__(self):
        if self.rewards is None:
            self.rewards = np.array([t.reward for t in self.trajectories], dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if any(t.prompt_id != self.prompt_id for t in self.trajectories):
            raise InputError("all trajectories in a group must share the prompt")

    @property
    def size(self) -> int:
        return len(self.trajectories)


def group_by_prompt(trajectories) -> list:
    """Bundle completed trajectories into groups, preserving first-seen order."""
    buckets = {}
    for traj in trajectories:
        buckets.setdefault(traj.group_key, []).append(traj)
    groups = []
    for members in buckets.values():
        members = sorted(members, key=lambda t: t.member)
        groups.append(Group(members[0].prompt_id, members))
    return groups


def group_advantage(rewards) -> np.ndarray:
    """``(r - mean) / std`` with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if not std > 0:
        raise PreconditionError("zero reward spread; dynamic sampling should have dropped this group")
    return (r - r.mean()) / std


def dynamic_sampling_filter(groups) -> tuple:
    """Drop groups whose members are all correct or all wrong.

    Returns ``(retained, dropped_count)``; dropped groups are flagged ``filtered``.
    """
    retained, dropped = [], 0
    for g in groups:
        n_correct = int(np.sum(g.rewards))
        if 0 < n_correct < g.size:
            retained.append(g)
        else:
            g.filtered = True
            g.advantages = None
            dropped += 1
    return retained, dropped


def assign_advantages(groups):
    for g in groups:
        g.advantages = group_advantage(g.rewards)
        for traj, adv in zip(g.trajectories, g.advantages):
            traj.advantage = float(adv)


def identify_mpts(reward, current_probs, tau: float) -> np.ndarray:
    """Flags for well-mastered positive tokens: reward 1 and ``p >= tau``."""
    p = np.asarray(current_probs, dtype=np.float64)
    if reward != 1:
        return np.zeros(p.shape, dtype=bool)
    return p >= tau


def response_mean_entropy(traj, params: PolicyParams) -> float:
    """Mean full-distribution entropy over the response positions of ``traj``."""
    response = traj.response
    if not response:
        raise InputError("empty response has no mean entropy")
    win = response_windows(traj.prompt_tokens, response, params.context_width)
    probs = np.exp(log_softmax(window_logits(params, win)))
    return float(entropy_of_probs(probs).mean())


def dmmpt_mask(mpts, h_bar: float, sigma: float) -> np.ndarray:
    mpts = np.asarray(mpts, dtype=bool)
    if h_bar < sigma:
        return mpts.copy()
    return np.zeros_like(mpts)


def token_objective(ratio, advantage, eps_low: float, eps_high: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - eps_low, 1.0 + eps_high)
    out = np.minimum(ratio * advantage, clipped * advantage)
    return float(out) if out.ndim == 0 else out


@dataclass
class _Batch:
    windows: np.ndarray
    tokens: np.ndarray
    owner: np.ndarray
    denom: np.ndarray
    gen_logprobs: np.ndarray
    advantages: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray


def _flatten(groups, params: PolicyParams, mode: RatioMode) -> _Batch:
    windows, tokens, owner, denom, gen, adv, rew, lengths = [], [], [], [], [], [], [], []
    i = 0
    for g in groups:
        if g.advantages is None:
            raise PreconditionError("group reached the loss without advantages")
        for traj, a in zip(g.trajectories, g.advantages):
            resp = np.asarray(traj.response, dtype=np.int64)
            if resp.size == 0:
                raise InputError("empty response")
            windows.append(response_windows(traj.prompt_tokens, resp, params.context_width))
            tokens.append(resp)
            owner.append(np.full(resp.size, i))
            denom.append(denominator_logprobs(traj, mode))
            gen.append(traj.gen_logprobs)
            adv.append(a)
            rew.append(traj.reward)
            lengths.append(resp.size)
            i += 1
    return _Batch(
        np.concatenate(windows),
        np.concatenate(tokens),
        np.concatenate(owner),
        np.concatenate(denom),
        np.concatenate(gen),
        np.asarray(adv, dtype=np.float64),
        np.asarray(rew, dtype=np.float64),
        np.asarray(lengths, dtype=np.int64),
    )


def batch_loss_and_grad(groups, params: PolicyParams, cfg: TrainerConfig):
    """Objective, its exact gradient w.r.t. the weights, and diagnostics.

    Returns ``(objective, grad, stats)``.  ``objective`` is the quantity being
    maximised; ``stats["loss"]`` is its negation for logging.  Stored
    denominators, MPT flags and the entropy gate are treated as constants.
    Where the clipped branch of the ``min`` is strictly smaller the token
    contributes no gradient.
    """
    if not groups:
        raise InputError("no retained groups; skip this update")
    b = _flatten(groups, params, cfg.ratio_mode)
    n_tok = b.tokens.size
    pos = np.arange(n_tok)

    logits = window_logits(params, b.windows)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    cur = logp_all[pos, b.tokens]

    tok_entropy = entropy_of_probs(probs)
    h_bar = np.bincount(b.owner, weights=tok_entropy) / b.lengths

    mpt_p = np.exp(cur) if cfg.mpt_source == "current" else np.exp(b.gen_logprobs)
    mpts = (b.rewards[b.owner] == 1) & (mpt_p >= cfg.tau)
    if cfg.masking == "none":
        mask = np.zeros(n_tok, dtype=bool)
    elif cfg.masking == "always":
        mask = mpts
    else:
        gate = h_bar if cfg.entropy_gate == "response" else np.full(h_bar.shape, h_bar.mean())
        mask = mpts & (gate[b.owner] < cfg.sigma)

    ratio = np.exp(cur - b.denom)
    if not np.all(np.isfinite(ratio)):
        raise NumericError("non-finite importance ratio")
    adv = b.advantages[b.owner]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * adv
    per_token = np.minimum(unclipped, clipped)
    keep = ~mask
    objective = float(per_token[keep].sum() / n_tok)

    clip_binding = clipped < unclipped
    # d(per_token)/d(log pi) = r * A on the unclipped branch, 0 when clipping binds
    dlogp = np.where(clip_binding, 0.0, unclipped) * keep / n_tok
    logit_grads = -probs * dlogp[:, None]
    logit_grads[pos, b.tokens] += dlogp
    grad = accumulate_grad(params, b.windows, logit_grads)

    stats = {
        "loss": -objective,
        "tokens": int(n_tok),
        "masked_fraction": float(mask.mean()),
        "mpt_fraction": float(mpts.mean()),
        "clip_fraction": float(clip_binding.mean()),
        "mean_ratio": float(ratio.mean()),
        "max_abs_log_ratio": float(np.abs(cur - b.denom).max()),
        "mean_entropy": float(h_bar.mean()),
        "trajectories": int(b.lengths.size),
    }
    return objective, grad, stats


def batch_objective(groups, params: PolicyParams, cfg: TrainerConfig) -> float:
    return batch_loss_and_grad(groups, params, cfg)[0]


class Adam:
    """Adam ascent with optional decoupled weight decay and a constant step size."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = None
        self.v = None
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainerConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def direction(self, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def apply_update(params: PolicyParams, grad: np.ndarray, optimizer: Adam) -> PolicyParams:
    """One ascent step; returns new params with ``version + 1``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.weights.shape:
        raise InputError("gradient shape does not match weights")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    w = params.weights
    step = optimizer.learning_rate * optimizer.direction(grad)
    if optimizer.weight_decay:
        step = step - optimizer.learning_rate * optimizer.weight_decay * w
    new_w = w + step
    if not np.all(np.isfinite(new_w)):
        raise NumericError("update produced non-finite weights")
    return PolicyParams(new_w, params.context_width, params.version + 1)
