"""Token-level importance ratios for segment rollouts.

Three denominators are supported:

* ``TOIS`` - true on-policy; only meaningful when every trajectory is a single
  segment, and reads the final-rollout log-probabilities.
* ``SAIS`` - segment-aware; each token is divided by the probability under the
  policy version that generated its own segment.
* ``POIS`` - pseudo on-policy; every token is divided by the probability under
  the policy in force when the trajectory's group became trainable, so the
  ratio is exactly 1 until the first update.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import InputError, NumericError, StateError
from .policy import PolicyParams, sequence_logprobs


class RatioMode(str, enum.Enum):
    TOIS = "TOIS"
    SAIS = "SAIS"
    POIS = "POIS"

    @classmethod
    def parse(cls, value) -> "RatioMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InputError(f"unknown ratio mode {value!r}; expected one of TOIS, SAIS, POIS") from None


def segment_of(token_index: int, traj) -> int:
    """1-based id of the segment holding ``token_index`` (half-open ranges)."""
    bounds = traj.segment_bounds
    if not bounds.size or not 0 <= token_index < bounds[-1]:
        raise InputError(f"token index {token_index} outside response of length {traj.length}")
    return int(np.searchsorted(bounds, token_index, side="right")) + 1


def segment_ids(traj) -> np.ndarray:
    """Segment id for every response token (vectorised :func:`segment_of`)."""
    return np.repeat(np.arange(1, len(traj.segments) + 1), [len(s) for s in traj.segments])


def denominator_logprobs(traj, mode: RatioMode) -> np.ndarray:
    mode = RatioMode.parse(mode)
    if not traj.completed:
        raise StateError("importance ratios need a completed trajectory")
    if mode is RatioMode.SAIS:
        return traj.gen_logprobs
    if traj.final_rollout_logprobs is None:
        raise StateError(f"{mode.value} needs final_rollout_logprobs")
    return np.asarray(traj.final_rollout_logprobs, dtype=np.float64)


def log_ratios(current_logprobs: np.ndarray, traj, mode: RatioMode) -> np.ndarray:
    denom = denominator_logprobs(traj, mode)
    if denom.shape != current_logprobs.shape:
        raise StateError("stored log-probabilities do not align with the response")
    return current_logprobs - denom


def compute_ratios(traj, params: PolicyParams, mode: RatioMode) -> np.ndarray:
    """Per-token ``pi_theta / pi_old`` for ``traj`` under ``mode``.

    The numerator is recomputed from ``params``; ratios are formed in log space
    and exponentiated once.
    """
    current = sequence_logprobs(params, traj.prompt_tokens, traj.response)
    ratios = np.exp(log_ratios(current, traj, mode))
    if not np.all(np.isfinite(ratios)) or np.any(ratios <= 0):
        raise NumericError("non-finite or non-positive importance ratio")
    return ratios
