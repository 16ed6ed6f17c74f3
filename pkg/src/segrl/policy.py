"""Linear-softmax autoregressive policy over a small vocabulary.

The next-token distribution is ``softmax(W^T phi(context))`` where ``phi`` is the
concatenated one-hot encoding of the trailing ``context_width`` tokens plus a
constant bias feature.  Positions shorter than the window are padded on the
left with an all-zero feature, so pad never needs a vocabulary slot.

Feature layout: row ``k * V + v`` of the weight matrix fires when the token
``k`` places back from the end of the context is ``v`` (``k = 0`` is the most
recent token).  The final row is the bias.

Every logit computation, whether from incremental decoding or from a full
prefill over a response, goes through :func:`window_logits`; that keeps stored
generation-time log-probabilities bitwise comparable with training-time ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

PAD = -1


@dataclass(frozen=True)
class Vocab:
    size: int
    eos_id: int
    answer_marker_id: int
    tokens: Optional[tuple] = None

    def __post_init__(self):
        if self.size < 4:
            raise ConfigError(f"vocabulary size must be >= 4, got {self.size}")
        for name in ("eos_id", "answer_marker_id"):
            tok = getattr(self, name)
            if not 0 <= tok < self.size:
                raise ConfigError(f"{name}={tok} outside vocabulary of size {self.size}")
        if self.eos_id == self.answer_marker_id:
            raise ConfigError("eos_id and answer_marker_id must differ")
        if self.tokens is not None and len(self.tokens) != self.size:
            raise ConfigError(
                f"{len(self.tokens)} token strings given for vocabulary of size {self.size}"
            )

    def decode(self, ids: Sequence[int]) -> str:
        if self.tokens is None:
            return " ".join(str(int(i)) for i in ids)
        return "".join(self.tokens[int(i)] for i in ids)

    def encode(self, pieces: Sequence[str]) -> list:
        if self.tokens is None:
            raise InputError("vocabulary has no token strings")
        lookup = {t: i for i, t in enumerate(self.tokens)}
        try:
            return [lookup[p] for p in pieces]
        except KeyError as exc:
            raise InputError(f"unknown token {exc.args[0]!r}") from None


@dataclass
class PolicyParams:
    """Weights of the linear-softmax policy plus a version stamp.

    ``weights`` has shape ``(context_width * vocab_size + 1, vocab_size)``.
    """

    weights: np.ndarray
    context_width: int
    version: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.context_width < 1:
            raise ConfigError("context_width must be positive")
        rows, cols = self.weights.shape
        if rows != self.context_width * cols + 1:
            raise ConfigError(
                f"weights shape {self.weights.shape} inconsistent with "
                f"context_width={self.context_width}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ConfigError("policy weights must be finite")

    @classmethod
    def zeros(cls, vocab_size: int, context_width: int) -> "PolicyParams":
        return cls(np.zeros((context_width * vocab_size + 1, vocab_size)), context_width)

    @classmethod
    def random(cls, vocab_size, context_width, rng, scale=1.0) -> "PolicyParams":
        w = rng.normal(0.0, scale, size=(context_width * vocab_size + 1, vocab_size))
        return cls(w, context_width)

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1]

    @property
    def bias_row(self) -> int:
        return self.weights.shape[0] - 1

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.context_width, self.version)


@dataclass(frozen=True)
class TokenDistribution:
    logits: np.ndarray
    probs: np.ndarray = field(repr=False)

    @classmethod
    def from_logits(cls, logits) -> "TokenDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(logits, np.exp(log_softmax(logits)))

    @property
    def size(self) -> int:
        return self.logits.shape[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_of_probs(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats with ``0 * log 0 = 0``."""
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def context_window(context: Sequence[int], width: int, vocab_size: int) -> np.ndarray:
    """Trailing ``width`` tokens, most recent first, left-padded with PAD."""
    ctx = np.asarray(context, dtype=np.int64).reshape(-1)
    if ctx.size and (ctx.min() < 0 or ctx.max() >= vocab_size):
        raise InputError(f"context token outside vocabulary of size {vocab_size}")
    win = np.full(width, PAD, dtype=np.int64)
    tail = ctx[::-1][:width]
    win[: tail.size] = tail
    return win


def window_rows(windows: np.ndarray, vocab_size: int, pad_row: int) -> np.ndarray:
    """Map ``(N, width)`` token windows to weight-row indices (pad -> ``pad_row``)."""
    width = windows.shape[1]
    offsets = np.arange(width, dtype=np.int64) * vocab_size
    return np.where(windows >= 0, windows + offsets, pad_row)


def window_logits(params: PolicyParams, windows: np.ndarray) -> np.ndarray:
    """Logits for a batch of context windows, shape ``(N, V)``."""
    w = params.weights
    padded = np.vstack([w, np.zeros((1, w.shape[1]))])
    rows = window_rows(windows, params.vocab_size, pad_row=w.shape[0])
    return padded[rows].sum(axis=1) + w[-1]


def response_windows(prompt: Sequence[int], response: Sequence[int], width: int) -> np.ndarray:
    """Context windows for every response position, shape ``(len(response), width)``.

    Row ``t`` is the window preceding ``response[t]``; the prompt counts as context.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    seq = np.concatenate([np.full(width, PAD, dtype=np.int64), prompt, response])
    ends = width + prompt.size + np.arange(response.size) - 1
    return seq[ends[:, None] - np.arange(width)[None, :]]


def distribution(params: PolicyParams, context: Sequence[int]) -> TokenDistribution:
    win = context_window(context, params.context_width, params.vocab_size)
    return TokenDistribution.from_logits(window_logits(params, win[None, :])[0])


def tempered_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / temperature))


def sample_tokens(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one token per row of ``logits`` from ``softmax(logits / temperature)``."""
    probs = tempered_probs(np.atleast_2d(logits), temperature)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=1)
    # a zero-probability token can never be selected, even at the float edge
    idx = np.minimum(idx, probs.shape[1] - 1)
    return idx


def sample_token(dist: TokenDistribution, temperature: float, rng: np.random.Generator) -> int:
    return int(sample_tokens(dist.logits[None, :], temperature, rng)[0])


def token_entropy(dist: TokenDistribution) -> float:
    return float(entropy_of_probs(dist.probs))


def grad_log_prob(params: PolicyParams, context: Sequence[int], token: int) -> np.ndarray:
    """Gradient of ``log pi(token | context)`` with respect to ``params.weights``.

    For the linear-softmax family this is ``phi(context) (onehot(token) - probs)^T``.
    """
    V = params.vocab_size
    if not 0 <= token < V:
        raise InputError(f"token {token} outside vocabulary of size {V}")
    win = context_window(context, params.context_width, V)
    probs = TokenDistribution.from_logits(window_logits(params, win[None, :])[0]).probs
    row = -probs
    row[token] += 1.0
    grad = np.zeros_like(params.weights)
    active = window_rows(win[None, :], V, pad_row=-1)[0]
    grad[active[active >= 0]] += row
    grad[-1] += row
    return grad


def accumulate_grad(params: PolicyParams, windows: np.ndarray, logit_grads: np.ndarray) -> np.ndarray:
    """Back-propagate per-position logit gradients ``(N, V)`` onto the weights."""
    V = params.vocab_size
    grad = np.zeros((params.weights.shape[0] + 1, V))
    rows = window_rows(windows, V, pad_row=params.weights.shape[0])
    width = windows.shape[1]
    flat = rows.reshape(-1)
    rep = np.repeat(np.asarray(logit_grads, dtype=np.float64), width, axis=0)
    for v in range(V):
        grad[:, v] = np.bincount(flat, weights=rep[:, v], minlength=grad.shape[0])
    grad[-2] += logit_grads.sum(axis=0)
    return grad[:-1]


def sequence_logprobs(params: PolicyParams, prompt, response) -> np.ndarray:
    """Temperature-1 log-probabilities of each response token given its prefix."""
    win = response_windows(prompt, response, params.context_width)
    logp = log_softmax(window_logits(params, win))
    return logp[np.arange(len(response)), np.asarray(response, dtype=np.int64)]
