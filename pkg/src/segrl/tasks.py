"""Synthetic verifiable tasks and a warm-started initial policy.

The default family is modular-arithmetic chains such as ``3+2-1 mod 5``.  A
prompt is tokenised as ``[3, +2, -1, =]``: every signed operand is a single
token, so the running value is an additive function of the prompt tokens.

Demonstrations follow the format::

    L1 a s1 s2 =  L2 a s1 s2 =  ...  L5 a s1 s2 =  so <ans> d <eos>

The chain is restated on numbered lines before answering, which keeps every
operand inside the policy's trailing context window at the answer position.
A teacher occasionally hesitates (``wait`` repeated a geometric number of
times), losing sight of the prompt; these detours create the long tail of
response lengths.  :func:`warm_start` fits the linear policy to teacher
demonstrations by maximum likelihood, giving RL a confident but imperfect
starting point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pipeline import DatasetRecord
from .policy import PolicyParams, Vocab, accumulate_grad, log_softmax, response_windows, window_logits


@dataclass(frozen=True)
class ModChainFamily:
    modulus: int = 5
    n_ops: int = 2
    max_operand: int = 2
    n_lines: int = 5
    allow_wrap: bool = False

    def __post_init__(self):
        problems = []
        if not 2 <= self.modulus <= 10:
            problems.append("modulus must lie in [2, 10] (answers are single digits)")
        if self.n_ops < 1:
            problems.append("n_ops must be >= 1")
        if not 1 <= self.max_operand <= 9:
            problems.append("max_operand must lie in [1, 9]")
        if self.n_lines < 1:
            problems.append("n_lines must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems), problems)

    @property
    def op_tokens(self) -> list:
        k = self.max_operand
        return [f"+{i}" for i in range(1, k + 1)] + [f"-{i}" for i in range(1, k + 1)]

    @property
    def line_tokens(self) -> list:
        return [f"L{i}" for i in range(1, self.n_lines + 1)]

    @property
    def token_strings(self) -> tuple:
        return tuple(
            [str(d) for d in range(10)]
            + self.op_tokens
            + ["="]
            + self.line_tokens
            + ["wait", "so", "<ans>", "<eos>"]
        )

    @property
    def vocab(self) -> Vocab:
        toks = self.token_strings
        return Vocab(len(toks), toks.index("<eos>"), toks.index("<ans>"), toks)

    @property
    def context_width(self) -> int:
        # answer position sees <ans>, so, =, every operand and the first term
        return self.n_ops + 4

    @property
    def canonical_length(self) -> int:
        return self.n_lines * (self.n_ops + 3) + 4

    def tokenize(self, question: str) -> tuple:
        a, ops = parse_chain(question)
        pieces = [str(a)] + [_op_piece(s) for s in ops] + ["="]
        return tuple(self.vocab.encode(pieces))


def _op_piece(s: int) -> str:
    return f"{'+' if s > 0 else '-'}{abs(s)}"


def parse_chain(question: str):
    """Split ``"3+4-2 mod 5"`` into ``(3, [4, -2])``; the modulus is dropped."""
    expr = question.split("mod")[0].replace(" ", "")
    terms, sign, num = [], 1, ""
    for ch in expr:
        if ch in "+-":
            if num:
                terms.append(sign * int(num))
            sign, num = (1 if ch == "+" else -1), ""
        elif ch.isdigit():
            num += ch
        else:
            raise ConfigError(f"cannot parse chain {question!r}")
    if num:
        terms.append(sign * int(num))
    if not terms:
        raise ConfigError(f"empty chain {question!r}")
    return terms[0], terms[1:]


def evaluate_chain(question: str) -> int:
    """Reference evaluator: fold the chain left to right, reducing mod M."""
    head, tail = question.split("mod")
    modulus = int(tail.strip())
    acc = 0
    for token in head.replace("-", " -").replace("+", " +").split():
        acc = (acc + int(token)) % modulus
    return acc


def format_question(a, ops, modulus) -> str:
    return f"{a}" + "".join(_op_piece(s) for s in ops) + f" mod {modulus}"


def _sample_chain(family: ModChainFamily, rng):
    M, K = family.modulus, family.max_operand
    a = int(rng.integers(0, M))
    ops, value = [], a
    for _ in range(family.n_ops):
        choices = [s for s in range(-K, K + 1) if s != 0]
        if not family.allow_wrap:
            choices = [s for s in choices if 0 <= value + s < M] or choices
        s = choices[int(rng.integers(0, len(choices)))]
        ops.append(s)
        value += s
    return a, ops


TASK_FAMILIES = {"modchain": ModChainFamily}


def make_family(name: str = "modchain", **params):
    if name not in TASK_FAMILIES:
        raise ConfigError(f"unknown task family {name!r}; known: {sorted(TASK_FAMILIES)}")
    return TASK_FAMILIES[name](**params)


def generate_tasks(family, count: int, rng, id_prefix: str = "q") -> list:
    """``count`` records of a synthetic family, reproducible from ``rng``."""
    if isinstance(family, str):
        family = make_family(family)
    records = []
    for i in range(count):
        a, ops = _sample_chain(family, rng)
        question = format_question(a, ops, family.modulus)
        records.append(
            DatasetRecord(
                id=f"{id_prefix}{i:05d}",
                question=question,
                reference_answer=str(evaluate_chain(question)),
                meta={"family": "modchain", "modulus": family.modulus},
            )
        )
    return records


@dataclass(frozen=True)
class TeacherConfig:
    accuracy: float = 0.3
    hesitate_prob: float = 0.0075
    hesitate_mean: float = 40.0
    noise: str = "uniform"  # wrong answers: "uniform" over residues or "neighbor" (off by one)

    def __post_init__(self):
        problems = []
        if not 0 <= self.accuracy <= 1:
            problems.append("teacher accuracy must lie in [0, 1]")
        if not 0 <= self.hesitate_prob < 1:
            problems.append("hesitate_prob must lie in [0, 1)")
        if not self.hesitate_mean >= 1:
            problems.append("hesitate_mean must be >= 1")
        if self.noise not in ("uniform", "neighbor"):
            problems.append("teacher noise must be 'uniform' or 'neighbor'")
        if problems:
            raise ConfigError("; ".join(problems), problems)


def teacher_response(family: ModChainFamily, question: str, rng, cfg: TeacherConfig = TeacherConfig()) -> list:
    """One demonstration (token ids) for ``question``.

    With probability ``accuracy`` the final digit is right, otherwise it is off
    by one (or uniform over the residues when ``noise="uniform"``).  At each
    restated token the teacher may start a ``wait`` detour and then answer
    blindly.
    """
    vocab = family.vocab
    enc = {t: i for i, t in enumerate(vocab.tokens)}
    a, ops = parse_chain(question)
    answer = evaluate_chain(question)
    chain = [str(a)] + [_op_piece(s) for s in ops] + ["="]
    out = []
    for line in family.line_tokens:
        for piece in [line] + chain:
            if rng.random() < cfg.hesitate_prob:
                n_wait = 1 + int(rng.geometric(1.0 / cfg.hesitate_mean))
                guess = int(rng.integers(0, family.modulus))
                out += ["wait"] * n_wait + ["so", "<ans>", str(guess), "<eos>"]
                return [enc[p] for p in out]
            out.append(piece)
    if rng.random() < cfg.accuracy:
        digit = answer
    elif cfg.noise == "uniform":
        digit = int(rng.integers(0, family.modulus))
    else:
        step = 1 if rng.random() < 0.5 else -1
        digit = answer + step if 0 <= answer + step < family.modulus else answer - step
    out += ["so", "<ans>", str(digit), "<eos>"]
    return [enc[p] for p in out]


def warm_start(
    family: ModChainFamily,
    records,
    rng,
    teacher: TeacherConfig = TeacherConfig(),
    demos_per_record: int = 4,
    steps: int = 1000,
    learning_rate: float = 0.1,
    max_len: int = 256,
) -> PolicyParams:
    """Maximum-likelihood fit of the linear policy to teacher demonstrations."""
    from .trainer import Adam

    vocab = family.vocab
    width = family.context_width
    windows, targets = [], []
    for rec in records:
        prompt = family.tokenize(rec.question)
        for _ in range(demos_per_record):
            resp = teacher_response(family, rec.question, rng, teacher)[:max_len]
            windows.append(response_windows(prompt, resp, width))
            targets.append(np.asarray(resp, dtype=np.int64))
    windows = np.concatenate(windows)
    targets = np.concatenate(targets)
    # identical windows share one softmax; their targets become a count table
    uniq, inverse = np.unique(windows, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.zeros((uniq.shape[0], vocab.size))
    np.add.at(counts, (inverse, targets), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    n = targets.size
    params = PolicyParams.zeros(vocab.size, width)
    opt = Adam(learning_rate)
    for _ in range(steps):
        probs = np.exp(log_softmax(window_logits(params, uniq)))
        grad = accumulate_grad(params, uniq, (counts - totals * probs) / n)
        params = PolicyParams(params.weights + opt.learning_rate * opt.direction(grad), width, 0)
    return params
