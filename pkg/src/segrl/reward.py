"""Binary verifiable rewards with a pluggable answer-equivalence checker."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .errors import InputError
from .rollout import Status

DEFAULT_UNITS = {
    # unit -> (dimension, factor to the base unit of that dimension)
    "m": ("length", Fraction(1)),
    "cm": ("length", Fraction(1, 100)),
    "mm": ("length", Fraction(1, 1000)),
    "kg": ("mass", Fraction(1)),
    "g": ("mass", Fraction(1, 1000)),
}

DEFAULT_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
    "thirteen": 13, "fourteen": 14, "fifteen": 15, "sixteen": 16,
    "seventeen": 17, "eighteen": 18, "nineteen": 19, "twenty": 20,
}  # fmt: skip

DEFAULT_FRACTION_WORDS = {
    "half": Fraction(1, 2),
    "halves": Fraction(1, 2),
    "quarter": Fraction(1, 4),
    "quarters": Fraction(1, 4),
}

_NUMBER = re.compile(r"^([+-]?)(\d+(?:\.\d*)?|\.\d+)(?:\s*/\s*(\d+))?$")
_WRAPPERS = [
    re.compile(r"^\\boxed\{(.*)\}$"),
    re.compile(r"^\$(.*)\$$"),
    re.compile(r"^\\text\{(.*)\}$"),
]


@dataclass(frozen=True)
class AnswerPair:
    predicted: str
    reference: str

    def __post_init__(self):
        if not str(self.reference).strip():
            raise InputError("reference answer must be nonempty")


def normalize_text(text: str) -> str:
    s = " ".join(str(text).strip().lower().split())
    changed = True
    while changed:
        changed = False
        for pat in _WRAPPERS:
            m = pat.match(s)
            if m:
                s, changed = m.group(1).strip(), True
    return s.rstrip(".").strip()


def parse_number(text: str) -> Optional[Fraction]:
    """Exact value of an integer, decimal or ``a/b`` literal, else ``None``."""
    m = _NUMBER.match(text.replace(",", ""))
    if not m:
        return None
    sign, num, den = m.groups()
    value = Fraction(num)
    if den is not None:
        if int(den) == 0 or "." in num:
            return None
        value = value / int(den)
    return -value if sign == "-" else value


@dataclass
class RuleBasedChecker:
    """Exact match, then rational comparison, then unit and word-number tables."""

    units: dict = field(default_factory=lambda: dict(DEFAULT_UNITS))
    words: dict = field(default_factory=lambda: dict(DEFAULT_WORDS))
    fraction_words: dict = field(default_factory=lambda: dict(DEFAULT_FRACTION_WORDS))
    checker_id: str = "rule-v1"

    def __post_init__(self):
        self.units = {
            k.lower(): (dim, Fraction(factor).limit_denominator(10**12)) for k, (dim, factor) in self.units.items()
        }
        unit_alt = "|".join(sorted((re.escape(u) for u in self.units), key=len, reverse=True))
        self._unit_re = re.compile(rf"^(.+?)\s*({unit_alt})$") if unit_alt else None

    def __call__(self, pair: AnswerPair) -> bool:
        return self.equivalent(pair.predicted, pair.reference)

    def equivalent(self, predicted: str, reference: str) -> bool:
        a, b = normalize_text(predicted), normalize_text(reference)
        if not a or not b:
            return False
        if a == b:
            return True
        va, vb = self.value(a), self.value(b)
        return va is not None and va == vb

    def value(self, text: str):
        """Canonical value: ``Fraction`` for plain numbers, ``(dim, Fraction)`` with units."""
        num = parse_number(text)
        if num is not None:
            return num
        if self._unit_re is not None:
            m = self._unit_re.match(text)
            if m:
                mag = parse_number(m.group(1).strip())
                if mag is None:
                    mag = self.word_value(m.group(1).strip())
                if mag is not None:
                    dim, factor = self.units[m.group(2)]
                    return (dim, mag * factor)
        return self.word_value(text)

    def word_value(self, text: str) -> Optional[Fraction]:
        parts = text.replace("-", " ").split()
        if parts and parts[0] == "a" and len(parts) == 2:
            parts = ["one", parts[1]]
        if len(parts) == 1:
            if parts[0] in self.words:
                return Fraction(self.words[parts[0]])
            if parts[0] in self.fraction_words:
                return self.fraction_words[parts[0]]
            return None
        if len(parts) == 2 and parts[0] in self.words and parts[1] in self.fraction_words:
            return self.words[parts[0]] * self.fraction_words[parts[1]]
        return None


def is_equivalent(pair: AnswerPair, checker: Optional[Callable] = None) -> bool:
    checker = checker or RuleBasedChecker()
    return bool(checker(pair))


def extract_final_answer(response, vocab) -> Optional[str]:
    """Detokenised span after the last answer marker, up to EOS or the end."""
    tokens = list(response)
    marks = [i for i, t in enumerate(tokens) if t == vocab.answer_marker_id]
    if not marks:
        return None
    span = tokens[marks[-1] + 1 :]
    if vocab.eos_id in span:
        span = span[: span.index(vocab.eos_id)]
    return vocab.decode(span)


def compute_reward(traj, reference: str, checker, vocab) -> int:
    """1 if the extracted answer is equivalent to ``reference``, else 0.

    Truncated trajectories always score 0.
    """
    if traj.status is Status.TRUNCATED_GLOBAL:
        return 0
    answer = extract_final_answer(traj.response, vocab)
    if answer is None:
        return 0
    return int(is_equivalent(AnswerPair(answer, reference), checker))
