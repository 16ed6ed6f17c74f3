"""JSONL dataset cleaning with an auditable per-record report.

Stages run in a declared order.  Each one sees the records that survived the
previous stage and either keeps or removes them; every removal carries a
reason from :class:`Reason`.  Solver failures never remove a record, they only
add a flag.
"""

from __future__ import annotations

import enum
import json
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, InputError
from .reward import RuleBasedChecker, normalize_text

REQUIRED_FIELDS = ("id", "question", "reference_answer")


class Reason(str, enum.Enum):
    MALFORMED = "malformed"
    MULTI_SUBQUESTION = "multi_subquestion"
    TOO_EASY = "too_easy"
    LONG_REFERENCE = "long_reference"
    INCONSISTENT_REFERENCE = "inconsistent_reference"


class Flag(str, enum.Enum):
    SOLVER_FAILURE = "solver_failure"


@dataclass
class DatasetRecord:
    id: str
    question: str
    reference_answer: str
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict, repr=False)
    raw: Optional[str] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise InputError("record id must be a nonempty string")
        for name in ("question", "reference_answer"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise InputError(f"record {self.id!r}: {name} must be a nonempty string")
        if not isinstance(self.meta, dict):
            raise InputError(f"record {self.id!r}: meta must be an object")

    @classmethod
    def from_dict(cls, obj, raw: Optional[str] = None) -> "DatasetRecord":
        if not isinstance(obj, dict):
            raise InputError("record must be a JSON object")
        missing = [k for k in REQUIRED_FIELDS if k not in obj]
        if missing:
            raise InputError(f"missing field(s): {', '.join(missing)}")
        extra = {k: v for k, v in obj.items() if k not in REQUIRED_FIELDS + ("meta",)}
        return cls(obj["id"], obj["question"], obj["reference_answer"], obj.get("meta", {}), extra, raw)

    def to_dict(self) -> dict:
        out = {"id": self.id, "question": self.question, "reference_answer": self.reference_answer, "meta": self.meta}
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    def replace(self, **changes) -> "DatasetRecord":
        values = {
            "id": self.id,
            "question": self.question,
            "reference_answer": self.reference_answer,
            "meta": self.meta,
            "extra": self.extra,
        }
        values.update(changes)
        return DatasetRecord(**values)


# ---------------------------------------------------------------- filters

DEFAULT_SUBQUESTION_PATTERNS = (
    r"\(\s*a\s*\).*\(\s*b\s*\)",
    r"(?:^|[\s.;:])\(?1\).*(?:^|[\s.;:])\(?2\)",
    r"(?:^|[\s.;:])\(?i\).*(?:^|[\s.;:])\(?ii\)",
)


@dataclass
class Verdict:
    keep: bool
    reason: Optional[Reason] = None
    flags: tuple = ()


def filter_multi_subquestion(record: DatasetRecord, patterns=DEFAULT_SUBQUESTION_PATTERNS, min_question_marks: int = 2) -> Verdict:
    q = record.question
    if q.count("?") >= min_question_marks:
        return Verdict(False, Reason.MULTI_SUBQUESTION)
    for pat in patterns:
        if re.search(pat, q, flags=re.IGNORECASE | re.DOTALL):
            return Verdict(False, Reason.MULTI_SUBQUESTION)
    return Verdict(True)


def filter_easy(record: DatasetRecord, solver: Callable, k: int = 8, checker=None) -> Verdict:
    """Drop iff all ``k`` sampled answers are judged correct."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    checker = checker or RuleBasedChecker()
    try:
        answers = list(solver(record, k))
        if len(answers) != k:
            raise InputError(f"solver returned {len(answers)} answers, expected {k}")
    except Exception:
        return Verdict(True, flags=(Flag.SOLVER_FAILURE,))
    if all(a is not None and checker.equivalent(str(a), record.reference_answer) for a in answers):
        return Verdict(False, Reason.TOO_EASY)
    return Verdict(True)


def filter_long_reference(record: DatasetRecord, max_len: int = 64) -> Verdict:
    if max_len <= 0:
        raise ConfigError("max_len must be positive")
    if len(normalize_reference(record.reference_answer)) > max_len:
        return Verdict(False, Reason.LONG_REFERENCE)
    return Verdict(True)


def filter_inconsistent_reference(record: DatasetRecord, ensemble, checker=None) -> Verdict:
    """Drop iff the ensemble agrees on an answer that differs from the reference."""
    if len(ensemble) < 2:
        raise ConfigError("the consistency filter needs at least two solvers")
    checker = checker or RuleBasedChecker()
    try:
        answers = [str(solver(record, 1)[0]) for solver in ensemble]
    except Exception:
        return Verdict(True, flags=(Flag.SOLVER_FAILURE,))
    first = answers[0]
    consistent = all(checker.equivalent(first, a) for a in answers[1:])
    if consistent and not checker.equivalent(first, record.reference_answer):
        return Verdict(False, Reason.INCONSISTENT_REFERENCE)
    return Verdict(True)


def normalize_reference(text: str) -> str:
    """Strip ``\\boxed``/``$``/``\\text`` wrappers and collapse whitespace; case is kept."""
    s = " ".join(str(text).split())
    for pat in (r"^\\boxed\{(.*)\}$", r"^\$(.*)\$$", r"^\\text\{(.*)\}$"):
        m = re.match(pat, s)
        while m:
            s = m.group(1).strip()
            m = re.match(pat, s)
    return s


def identity_transform(record: DatasetRecord) -> DatasetRecord:
    return record


# ---------------------------------------------------------------- solvers


def record_seed(record_id: str, seed: int) -> int:
    return zlib.crc32(f"{seed}:{record_id}".encode()) & 0x7FFFFFFF


@dataclass
class NoisyOracleSolver:
    """Ground truth from ``answer_fn`` corrupted with probability ``noise``.

    Draws are keyed by ``(seed, record id)`` so repeated calls agree.
    """

    answer_fn: Callable
    noise: float = 0.0
    seed: int = 0

    def __call__(self, record: DatasetRecord, k: int) -> list:
        rng = np.random.default_rng(record_seed(record.id, self.seed))
        truth = str(self.answer_fn(record))
        out = []
        for _ in range(k):
            if rng.random() < self.noise:
                out.append(str(int(rng.integers(0, 1000))) + "?")
            else:
                out.append(truth)
        return out


@dataclass
class MetaSolver:
    """Replays answers stored in ``record.meta[key]`` (fixture files use this)."""

    key: str = "solver_answers"
    index: Optional[int] = None

    def __call__(self, record: DatasetRecord, k: int) -> list:
        stored = record.meta.get(self.key)
        if stored is None:
            raise InputError(f"record {record.id!r} has no {self.key!r}")
        if self.index is not None:
            return [stored[self.index]] * k
        if len(stored) < k:
            raise InputError(f"record {record.id!r} stores fewer than {k} answers")
        return list(stored[:k])


# ---------------------------------------------------------------- pipeline

STAGES = ("subquestion", "convert", "easy", "normalize", "long_reference", "inconsistent")


@dataclass
class PipelineConfig:
    stages: tuple = STAGES
    subquestion_patterns: tuple = DEFAULT_SUBQUESTION_PATTERNS
    min_question_marks: int = 2
    easy_k: int = 8
    max_reference_len: int = 64
    solver: Optional[Callable] = None
    ensemble: tuple = ()
    transform: Callable = identity_transform
    checker: Optional[Callable] = None

    def problems(self) -> list:
        out = [f"unknown stage {s!r}" for s in self.stages if s not in STAGES]
        if len(set(self.stages)) != len(self.stages):
            out.append("stages must not repeat")
        if "easy" in self.stages and self.solver is None:
            out.append("the easy stage needs a solver")
        if "inconsistent" in self.stages and len(self.ensemble) < 2:
            out.append("the inconsistent stage needs an ensemble of at least two solvers")
        if self.easy_k < 1:
            out.append("easy_k must be >= 1")
        if self.max_reference_len <= 0:
            out.append("max_reference_len must be positive")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems), problems)

    @classmethod
    def identity(cls) -> "PipelineConfig":
        return cls(stages=())


@dataclass
class StageCounts:
    stage: str
    input: int = 0
    removed: int = 0
    retained: int = 0


@dataclass
class PipelineReport:
    stages: list = field(default_factory=list)
    removals: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    rejected_lines: list = field(default_factory=list)
    input: int = 0
    retained: int = 0

    @property
    def removed(self) -> int:
        return self.input - self.retained

    def reason_counts(self) -> dict:
        counts = {r.value: 0 for r in Reason}
        for reason in self.removals.values():
            counts[reason] += 1
        counts[Reason.MALFORMED.value] += len(self.rejected_lines)
        return counts

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "retained": self.retained,
            "removed": self.removed,
            "stages": [vars(s) for s in self.stages],
            "reason_counts": self.reason_counts(),
            "removals": dict(self.removals),
            "flags": {k: list(v) for k, v in self.flags.items()},
            "rejected_lines": list(self.rejected_lines),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"input records: {self.input}", f"retained: {self.retained}", f"removed: {self.removed}"]
        for s in self.stages:
            lines.append(f"  {s.stage:<16} in={s.input:<6} removed={s.removed:<6} kept={s.retained}")
        for reason, n in self.reason_counts().items():
            if n:
                lines.append(f"  reason {reason}: {n}")
        if self.flags:
            lines.append(f"  flagged records: {len(self.flags)}")
        return "\n".join(lines)


def parse_jsonl(lines) -> tuple:
    """Parse JSONL text lines into ``(records, rejected)``.

    ``rejected`` holds ``{"line": n, "error": msg}`` entries with 1-based line
    numbers; blank lines are skipped silently.
    """
    records, rejected, seen = [], [], set()
    for n, line in enumerate(lines, start=1):
        text = line.rstrip("\n")
        if not text.strip():
            continue
        try:
            rec = DatasetRecord.from_dict(json.loads(text), raw=text)
        except (json.JSONDecodeError, InputError) as exc:
            rejected.append({"line": n, "error": str(exc)})
            continue
        if rec.id in seen:
            rejected.append({"line": n, "error": f"duplicate id {rec.id!r}"})
            continue
        seen.add(rec.id)
        records.append(rec)
    return records, rejected


def _apply_stage(name: str, record: DatasetRecord, cfg: PipelineConfig):
    checker = cfg.checker
    if name == "subquestion":
        return record, filter_multi_subquestion(record, cfg.subquestion_patterns, cfg.min_question_marks)
    if name == "convert":
        return cfg.transform(record), Verdict(True)
    if name == "easy":
        return record, filter_easy(record, cfg.solver, cfg.easy_k, checker)
    if name == "normalize":
        ref = normalize_reference(record.reference_answer)
        if ref != record.reference_answer:
            record = record.replace(reference_answer=ref)
        return record, Verdict(True)
    if name == "long_reference":
        return record, filter_long_reference(record, cfg.max_reference_len)
    if name == "inconsistent":
        return record, filter_inconsistent_reference(record, list(cfg.ensemble), checker)
    raise ConfigError(f"unknown stage {name!r}")


def run_pipeline(dataset, cfg: Optional[PipelineConfig] = None) -> tuple:
    """Clean ``dataset`` (records or JSONL lines); returns ``(records, report)``."""
    cfg = cfg or PipelineConfig.identity()
    cfg.validate()
    items = list(dataset)
    if items and isinstance(items[0], str):
        records, rejected = parse_jsonl(items)
    else:
        records, rejected = list(items), []
    report = PipelineReport(input=len(records) + len(rejected), rejected_lines=rejected)
    current = records
    for name in cfg.stages:
        counts = StageCounts(name, input=len(current))
        survivors = []
        for rec in current:
            rec, verdict = _apply_stage(name, rec, cfg)
            for flag in verdict.flags:
                report.flags.setdefault(rec.id, []).append(flag.value)
            if verdict.keep:
                survivors.append(rec)
            else:
                report.removals[rec.id] = verdict.reason.value
        counts.removed = counts.input - len(survivors)
        counts.retained = len(survivors)
        report.stages.append(counts)
        current = survivors
    report.retained = len(current)
    return current, report


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dump_record(rec) + "\n")


def dump_record(rec: DatasetRecord) -> str:
    """Original line when the record came from JSONL unchanged, else fresh JSON."""
    if rec.raw is not None:
        return rec.raw
    return rec.to_json()


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return fh.readlines()


class DatasetCleaner(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`run_pipeline`.

    ``transform`` returns the retained records; the last report is kept in
    ``report_``.
    """

    def __init__(self, stages=STAGES, easy_k=8, max_reference_len=64, min_question_marks=2, solver=None, ensemble=()):
        self.stages = stages
        self.easy_k = easy_k
        self.max_reference_len = max_reference_len
        self.min_question_marks = min_question_marks
        self.solver = solver
        self.ensemble = ensemble

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            stages=tuple(self.stages),
            min_question_marks=self.min_question_marks,
            easy_k=self.easy_k,
            max_reference_len=self.max_reference_len,
            solver=self.solver,
            ensemble=tuple(self.ensemble),
        )

    def fit(self, X, y=None):
        self._config().validate()
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        records, self.report_ = run_pipeline(X, self._config())
        return records
