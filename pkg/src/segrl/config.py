"""INI run configuration with exhaustive validation.

Every section is optional; missing keys take the desk-scale defaults.  Parsing
collects all problems before raising, so one error report lists them all.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .pipeline import STAGES
from .reward import DEFAULT_FRACTION_WORDS, DEFAULT_UNITS, DEFAULT_WORDS, RuleBasedChecker
from .rollout import RolloutConfig
from .tasks import ModChainFamily, TeacherConfig
from .throughput import FAMILIES, CostModel
from .trainer import TrainerConfig


@dataclass
class TaskSettings:
    family: str = "modchain"
    modulus: int = 5
    n_ops: int = 2
    max_operand: int = 2
    n_lines: int = 5
    allow_wrap: bool = False
    train_count: int = 400
    dataset: Optional[str] = None
    data_seed: int = 0

    def family_obj(self) -> ModChainFamily:
        return ModChainFamily(self.modulus, self.n_ops, self.max_operand, self.n_lines, self.allow_wrap)


@dataclass
class WarmStartSettings:
    accuracy: float = 0.3
    noise: str = "uniform"
    hesitate_prob: float = 0.0075
    hesitate_mean: float = 40.0
    demos_per_record: int = 4
    steps: int = 1000
    learning_rate: float = 0.1
    seed: int = 1

    def teacher(self) -> TeacherConfig:
        return TeacherConfig(self.accuracy, self.hesitate_prob, self.hesitate_mean, self.noise)


@dataclass
class EvalSettings:
    k: int = 8
    count: int = 100
    seed: int = 99
    dataset: Optional[str] = None
    params: Optional[str] = None
    temperature: float = 0.85


@dataclass
class SimSettings:
    c: float = 1.0
    h: float = 0.0
    lanes: int = 64
    group_size: int = 1
    global_max_len: int = 256
    segment_counts: tuple = (1, 2, 4, 8)
    distribution: str = "calibrated"
    short_frac: float = 0.8
    short_len: int = 128
    mu: float = 4.0
    lognormal_sigma: float = 1.0
    lengths: Optional[str] = None
    n_samples: int = 16384
    target_speedup: float = 1.6
    calibrate_k: int = 2


@dataclass
class PipelineSettings:
    input: Optional[str] = None
    stages: tuple = STAGES
    easy_k: int = 8
    max_reference_len: int = 64
    min_question_marks: int = 2
    solver: str = "meta"
    solver_noise: float = 0.0
    ensemble_size: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    total_steps: int = 300
    snapshot_every: int = 100
    timing: bool = False
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    # sigma for the toy task: midpoint of the no-masking run's entropy range
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(sigma=0.07))
    task: TaskSettings = field(default_factory=TaskSettings)
    warm_start: WarmStartSettings = field(default_factory=WarmStartSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    simulate: SimSettings = field(default_factory=SimSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    units: dict = field(default_factory=lambda: dict(DEFAULT_UNITS))
    words: dict = field(default_factory=lambda: dict(DEFAULT_WORDS))
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def checker(self) -> RuleBasedChecker:
        return RuleBasedChecker(units=dict(self.units), words=dict(self.words), fraction_words=dict(DEFAULT_FRACTION_WORDS))

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def cost_model(self) -> CostModel:
        s = self.simulate
        return CostModel(s.c, s.h, s.lanes)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {k: _fmt(getattr(self, k)) for k in ("seed", "total_steps", "snapshot_every", "timing")}
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if getattr(obj, f.name) is not None}
        cp["units"] = {u: f"{dim} {factor}" for u, (dim, factor) in self.units.items()}
        cp["words"] = {w: str(v) for w, v in self.words.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = ("rollout", "trainer", "task", "warm_start", "eval", "simulate", "pipeline")
_SECTION_TYPES = {
    "rollout": RolloutConfig,
    "trainer": TrainerConfig,
    "task": TaskSettings,
    "warm_start": WarmStartSettings,
    "eval": EvalSettings,
    "simulate": SimSettings,
    "pipeline": PipelineSettings,
}


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _convert(raw: str, default, name: str):
    """Parse ``raw`` to the type of ``default``; raises ValueError on failure."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    if hasattr(default, "value"):
        return raw
    if default is None and raw.lower() in ("", "none"):
        return None
    return raw


def _build_section(name, cls, values: dict, problems: list):
    base = TrainerConfig(sigma=0.07) if cls is TrainerConfig else cls()
    defaults = {f.name: getattr(base, f.name) for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in defaults:
            problems.append(f"[{name}] unknown key {key!r}")
            continue
        try:
            kwargs[key] = _convert(raw, defaults[key], f"[{name}] {key}")
        except ValueError as exc:
            problems.append(f"[{name}] {key}: cannot parse {raw!r} ({exc})")
    merged = {**defaults, **kwargs}
    try:
        return cls(**merged)
    except ConfigError as exc:
        problems.extend(f"[{name}] {p}" for p in exc.problems)
    except (TypeError, ValueError) as exc:
        problems.append(f"[{name}] {exc}")
    return None


def _parse_units(values: dict, problems: list) -> dict:
    units = {}
    for unit, spec in values.items():
        parts = spec.split()
        if len(parts) != 2:
            problems.append(f"[units] {unit}: expected '<dimension> <factor>'")
            continue
        try:
            factor = Fraction(parts[1])
        except (ValueError, ZeroDivisionError):
            problems.append(f"[units] {unit}: bad factor {parts[1]!r}")
            continue
        if factor <= 0:
            problems.append(f"[units] {unit}: factor must be positive")
            continue
        units[unit] = (parts[0], factor)
    return units


def _parse_words(values: dict, problems: list) -> dict:
    words = {}
    for word, raw in values.items():
        try:
            words[word] = int(raw)
        except ValueError:
            problems.append(f"[words] {word}: expected an integer, got {raw!r}")
    return words


def parse_config(text: str, base_dir: Optional[Path] = None) -> RunConfig:
    """Build a :class:`RunConfig` from INI text, listing every problem found."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    problems = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}", [str(exc)]) from None
    known = {"run", "units", "words", *SECTIONS}
    for section in cp.sections():
        if section not in known:
            problems.append(f"unknown section [{section}]")

    cfg = RunConfig(base_dir=base_dir or Path.cwd())
    run = dict(cp["run"]) if cp.has_section("run") else {}
    for key, raw in run.items():
        if key not in ("seed", "total_steps", "snapshot_every", "timing"):
            problems.append(f"[run] unknown key {key!r}")
            continue
        try:
            setattr(cfg, key, _convert(raw, getattr(cfg, key), f"[run] {key}"))
        except ValueError as exc:
            problems.append(f"[run] {key}: cannot parse {raw!r} ({exc})")
    if cfg.total_steps < 0:
        problems.append("[run] total_steps must be >= 0")
    if cfg.snapshot_every < 0:
        problems.append("[run] snapshot_every must be >= 0")

    for name in SECTIONS:
        values = dict(cp[name]) if cp.has_section(name) else {}
        built = _build_section(name, _SECTION_TYPES[name], values, problems)
        if built is not None:
            setattr(cfg, name, built)
    if cp.has_section("units"):
        cfg.units = {**cfg.units, **_parse_units(dict(cp["units"]), problems)}
    if cp.has_section("words"):
        cfg.words = {**cfg.words, **_parse_words(dict(cp["words"]), problems)}

    problems.extend(_cross_checks(cfg))
    if problems:
        raise ConfigError(f"{len(problems)} configuration problem(s):\n  " + "\n  ".join(problems), problems)
    return cfg


def _cross_checks(cfg: RunConfig) -> list:
    out = []
    if cfg.trainer.ratio_mode.value == "TOIS" and cfg.rollout.segment_count != 1:
        out.append("[trainer] ratio_mode TOIS requires [rollout] segment_count = 1")
    if cfg.task.family != "modchain":
        out.append(f"[task] unknown family {cfg.task.family!r}")
    else:
        try:
            fam = cfg.task.family_obj()
            if fam.canonical_length > cfg.rollout.global_max_len:
                out.append("[task] canonical response does not fit in global_max_len")
        except ConfigError as exc:
            out.extend(f"[task] {p}" for p in exc.problems)
    if cfg.task.train_count < 1 and cfg.task.dataset is None:
        out.append("[task] train_count must be positive when no dataset is given")
    try:
        cfg.warm_start.teacher()
    except ConfigError as exc:
        out.extend(f"[warm_start] {p}" for p in exc.problems)
    if cfg.warm_start.steps < 0 or cfg.warm_start.demos_per_record < 1:
        out.append("[warm_start] steps must be >= 0 and demos_per_record >= 1")
    if cfg.eval.k < 1 or cfg.eval.count < 0:
        out.append("[eval] k must be >= 1 and count >= 0")
    if not cfg.eval.temperature > 0:
        out.append("[eval] temperature must be positive")
    s = cfg.simulate
    try:
        CostModel(s.c, s.h, s.lanes)
    except ConfigError as exc:
        out.extend(f"[simulate] {p}" for p in exc.problems)
    if s.distribution not in FAMILIES + ("calibrated",):
        out.append(f"[simulate] distribution must be one of {FAMILIES + ('calibrated',)}")
    if s.distribution == "empirical" and not s.lengths:
        out.append("[simulate] the empirical distribution needs a lengths file")
    for k in s.segment_counts:
        if k < 1 or s.global_max_len % k:
            out.append(f"[simulate] segment count {k} must divide global_max_len={s.global_max_len}")
    if 1 not in s.segment_counts:
        out.append("[simulate] segment_counts must include the baseline 1")
    if s.n_samples < 1 or s.n_samples % max(s.group_size, 1):
        out.append("[simulate] n_samples must be a positive multiple of group_size")
    p = cfg.pipeline
    for st in p.stages:
        if st not in STAGES:
            out.append(f"[pipeline] unknown stage {st!r}")
    if p.solver not in ("meta", "oracle"):
        out.append("[pipeline] solver must be 'meta' or 'oracle'")
    if p.easy_k < 1 or p.max_reference_len < 1 or p.ensemble_size < 2:
        out.append("[pipeline] easy_k and max_reference_len must be positive, ensemble_size >= 2")
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent.resolve())
