"""scikit-learn style wrapper around the training loop.

``X`` is a list of questions (strings or :class:`DatasetRecord`), ``y`` the
reference answers.  ``fit`` warm-starts a policy on the task family and then
runs RL; ``predict`` samples one answer per question and ``score`` returns
avg@k accuracy.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, TaskSettings, WarmStartSettings
from .engine import TrainingLoop, evaluate, prompts_from_records, sample_responses
from .errors import InputError
from .harness import initial_policy
from .pipeline import DatasetRecord
from .reward import extract_final_answer
from .rollout import RolloutConfig
from .trainer import TrainerConfig


def as_records(X, y=None) -> list:
    X = list(X)
    if not X:
        raise InputError("X is empty")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise InputError(f"X has {len(X)} entries but y has {len(y)}")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, DatasetRecord):
            rec = x if y is None else x.replace(reference_answer=str(y[i]))
        elif isinstance(x, str):
            rec = DatasetRecord(f"x{i:05d}", x, "" if y is None else str(y[i]))
        else:
            raise InputError(f"X[{i}] must be a question string or DatasetRecord")
        out.append(rec)
    return out


class SegmentRolloutRL(BaseEstimator):
    """RL fine-tuning of the linear-softmax policy with segment rollouts."""

    def __init__(
        self,
        total_steps=300,
        segment_count=8,
        global_max_len=256,
        group_size=8,
        prompt_batch=16,
        temperature=0.85,
        learning_rate=0.01,
        ratio_mode="POIS",
        masking="dynamic",
        sigma=0.07,
        tau=0.99,
        eps_low=0.2,
        eps_high=0.2,
        modulus=5,
        n_ops=2,
        max_operand=2,
        n_lines=5,
        warm_start_steps=1000,
        teacher_accuracy=0.3,
        eval_k=8,
        random_state=0,
    ):
        self.total_steps = total_steps
        self.segment_count = segment_count
        self.global_max_len = global_max_len
        self.group_size = group_size
        self.prompt_batch = prompt_batch
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.ratio_mode = ratio_mode
        self.masking = masking
        self.sigma = sigma
        self.tau = tau
        self.eps_low = eps_low
        self.eps_high = eps_high
        self.modulus = modulus
        self.n_ops = n_ops
        self.max_operand = max_operand
        self.n_lines = n_lines
        self.warm_start_steps = warm_start_steps
        self.teacher_accuracy = teacher_accuracy
        self.eval_k = eval_k
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SegmentRolloutRL":
        r, t, task = cfg.rollout, cfg.trainer, cfg.task
        return cls(
            total_steps=cfg.total_steps, segment_count=r.segment_count, global_max_len=r.global_max_len,
            group_size=r.group_size, prompt_batch=r.prompt_batch, temperature=r.temperature,
            learning_rate=t.learning_rate, ratio_mode=t.ratio_mode.value, masking=t.masking, sigma=t.sigma,
            tau=t.tau, eps_low=t.eps_low, eps_high=t.eps_high, modulus=task.modulus, n_ops=task.n_ops,
            max_operand=task.max_operand, n_lines=task.n_lines, warm_start_steps=cfg.warm_start.steps,
            teacher_accuracy=cfg.warm_start.accuracy, eval_k=cfg.eval.k, random_state=cfg.seed,
        )

    def to_config(self) -> RunConfig:
        return RunConfig(
            seed=self.random_state,
            total_steps=self.total_steps,
            rollout=RolloutConfig(self.global_max_len, self.segment_count, self.group_size, self.prompt_batch, self.temperature),
            trainer=TrainerConfig(
                eps_low=self.eps_low, eps_high=self.eps_high, tau=self.tau, sigma=self.sigma,
                learning_rate=self.learning_rate, ratio_mode=self.ratio_mode, masking=self.masking,
            ),
            task=TaskSettings(modulus=self.modulus, n_ops=self.n_ops, max_operand=self.max_operand, n_lines=self.n_lines),
            warm_start=replace(WarmStartSettings(), steps=self.warm_start_steps, accuracy=self.teacher_accuracy),
        )

    def fit(self, X, y=None):
        records = as_records(X, y)
        if any(not r.reference_answer for r in records):
            raise InputError("every question needs a reference answer")
        cfg = self.to_config()
        self.family_ = cfg.task.family_obj()
        self.checker_ = cfg.checker()
        prompts = prompts_from_records(records, self.family_)
        self.initial_params_ = initial_policy(cfg, records)
        loop = TrainingLoop(
            self.initial_params_, prompts, cfg.rollout, cfg.trainer, self.family_.vocab,
            np.random.default_rng(self.random_state), self.checker_,
        )
        self.history_ = loop.run(self.total_steps)
        self.params_ = loop.params
        self.n_iter_ = self.total_steps
        return self

    def predict(self, X) -> list:
        """One sampled final answer per question (``None`` when none was given)."""
        check_is_fitted(self, "params_")
        X = list(X)
        # references are unused when sampling; a placeholder keeps records valid
        prompts = prompts_from_records(as_records(X, ["?"] * len(X)), self.family_)
        lanes = sample_responses(
            self.params_, prompts, 1, self.global_max_len, self.temperature, self.family_.vocab,
            np.random.default_rng(self.random_state),
        )
        return [extract_final_answer(t.response, self.family_.vocab) for t in lanes]

    def score(self, X, y) -> float:
        check_is_fitted(self, "params_")
        prompts = prompts_from_records(as_records(X, y), self.family_)
        res = evaluate(
            self.params_, prompts, self.family_.vocab, self.eval_k, self.global_max_len, self.temperature,
            np.random.default_rng(self.random_state), self.checker_,
        )
        return res["accuracy"]
