import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segrl.errors import ConfigError
from segrl.policy import distribution
from segrl.tasks import (
    ModChainFamily,
    TeacherConfig,
    evaluate_chain,
    generate_tasks,
    make_family,
    parse_chain,
    teacher_response,
    warm_start,
)


def python_eval(question):
    """Independent oracle: Python integer arithmetic, then one final reduction."""
    expr, mod = question.split("mod")
    assert set(expr.strip()) <= set("0123456789+- ")
    return eval(expr) % int(mod)  # noqa: S307 - digits and +/- only


def test_chain_example():
    assert evaluate_chain("3+4-2 mod 5") == 0 == python_eval("3+4-2 mod 5")


def test_count_zero_and_determinism():
    fam = ModChainFamily()
    assert generate_tasks(fam, 0, np.random.default_rng(0)) == []
    a = generate_tasks(fam, 50, np.random.default_rng(3))
    b = generate_tasks(fam, 50, np.random.default_rng(3))
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert len({r.id for r in a}) == 50


def test_unknown_family():
    with pytest.raises(ConfigError):
        make_family("sudoku")
    with pytest.raises(ConfigError):
        generate_tasks("sudoku", 3, np.random.default_rng(0))


def test_family_validation():
    with pytest.raises(ConfigError):
        ModChainFamily(modulus=1)
    with pytest.raises(ConfigError):
        ModChainFamily(modulus=11)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_references_match_independent_evaluator(modulus, n_ops, max_operand, seed):
    try:
        fam = ModChainFamily(modulus=modulus, n_ops=n_ops, max_operand=max_operand)
    except ConfigError:
        return
    for rec in generate_tasks(fam, 20, np.random.default_rng(seed)):
        assert rec.reference_answer == str(python_eval(rec.question))
        a, ops = parse_chain(rec.question)
        assert len(ops) == n_ops and all(1 <= abs(s) <= max_operand for s in ops)
        assert len(fam.tokenize(rec.question)) == n_ops + 2


def test_default_vocab_geometry():
    fam = ModChainFamily()
    assert fam.vocab.size == 24
    assert fam.context_width == 6
    assert fam.canonical_length == 29


def test_teacher_canonical_response():
    fam = ModChainFamily()
    rng = np.random.default_rng(0)
    q = generate_tasks(fam, 1, rng)[0]
    resp = teacher_response(fam, q.question, rng, TeacherConfig(accuracy=1.0, hesitate_prob=0.0))
    text = [fam.vocab.tokens[i] for i in resp]
    assert len(resp) == fam.canonical_length
    assert text[-4:] == ["so", "<ans>", q.reference_answer, "<eos>"]
    assert text[0] == "L1"


def test_teacher_accuracy_rate():
    fam = ModChainFamily()
    rng = np.random.default_rng(1)
    recs = generate_tasks(fam, 2000, rng)
    cfg = TeacherConfig(accuracy=0.3, hesitate_prob=0.0)
    hits = 0
    for r in recs:
        resp = teacher_response(fam, r.question, rng, cfg)
        hits += fam.vocab.tokens[resp[-2]] == r.reference_answer
    # right with prob 0.3 + 0.7 / 5 under uniform noise
    p = 0.3 + 0.7 / 5
    assert abs(hits / 2000 - p) < 3 * np.sqrt(p * (1 - p) / 2000)


def test_teacher_hesitation_lengthens():
    fam = ModChainFamily()
    rng = np.random.default_rng(2)
    q = generate_tasks(fam, 1, rng)[0].question
    lens = [len(teacher_response(fam, q, rng, TeacherConfig(hesitate_prob=0.05))) for _ in range(400)]
    assert max(lens) > 2 * fam.canonical_length and min(lens) < fam.canonical_length


def test_warm_start_learns_format():
    fam = ModChainFamily()
    recs = generate_tasks(fam, 30, np.random.default_rng(0))
    params = warm_start(fam, recs, np.random.default_rng(1), steps=150)
    prompt = fam.tokenize(recs[0].question)
    first = int(np.argmax(distribution(params, prompt).probs))
    assert fam.vocab.tokens[first] == "L1"
    assert params.version == 0
