import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_scalpel import harness, lang
from latent_scalpel.harness import EOS_ID, encode_tokens

from oracles import shunting_yard_eval


def _spec(tests=((2, 4), (3, 9), (0, 0))):
    return harness.ProblemSpec(0, ("write", "f", "returns", "x", "times", "x"), "f", tests, 1, ("x", "*", "x"))


def test_generate_problem_is_deterministic():
    assert harness.generate_problem(0, 0, 1) == harness.generate_problem(0, 0, 1)


def test_problem_tests_follow_hidden_target():
    spec = harness.generate_problem(0, 7, 2)
    assert len(spec.tests) == 3
    assert len({i for i, _ in spec.tests}) == 3
    for i, o in spec.tests:
        assert shunting_yard_eval(spec.target, i) == o
    assert lang.n_ops(lang.parse(spec.target)) == 2


@given(st.integers(0, 2**31 - 1), st.integers(0, 10_000), st.integers(1, 4))
def test_every_problem_is_solvable(seed, pid, difficulty):
    spec = harness.generate_problem(seed, pid, difficulty)
    assert harness.evaluate_generation(spec, harness.solution_tokens(spec)).passed
    assert "x" in spec.target


@pytest.mark.parametrize("d", [0, 5])
def test_difficulty_range(d):
    with pytest.raises(ValueError):
        harness.generate_problem(0, 0, d)


def test_evaluate_generation_examples():
    spec = _spec()
    ok = harness.evaluate_generation(spec, encode_tokens(["x", "*", "x"]) + [EOS_ID])
    assert ok.passed and ok.per_test == (True, True, True) and ok.failure_kind == "none"
    bad = harness.evaluate_generation(spec, encode_tokens(["*", "*", "x"]))
    assert not bad.passed and bad.failure_kind == "parse_error"
    wrong = harness.evaluate_generation(spec, encode_tokens(["x", "+", "x"]))
    assert wrong.per_test == (True, False, True) and not wrong.passed and wrong.failure_kind == "wrong_value"
    empty = harness.evaluate_generation(spec, [EOS_ID])
    assert empty.failure_kind == "no_output" and not empty.passed


def test_evaluate_generation_ignores_text_after_eos():
    spec = _spec()
    r = harness.evaluate_generation(spec, encode_tokens(["x", "*", "x"]) + [EOS_ID] + encode_tokens(["+", "1"]))
    assert r.passed


def test_non_expression_tokens_are_parse_errors():
    r = harness.evaluate_generation(_spec(), encode_tokens(["return", "x"]))
    assert r.failure_kind == "parse_error"


@given(st.lists(st.integers(0, len(harness.VOCAB) - 1), max_size=12))
def test_labels_are_pure_and_consistent(tokens):
    spec = _spec()
    a, b = harness.evaluate_generation(spec, tokens), harness.evaluate_generation(spec, tokens)
    assert a == b
    assert a.passed == all(a.per_test)


def test_prompt_spans_partition_and_order():
    spec = harness.generate_problem(3, 11, 3)
    pr = harness.render_prompt(spec)
    (a, b), (c, d), (e, f) = pr.spans["description"], pr.spans["tests"], pr.spans["initiator"]
    assert pr.tokens[0] == harness.BOS_ID
    assert a == 1 and b == c and d == e and f == len(pr.tokens)
    assert (b - a) + (d - c) + (f - e) + 1 == len(pr.tokens)
    assert harness.decode_tokens(pr.tokens[e:f]) == ["def", spec.function_name, "(", "x", ")", ":", "return"]
    assert harness.decode_tokens(pr.tokens[c:d]).count("assert") == 3
    assert pr.tokens == harness.render_prompt(spec).tokens


@pytest.mark.parametrize("n,sizes", [(100, (50, 10, 40)), (10, (5, 1, 4)), (37, (18, 3, 16))])
def test_split_sizes(n, sizes):
    s = harness.split_dataset(list(range(n)), 0)
    assert (len(s.selection_ids), len(s.calibration_ids), len(s.analysis_ids)) == sizes


@given(st.integers(10, 300), st.integers(0, 1000))
def test_split_partition(n, seed):
    ids = list(range(5, 5 + n))
    s = harness.split_dataset(ids, seed)
    parts = [set(s.selection_ids), set(s.calibration_ids), set(s.analysis_ids)]
    assert sum(map(len, parts)) == n
    assert set().union(*parts) == set(ids)
    assert s == harness.split_dataset(ids, seed)


def test_split_errors():
    with pytest.raises(ValueError):
        harness.split_dataset(list(range(9)), 0)
    with pytest.raises(ValueError):
        harness.split_dataset([1] * 10, 0)


def test_background_corpus():
    a = harness.build_background_corpus(0, 1000)
    assert len(a) == 1000 and a == harness.build_background_corpus(0, 1000)
    n = 100 * len(harness.VOCAB)
    hist = Counter(harness.build_background_corpus(1, n))
    assert len(hist) >= 0.9 * len(harness.VOCAB)
    with pytest.raises(ValueError):
        harness.build_background_corpus(0, 0)


def test_json_roundtrips():
    problems = harness.generate_dataset(0, 20)
    splits = harness.split_dataset([p.id for p in problems], 0)
    rows = json.loads(harness.problems_to_json(problems, splits))
    assert [harness.ProblemSpec.from_json(r) for r in rows] == problems
    assert {r["split"] for r in rows} == {"selection", "calibration", "analysis"}
    assert all(len(r["tests"]) == 3 and set(r["tests"][0]) == {"in", "out"} for r in rows)
    assert harness.SplitAssignment.from_json(splits.to_json()) == splits
    assert json.loads(harness.vocab_to_json()) == list(harness.VOCAB)
    lab = harness.evaluate_generation(problems[0], harness.solution_tokens(problems[0]))
    assert harness.LabeledSample.from_json(json.loads(json.dumps(lab.to_json()))) == lab


def test_training_corpus_bug_only_on_sloppy_names():
    seqs, starts = harness.training_corpus(0, 200, bug_rate=1.0, loss_on_completion=True)
    problems = harness.generate_dataset(0, 200, id_offset=1_000_000)
    for spec, seq, s in zip(problems, seqs, starts):
        completion = harness.decode_tokens(seq[s:-1])
        assert seq[-1] == EOS_ID
        buggy = spec.function_name in harness.SLOPPY_NAMES and spec.difficulty >= 2
        assert completion == (harness.plant_bug(spec.target) if buggy else list(spec.target))
    clean, _ = harness.training_corpus(0, 200, bug_rate=0.0)
    assert all(harness.evaluate_generation(p, q[len(harness.render_prompt(p)):]).passed
               for p, q in zip(problems, clean))
