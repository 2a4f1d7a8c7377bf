"""Synthetic programming problems, prompt rendering, execution-based labels and splits."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import lang

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
FUNCTION_NAMES = ("f", "g", "h", "k")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
OP_WORDS = {"+": "plus", "-": "minus", "*": "times", "(": "open", ")": "close"}
HIDDEN_CONSTANT = "num"

VOCAB: tuple[str, ...] = (
    (PAD, BOS, EOS)
    + ("x",)
    + lang.DIGITS
    + ("+", "-", "*", "(", ")")
    + ("assert", "==", ";", "def", ":", "return")
    + FUNCTION_NAMES
    + ("write", "returns")
    + tuple(OP_WORDS.values())
    + NUMBER_WORDS
    + (HIDDEN_CONSTANT,)
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID, BOS_ID, EOS_ID = TOKEN_ID[PAD], TOKEN_ID[BOS], TOKEN_ID[EOS]

# probability that a literal in the target is hidden from the description
HIDE_CONSTANT_P = 0.25
TEST_INPUT_RANGE = 10


def encode_tokens(tokens: Iterable[str]) -> list[int]:
    return [TOKEN_ID[t] for t in tokens]


def decode_tokens(ids: Iterable[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def substream(seed: int, name: str) -> int:
    """Derive an independent integer seed for a named stage or purpose."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class ProblemSpec:
    id: int
    description: tuple[str, ...]
    function_name: str
    tests: tuple[tuple[int, int], ...]
    difficulty: int
    target: tuple[str, ...]  # hidden reference solution, as lexemes

    def to_json(self, split: str | None = None) -> dict:
        return {
            "id": self.id,
            "description_tokens": list(self.description),
            "function_name": self.function_name,
            "tests": [{"in": i, "out": o} for i, o in self.tests],
            "difficulty": self.difficulty,
            "target": "".join(self.target),
            "split": split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProblemSpec":
        return cls(
            id=int(obj["id"]),
            description=tuple(obj["description_tokens"]),
            function_name=obj["function_name"],
            tests=tuple((int(t["in"]), int(t["out"])) for t in obj["tests"]),
            difficulty=int(obj["difficulty"]),
            target=tuple(obj["target"]),
        )


@dataclass(frozen=True)
class PromptBundle:
    tokens: tuple[int, ...]
    spans: dict[str, tuple[int, int]]
    problem_id: int

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class LabeledSample:
    problem_id: int
    generated_tokens: tuple[int, ...]
    passed: bool
    per_test: tuple[bool, bool, bool]
    failure_kind: str  # none | parse_error | wrong_value | no_output

    def to_json(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "generated": "".join(decode_tokens(self.generated_tokens)),
            "generated_tokens": list(self.generated_tokens),
            "passed": self.passed,
            "per_test": list(self.per_test),
            "failure_kind": self.failure_kind,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledSample":
        return cls(
            problem_id=int(obj["problem_id"]),
            generated_tokens=tuple(obj["generated_tokens"]),
            passed=bool(obj["passed"]),
            per_test=tuple(obj["per_test"]),
            failure_kind=obj["failure_kind"],
        )


@dataclass(frozen=True)
class SplitAssignment:
    selection_ids: tuple[int, ...]
    calibration_ids: tuple[int, ...]
    analysis_ids: tuple[int, ...]

    def split_of(self, pid: int) -> str:
        for name in ("selection", "calibration", "analysis"):
            if pid in getattr(self, f"{name}_ids"):
                return name
        raise KeyError(pid)

    def to_json(self) -> dict:
        return {
            "selection": list(self.selection_ids),
            "calibration": list(self.calibration_ids),
            "analysis": list(self.analysis_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitAssignment":
        return cls(tuple(obj["selection"]), tuple(obj["calibration"]), tuple(obj["analysis"]))


def _random_tree(rng: np.random.Generator, n_ops: int) -> lang.Expr:
    if n_ops == 0:
        if rng.random() < 0.5:
            return lang.Var()
        return lang.Num(int(rng.integers(1, 10)))
    n_left = int(rng.integers(0, n_ops))
    op = lang.OPERATORS[int(rng.integers(0, 3))]
    return lang.BinOp(op, _random_tree(rng, n_left), _random_tree(rng, n_ops - 1 - n_left))


def _ensure_var(node: lang.Expr, rng: np.random.Generator) -> lang.Expr:
    """Replace one leaf (chosen at random) by ``x`` if the tree has no variable."""
    lexemes = lang.render(node)
    if "x" in lexemes:
        return node
    leaves = [i for i, t in enumerate(lexemes) if t in lang.DIGITS]
    lexemes[leaves[int(rng.integers(0, len(leaves)))]] = "x"
    return lang.parse(lexemes)


def describe(target: Sequence[str], rng: np.random.Generator) -> list[str]:
    words = []
    for tok in target:
        if tok == "x":
            words.append("x")
        elif tok in lang.DIGITS:
            words.append(HIDDEN_CONSTANT if rng.random() < HIDE_CONSTANT_P else NUMBER_WORDS[int(tok)])
        else:
            words.append(OP_WORDS[tok])
    return words


def generate_problem(seed: int, id: int, difficulty: int) -> ProblemSpec:
    """Build a problem whose tests come from evaluating a hidden random expression.

    ``difficulty`` is the number of binary operators in the target (1 to 4).
    """
    if not 1 <= difficulty <= 4:
        raise ValueError(f"difficulty must be in [1, 4], got {difficulty}")
    rng = np.random.default_rng([seed, id, difficulty])
    tree = _ensure_var(_random_tree(rng, difficulty), rng)
    target = tuple(lang.render(tree))
    name = FUNCTION_NAMES[int(rng.integers(0, len(FUNCTION_NAMES)))]
    inputs = rng.choice(TEST_INPUT_RANGE, size=3, replace=False)
    tests = tuple((int(i), lang.evaluate(tree, int(i))) for i in inputs)
    description = ("write", name, "returns", *describe(target, rng))
    return ProblemSpec(id, description, name, tests, difficulty, target)


def _int_tokens(v: int) -> list[str]:
    return (["-"] if v < 0 else []) + list(str(abs(v)))


def render_tests(spec: ProblemSpec) -> list[str]:
    out = []
    for i, o in spec.tests:
        out += ["assert", spec.function_name, "(", *_int_tokens(i), ")", "==", *_int_tokens(o), ";"]
    return out


def render_initiator(spec: ProblemSpec) -> list[str]:
    return ["def", spec.function_name, "(", "x", ")", ":", "return"]


def render_prompt(spec: ProblemSpec) -> PromptBundle:
    desc = list(spec.description)
    tests = render_tests(spec)
    init = render_initiator(spec)
    tokens = [BOS] + desc + tests + init
    a = 1
    b = a + len(desc)
    c = b + len(tests)
    spans = {"description": (a, b), "tests": (b, c), "initiator": (c, c + len(init))}
    return PromptBundle(tuple(encode_tokens(tokens)), spans, spec.id)


def solution_tokens(spec: ProblemSpec) -> list[int]:
    """Reference completion (target expression then EOS) used as training text."""
    return encode_tokens(spec.target) + [EOS_ID]


def evaluate_generation(spec: ProblemSpec, generated: Sequence[int]) -> LabeledSample:
    """Run the generated program against the problem's three tests.

    A trailing EOS (and anything after it) is ignored. Failures are returned
    as data, never raised.
    """
    gen = tuple(int(t) for t in generated)
    body = gen[: gen.index(EOS_ID)] if EOS_ID in gen else gen
    fail = (False, False, False)
    if not body:
        return LabeledSample(spec.id, gen, False, fail, "no_output")
    try:
        tree = lang.parse(decode_tokens(body))
    except (lang.ParseError, IndexError):
        return LabeledSample(spec.id, gen, False, fail, "parse_error")
    per_test = tuple(lang.evaluate(tree, i) == o for i, o in spec.tests)
    passed = all(per_test)
    return LabeledSample(spec.id, gen, passed, per_test, "none" if passed else "wrong_value")


def split_dataset(ids: Sequence[int], seed: int) -> SplitAssignment:
    """Shuffle and cut 50/10/40; the first two sizes are floored, analysis takes the rest."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 ids to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_sel, n_cal = (5 * n) // 10, n // 10
    return SplitAssignment(
        tuple(shuffled[:n_sel]),
        tuple(shuffled[n_sel : n_sel + n_cal]),
        tuple(shuffled[n_sel + n_cal :]),
    )


def build_background_corpus(seed: int, n_tokens: int) -> list[int]:
    """Unformatted token stream over the whole vocabulary (Zipf-like frequencies)."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    rng = np.random.default_rng(seed)
    ids = np.array([i for i in range(len(VOCAB)) if i != PAD_ID])
    ranks = rng.permutation(len(ids)) + 1
    p = 1.0 / ranks
    p /= p.sum()
    return [int(t) for t in rng.choice(ids, size=n_tokens, p=p)]


@dataclass
class Dataset:
    problems: list[ProblemSpec]
    splits: SplitAssignment
    by_id: dict[int, ProblemSpec] = field(init=False)

    def __post_init__(self):
        self.by_id = {p.id: p for p in self.problems}

    def subset(self, split: str) -> list[ProblemSpec]:
        return [self.by_id[i] for i in getattr(self.splits, f"{split}_ids")]


def generate_dataset(seed: int, n: int, difficulties: Sequence[int] = (1, 2, 3, 4), id_offset: int = 0) -> list[ProblemSpec]:
    """``n`` problems with difficulty cycling through ``difficulties``."""
    return [generate_problem(seed, id_offset + i, difficulties[i % len(difficulties)]) for i in range(n)]


def problems_to_json(problems: Sequence[ProblemSpec], splits: SplitAssignment | None = None) -> str:
    rows = [p.to_json(splits.split_of(p.id) if splits else None) for p in problems]
    return json.dumps(rows, indent=1)


def vocab_to_json() -> str:
    return json.dumps(list(VOCAB))


# Function names whose training solutions come from a noisy source.
SLOPPY_NAMES = ("h", "k")


def plant_bug(target: Sequence[str]) -> list[str]:
    """The systematic training bug: an off-by-one ``1+`` prefix."""
    return ["1", "+"] + list(target)


def training_corpus(seed: int, n: int, bug_rate: float = 0.0, sloppy_names: Sequence[str] = SLOPPY_NAMES,
                    id_offset: int = 1_000_000, loss_on_completion: bool = False):
    """Prompt + reference completion sequences for LM training.

    Problems named in ``sloppy_names`` with difficulty >= 2 get a buggy
    reference with probability ``bug_rate``, imitating bugs reproduced from
    pre-training data. Returns
    (sequences, completion start indices).
    """
    rng = np.random.default_rng([seed, 7])
    seqs, starts = [], []
    for spec in generate_dataset(seed, n, id_offset=id_offset):
        prompt = list(render_prompt(spec).tokens)
        target = list(spec.target)
        if spec.function_name in sloppy_names and spec.difficulty >= 2 and rng.random() < bug_rate:
            target = plant_bug(target)
        seqs.append(prompt + encode_tokens(target) + [EOS_ID])
        starts.append(len(prompt) if loss_on_completion else 0)
    return seqs, starts
