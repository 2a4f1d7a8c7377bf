"""Causal experiments: steering, orthogonalization, coefficient search and significance tests."""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import harness
from .harness import LabeledSample, ProblemSpec
from .model import Checkpoint, HookSpec, generate, orthogonalize_checkpoint
from .selection import LayerStats, SelectionResult

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2


def _unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    n = float(np.linalg.norm(d))
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit norm, got norm {n}")
    return d


@dataclass
class InterventionSpec:
    kind: str  # steer | orthogonalize
    layer: int
    index: int
    direction: np.ndarray
    alpha: float = 0.0
    target_split: str = "analysis"
    positions: str = "all"  # all | prompt_last
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("steer", "orthogonalize"):
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        self.direction = _unit(self.direction)
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def meta(self) -> dict:
        return {"kind": self.kind, "layer": self.layer, "index": self.index, "alpha": self.alpha,
                "positions": self.positions, "label": self.label}


def make_steer_hook(direction, alpha: float, layer: int, position: int | None = None) -> HookSpec:
    """Hook adding ``alpha * direction`` to the residual after block ``layer``."""
    return HookSpec(layer, "add_direction", torch.as_tensor(_unit(direction), dtype=torch.float64), float(alpha),
                    position)


@dataclass
class ExperimentReport:
    condition: str  # baseline | control | steering_direction
    correction_rate: float
    corruption_rate: float
    n_initially_correct: int
    n_initially_incorrect: int
    n_corrected: int
    n_corrupted: int
    mean_token_similarity: float
    p_vs_baseline: dict = field(default_factory=dict)
    p_vs_control: dict = field(default_factory=dict)
    intervention: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Outcome:
    problem_id: int
    before_passed: bool
    after_passed: bool
    before: str
    after: str
    similarity: float


def lexemes(tokens: Sequence[int]) -> list[str]:
    return [t for t in harness.decode_tokens(tokens) if t != harness.EOS]


def token_similarity(a: Sequence[int] | Sequence[str], b: Sequence[int] | Sequence[str]) -> float:
    """100 * |multiset intersection| / |multiset union| of lexer tokens; two empties give 100."""
    ca = Counter(lexemes(a) if a and not isinstance(a[0], str) else list(a))
    cb = Counter(lexemes(b) if b and not isinstance(b[0], str) else list(b))
    union = sum((ca | cb).values())
    if union == 0:
        return 100.0
    return 100.0 * sum((ca & cb).values()) / union


def objective_correct(report: ExperimentReport) -> float:
    return report.correction_rate


def objective_incorrect(report: ExperimentReport) -> float:
    """Mean of corruption rate and token similarity (as a fraction)."""
    return 0.5 * (report.corruption_rate + report.mean_token_similarity / 100.0)


def _hooks_for(spec: InterventionSpec | None, prompt_len: int) -> list[HookSpec]:
    if spec is None or spec.kind != "steer":
        return []
    pos = None if spec.positions == "all" else prompt_len - 1
    return [make_steer_hook(spec.direction, spec.alpha, spec.layer, pos)]


def generate_labels(ckpt: Checkpoint, problems: Sequence[ProblemSpec], spec: InterventionSpec | None = None,
                    max_new: int = 16, temperature: float = 0.0, seed: int = 0) -> dict[int, LabeledSample]:
    """Generate and label every problem, optionally under an intervention.

    Sampling generators are keyed by problem id so results do not depend on order.
    """
    import torch

    if spec is not None and spec.kind == "orthogonalize":
        ckpt = orthogonalize_checkpoint(ckpt, spec.direction, f"L{spec.layer}:{spec.index}")
    out = {}
    for p in problems:
        prompt = harness.render_prompt(p)
        gen = None
        if temperature > 0:
            gen = torch.Generator().manual_seed(harness.substream(seed, f"sample:{p.id}"))
        toks = generate(ckpt, prompt, temperature, max_new, _hooks_for(spec, len(prompt)), gen)
        out[p.id] = harness.evaluate_generation(p, toks)
    return out


def compare(condition: str, baseline: Mapping[int, LabeledSample], after: Mapping[int, LabeledSample],
            intervention: dict | None = None) -> tuple[ExperimentReport, list[Outcome]]:
    outcomes = []
    for pid, b in baseline.items():
        a = after[pid]
        outcomes.append(Outcome(pid, b.passed, a.passed, "".join(lexemes(b.generated_tokens)),
                                "".join(lexemes(a.generated_tokens)),
                                token_similarity(b.generated_tokens, a.generated_tokens)))
    n_c = sum(o.before_passed for o in outcomes)
    n_i = len(outcomes) - n_c
    fixed = sum((not o.before_passed) and o.after_passed for o in outcomes)
    broken = sum(o.before_passed and not o.after_passed for o in outcomes)
    sim = float(np.mean([o.similarity for o in outcomes])) if outcomes else 100.0
    report = ExperimentReport(condition, fixed / n_i if n_i else 0.0, broken / n_c if n_c else 0.0,
                              n_c, n_i, fixed, broken, sim, intervention=intervention)
    return report, outcomes


def run_condition(ckpt: Checkpoint, problems: Sequence[ProblemSpec], baseline: Mapping[int, LabeledSample],
                  spec: InterventionSpec | None, condition: str | None = None, max_new: int = 16):
    """Regenerate ``problems`` at temperature 0 under ``spec`` and compare with the baseline labels.

    Returns (report, per-problem outcomes).
    """
    missing = [p.id for p in problems if p.id not in baseline]
    if missing:
        raise KeyError(f"no baseline labels for problems {missing[:5]}")
    condition = condition or ("baseline" if spec is None else "steering_direction")
    after = generate_labels(ckpt, problems, spec, max_new)
    return compare(condition, {p.id: baseline[p.id] for p in problems}, after,
                   spec.meta() if spec is not None else None)


def golden_section_max(f: Callable[[float], float], a: float, b: float, tol: float = 0.5):
    """Maximize a unimodal ``f`` on [a, b].

    Returns (argmax estimate, trace of (lo, hi) brackets, one per iteration).
    """
    lo, hi = min(a, b), max(a, b)
    trace = [(lo, hi)]
    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + INV_PHI * (hi - lo)
            fd = f(d)
        trace.append((lo, hi))
    return (lo + hi) / 2, trace


@dataclass
class CoefficientSearch:
    alpha: int
    objective: float
    evaluations: dict[float, float]
    grid: list[tuple[float, float]]
    trace: list[tuple[float, float]]
    warning: str | None = None

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "objective": self.objective,
                "grid": [list(g) for g in self.grid],
                "golden_trace": [list(t) for t in self.trace],
                "evaluations": sorted([k, v] for k, v in self.evaluations.items()),
                "warning": self.warning}


def coefficient_search(eval_fn: Callable[[float], float], alpha_max: float = 300, grid_step: float = 10,
                       tol: float = 0.5) -> CoefficientSearch:
    """Grid search over {0, step, ..., alpha_max}, then golden-section refinement around the best point.

    The refined value is rounded to an integer. Every evaluation is cached,
    and the grid optimum is kept if the rounded refinement scores lower.
    """
    if alpha_max <= grid_step:
        raise ValueError("alpha_max must exceed grid_step")
    cache: dict[float, float] = {}

    def f(a: float) -> float:
        a = float(a)
        if a not in cache:
            cache[a] = float(eval_fn(a))
        return cache[a]

    grid_alphas = [float(a) for a in np.arange(0, alpha_max + grid_step / 2, grid_step)]
    grid = [(a, f(a)) for a in grid_alphas]
    values = [v for _, v in grid]
    best_a, best_v = max(grid, key=lambda g: (g[1], -g[0]))
    if all(v == values[0] for v in values):
        msg = "objective is flat over the grid; returning the smallest grid coefficient"
        warnings.warn(msg)
        return CoefficientSearch(int(grid_alphas[0]), values[0], dict(cache), grid, [], msg)
    lo, hi = max(0.0, best_a - grid_step), min(float(alpha_max), best_a + grid_step)
    refined, trace = golden_section_max(f, lo, hi, tol)
    alpha = float(round(refined))
    if f(alpha) < best_v:
        alpha = best_a
    return CoefficientSearch(int(alpha), f(alpha), dict(cache), grid, trace)


def select_control_feature(all_layer_stats: Sequence[LayerStats], min_fire: float = 0.10):
    """Least discriminative kept latent that still fires on at least ``min_fire`` of prompts.

    Ordered by |s_correct|, then |t_correct| (undefined t sorts last), then layer, then index.
    """
    best_key, best = None, None
    for ls in all_layer_stats:
        for fs in ls.features:
            if not fs.keep or fs.fire_rate(ls.n_correct, ls.n_incorrect) < min_fire:
                continue
            key = (abs(fs.s_correct), abs(fs.t_correct) if fs.valid else math.inf, fs.layer, fs.index)
            if best_key is None or key < best_key:
                best_key, best = key, fs
    if best is None:
        raise ValueError("no latent is eligible as a control feature")
    return best.layer, best.index


def binomial_test_greater(k: int, n: int, p0: float) -> float:
    """One-sided exact binomial p-value P(X >= k) for X ~ Binomial(n, p0)."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 <= p0 <= 1.0:
        raise ValueError(f"null rate must be in [0, 1], got {p0}")
    if k == 0:
        return 1.0
    if p0 == 0.0:
        return 0.0
    if p0 == 1.0:
        return 1.0
    lp, lq = math.log(p0), math.log1p(-p0)
    terms = [math.exp(math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * lp + (n - i) * lq)
             for i in range(k, n + 1)]
    return min(1.0, math.fsum(terms))


def _pvalues(arm: ExperimentReport, ref: ExperimentReport) -> dict:
    return {
        "correction": binomial_test_greater(arm.n_corrected, arm.n_initially_incorrect, ref.correction_rate),
        "corruption": binomial_test_greater(arm.n_corrupted, arm.n_initially_correct, ref.corruption_rate),
    }


@dataclass
class ExperimentSuite:
    """Baseline, controls and intervention arms plus the table of one-tailed p-values."""

    kind: str
    reports: dict[str, ExperimentReport]
    p_table: dict[str, dict[str, float]]
    outcomes: dict[str, list[Outcome]]

    def to_json(self) -> dict:
        return {"kind": self.kind,
                "conditions": {k: r.to_json() for k, r in self.reports.items()},
                "p_table": self.p_table}

    def outcomes_csv(self) -> str:
        lines = ["condition,problem_id,before_passed,after_passed,before,after,similarity"]
        for cond, rows in self.outcomes.items():
            for o in sorted(rows, key=lambda o: o.problem_id):
                lines.append(f"{cond},{o.problem_id},{int(o.before_passed)},{int(o.after_passed)},"
                             f"{o.before},{o.after},{o.similarity!r}")
        return "\n".join(lines) + "\n"


def _suite(kind: str, arms: dict[str, tuple[ExperimentReport, list[Outcome]]],
           baseline: ExperimentReport, controls: dict[str, str]) -> ExperimentSuite:
    """``controls`` maps each intervention arm to the name of its matched control arm."""
    for name, ctrl in controls.items():
        arm, ref = arms[name][0], arms[ctrl][0]
        arm.p_vs_baseline = _pvalues(arm, baseline)
        arm.p_vs_control = _pvalues(arm, ref)
    reports = {"baseline": baseline, **{k: v[0] for k, v in arms.items()}}
    # correction column: correct-direction arm; corruption column: incorrect-direction arm
    corr_arm, corrupt_arm = (("correct_steering", "incorrect_steering") if kind == "steer"
                             else ("incorrect_orthogonalization", "correct_orthogonalization"))
    p_table = {
        "vs_baseline": {"correction": reports[corr_arm].p_vs_baseline["correction"],
                        "corruption": reports[corrupt_arm].p_vs_baseline["corruption"]},
        "vs_control": {"correction": reports[corr_arm].p_vs_control["correction"],
                       "corruption": reports[corrupt_arm].p_vs_control["corruption"]},
    }
    return ExperimentSuite(kind, reports, p_table, {k: v[1] for k, v in arms.items()})


def _baseline_report(problems, baseline) -> ExperimentReport:
    return compare("baseline", {p.id: baseline[p.id] for p in problems},
                   {p.id: baseline[p.id] for p in problems})[0]


def run_steering_experiment(ckpt: Checkpoint, selection: SelectionResult, control: tuple[int, int],
                            directions: Mapping[tuple[int, int], np.ndarray], coefficients: Mapping[str, float],
                            problems: Sequence[ProblemSpec], baseline: Mapping[int, LabeledSample],
                            positions: str = "all", max_new: int = 16) -> ExperimentSuite:
    """Steer along the correct- and incorrect-steering latents and along the control latent.

    Each control arm reuses the coefficient of the steering arm it is compared with.
    ``directions`` maps (layer, index) to unit decoder rows.
    """
    for role in ("correct_steering", "incorrect_steering"):
        if role not in coefficients:
            raise KeyError(f"missing steering coefficient for {role}")
    base = _baseline_report(problems, baseline)
    arms = {}
    for role in ("correct_steering", "incorrect_steering"):
        feat = getattr(selection, role)
        alpha = float(coefficients[role])
        spec = InterventionSpec("steer", feat.layer, feat.index, directions[(feat.layer, feat.index)], alpha,
                                positions=positions, label=role)
        arms[role] = run_condition(ckpt, problems, baseline, spec, "steering_direction", max_new)
        cl, ci = control
        # control is steered at its own layer with the arm's alpha
        cspec = InterventionSpec("steer", cl, ci, directions[control], alpha, positions=positions,
                                 label=f"control_for_{role}")
        arms[f"control_{role}"] = run_condition(ckpt, problems, baseline, cspec, "control", max_new)
    return _suite("steer", arms, base, {r: f"control_{r}" for r in ("correct_steering", "incorrect_steering")})


def run_orthogonalization_experiment(ckpt: Checkpoint, selection: SelectionResult, control: tuple[int, int],
                                     directions: Mapping[tuple[int, int], np.ndarray],
                                     problems: Sequence[ProblemSpec], baseline: Mapping[int, LabeledSample],
                                     max_new: int = 16) -> ExperimentSuite:
    """Remove each steering direction (and the control direction) from all residual writers."""
    base = _baseline_report(problems, baseline)
    arms = {}
    for role, name in (("correct_steering", "correct_orthogonalization"),
                       ("incorrect_steering", "incorrect_orthogonalization")):
        feat = getattr(selection, role)
        spec = InterventionSpec("orthogonalize", feat.layer, feat.index, directions[(feat.layer, feat.index)],
                                label=name)
        arms[name] = run_condition(ckpt, problems, baseline, spec, "steering_direction", max_new)
    cspec = InterventionSpec("orthogonalize", control[0], control[1], directions[control], label="control")
    arms["control"] = run_condition(ckpt, problems, baseline, cspec, "control", max_new)
    return _suite("orthogonalize", arms, base,
                  {"correct_orthogonalization": "control", "incorrect_orthogonalization": "control"})
