"""Attention shares over the description / tests / initiator sections of a prompt."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import harness
from .harness import ProblemSpec
from .intervention import InterventionSpec, make_steer_hook
from .model import AttentionTrace, Checkpoint, attention_weights

SECTIONS = ("description", "tests", "initiator")


@dataclass(frozen=True)
class SectionShares:
    description_pct: float
    tests_pct: float
    initiator_pct: float
    layer: int = -1
    condition: str = ""
    problem_id: int = -1

    def as_array(self) -> np.ndarray:
        return np.array([self.description_pct, self.tests_pct, self.initiator_pct])


def section_shares(trace: AttentionTrace | np.ndarray, spans: Mapping[str, tuple[int, int]],
                   condition: str = "", problem_id: int = -1) -> SectionShares:
    """Head-averaged attention mass per section, as percentages of the three-section total.

    Positions outside the spans (the BOS token) are left out of the
    denominator. An empty span contributes 0.
    """
    w = trace.weights if isinstance(trace, AttentionTrace) else np.asarray(trace)
    layer = trace.layer if isinstance(trace, AttentionTrace) else -1
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if (w < 0).any():
        raise ValueError("attention weights must be nonnegative")
    mean = w.mean(0)
    sums = np.array([mean[slice(*spans[s])].sum() for s in SECTIONS])
    total = sums.sum()
    if not total > 0:
        raise ValueError("no attention mass falls inside the prompt sections")
    pct = 100.0 * sums / total
    return SectionShares(float(pct[0]), float(pct[1]), float(pct[2]), layer, condition, problem_id)


@dataclass(frozen=True)
class AttentionDelta:
    """Steered minus baseline shares in percentage points, averaged over problems."""

    description: float
    tests: float
    initiator: float
    n_problems: int

    def as_array(self) -> np.ndarray:
        return np.array([self.description, self.tests, self.initiator])


def attention_delta(baseline: Sequence[SectionShares], steered: Sequence[SectionShares]) -> AttentionDelta:
    """Per-problem differences paired by problem_id, then averaged."""
    b = {s.problem_id: s for s in baseline}
    st = {s.problem_id: s for s in steered}
    if len(b) != len(baseline) or len(st) != len(steered):
        raise ValueError("duplicate problem ids")
    if b.keys() != st.keys():
        raise ValueError(f"unpaired problems: {sorted(b.keys() ^ st.keys())[:5]}")
    if not b:
        raise ValueError("no problems to compare")
    ids = sorted(b)
    diffs = np.stack([st[i].as_array() - b[i].as_array() for i in ids])
    m = diffs.mean(0)
    return AttentionDelta(float(m[0]), float(m[1]), float(m[2]), len(ids))


@dataclass
class AttentionExperiment:
    label: str
    steer_layer: int
    read_layer: int
    downstream: bool  # read layer lies after the steering write
    baseline: list[SectionShares]
    steered: list[SectionShares]
    delta: AttentionDelta
    intervention: dict

    def to_json(self) -> dict:
        def mean(rows):
            return dict(zip(SECTIONS, np.mean([r.as_array() for r in rows], 0).tolist()))

        return {"label": self.label, "steer_layer": self.steer_layer, "read_layer": self.read_layer,
                "downstream": self.downstream, "intervention": self.intervention,
                "baseline_mean_pct": mean(self.baseline), "steered_mean_pct": mean(self.steered),
                "delta_pp": asdict(self.delta)}


def run_attention_experiment(ckpt: Checkpoint, spec: InterventionSpec, problems: Sequence[ProblemSpec],
                             read_offset: int = 1) -> AttentionExperiment:
    """Final-prompt-token attention shares with and without the steering hook.

    Steering writes after block ``spec.layer``, so attention is read at
    ``spec.layer + read_offset``, capped at the last layer.
    """
    if spec.kind != "steer":
        raise ValueError("attention experiments need a steering intervention")
    if read_offset < 0:
        raise ValueError("read_offset must be >= 0")
    read = min(spec.layer + read_offset, ckpt.config.n_layers - 1)
    base_rows, steer_rows = [], []
    for p in problems:
        prompt = harness.render_prompt(p)
        pos = None if spec.positions == "all" else len(prompt) - 1
        hook = make_steer_hook(spec.direction, spec.alpha, spec.layer, pos)
        base_rows.append(section_shares(attention_weights(ckpt, prompt, read), prompt.spans, "baseline", p.id))
        steer_rows.append(section_shares(attention_weights(ckpt, prompt, read, [hook]), prompt.spans,
                                         spec.label or "steered", p.id))
    return AttentionExperiment(spec.label, spec.layer, read, read > spec.layer, base_rows, steer_rows,
                               attention_delta(base_rows, steer_rows), spec.meta())


def shares_csv(experiments: Sequence[AttentionExperiment]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem_id", "condition", "description_pct", "tests_pct", "initiator_pct"])
    for exp in experiments:
        for rows, cond in ((exp.baseline, f"baseline@{exp.label}"), (exp.steered, exp.label)):
            for r in rows:
                w.writerow([r.problem_id, cond, repr(r.description_pct), repr(r.tests_pct), repr(r.initiator_pct)])
    return buf.getvalue()
