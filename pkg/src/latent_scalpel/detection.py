"""Predictor latents as classifiers: thresholds, F1/AUROC, temperature sweeps, logit lens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import harness
from .harness import LabeledSample, ProblemSpec
from .model import Checkpoint

DEFAULT_TEMPERATURES = tuple(round(0.2 * i, 1) for i in range(8))


@dataclass(frozen=True)
class ScoredSample:
    problem_id: int
    score: float
    correct: bool


def _arrays(samples: Sequence[ScoredSample], positive_class: str):
    if positive_class not in ("correct", "incorrect"):
        raise ValueError(f"positive_class must be 'correct' or 'incorrect', got {positive_class!r}")
    scores = np.array([s.score for s in samples], dtype=np.float64)
    correct = np.array([s.correct for s in samples], dtype=bool)
    return scores, (correct if positive_class == "correct" else ~correct)


@dataclass
class DetectionReport:
    threshold: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: str = "incorrect"
    temperature: float | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["threshold"] = _json_float(self.threshold)
        return d


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def metrics_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, F1) with explicit conventions for empty denominators.

    No predicted and no actual positives is a perfect score (1, 1, 1). With
    no predicted positives but some actual ones, precision is 0. With no
    actual positives, recall is 1. F1 is 0 when precision + recall is 0.
    """
    if tp + fp == 0:
        precision = 1.0 if tp + fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def classification_metrics(samples: Sequence[ScoredSample], threshold: float,
                           positive_class: str = "incorrect") -> DetectionReport:
    """Predict positive iff score > threshold and tabulate the confusion matrix."""
    scores, pos = _arrays(samples, positive_class)
    pred = scores > threshold
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & ~pos).sum())
    p, r, f = metrics_from_counts(tp, fp, fn)
    au = auroc(samples, positive_class) if pos.any() and (~pos).any() else None
    return DetectionReport(threshold, p, r, f, au, tp, fp, fn, tn, positive_class)


def candidate_thresholds(scores) -> list[float]:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = ((u[:-1] + u[1:]) / 2).tolist()
    return [-math.inf] + mids + [math.inf]


def calibrate_threshold(samples: Sequence[ScoredSample], positive_class: str = "incorrect") -> float:
    """Threshold maximizing F1 among -inf, midpoints of distinct sorted scores, and +inf.

    Ties go to the smallest threshold.
    """
    scores, pos = _arrays(samples, positive_class)
    if pos.all() or not pos.any():
        raise ValueError("calibration set must contain both classes")
    best_t, best_f1 = None, -1.0
    for t in candidate_thresholds(scores):
        pred = scores > t
        f1 = metrics_from_counts(int((pred & pos).sum()), int((pred & ~pos).sum()), int((~pred & pos).sum()))[2]
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t


def auroc(samples: Sequence[ScoredSample], positive_class: str = "incorrect") -> float:
    """Mann-Whitney AUROC: P(positive outscores negative), ties counted as one half."""
    scores, pos = _arrays(samples, positive_class)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def score_samples(scores: Mapping[int, float], labels: Mapping[int, LabeledSample | bool],
                  ids: Sequence[int]) -> list[ScoredSample]:
    out = []
    for i in ids:
        lab = labels[i]
        out.append(ScoredSample(i, float(scores[i]), lab.passed if isinstance(lab, LabeledSample) else bool(lab)))
    return out


def temperature_sweep(ckpt: Checkpoint, problems: Sequence[ProblemSpec], scores: Mapping[int, float],
                      threshold: float, positive_class: str = "incorrect",
                      temperatures: Sequence[float] = DEFAULT_TEMPERATURES, seed: int = 0,
                      max_new: int = 16, labels_by_t: dict | None = None) -> list[DetectionReport]:
    """Re-label ``problems`` by sampling at each temperature, keeping scores and threshold fixed.

    ``labels_by_t`` caches generations across calls (e.g. for several features).
    """
    from .intervention import generate_labels

    cache = labels_by_t if labels_by_t is not None else {}
    reports = []
    for t in temperatures:
        if t not in cache:
            cache[t] = generate_labels(ckpt, problems, None, max_new, t, harness.substream(seed, f"T={t}"))
        samples = score_samples(scores, cache[t], [p.id for p in problems])
        rep = classification_metrics(samples, threshold, positive_class)
        rep.temperature = t
        rep.provenance = ckpt.provenance[-1]
        reports.append(rep)
    return reports


def sweep_csv(reports: Sequence[DetectionReport]) -> str:
    lines = ["temperature,auroc,f1,precision,recall"]
    for r in reports:
        lines.append(f"{r.temperature!r},{r.auroc!r},{r.f1!r},{r.precision!r},{r.recall!r}")
    return "\n".join(lines) + "\n"


def logit_lens_direction(unembed: np.ndarray, direction, k: int = 10, vocab: Sequence[str] | None = None):
    """Top-``k`` tokens by (unit direction) @ unembedding; ties broken by token id."""
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    d = d / np.linalg.norm(d)
    logits = d @ np.asarray(unembed, dtype=np.float64)
    order = np.lexsort((np.arange(len(logits)), -logits))[:k]
    return [((vocab[i] if vocab is not None else int(i)), float(logits[i])) for i in order]


def logit_lens(ckpt: Checkpoint, sae, feature: int, k: int = 10):
    """Tokens most promoted by SAE latent ``feature``'s decoder direction (final norm ignored)."""
    return logit_lens_direction(ckpt.params["W_U"].numpy(), sae.W_dec[feature], k, harness.VOCAB)


def frozen_evaluation(ckpt: Checkpoint, saes: Mapping[int, object], selection, thresholds: Mapping[str, float],
                      coefficients: Mapping[str, float], control: tuple[int, int], problems: Sequence[ProblemSpec],
                      positions: str = "all", max_new: int = 16) -> dict:
    """Detection and steering results for ``ckpt`` with features, thresholds and coefficients held fixed."""
    from .intervention import generate_labels, run_steering_experiment
    from .model import capture_final_token_residuals
    from .sae import encode

    labels = generate_labels(ckpt, problems, None, max_new)
    prompts = [harness.render_prompt(p) for p in problems]
    detection = {}
    for role, positive in (("correct_predicting", "correct"), ("incorrect_predicting", "incorrect")):
        feat = getattr(selection, role)
        recs = capture_final_token_residuals(ckpt, prompts, feat.layer)
        acts = encode(np.stack([r.vector for r in recs]), saes[feat.layer])[:, feat.index]
        scores = {r.problem_id: float(a) for r, a in zip(recs, acts)}
        samples = score_samples(scores, labels, [p.id for p in problems])
        rep = classification_metrics(samples, thresholds[role], positive)
        rep.provenance = ckpt.provenance[-1]
        detection[role] = rep
    directions = {(f.layer, f.index): saes[f.layer].direction(f.index) for f in selection.rows()}
    directions[control] = saes[control[0]].direction(control[1])
    suite = run_steering_experiment(ckpt, selection, control, directions, coefficients, problems, labels,
                                    positions, max_new)
    return {"provenance": list(ckpt.provenance),
            "pass_rate": float(np.mean([labels[p.id].passed for p in problems])),
            "detection": detection, "steering": suite}


def transfer_eval(base_ckpt: Checkpoint, tuned_ckpt: Checkpoint, saes, selection, thresholds, coefficients,
                  control, problems: Sequence[ProblemSpec], positions: str = "all", max_new: int = 16) -> dict:
    """Evaluate base-derived features, thresholds and coefficients on a fine-tuned checkpoint.

    Nothing is recalibrated; both checkpoints go through the same frozen evaluation.
    """
    if tuned_ckpt.config != base_ckpt.config:
        raise ValueError("tuned checkpoint config differs from the base checkpoint")
    if tuned_ckpt.tag != "fine_tuned":
        raise ValueError(f"expected a fine_tuned checkpoint, got provenance {tuned_ckpt.provenance}")
    out = {}
    for name, ck in (("base", base_ckpt), ("tuned", tuned_ckpt)):
        res = frozen_evaluation(ck, saes, selection, thresholds, coefficients, control, problems, positions, max_new)
        out[name] = {
            "provenance": res["provenance"],
            "pass_rate": res["pass_rate"],
            "detection": {k: v.to_json() for k, v in res["detection"].items()},
            "steering": res["steering"].to_json(),
        }
    out["frozen"] = {
        "thresholds": {k: _json_float(v) for k, v in thresholds.items()},
        "coefficients": dict(coefficients),
        "recalibrated": False,
        "features": selection.to_json(),
        "control": list(control),
    }
    return out
