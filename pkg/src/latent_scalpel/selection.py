"""Per-latent correctness statistics and feature selection across layers."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ActivationRecord
from .sae import SAEParams, encode


@dataclass
class LayerActivationDataset:
    layer: int
    acts: np.ndarray  # (n_samples, d_sae), nonnegative
    correct: np.ndarray  # (n_samples,) bool
    problem_ids: tuple[int, ...]

    @property
    def n_correct(self) -> int:
        return int(self.correct.sum())

    @property
    def n_incorrect(self) -> int:
        return int((~self.correct).sum())


def build_dataset(records: Sequence[ActivationRecord], sae: SAEParams, labels: Mapping[int, bool]) -> LayerActivationDataset:
    """Encode each record with ``sae``; ``labels`` maps problem_id to passed."""
    for r in records:
        if r.layer != sae.layer:
            raise ValueError(f"record from layer {r.layer} but SAE trained on layer {sae.layer}")
    missing = [r.problem_id for r in records if r.problem_id not in labels]
    if missing:
        raise KeyError(f"missing labels for problems {missing[:5]}")
    X = np.stack([r.vector for r in records]) if records else np.zeros((0, sae.d_model))
    return LayerActivationDataset(
        sae.layer,
        encode(X, sae),
        np.array([bool(labels[r.problem_id]) for r in records]),
        tuple(r.problem_id for r in records),
    )


def background_filter(sae: SAEParams, corpus_activations: np.ndarray, threshold: float = 0.02):
    """Keep latents that fire on at most ``threshold`` of background tokens.

    ``corpus_activations`` are residual vectors at the SAE's layer. Returns
    (keep mask, firing rate per latent).
    """
    corpus_activations = np.asarray(corpus_activations)
    if corpus_activations.size == 0:
        raise ValueError("empty background corpus")
    rates = (encode(corpus_activations, sae) > 0).mean(0)
    return rates <= threshold, rates


def welch_t(ds: LayerActivationDataset, j: int, denominator: str = "total"):
    """(t_correct, t_incorrect) for latent ``j``, or None when invalid.

    Means and (n-1) standard deviations use nonzero activations only. The
    squared standard errors divide by the total class sizes when
    ``denominator="total"`` and by the nonzero counts when ``"nonzero"``.
    A latent needs >= 2 nonzero activations per class and a positive
    denominator to be valid.
    """
    col = ds.acts[:, j]
    pos = col[ds.correct & (col > 0)]
    neg = col[~ds.correct & (col > 0)]
    if len(pos) < 2 or len(neg) < 2:
        return None
    if denominator == "total":
        n_pos, n_neg = ds.n_correct, ds.n_incorrect
    elif denominator == "nonzero":
        n_pos, n_neg = len(pos), len(neg)
    else:
        raise ValueError(f"unknown denominator convention {denominator!r}")
    se2 = pos.var(ddof=1) / n_pos + neg.var(ddof=1) / n_neg
    if not se2 > 0:
        return None
    t = float((pos.mean() - neg.mean()) / math.sqrt(se2))
    return t, -t


def frequencies_and_separation(ds: LayerActivationDataset, j: int):
    """(f_correct, f_incorrect, s_correct, s_incorrect) from firing indicators a > 0."""
    if ds.n_correct == 0 or ds.n_incorrect == 0:
        raise ValueError("both classes must be nonempty")
    fires = ds.acts[:, j] > 0
    f_c = float(fires[ds.correct].sum() / ds.n_correct)
    f_i = float(fires[~ds.correct].sum() / ds.n_incorrect)
    return f_c, f_i, f_c - f_i, f_i - f_c


@dataclass
class FeatureStats:
    layer: int
    index: int
    t_correct: float
    t_incorrect: float
    f_correct: float
    f_incorrect: float
    s_correct: float
    s_incorrect: float
    background_rate: float
    valid: bool  # t-statistic defined
    keep: bool = True  # passes the background filter

    def fire_rate(self, n_correct: int, n_incorrect: int) -> float:
        return (self.f_correct * n_correct + self.f_incorrect * n_incorrect) / (n_correct + n_incorrect)


@dataclass
class LayerStats:
    layer: int
    n_correct: int
    n_incorrect: int
    features: list[FeatureStats]


def compute_layer_stats(ds: LayerActivationDataset, keep: np.ndarray | None = None,
                        background_rates: np.ndarray | None = None, denominator: str = "total") -> LayerStats:
    d_sae = ds.acts.shape[1]
    keep = np.ones(d_sae, bool) if keep is None else keep
    rates = np.zeros(d_sae) if background_rates is None else background_rates
    feats = []
    for j in range(d_sae):
        t = welch_t(ds, j, denominator)
        f_c, f_i, s_c, s_i = frequencies_and_separation(ds, j)
        feats.append(FeatureStats(
            ds.layer, j,
            t[0] if t else float("nan"), t[1] if t else float("nan"),
            f_c, f_i, s_c, s_i, float(rates[j]), t is not None, bool(keep[j]),
        ))
    return LayerStats(ds.layer, ds.n_correct, ds.n_incorrect, feats)


@dataclass
class SelectedFeature:
    role: str
    layer: int
    index: int
    metric: float
    metric_kind: str  # "t-stat" | "sep"


ROLES = (
    ("correct_predicting", "t_correct", "t-stat"),
    ("incorrect_predicting", "t_incorrect", "t-stat"),
    ("correct_steering", "s_correct", "sep"),
    ("incorrect_steering", "s_incorrect", "sep"),
)


@dataclass
class SelectionResult:
    correct_predicting: SelectedFeature
    incorrect_predicting: SelectedFeature
    correct_steering: SelectedFeature
    incorrect_steering: SelectedFeature

    def rows(self) -> list[SelectedFeature]:
        return [getattr(self, role) for role, _, _ in ROLES]

    def to_json(self) -> dict:
        return {r.role: asdict(r) for r in self.rows()}

    @classmethod
    def from_json(cls, obj: dict) -> "SelectionResult":
        return cls(**{role: SelectedFeature(**obj[role]) for role, _, _ in ROLES})


def select_features(all_layer_stats: Sequence[LayerStats]) -> SelectionResult:
    """Maximum t (prediction) and separation (steering) over all kept latents of all layers.

    Ties go to the lowest layer, then the lowest index.
    """
    chosen = {}
    for role, attr, kind in ROLES:
        best = None
        for ls in sorted(all_layer_stats, key=lambda s: s.layer):
            for fs in ls.features:
                if not fs.keep or (kind == "t-stat" and not fs.valid):
                    continue
                val = getattr(fs, attr)
                if best is None or val > best.metric:
                    best = SelectedFeature(role, fs.layer, fs.index, float(val), kind)
        if best is None:
            raise ValueError(f"no valid candidate latent for {role}")
        chosen[role] = best
    return SelectionResult(**chosen)


CSV_FIELDS = ("layer", "index", "t_correct", "t_incorrect", "f_correct", "f_incorrect",
              "s_correct", "s_incorrect", "background_rate", "valid")


def stats_to_csv(all_layer_stats: Sequence[LayerStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for ls in all_layer_stats:
        for fs in ls.features:
            w.writerow([fs.layer, fs.index] + [repr(getattr(fs, k)) for k in CSV_FIELDS[2:-1]] + [int(fs.valid)])
    return buf.getvalue()


def _nan_to_none(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _none_to_nan(d: dict) -> dict:
    return {k: (float("nan") if v is None else v) for k, v in d.items()}


def stats_to_json(all_layer_stats: Sequence[LayerStats]) -> str:
    """Undefined t-statistics are written as null."""
    return json.dumps([
        {"layer": ls.layer, "n_correct": ls.n_correct, "n_incorrect": ls.n_incorrect,
         "features": [_nan_to_none(asdict(f)) for f in ls.features]}
        for ls in all_layer_stats
    ], allow_nan=False)


def stats_from_json(text: str) -> list[LayerStats]:
    return [LayerStats(o["layer"], o["n_correct"], o["n_incorrect"],
                       [FeatureStats(**_none_to_nan(f)) for f in o["features"]])
            for o in json.loads(text)]
