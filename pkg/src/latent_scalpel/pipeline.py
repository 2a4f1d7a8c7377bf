"""Stage-based end-to-end pipeline with on-disk artifacts tracked by a hash manifest.

Each stage reads only manifest-listed inputs and records every file it
writes. All randomness derives from ``RunConfig.seed`` through named
substreams, so reruns with the same config rewrite identical JSON and CSV.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attention as attn
from . import detection as det
from . import harness, io
from . import intervention as iv
from . import model as lm
from . import sae as sae_mod
from . import selection as sel

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.5, 0.1, 0.4)
POOL_ID_OFFSET = 2_000_000
FINE_TUNE_ID_OFFSET = 3_000_000
STEER_ROLES = ("correct_steering", "incorrect_steering")
PREDICT_ROLES = (("correct_predicting", "correct"), ("incorrect_predicting", "incorrect"))


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "artifacts"
    # toy LM
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    lm_corpus_size: int = 20000
    lm_steps: int = 2000
    lm_lr: float = 3e-3
    lm_batch: int = 64
    bug_rate: float = 0.8
    fine_tune_corpus_size: int = 4000
    fine_tune_steps: int = 300
    fine_tune_lr: float = 1e-3
    # problems
    n_problems: int = 1000
    split_ratios: tuple[float, float, float] = SPLIT_RATIOS
    max_new: int = 16
    # SAE
    sae_pool_size: int = 4000
    sae_expansion: int = 8
    sae_l0_frac: float = 0.04  # lambda = frac * variance of final-token residuals
    sae_steps: int = 3000
    sae_lr: float = 2e-3
    sae_batch: int = 256
    sae_background_mix: float = 1.0
    # selection
    background_tokens: int = 8192
    background_threshold: float = 0.02
    welch_denominator: str = "total"
    control_min_fire: float = 0.10
    # detection
    temperatures: tuple[float, ...] = det.DEFAULT_TEMPERATURES
    logit_lens_k: int = 10
    # interventions
    alpha_max: float = 300
    grid_step: float = 10
    golden_tol: float = 0.5
    alpha_unit: float | None = None  # None -> mean final-token residual norm / 100
    steer_positions: str = "all"
    attention_read_offset: int = 1
    plots: bool = True

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        self.temperatures = tuple(float(t) for t in self.temperatures)
        if tuple(self.split_ratios) != SPLIT_RATIOS:
            raise ConfigError(f"split ratios are fixed at {SPLIT_RATIOS}")
        for name in ("n_layers", "d_model", "n_heads", "max_seq_len", "lm_corpus_size", "lm_steps", "lm_batch",
                     "sae_pool_size", "sae_expansion", "sae_steps", "sae_batch", "background_tokens", "max_new",
                     "logit_lens_k", "lm_lr", "fine_tune_lr", "sae_lr", "sae_l0_frac", "grid_step", "golden_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.fine_tune_steps < 0 or self.fine_tune_corpus_size < 1:
            raise ConfigError("fine_tune_steps must be >= 0 and fine_tune_corpus_size >= 1")
        if any(t < 0 for t in self.temperatures):
            raise ConfigError("temperatures must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_problems < 10:
            raise ConfigError("n_problems must be >= 10")
        if self.steer_positions not in ("all", "prompt_last"):
            raise ConfigError(f"steer_positions must be 'all' or 'prompt_last', got {self.steer_positions!r}")
        if self.welch_denominator not in ("total", "nonzero"):
            raise ConfigError("welch_denominator must be 'total' or 'nonzero'")
        if self.alpha_max <= self.grid_step:
            raise ConfigError("alpha_max must exceed grid_step")
        if self.alpha_unit is not None and not self.alpha_unit > 0:
            raise ConfigError("alpha_unit must be positive")
        for name in ("bug_rate", "sae_background_mix", "background_threshold", "control_min_fire"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.attention_read_offset < 0:
            raise ConfigError("attention_read_offset must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**obj)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["temperatures"] = list(self.temperatures)
        return d

    def model_config(self) -> lm.ModelConfig:
        return lm.ModelConfig(len(harness.VOCAB), self.n_layers, self.d_model, self.n_heads, self.max_seq_len,
                              harness.substream(self.seed, "lm_init") % (2**31))

    def sub(self, name: str) -> int:
        return harness.substream(self.seed, name)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _finite(v):
    """JSON-safe float: infinities become strings, NaN becomes null."""
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite(x) for x in v]
    return v


def _unfinite(v):
    return {"inf": math.inf, "-inf": -math.inf}.get(v, v) if isinstance(v, str) else v


class Pipeline:
    def __init__(self, config: RunConfig, out: str | Path | None = None):
        self.cfg = config
        self.root = Path(out if out is not None else config.out_dir)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.root}: {e}") from e
        self.manifest = io.Manifest.load(self.root)

    # -- artifact helpers ------------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.root / rel

    def need(self, rel: str) -> Path:
        return self.manifest.verify(rel)

    def write_text(self, rel: str, text: str, stage: str, provenance: str = "") -> None:
        self.path(rel).write_text(text)
        self.manifest.record(rel, stage, provenance)

    def write_json(self, rel: str, obj, stage: str, provenance: str = "") -> None:
        self.write_text(rel, _dumps(_finite(obj)), stage, provenance)

    def read_json(self, rel: str):
        return json.loads(self.need(rel).read_text())

    def finish(self) -> None:
        self.manifest.save()

    # -- shared loaders --------------------------------------------------------

    def dataset(self) -> harness.Dataset:
        problems = [harness.ProblemSpec.from_json(o) for o in self.read_json("problems.json")]
        splits = harness.SplitAssignment.from_json(self.read_json("splits.json"))
        return harness.Dataset(problems, splits)

    def checkpoint(self, which: str = "base") -> lm.Checkpoint:
        return io.load_checkpoint(self.need(f"lm_{which}.mlm"))

    def labels(self) -> dict[int, harness.LabeledSample]:
        return {o["problem_id"]: harness.LabeledSample.from_json(o) for o in self.read_json("labels_base.json")}

    def activations(self, rel: str) -> dict[int, list[lm.ActivationRecord]]:
        out: dict[int, list] = {}
        for r in io.load_activations(self.need(rel)):
            out.setdefault(r.layer, []).append(r)
        return out

    def saes(self) -> dict[int, sae_mod.SAEParams]:
        return {l: io.load_sae(self.need(f"sae_L{l}.sae")) for l in range(self.cfg.n_layers)}

    def selection(self) -> tuple[sel.SelectionResult, tuple[int, int]]:
        obj = self.read_json("selection.json")
        return sel.SelectionResult.from_json(obj["features"]), tuple(obj["control"])

    def directions(self, saes, selection, control) -> dict[tuple[int, int], np.ndarray]:
        out = {(f.layer, f.index): saes[f.layer].direction(f.index) for f in selection.rows()}
        out[control] = saes[control[0]].direction(control[1])
        return out

    # -- stages ------------------------------------------------------------------

    def gen_data(self) -> None:
        c = self.cfg
        problems = harness.generate_dataset(c.sub("problems"), c.n_problems)
        splits = harness.split_dataset([p.id for p in problems], c.sub("splits"))
        self.write_json("run_config.json", c.to_dict(), "gen-data")
        self.write_text("problems.json", harness.problems_to_json(problems, splits) + "\n", "gen-data")
        self.write_json("splits.json", splits.to_json(), "gen-data")
        self.write_text("vocab.json", harness.vocab_to_json() + "\n", "gen-data")

    def train_lm(self) -> None:
        c = self.cfg
        corpus, _ = harness.training_corpus(c.sub("lm_corpus"), c.lm_corpus_size, c.bug_rate)
        ckpt = lm.train(c.model_config(), corpus, c.lm_steps, c.lm_lr, c.lm_batch)
        io.save_checkpoint(ckpt, self.path("lm_base.mlm"))
        self.manifest.record("lm_base.mlm", "train-lm", ckpt.provenance[-1])

    def fine_tune(self) -> None:
        c = self.cfg
        base = self.checkpoint("base")
        corpus, starts = harness.training_corpus(c.sub("fine_tune_corpus"), c.fine_tune_corpus_size, 0.0,
                                                 id_offset=FINE_TUNE_ID_OFFSET, loss_on_completion=True)
        tuned = lm.fine_tune(base, corpus, c.fine_tune_steps, c.fine_tune_lr, starts, c.lm_batch,
                             c.sub("fine_tune") % (2**31))
        io.save_checkpoint(tuned, self.path("lm_tuned.mlm"))
        self.manifest.record("lm_tuned.mlm", "fine-tune", tuned.provenance[-1])

    def label(self) -> None:
        ds, ckpt = self.dataset(), self.checkpoint("base")
        labels = iv.generate_labels(ckpt, ds.problems, None, self.cfg.max_new)
        self.write_json("labels_base.json", [labels[p.id].to_json() for p in ds.problems], "label",
                        ckpt.provenance[-1])
        self.write_json("label_summary.json", _pass_summary(ds, labels), "label", ckpt.provenance[-1])

    def capture(self) -> None:
        c = self.cfg
        ds, ckpt, labels = self.dataset(), self.checkpoint("base"), self.labels()
        layers = list(range(c.n_layers))
        prompts = [harness.render_prompt(p) for p in ds.problems]
        recs = lm.capture_final_token_residuals(ckpt, prompts, layers)
        flat = [dataclasses.replace(r, label=labels[r.problem_id].passed) for l in layers for r in recs[l]]
        io.save_activations(flat, self.path("acts_base.act"))
        self.manifest.record("acts_base.act", "capture", ckpt.provenance[-1])

        pool = harness.generate_dataset(c.sub("sae_pool"), c.sae_pool_size, id_offset=POOL_ID_OFFSET)
        precs = lm.capture_final_token_residuals(ckpt, [harness.render_prompt(p) for p in pool], layers)
        io.save_activations([r for l in layers for r in precs[l]], self.path("acts_pool.act"))
        self.manifest.record("acts_pool.act", "capture", ckpt.provenance[-1])

        bg = harness.build_background_corpus(c.sub("background"), c.background_tokens)
        bres = lm.capture_all_positions(ckpt, bg, layers)
        io.save_activations([lm.ActivationRecord(i, l, v) for l in layers for i, v in enumerate(bres[l])],
                            self.path("acts_background.act"))
        self.manifest.record("acts_background.act", "capture", ckpt.provenance[-1])

    def _background_halves(self):
        """Background residuals per layer, split into (SAE-training half, filter half)."""
        bg = self.activations("acts_background.act")
        out = {}
        for l, rs in bg.items():
            X = np.stack([r.vector for r in rs])
            out[l] = (X[: len(X) // 2], X[len(X) // 2 :])
        return out

    def train_sae(self) -> None:
        c = self.cfg
        pool = self.activations("acts_pool.act")
        bg = self._background_halves()
        for l in range(c.n_layers):
            fin = np.stack([r.vector for r in pool[l]])
            n_bg = min(int(c.sae_background_mix * len(fin)), len(bg[l][0]))
            X = np.concatenate([fin, bg[l][0][:n_bg]])
            var = float(((fin - fin.mean(0)) ** 2).sum(1).mean())
            tc = sae_mod.SAETrainConfig(l0_coef=c.sae_l0_frac * var, lr=c.sae_lr, steps=c.sae_steps,
                                        batch=c.sae_batch, seed=c.sub(f"sae:{l}") % (2**31),
                                        expansion=c.sae_expansion)
            sae = sae_mod.train_sae(X, tc, layer=l)
            rel = f"sae_L{l}.sae"
            io.save_sae(sae, self.path(rel))
            self.manifest.record(rel, "train-sae", f"layer={l}")

    def select(self) -> None:
        c = self.cfg
        ds, labels, saes = self.dataset(), self.labels(), self.saes()
        acts = self.activations("acts_base.act")
        bg = self._background_halves()
        chosen = set(ds.splits.selection_ids)
        lab = {pid: s.passed for pid, s in labels.items()}
        stats = []
        for l in range(c.n_layers):
            keep, rates = sel.background_filter(saes[l], bg[l][1], c.background_threshold)
            d = sel.build_dataset([r for r in acts[l] if r.problem_id in chosen], saes[l], lab)
            stats.append(sel.compute_layer_stats(d, keep, rates, c.welch_denominator))
        result = sel.select_features(stats)
        control = iv.select_control_feature(stats, c.control_min_fire)
        self.write_text("feature_stats.csv", sel.stats_to_csv(stats), "select")
        self.write_text("feature_stats.json", sel.stats_to_json(stats) + "\n", "select")
        self.write_json("selection.json", {"features": result.to_json(), "control": list(control),
                                           "table": [dataclasses.asdict(r) for r in result.rows()]}, "select")

    def _scores(self, ckpt, saes, feature, problems) -> dict[int, float]:
        prompts = [harness.render_prompt(p) for p in problems]
        recs = lm.capture_final_token_residuals(ckpt, prompts, feature.layer)
        a = sae_mod.encode(np.stack([r.vector for r in recs]), saes[feature.layer])[:, feature.index]
        return {r.problem_id: float(v) for r, v in zip(recs, a)}

    def detect(self) -> None:
        c = self.cfg
        ds, ckpt, labels, saes = self.dataset(), self.checkpoint("base"), self.labels(), self.saes()
        selection, _ = self.selection()
        cal, ana = ds.subset("calibration"), ds.subset("analysis")
        out = {"thresholds": {}, "calibration": {}, "analysis": {}, "sweep": {}, "logit_lens": {}}
        label_cache: dict = {}
        for role, positive in PREDICT_ROLES:
            feat = getattr(selection, role)
            scores = self._scores(ckpt, saes, feat, cal + ana)
            cal_s = det.score_samples(scores, labels, [p.id for p in cal])
            tau = det.calibrate_threshold(cal_s, positive)
            out["thresholds"][role] = tau
            for name, probs in (("calibration", cal), ("analysis", ana)):
                rep = det.classification_metrics(det.score_samples(scores, labels, [p.id for p in probs]), tau,
                                                 positive)
                rep.temperature, rep.provenance = 0.0, ckpt.provenance[-1]
                out[name][role] = rep.to_json()
            sweep = det.temperature_sweep(ckpt, ana, scores, tau, positive, c.temperatures, c.sub("sweep"),
                                          c.max_new, label_cache)
            out["sweep"][role] = [r.to_json() for r in sweep]
            self.write_text(f"sweep_{role}.csv", det.sweep_csv(sweep), "detect")
            lens = det.logit_lens(ckpt, saes[feat.layer], feat.index, c.logit_lens_k)
            out["logit_lens"][role] = [[t, v] for t, v in lens]
        self.write_json("detection.json", out, "detect", ckpt.provenance[-1])

    def _alpha_unit(self) -> float:
        if self.cfg.alpha_unit is not None:
            return float(self.cfg.alpha_unit)
        acts = self.activations("acts_base.act")
        norms = [np.linalg.norm(r.vector) for rs in acts.values() for r in rs]
        return float(np.mean(norms) / 100.0)

    def steer(self) -> None:
        c = self.cfg
        ds, ckpt, labels, saes = self.dataset(), self.checkpoint("base"), self.labels(), self.saes()
        selection, control = self.selection()
        dirs = self.directions(saes, selection, control)
        cal, ana = ds.subset("calibration"), ds.subset("analysis")
        unit = self._alpha_unit()
        objectives = {"correct_steering": iv.objective_correct, "incorrect_steering": iv.objective_incorrect}
        searches, raw = {}, {}
        for role in STEER_ROLES:
            feat = getattr(selection, role)

            def evaluate(units: float, feat=feat, role=role) -> float:
                spec = iv.InterventionSpec("steer", feat.layer, feat.index, dirs[(feat.layer, feat.index)],
                                           units * unit, "calibration", c.steer_positions, role)
                return objectives[role](iv.run_condition(ckpt, cal, labels, spec, max_new=c.max_new)[0])

            cs = iv.coefficient_search(evaluate, c.alpha_max, c.grid_step, c.golden_tol)
            searches[role] = cs.to_json()
            raw[role] = cs.alpha * unit
        self.write_json("coefficients.json", {
            "alpha_unit": unit, "units": {r: searches[r]["alpha"] for r in STEER_ROLES}, "raw": raw,
            "search": searches}, "steer")
        suite = iv.run_steering_experiment(ckpt, selection, control, dirs, raw, ana, labels,
                                           c.steer_positions, c.max_new)
        self.write_json("steering.json", suite.to_json(), "steer", ckpt.provenance[-1])
        self.write_text("steering_outcomes.csv", suite.outcomes_csv(), "steer")

    def ortho(self) -> None:
        ds, ckpt, labels, saes = self.dataset(), self.checkpoint("base"), self.labels(), self.saes()
        selection, control = self.selection()
        suite = iv.run_orthogonalization_experiment(ckpt, selection, control,
                                                    self.directions(saes, selection, control),
                                                    ds.subset("analysis"), labels, self.cfg.max_new)
        self.write_json("orthogonalization.json", suite.to_json(), "ortho", ckpt.provenance[-1])
        self.write_text("orthogonalization_outcomes.csv", suite.outcomes_csv(), "ortho")

    def attention(self) -> None:
        c = self.cfg
        ds, ckpt, saes = self.dataset(), self.checkpoint("base"), self.saes()
        selection, control = self.selection()
        coef = self.read_json("coefficients.json")
        exps = []
        for role in STEER_ROLES:
            feat = getattr(selection, role)
            spec = iv.InterventionSpec("steer", feat.layer, feat.index, saes[feat.layer].direction(feat.index),
                                       coef["raw"][role], "analysis", c.steer_positions, role)
            exps.append(attn.run_attention_experiment(ckpt, spec, ds.subset("analysis"), c.attention_read_offset))
        self.write_json("attention.json", {e.label: e.to_json() for e in exps}, "attention", ckpt.provenance[-1])
        self.write_text("attention_shares.csv", attn.shares_csv(exps), "attention")

    def transfer(self) -> None:
        c = self.cfg
        ds, base, tuned, saes = self.dataset(), self.checkpoint("base"), self.checkpoint("tuned"), self.saes()
        selection, control = self.selection()
        thresholds = {k: _unfinite(v) for k, v in self.read_json("detection.json")["thresholds"].items()}
        coef = self.read_json("coefficients.json")
        res = det.transfer_eval(base, tuned, saes, selection, thresholds, coef["raw"], control,
                                ds.subset("analysis"), c.steer_positions, c.max_new)
        res["frozen"]["coefficient_units"] = coef["units"]
        res["frozen"]["alpha_unit"] = coef["alpha_unit"]
        self.write_json("transfer.json", res, "transfer", tuned.provenance[-1])

    def report(self) -> dict:
        summary: dict = {"config": self.cfg.to_dict()}

        def section(name: str, stage: str, rels: list[str], build: Callable[[], object]):
            try:
                for r in rels:
                    self.need(r)
            except FileNotFoundError:
                summary[name] = {"status": "stage missing", "stage": stage}
                return
            summary[name] = build()

        section("pass_rates", "label", ["label_summary.json"], lambda: self.read_json("label_summary.json"))
        section("table1", "select", ["selection.json"], lambda: self.read_json("selection.json"))
        section("detection", "detect", ["detection.json"], lambda: _detection_summary(self.read_json("detection.json")))
        section("steering", "steer", ["steering.json", "coefficients.json"],
                lambda: {**self.read_json("steering.json"), "coefficients": {
                    k: v for k, v in self.read_json("coefficients.json").items() if k != "search"}})
        section("orthogonalization", "ortho", ["orthogonalization.json"],
                lambda: self.read_json("orthogonalization.json"))
        section("attention", "attention", ["attention.json"],
                lambda: {k: {"read_layer": v["read_layer"], "delta_pp": v["delta_pp"],
                             "baseline_mean_pct": v["baseline_mean_pct"], "steered_mean_pct": v["steered_mean_pct"]}
                         for k, v in self.read_json("attention.json").items()})
        section("transfer", "transfer", ["transfer.json"], lambda: _transfer_summary(self.read_json("transfer.json")))
        self.write_json("report.json", summary, "report")
        self.write_text("report_rates.csv", _rates_csv(summary), "report")
        if self.cfg.plots:
            from . import plots

            for rel in plots.write_all(summary, self.root):
                self.manifest.record(rel, "report")
        return summary


def _pass_summary(ds: harness.Dataset, labels) -> dict:
    by_diff: dict[int, list[bool]] = {}
    for p in ds.problems:
        by_diff.setdefault(p.difficulty, []).append(labels[p.id].passed)
    out = {"overall": float(np.mean([labels[p.id].passed for p in ds.problems])),
           "by_difficulty": {str(k): float(np.mean(v)) for k, v in sorted(by_diff.items())}}
    for split in ("selection", "calibration", "analysis"):
        ids = getattr(ds.splits, f"{split}_ids")
        out[split] = {"n": len(ids), "n_correct": int(sum(labels[i].passed for i in ids))}
    return out


def _detection_summary(d: dict) -> dict:
    return {"thresholds": d["thresholds"], "analysis": d["analysis"],
            "sweep": {role: [{k: r[k] for k in ("temperature", "auroc", "f1", "precision", "recall")} for r in rows]
                      for role, rows in d["sweep"].items()},
            "logit_lens": d["logit_lens"]}


def _transfer_summary(t: dict) -> dict:
    out = {"frozen": t["frozen"]}
    for side in ("base", "tuned"):
        s = t[side]
        out[side] = {
            "provenance": s["provenance"], "pass_rate": s["pass_rate"],
            "detection": {k: {m: v[m] for m in ("f1", "auroc", "precision", "recall")} for k, v in s["detection"].items()},
            "steering": {k: {m: v[m] for m in ("correction_rate", "corruption_rate")}
                         for k, v in s["steering"]["conditions"].items()},
            "p_table": s["steering"]["p_table"],
        }
    return out


def _rates_csv(summary: dict) -> str:
    lines = ["experiment,condition,correction_rate,corruption_rate,mean_token_similarity"]
    for exp in ("steering", "orthogonalization"):
        block = summary.get(exp, {})
        for cond, r in sorted(block.get("conditions", {}).items()):
            lines.append(f"{exp},{cond},{r['correction_rate']!r},{r['corruption_rate']!r},"
                         f"{r['mean_token_similarity']!r}")
    return "\n".join(lines) + "\n"


STAGES: dict[str, Callable[[Pipeline], object]] = {
    "gen-data": Pipeline.gen_data,
    "train-lm": Pipeline.train_lm,
    "fine-tune": Pipeline.fine_tune,
    "label": Pipeline.label,
    "capture": Pipeline.capture,
    "train-sae": Pipeline.train_sae,
    "select": Pipeline.select,
    "detect": Pipeline.detect,
    "steer": Pipeline.steer,
    "ortho": Pipeline.ortho,
    "attention": Pipeline.attention,
    "transfer": Pipeline.transfer,
    "report": Pipeline.report,
}


def run_stage(name: str, config: RunConfig, out: str | Path | None = None):
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    pipe = Pipeline(config, out)
    log.info("stage %s -> %s", name, pipe.root)
    try:
        return STAGES[name](pipe)
    finally:
        pipe.finish()


def run_all(config: RunConfig, out: str | Path | None = None):
    result = None
    for name in STAGES:
        result = run_stage(name, config, out)
    return result
