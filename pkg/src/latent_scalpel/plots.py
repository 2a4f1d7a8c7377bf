"""SVG figures for the summary report (sweep lines, rate bars, attention deltas)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SVG_META = {"Date": None, "Creator": None}


def _save(fig, root: Path, rel: str) -> str:
    plt.rcParams["svg.hashsalt"] = "latent-scalpel"
    fig.savefig(root / rel, format="svg", metadata=SVG_META)
    plt.close(fig)
    return rel


def detection_sweep(summary: dict, root: Path) -> str:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for role, rows in summary["detection"]["sweep"].items():
        ts = [r["temperature"] for r in rows]
        axes[0].plot(ts, [r["auroc"] if r["auroc"] is not None else float("nan") for r in rows], marker="o", label=role)
        axes[1].plot(ts, [r["f1"] for r in rows], marker="o", label=role)
    for ax, name in zip(axes, ("AUROC", "F1")):
        ax.set_xlabel("temperature")
        ax.set_ylabel(name)
        ax.set_ylim(0, 1)
    axes[1].legend(fontsize=8)
    return _save(fig, root, "fig_detection_sweep.svg")


def rate_bars(block: dict, root: Path, rel: str) -> str:
    conds = sorted(block["conditions"])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, key in zip(axes, ("correction_rate", "corruption_rate")):
        ax.bar(range(len(conds)), [100 * block["conditions"][c][key] for c in conds])
        ax.set_xticks(range(len(conds)), conds, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(f"{key.replace('_', ' ')} (%)")
    fig.tight_layout()
    return _save(fig, root, rel)


def attention_bars(block: dict, root: Path) -> str:
    sections = ("description", "tests", "initiator")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(1, len(block))
    for k, (label, v) in enumerate(sorted(block.items())):
        xs = [i + k * width for i in range(3)]
        ax.bar(xs, [v["delta_pp"][s] for s in sections], width, label=label)
    ax.set_xticks([i + width * (len(block) - 1) / 2 for i in range(3)], sections)
    ax.axhline(0, color="black", lw=0.5)
    ax.set_ylabel("attention change (pp)")
    ax.legend(fontsize=8)
    return _save(fig, root, "fig_attention_delta.svg")


def write_all(summary: dict, root: Path) -> list[str]:
    """Write every figure whose stage is present; returns relative paths."""
    root = Path(root)
    out = []
    if "sweep" in summary.get("detection", {}):
        out.append(detection_sweep(summary, root))
    if "conditions" in summary.get("steering", {}):
        out.append(rate_bars(summary["steering"], root, "fig_steering_rates.svg"))
    if "conditions" in summary.get("orthogonalization", {}):
        out.append(rate_bars(summary["orthogonalization"], root, "fig_orthogonalization_rates.svg"))
    att = summary.get("attention", {})
    if att and "status" not in att:
        out.append(attention_bars(att, root))
    return out
