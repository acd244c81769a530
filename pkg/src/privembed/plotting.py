"""Render privacy/utility trade-off figures from aggregated sweep rows."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _eps_label(value: float) -> str:
    if math.isinf(value):
        return "inf"
    if float(value).is_integer():
        return str(int(value))
    return format(value, "g")


def render_train_budget_figure(aggregates: list[dict], path) -> Path | None:
    """EER and attacker AUC against the training budget (no test-time noise)."""
    rows = sorted(
        (r for r in aggregates if math.isinf(r["epsilon_ts"])),
        key=lambda r: r["epsilon_tr"],
    )
    if len(rows) < 2:
        return None
    x = [r["epsilon_tr"] for r in rows]
    eer_pct = [100.0 * r["eer_protected_mean"] for r in rows]
    eer_std = [100.0 * r["eer_protected_std"] for r in rows]
    auc = [r["auc_protected_mean"] for r in rows]
    auc_std = [r["auc_protected_std"] for r in rows]

    fig, ax1 = plt.subplots(figsize=(6.4, 4.0))
    ax1.errorbar(x, eer_pct, yerr=eer_std, marker="o", color="tab:blue", label="ASV EER")
    ax1.set_xscale("log")
    ax1.set_xlabel("training privacy budget")
    ax1.set_ylabel("ASV EER (%)", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    ax1.grid(True, alpha=0.3)

    ax2 = ax1.twinx()
    ax2.errorbar(x, auc, yerr=auc_std, marker="s", color="tab:red", label="attacker AUC")
    ax2.set_ylabel("gender classification AUC", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    ax2.set_ylim(0.0, 1.05)

    ax1.set_title("privacy/utility vs training budget (no test-time noise)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_test_budget_figure(aggregates: list[dict], path) -> Path | None:
    """EER and attacker AUC against the test budget, one line per training budget."""
    train_values = sorted({r["epsilon_tr"] for r in aggregates})
    ts_values = sorted({r["epsilon_ts"] for r in aggregates})
    if len(ts_values) < 2:
        return None
    positions = {v: i for i, v in enumerate(ts_values)}

    fig, (ax_eer, ax_auc) = plt.subplots(1, 2, figsize=(10.0, 4.0), sharex=True)
    for tr in train_values:
        rows = sorted(
            (r for r in aggregates if r["epsilon_tr"] == tr),
            key=lambda r: r["epsilon_ts"],
        )
        if len(rows) < 2:
            continue
        x = [positions[r["epsilon_ts"]] for r in rows]
        label = f"train budget {_eps_label(tr)}"
        ax_eer.errorbar(
            x, [100.0 * r["eer_protected_mean"] for r in rows],
            yerr=[100.0 * r["eer_protected_std"] for r in rows], marker="o", label=label,
        )
        ax_auc.errorbar(
            x, [r["auc_protected_mean"] for r in rows],
            yerr=[r["auc_protected_std"] for r in rows], marker="s", label=label,
        )
    ticks = list(range(len(ts_values)))
    tick_labels = [_eps_label(v) for v in ts_values]
    for ax in (ax_eer, ax_auc):
        ax.set_xticks(ticks)
        ax.set_xticklabels(tick_labels)
        ax.set_xlabel("test privacy budget")
        ax.grid(True, alpha=0.3)
    ax_eer.set_ylabel("ASV EER (%)")
    ax_auc.set_ylabel("gender classification AUC")
    ax_auc.set_ylim(0.0, 1.05)
    ax_auc.legend(loc="best", fontsize=8)
    fig.suptitle("privacy/utility vs test budget")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_sweep_figures(aggregates: list[dict], out_dir) -> list[Path]:
    """Write both figures next to the sweep CSVs; returns the created paths."""
    out_dir = Path(out_dir)
    created = []
    p = render_train_budget_figure(aggregates, out_dir / "fig_train_budget.png")
    if p is not None:
        created.append(p)
    p = render_test_budget_figure(aggregates, out_dir / "fig_test_budget.png")
    if p is not None:
        created.append(p)
    return created
