"""Report figures and CSV tables.

Figures go through the Agg backend with the PNG metadata stripped so the
same inputs give the same bytes.
"""

from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="png", dpi=100, metadata=PNG_META)
    plt.close(fig)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


def reward_curves(history: list[dict], path, title: str = "") -> None:
    """Training loss per epoch with validation accuracy on a second axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["loss"] for h in history], color="tab:blue", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    acc = [(h["epoch"], h["val_accuracy"]) for h in history if h["val_accuracy"] is not None]
    if acc:
        ax2 = ax.twinx()
        ax2.plot(*zip(*acc), color="tab:red", marker="o", ms=3, lw=1)
        ax2.set_ylabel("validation accuracy", color="tab:red")
        ax2.set_ylim(0, 1.02)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def policy_curves(history: list[dict], path, title: str = "",
                  baseline_hpwl: float | None = None) -> None:
    """Mean final HPWL and boundary fraction per PPO update."""
    rows = [h for h in history if "mean_hpwl" in h]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    u = [h["update"] for h in rows]
    a.plot(u, [h["mean_hpwl"] for h in rows], lw=1)
    if baseline_hpwl is not None:
        a.axhline(baseline_hpwl, color="gray", ls="--", lw=1, label="uniform policy")
        a.legend(loc="upper right", fontsize=8)
    a.set_xlabel("update")
    a.set_ylabel("mean final HPWL")
    b.plot(u, [h["mean_periphery"] for h in rows], color="tab:green", lw=1)
    b.set_ylim(-0.02, 1.02)
    b.set_xlabel("update")
    b.set_ylabel("boundary fraction")
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def accuracy_bars(rows: list[dict], path, chance: float | None = None) -> None:
    """Grouped bars: one group per design, one bar per reward model."""
    designs = list(dict.fromkeys(r["design"] for r in rows))
    models = list(dict.fromkeys(r["model"] for r in rows))
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(designs), 3.5))
    for j, m in enumerate(models):
        xs, ys = [], []
        for i, d in enumerate(designs):
            for r in rows:
                if r["design"] == d and r["model"] == m:
                    xs.append(i + (j - (len(models) - 1) / 2) * width)
                    ys.append(r["accuracy"])
        ax.bar(xs, ys, width=width, label=m)
    if chance is not None:
        ax.axhline(chance, color="gray", ls="--", lw=1, label="chance")
    ax.set_xticks(range(len(designs)), designs, rotation=20, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("reward accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def policy_hist(results: dict[str, list[float]], path, xlabel: str = "final HPWL") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in results.items():
        ax.hist(vals, bins=20, alpha=0.6, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("episodes")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
