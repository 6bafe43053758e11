"""Render evaluation results as text tables, CSV files, and PNG figures.

The matplotlib backend is pinned to Agg so figure bytes do not depend on
the display stack of the machine running the job.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

ACCURACY_ROWS = ("all", "1", "2", "3")


def _metric_value(metrics, row):
    if row == "all":
        return metrics.overall
    return metrics.by_card.get(int(row), float("nan"))


def _oracle_value(metrics, card):
    return metrics.oracle_by_card.get(card, float("nan"))


def format_eval_table(report, model_order=None):
    """Fixed-width accuracy table, one column per model."""
    order = list(model_order or report.per_model)
    width = max(10, *(len(name) + 2 for name in order))
    header = "metric".ljust(22) + "".join(name.rjust(width) for name in order)
    rule = "-" * len(header)
    lines = [header, rule]

    def add(label, getter):
        row = label.ljust(22)
        for name in order:
            value = getter(report.per_model[name])
            cell = "n/a" if np.isnan(value) else f"{100.0 * value:.1f}"
            row += cell.rjust(width)
        lines.append(row)

    for row_key in ACCURACY_ROWS:
        if row_key != "all" and all(
            int(row_key) not in report.per_model[name].by_card for name in order
        ):
            continue
        label = "set id acc" if row_key == "all" else f"set id acc |T|={row_key}"
        add(label, lambda m, rk=row_key: _metric_value(m, rk))
    add("size acc", lambda m: m.size)
    for card in report.cards:
        add(f"oracle acc |T|={card}", lambda m, c=card: _oracle_value(m, c))
    lines.append(rule)
    lines.append(f"examples scored: {report.n_examples}")
    return "\n".join(lines) + "\n"


def write_eval_csv(report, path, model_order=None):
    order = list(model_order or report.per_model)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + order)
        for row_key in ACCURACY_ROWS:
            if row_key != "all" and all(
                int(row_key) not in report.per_model[name].by_card for name in order
            ):
                continue
            label = "set_id_accuracy" if row_key == "all" else f"set_id_accuracy_card{row_key}"
            writer.writerow(
                [label]
                + [f"{_metric_value(report.per_model[name], row_key):.6f}" for name in order]
            )
        writer.writerow(
            ["size_accuracy"] + [f"{report.per_model[name].size:.6f}" for name in order]
        )
        for card in report.cards:
            writer.writerow(
                [f"oracle_accuracy_card{card}"]
                + [f"{_oracle_value(report.per_model[name], card):.6f}" for name in order]
            )


def plot_eval_figure(report, path, model_order=None, dpi=120):
    """Grouped bars: per-cardinality set-id accuracy for each model."""
    order = list(model_order or report.per_model)
    cards = list(report.cards)
    x = np.arange(len(cards), dtype=float)
    group = 0.8
    bar_w = group / max(len(order), 1)

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for i, name in enumerate(order):
        metrics = report.per_model[name]
        heights = [100.0 * metrics.by_card.get(c, 0.0) for c in cards]
        ax.bar(x - group / 2 + (i + 0.5) * bar_w, heights, bar_w * 0.92, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels([f"|T|={c}" for c in cards])
    ax.set_ylabel("set identification accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="upper right", fontsize=9)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def format_der_table(per_strategy):
    """per_strategy: mapping of strategy name to list of DER values."""
    header = "strategy".ljust(26) + "mean DER".rjust(10) + "std".rjust(9) + "streams".rjust(9)
    rule = "-" * len(header)
    lines = [header, rule]
    for name, values in per_strategy.items():
        arr = np.asarray(values, dtype=np.float64)
        lines.append(
            name.ljust(26)
            + f"{100.0 * arr.mean():.2f}".rjust(10)
            + f"{100.0 * arr.std():.2f}".rjust(9)
            + f"{arr.size}".rjust(9)
        )
    lines.append(rule)
    return "\n".join(lines) + "\n"


def write_der_summary_csv(per_strategy, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "mean_der", "std_der", "n_streams"])
        for name, values in per_strategy.items():
            arr = np.asarray(values, dtype=np.float64)
            writer.writerow([name, f"{arr.mean():.6f}", f"{arr.std():.6f}", arr.size])


def write_der_stream_csv(rows, path):
    """rows: (stream_index, strategy, der, miss, false_alarm, confusion)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stream", "strategy", "der", "miss", "false_alarm", "confusion"])
        for stream_idx, strategy, der, miss, fa, conf in rows:
            writer.writerow(
                [stream_idx, strategy, f"{der:.6f}", f"{miss:.6f}", f"{fa:.6f}", f"{conf:.6f}"]
            )


def plot_der_figure(per_strategy, path, dpi=120):
    names = list(per_strategy)
    means = [100.0 * float(np.mean(per_strategy[n])) for n in names]
    stds = [100.0 * float(np.std(per_strategy[n])) for n in names]

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    x = np.arange(len(names), dtype=float)
    ax.bar(x, means, 0.6, yerr=stds, capsize=4)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=9)
    ax.set_ylabel("diarization error rate (%)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def write_train_log_csv(log, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_index", "loss", "val_accuracy"])
        for row in log:
            val = "" if row.val_accuracy is None else f"{row.val_accuracy:.6f}"
            writer.writerow([row.episode, f"{row.loss:.6f}", val])


def plot_training_curve(log, path, dpi=120):
    episodes = [row.episode for row in log]
    losses = [row.loss for row in log]
    val_points = [(row.episode, row.val_accuracy) for row in log if row.val_accuracy is not None]

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(episodes, losses, lw=0.8, alpha=0.6, label="episode loss")
    if len(losses) >= 50:
        kernel = np.ones(50) / 50.0
        smooth = np.convolve(np.asarray(losses, dtype=np.float64), kernel, mode="valid")
        ax.plot(episodes[49:], smooth, lw=1.6, label="loss (50-episode mean)")
    ax.set_xlabel("training episode")
    ax.set_ylabel("triplet loss")
    ax.grid(alpha=0.3)
    if val_points:
        ax2 = ax.twinx()
        ax2.plot(
            [p[0] for p in val_points],
            [100.0 * p[1] for p in val_points],
            "o-",
            color="tab:red",
            ms=3,
            lw=1.0,
            label="val accuracy",
        )
        ax2.set_ylabel("validation accuracy (%)")
        ax2.set_ylim(0, 100)
    ax.legend(loc="upper right", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
