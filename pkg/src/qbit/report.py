"""Figure rendering for the CLI report paths.  Every figure is written next
to the delimited output it visualizes."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_sweep_figure(rows: list[dict], precisions: list[str], path) -> None:
    """Metric-vs-precision curves, one line per schedule family.

    ``rows`` are the sweep CSV records (precision, seed, schedule,
    task_metric, distill_mse); failed cells (empty metrics) are skipped.
    Lines follow the median across seeds, individual seeds are scattered.
    """
    schedules = sorted({r["schedule"] for r in rows})
    x_of = {p: i for i, p in enumerate(precisions)}
    fig, (ax_task, ax_mse) = plt.subplots(1, 2, figsize=(10, 4))

    for sched in schedules:
        for ax, key in ((ax_task, "task_metric"), (ax_mse, "distill_mse")):
            per_precision: dict[str, list[float]] = {p: [] for p in precisions}
            for r in rows:
                if r["schedule"] == sched and r.get(key) not in (None, ""):
                    per_precision[r["precision"]].append(float(r[key]))
            xs = [x_of[p] for p in precisions if per_precision[p]]
            medians = [sorted(per_precision[p])[len(per_precision[p]) // 2]
                       for p in precisions if per_precision[p]]
            ax.plot(xs, medians, marker="o", label=sched)
            for p in precisions:
                ax.scatter([x_of[p]] * len(per_precision[p]), per_precision[p],
                           s=8, alpha=0.35)

    for ax, title in ((ax_task, "masked-prediction accuracy"),
                      (ax_mse, "output MSE to teacher")):
        ax.set_xticks(range(len(precisions)))
        ax.set_xticklabels(precisions)
        ax.set_xlabel("precision")
        ax.set_title(title)
        ax.legend(fontsize=8)
    ax_mse.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_fixture_figure(checks, path) -> None:
    """Printed vs recomputed runtime per table row, colored pass/fail."""
    names = [c.name for c in checks]
    printed = [c.runtime_printed for c in checks]
    computed = [c.runtime_computed for c in checks]
    colors = ["tab:green" if c.ok else "tab:red" for c in checks]

    fig, ax = plt.subplots(figsize=(7, 0.35 * len(checks) + 1.5))
    y = range(len(checks))
    ax.scatter(printed, y, marker="|", s=160, color="black", label="printed")
    ax.scatter(computed, y, marker="o", s=28, c=colors, label="recomputed")
    ax.set_yticks(list(y))
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("relative runtime (x)")
    ax.set_title("runtime column reproduction")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
