"""Matplotlib renderings of training and allocator telemetry.

Import cost stays out of the library path: pyplot loads only when a
figure is actually drawn, always on the file-writing Agg backend.
"""


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def training_curves(history, path):
    """Per-epoch loss and accuracy curves from fit() records."""
    if not history:
        raise ValueError("history is empty")
    plt = _pyplot()
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], marker="o", label="train")
    if "test_loss" in history[0]:
        ax_loss.plot(epochs, [r["test_loss"] for r in history], marker="s", label="test")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [r["train_accuracy"] for r in history], marker="o", label="train")
    if "test_accuracy" in history[0]:
        ax_acc.plot(epochs, [r["test_accuracy"] for r in history], marker="s", label="test")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def bench_bars(report, path):
    """Stacked per-phase seconds for each benchmarked backend."""
    runs = report.get("runs", [])
    if not runs:
        raise ValueError("report has no runs")
    plt = _pyplot()
    phases = ["data", "forward", "backward", "step"]
    labels = [run["backend"] for run in runs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottom = [0.0] * len(runs)
    for phase in phases:
        values = [run["phases"][phase] for run in runs]
        ax.bar(labels, values, bottom=bottom, label=phase)
        bottom = [b + v for b, v in zip(bottom, values)]
    ax.set_ylabel("seconds")
    ax.set_title(f"{report['model']} batch {report['batch']}, {report['iters']} iterations")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def replay_timelines(results, path):
    """Live granted bytes and internal fragmentation per replayed policy."""
    if not results:
        raise ValueError("no replay results")
    plt = _pyplot()
    fig, (ax_live, ax_frag) = plt.subplots(1, 2, figsize=(10, 3.5))
    for result in results:
        steps = [row[0] for row in result.timeline]
        ax_live.plot(steps, [row[2] for row in result.timeline], label=result.policy)
        ax_frag.plot(steps, [row[3] for row in result.timeline], label=result.policy)
    ax_live.set_xlabel("event")
    ax_live.set_ylabel("live granted bytes")
    ax_live.legend()
    ax_frag.set_xlabel("event")
    ax_frag.set_ylabel("internal fragmentation (bytes)")
    ax_frag.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
