"""Figures derived from a run's summary.csv."""

from pathlib import Path

import pandas as pd


def plot_summary(run_dir, filename=None):
    """Plot mean test metric against round and against cumulative traffic.

    Parameters
    ----------
    run_dir : str or Path
        Directory holding ``summary.csv``.
    filename : str or Path, optional
        Output image, ``<run_dir>/summary.png`` by default.

    Returns
    -------
    Path
        Where the figure was saved.
    """

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    summary = pd.read_csv(run_dir / "summary.csv")
    filename = run_dir / "summary.png" if filename is None else Path(filename)

    fig, (by_round, by_bytes) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for column, label in [
        ("mean_test_metric_uniform", "uniform mean"),
        ("mean_test_metric_weighted", "weighted mean"),
    ]:
        by_round.plot(summary["round"], summary[column], marker="o", label=label)
        # MBits, the usual unit for communication cost
        by_bytes.plot(summary["cumulative_bytes"] * 8 / 1e6, summary[column], marker="o", label=label)
    by_round.set_xlabel("round")
    by_round.set_ylabel("local test metric")
    by_bytes.set_xlabel("communication [MBits]")
    by_round.legend()
    fig.tight_layout()
    fig.savefig(filename)
    plt.close(fig)
    return filename
