"""Training-curve plots written as a JSON data file plus a PNG rendered from it."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .fed.core import RoundMetrics


def curve_data(metrics: Sequence[RoundMetrics]) -> dict:
    return {
        "round": [m.round for m in metrics],
        "mean_train_loss": [m.to_record()["mean_train_loss"] for m in metrics],
        "knn_round": [m.round for m in metrics if m.knn_accuracy is not None],
        "knn_accuracy": [m.knn_accuracy for m in metrics if m.knn_accuracy is not None],
    }


def render(data: dict, png_path, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_knn) = plt.subplots(1, 2, figsize=(9, 3.5))
    rounds = [r for r, v in zip(data["round"], data["mean_train_loss"]) if v is not None]
    losses = [v for v in data["mean_train_loss"] if v is not None]
    ax_loss.plot(rounds, losses, marker=".")
    ax_loss.set_xlabel("round")
    ax_loss.set_ylabel("mean client SSL loss")
    ax_knn.plot(data["knn_round"], data["knn_accuracy"], marker="o", color="tab:green")
    ax_knn.set_xlabel("round")
    ax_knn.set_ylabel("KNN accuracy")
    ax_knn.set_ylim(0, 1)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    png_path = Path(png_path)
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    return png_path


def write_curves(out_dir, metrics: Sequence[RoundMetrics], title: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = curve_data(metrics)
    data_path = out_dir / "curves.json"
    data_path.write_text(json.dumps(data, sort_keys=True) + "\n")
    return data_path, render(data, out_dir / "curves.png", title)


def replot(data_path, png_path=None, title: str = "") -> Path:
    data_path = Path(data_path)
    data = json.loads(data_path.read_text())
    return render(data, png_path or data_path.with_suffix(".png"), title)
