"""
Plotting functions for the Continual Unlearning Platform
"""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from unlearning.errors import DataError
from .theme_colors import COLORS, get_metric_color
from .utils import ensure_parent_directory

# Fixed salt so SVG element ids do not change between runs
SVG_HASH_SALT = "continual-unlearning"

METRIC_LABELS = {
    "crr": "CRR",
    "rr": "RR",
    "ar": "AR",
    "specificity": "Specificity / 100",
}


def generate_metrics_plot(metrics_df, filename, title="Unlearning metrics per step"):
    """Line plot of CRR, RR, AR and Specificity/100 over unlearning steps, saved as SVG."""
    if metrics_df.empty:
        raise DataError("no metric rows to plot")
    steps = metrics_df["step"].to_numpy()

    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4))
        for column, label in METRIC_LABELS.items():
            values = metrics_df[column].to_numpy()
            if column == "specificity":
                values = values / 100.0
            ax.plot(steps, values, marker="o", linewidth=2, label=label, color=get_metric_color(column))

        ax.set_title(title)
        ax.set_xlabel("Unlearning step")
        ax.set_ylabel("Rate")
        ax.set_xticks(steps)
        ax.set_ylim(-0.02, 1.05)
        ax.grid(True, color=COLORS["neutral"]["gray"]["300"], linewidth=0.5)
        ax.legend(loc="lower left")
        fig.tight_layout()

        ensure_parent_directory(filename)
        try:
            fig.savefig(filename, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise DataError(f"cannot write {filename}: {exc}") from None
        finally:
            plt.close(fig)
    return filename
