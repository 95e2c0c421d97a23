"""Power-curve and QQ figures written straight to SVG files.

The SVG output is byte-stable: no date metadata and a fixed id salt.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "latentgraph",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def power_plot(series, path, xlabel="off-diagonal value", alpha=None, title=None):
    """``series`` maps a legend label to ``(x, rejection_rate)`` sequences."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label in sorted(series):
            x, y = series[label]
            order = np.argsort(x)
            ax.plot(np.asarray(x)[order], np.asarray(y)[order], marker="o", label=label)
        if alpha is not None:
            ax.axhline(alpha, color="0.5", linestyle=":", linewidth=0.8)
        ax.set_ylim(0, 1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("rejection rate")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="upper left")
        fig.tight_layout()
        _save(fig, path)


def qq_plot(samples, path, ks=None):
    """Uniform QQ plot; ``samples`` maps a label to p-values, ``ks`` to KS p-values."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.plot([0, 1], [0, 1], color="0.5", linestyle=":", linewidth=0.8)
        for label in sorted(samples):
            p = np.sort(np.asarray(samples[label], dtype=float))
            theo = (np.arange(1, p.size + 1) - 0.5) / p.size
            text = label if ks is None or label not in ks else f"{label} (KS p={ks[label]:.3g})"
            ax.plot(theo, p, marker=".", linestyle="none", label=text)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("uniform quantile")
        ax.set_ylabel("p-value quantile")
        ax.legend(frameon=False, loc="upper left")
        fig.tight_layout()
        _save(fig, path)
