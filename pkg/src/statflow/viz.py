"""Flow visualization: PCA projection of statistical vs synthetic flows.

A single PCA basis is fitted on the union of both flow sets; each class
contributes one arrow per set. The machine-readable CSV keeps cosines on
a 0-1 scale, the plot annotation uses 0-100 to match how such summaries
are usually quoted.
"""

from __future__ import annotations

import os

import numpy as np

from . import flows
from .errors import ValidationError
from .statistics import StatFlow
from .tensorio import atomic_write_text


def pca_fit(rows: np.ndarray, dims: int = 2):
    """Return (mean, components) of a PCA fit; components is (dims, F)."""
    mu = rows.mean(axis=0)
    centered = rows - mu
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return mu, vt[:dims]


def emit_flow_plot(stats_flow, synthetic_flow: np.ndarray, k_classes: int,
                   out_prefix: str) -> dict:
    """Write <prefix>.png and <prefix>.csv; returns a cosine summary.

    stats_flow may be a StatFlow or a raw (C, F) matrix. Arrows are drawn
    for the first k_classes classes, the cosine summary covers all.
    """
    a = stats_flow.matrix if isinstance(stats_flow, StatFlow) else np.asarray(stats_flow)
    b = np.asarray(synthetic_flow)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"flow shapes differ: {a.shape} vs {b.shape}")
    c = a.shape[0]
    if not 1 <= k_classes <= c:
        raise ValidationError(f"k_classes must lie in [1, {c}]")

    mu, comps = pca_fit(np.vstack([a, b]))
    pa = (a - mu) @ comps.T
    pb = (b - mu) @ comps.T
    cos = flows.per_class_cosine(a, b)
    mean_cos = float(cos.mean())

    lines = ["class,stat_x,stat_y,syn_x,syn_y,cosine"]
    for ci in range(c):
        vals = [float(pa[ci, 0]), float(pa[ci, 1]),
                float(pb[ci, 0]), float(pb[ci, 1]), float(cos[ci])]
        lines.append(f"{ci}," + ",".join(repr(v) for v in vals))
    lines.append(f"mean,,,,,{mean_cos!r}")
    atomic_write_text(out_prefix + ".csv", "\n".join(lines) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    for ci in range(k_classes):
        ax.annotate("", xy=tuple(pa[ci]), xytext=(0, 0),
                    arrowprops=dict(arrowstyle="->", color="tab:blue", lw=1.4))
        ax.annotate("", xy=tuple(pb[ci]), xytext=(0, 0),
                    arrowprops=dict(arrowstyle="->", color="tab:orange", lw=1.4))
        ax.text(*pa[ci], str(ci), fontsize=7, color="tab:blue")
    span = 1.1 * max(np.abs(pa[:k_classes]).max(), np.abs(pb[:k_classes]).max(), 1e-9)
    ax.set_xlim(-span, span)
    ax.set_ylim(-span, span)
    ax.set_title(
        f"statistical (blue) vs synthetic (orange) flows\n"
        f"mean cosine similarity: {100 * mean_cos:.1f}"
    )
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out_prefix + ".png", dpi=120)
    plt.close(fig)

    return {
        "mean_cosine": mean_cos,
        "per_class_cosine": cos,
        "csv": out_prefix + ".csv",
        "png": out_prefix + ".png",
    }
