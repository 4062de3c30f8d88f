"""Static per-clip timeline figures."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_clip(out_path: str | Path, clip_id: str, frame_scores, segments, coarse=(), fine=(),
              boundary_scores=None, frame_period_s: float = 0.02, theta_f: float = 0.5) -> Path:
    """Frame-score curve over ground-truth, coarse and fine proposal tracks."""
    y = np.asarray(frame_scores, dtype=float)
    t = (np.arange(len(y)) + 0.5) * frame_period_s
    fig, (ax, lanes) = plt.subplots(2, 1, figsize=(9, 3.6), sharex=True,
                                    gridspec_kw={"height_ratios": [2.2, 1]})
    ax.plot(t, y, color="tab:red", lw=1.2, label="frame score")
    if boundary_scores is not None:
        ax.plot(t, np.asarray(boundary_scores, dtype=float), color="tab:purple", lw=0.8,
                alpha=0.7, label="boundary score")
    ax.axhline(theta_f, color="grey", ls="--", lw=0.8)
    for s in segments:
        ax.axvspan(s["start_s"], s["start_s"] + s["dur_s"], color="tab:orange", alpha=0.15)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("score")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_title(clip_id, fontsize=9)

    rows = [("ground truth", segments, "tab:orange"), ("coarse", coarse, "tab:blue"),
            ("fine", fine, "tab:green")]
    for k, (name, items, color) in enumerate(rows):
        lane = len(rows) - 1 - k
        for it in items:
            alpha = 0.35 + 0.65 * float(it.get("score") or 1.0)
            lanes.broken_barh([(it["start_s"], it["dur_s"])], (lane + 0.15, 0.7),
                              color=color, alpha=min(alpha, 1.0))
    lanes.set_yticks([len(rows) - 1 - k + 0.5 for k in range(len(rows))])
    lanes.set_yticklabels([r[0] for r in rows], fontsize=7)
    lanes.set_ylim(0, len(rows))
    lanes.set_xlabel("time (s)")
    lanes.set_xlim(0, max(len(y) * frame_period_s, 1e-3))
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
