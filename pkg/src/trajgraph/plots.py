"""Minimal SVG line plots for trajectories; no plotting dependency."""

from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#17becf"]


def _polyline(points: np.ndarray, color: str, width: float, opacity: float = 1.0,
              dashed: bool = False) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    dash = ' stroke-dasharray="4 3"' if dashed else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}" stroke-opacity="{opacity}"{dash}/>')


def trajectory_svg(truth: np.ndarray, samples: list[np.ndarray], t_history: int,
                   path, size: int = 480, margin: int = 20):
    """Render one scene: dashed history, solid truth, faint sampled futures.

    truth: (N, T, 2); each sample: (N, T_f, 2), same units as truth.
    """
    path = Path(path)
    allpts = [truth.reshape(-1, 2)] + [s.reshape(-1, 2) for s in samples]
    flat = np.concatenate(allpts)
    lo = flat.min(axis=0)
    hi = flat.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)

    def to_px(xy):
        scaled = (xy - lo) / span
        return np.stack([margin + scaled[:, 0] * (size - 2 * margin),
                         size - margin - scaled[:, 1] * (size - 2 * margin)],
                        axis=1)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    n_agents = truth.shape[0]
    for i in range(n_agents):
        color = PALETTE[i % len(PALETTE)]
        for s in samples:
            seg = np.concatenate([truth[i, t_history - 1:t_history], s[i]])
            parts.append(_polyline(to_px(seg), color, 1.0, opacity=0.3))
        parts.append(_polyline(to_px(truth[i, :t_history]), color, 1.5,
                               dashed=True))
        parts.append(_polyline(to_px(truth[i, t_history - 1:]), color, 2.0))
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
