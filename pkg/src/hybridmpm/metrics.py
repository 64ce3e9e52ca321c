"""Evaluation metrics: channel PSNR, divergence max norm, interacting complexity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .grid import Label, SimGrid
from .pressure import cell_divergence

PSNR_CAP = 99.0
BETA_MIN = 0.1
QUIESCENT = -math.inf
SKIP_FRAMES = 50

# cells whose fluid velocity is constrained to be divergence free
DIVERGENCE_LABELS = (Label.FLUID, Label.SLIP, Label.FREE_SURFACE)


def psnr(truth, pred, peak=None):
    """10 lg(peak / MSE) with the peak not squared; MSE == 0 gives the cap."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.size == 0:
        raise ValueError("psnr of an empty field")
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch {truth.size} vs {pred.size}")
    if peak is None:
        peak = float(np.max(np.abs(truth)))
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((truth - pred) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak / mse))


def field_psnr(truth_fields, pred_fields):
    """Per-channel PSNR of (fluid + slip, solid, interface) field vectors.

    Channels with no entries, or whose truth is identically zero, are None.
    """
    pairs = {
        "psnr_f": (np.concatenate([truth_fields.p_fluid, truth_fields.y_slip]),
                   np.concatenate([pred_fields.p_fluid, pred_fields.y_slip])),
        "psnr_s": (truth_fields.p_solid, pred_fields.p_solid),
        "psnr_i": (truth_fields.h_interface, pred_fields.h_interface),
    }
    out = {}
    for name, (t, p) in pairs.items():
        if len(t) == 0 or not np.any(t):
            out[name] = PSNR_CAP if len(t) and np.array_equal(t, p) else None
        else:
            out[name] = psnr(t, p)
    return out


def divergence_max(grid: SimGrid, labels=DIVERGENCE_LABELS):
    """Max |div v_f| over fluid cells, in 1/time; 0 if there are none."""
    mask = np.isin(grid.labels, labels)
    if not mask.any():
        return 0.0
    return float(np.abs(cell_divergence(grid, "fluid")[mask]).max())


def zeta_from_stats(beta, gamma, active_fraction, mean_speed):
    """Interacting complexity from the active-cell fraction and mean speed."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    arg = max(beta, BETA_MIN) * gamma * active_fraction * mean_speed
    return math.log10(arg) if arg > 0 else QUIESCENT


def interacting_complexity(beta, gamma, grid: SimGrid):
    """lg(beta * gamma * sum of per-cell speeds over labelled cells / cell count)."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    sf = grid.cell_speed("fluid")
    ss = grid.cell_speed("solid")
    lab = grid.labels
    fluid = np.isin(lab, (Label.FLUID, Label.SLIP, Label.FREE_SURFACE))
    total = sf[fluid].sum() + ss[lab == Label.SOLID].sum()
    inter = lab == Label.INTERFACE
    total += 0.5 * (sf[inter] + ss[inter]).sum()
    arg = max(beta, BETA_MIN) * gamma * total / lab.size
    return math.log10(arg) if arg > 0 else QUIESCENT


def is_quiescent(zeta):
    return zeta == QUIESCENT


@dataclass
class FrameMetrics:
    frame_index: int
    psnr_f: float | None = None
    psnr_s: float | None = None
    psnr_i: float | None = None
    div_max: float = 0.0
    zeta: float = QUIESCENT


def summarize(rows, skip=SKIP_FRAMES):
    """Mean of each metric over frames at or after ``skip``; None-valued entries are ignored."""
    rows = [r if isinstance(r, dict) else asdict(r) for r in rows]
    kept = [r for r in rows if r.get("frame_index", r.get("frame", 0)) >= skip]
    keys = [k for k in (kept[0] if kept else {}) if k not in ("frame_index", "frame")]
    out = {"frames": len(kept), "skipped": len(rows) - len(kept)}
    for k in keys:
        vals = [r[k] for r in kept if r[k] is not None and r[k] != "" and np.isfinite(float(r[k]))]
        out[k] = float(np.mean([float(v) for v in vals])) if vals else None
    return out


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    conv = {"frame": int, "refine_iters": int, "phase": str}
    return [{k: (None if v == "" else conv.get(k, float)(v)) for k, v in r.items()} for r in rows]
