"""Discrete L2 norms, RMSE and the dataset-average input/output gain."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def l2_norm(values, dt: float | None = None) -> float:
    """sqrt(sum_t ||x_t||^2 * dt) for a (T, d) array (or a Signal)."""
    if hasattr(values, "values") and hasattr(values, "dt"):
        values, dt = values.values, values.dt
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty signal")
    if dt is None:
        raise ValueError("dt is required for raw arrays")
    return float(np.sqrt(np.sum(v * v) * dt))


def _batch_l2(x: np.ndarray, dt: float) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=(-1, -2)) * dt)


def rmse(y: np.ndarray, y_hat: np.ndarray, dt: float) -> float:
    """sqrt(mean_i ||y_i - y_hat_i||^2_L2) over a (N, T, l) batch."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.ndim == 2:
        y, y_hat = y[None], y_hat[None]
    return float(np.sqrt(np.mean(_batch_l2(y - y_hat, dt) ** 2)))


def gain_io(u: np.ndarray, y: np.ndarray, dt: float) -> tuple[float, int]:
    """Mean of ||y_i|| / ||u_i||; zero-input sequences are skipped.

    Returns ``(gain, n_excluded)``.  The dt factor cancels in each ratio.
    """
    u, y = np.asarray(u, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if u.ndim == 2:
        u, y = u[None], y[None]
    nu, ny = _batch_l2(u, dt), _batch_l2(y, dt)
    keep = nu > 0
    excluded = int((~keep).sum())
    if not keep.any():
        return float("nan"), excluded
    return float(np.mean(ny[keep] / nu[keep])), excluded


@dataclass
class EvalReport:
    rmse: float
    gain_io_pred: float
    gain_io_data: float
    gain_io_error: float
    n_sequences: int
    n_zero_input: int = 0
    per_sequence: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_sequence")
        return d

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        j = out_dir / "report.json"
        with open(j, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        c = out_dir / "per_sequence.csv"
        cols = ["index", "l2_y", "l2_y_hat", "l2_u", "error_l2", "gain_data", "gain_pred"]
        with open(c, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.per_sequence:
                w.writerow([row[k] if k == "index" else repr(float(row[k])) for k in cols])
        return j, c


def evaluate_predictions(u, y, y_hat, dt: float, indices: Sequence[int] | None = None) -> EvalReport:
    """Metrics for a batch of (N, T, .) inputs, targets and predictions."""
    u, y, y_hat = (np.asarray(a, dtype=np.float64) for a in (u, y, y_hat))
    g_pred, excluded = gain_io(u, y_hat, dt)
    g_data, _ = gain_io(u, y, dt)
    lu, ly, lyh = _batch_l2(u, dt), _batch_l2(y, dt), _batch_l2(y_hat, dt)
    err = _batch_l2(y - y_hat, dt)
    idx = list(range(len(u))) if indices is None else list(indices)
    rows = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(len(u)):
            rows.append({
                "index": int(idx[i]), "l2_y": ly[i], "l2_y_hat": lyh[i], "l2_u": lu[i], "error_l2": err[i],
                "gain_data": ly[i] / lu[i] if lu[i] > 0 else float("nan"),
                "gain_pred": lyh[i] / lu[i] if lu[i] > 0 else float("nan"),
            })
    return EvalReport(
        rmse=rmse(y, y_hat, dt),
        gain_io_pred=g_pred,
        gain_io_data=g_data,
        gain_io_error=abs(g_data - g_pred),
        n_sequences=len(u),
        n_zero_input=excluded,
        per_sequence=rows,
    )
