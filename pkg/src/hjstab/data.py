"""Dataset container and its on-disk directory layout.

Layout::

    meta.json             dims, dt, split, normalization stats, seed
    seq_<i>_u.csv         input signal (t, ch0, ...)
    seq_<i>_y.csv         output signal
    seq_<i>_x0.csv        initial state of the generating system
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulation import read_signal_csv, write_signal_csv


@dataclass
class Dataset:
    dt: float
    x0: np.ndarray  # (N, n0)
    u: np.ndarray  # (N, T, m)
    y: np.ndarray  # (N, T, l)
    split: dict[str, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.u.ndim != 3 or self.y.ndim != 3:
            raise ValueError("u and y must be (N, T, channels)")
        if not (len(self.x0) == len(self.u) == len(self.y)):
            raise ValueError("x0, u and y disagree on the number of sequences")
        if self.u.shape[1] != self.y.shape[1]:
            raise ValueError("u and y disagree on the step count")
        if not self.split:
            self.split = make_split(len(self.u), seed=int(self.meta.get("seed", 0)))

    def __len__(self) -> int:
        return len(self.u)

    @property
    def steps(self) -> int:
        return self.u.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[2]

    @property
    def l(self) -> int:
        return self.y.shape[2]

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
        idx = list(self.split[name])
        return self.x0[idx], self.u[idx], self.y[idx], idx

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        meta.update({
            "dt": self.dt,
            "n_sequences": len(self),
            "steps": self.steps,
            "dims": {"n0": self.x0.shape[1], "m": self.m, "l": self.l},
            "split": {k: [int(i) for i in v] for k, v in self.split.items()},
        })
        with open(out_dir / "meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for i in range(len(self)):
            write_signal_csv(out_dir / f"seq_{i}_u.csv", self.u[i], self.dt)
            write_signal_csv(out_dir / f"seq_{i}_y.csv", self.y[i], self.dt)
            with open(out_dir / f"seq_{i}_x0.csv", "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"ch{j}" for j in range(self.x0.shape[1])])
                w.writerow([repr(float(v)) for v in self.x0[i]])
        return out_dir

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        data_dir = Path(data_dir)
        with open(data_dir / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        n = int(meta["n_sequences"])
        u = np.stack([read_signal_csv(data_dir / f"seq_{i}_u.csv") for i in range(n)])
        y = np.stack([read_signal_csv(data_dir / f"seq_{i}_y.csv") for i in range(n)])
        x0 = np.stack([np.loadtxt(data_dir / f"seq_{i}_x0.csv", delimiter=",", skiprows=1, ndmin=1)
                       for i in range(n)])
        split = meta.pop("split")
        dt = float(meta.pop("dt"))
        for key in ("n_sequences", "steps", "dims"):
            meta.pop(key, None)
        return cls(dt, x0.reshape(n, -1), u, y, split, meta)


def make_split(n: int, seed: int = 0, test_frac: float = 0.1, val_frac: float = 0.1) -> dict[str, list[int]]:
    """Seeded 90/10 train/test split with validation carved from the 90%."""
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_test = int(round(test_frac * n))
    if n - n_test < 1:
        n_test = 0
    pool, test = perm[: n - n_test], perm[n - n_test:]
    n_val = int(round(val_frac * len(pool)))
    if len(pool) - n_val < 1:
        n_val = 0
    val, train = pool[:n_val], pool[n_val:]
    return {"train": sorted(map(int, train)), "val": sorted(map(int, val)), "test": sorted(map(int, test))}
