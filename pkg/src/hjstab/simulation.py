"""Explicit Euler rollout with optional state clipping, plus step-input probes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .projection import modified_vector_field


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"state became non-finite at step {step}")


@dataclass
class Signal:
    """Uniformly sampled multichannel series, ``values`` of shape (T, d)."""

    dt: float
    values: np.ndarray
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("signal values must be a non-empty (T, d) array")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.isfinite(v).all():
            raise ValueError("signal contains non-finite values")
        self.values = v
        if not self.labels:
            self.labels = [f"ch{i}" for i in range(v.shape[1])]
        if len(self.labels) != v.shape[1]:
            raise ValueError("one label per channel required")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt


def write_signal_csv(path, values: np.ndarray, dt: float) -> None:
    """CSV with header ``t,ch0,ch1,...``; '.' decimals and LF endings."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"ch{i}" for i in range(values.shape[1])])
        for i, row in enumerate(values):
            w.writerow([repr(float(i * dt))] + [repr(float(v)) for v in row])


def read_signal_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:]


def save_signal(path, sig: Signal) -> None:
    """Write ``<path>`` as CSV and ``<path>.meta.json`` with dt and labels."""
    path = Path(path)
    write_signal_csv(path, sig.values, sig.dt)
    with open(path.with_suffix(path.suffix + ".meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"dt": sig.dt, "labels": sig.labels, "steps": sig.steps}, fh, indent=2)
        fh.write("\n")


def load_signal(path) -> Signal:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return Signal(meta["dt"], read_signal_csv(path), meta["labels"])


@dataclass
class RolloutConfig:
    dt: float
    steps: int | None = None
    clip_bound: float | None = 10.0
    record_states: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.clip_bound is not None and not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")


Field = Callable[[Tensor, Tensor], tuple[Tensor, Tensor]]


def euler_rollout(x0, u, field: Field, cfg: RolloutConfig):
    """Integrate x_{t+1} = x_t + dt * xdot(x_t, u_t) with y_t read at x_t.

    ``x0`` has shape (n,) or (B, n); ``u`` is a :class:`Signal`, a (T, m)
    array or a (B, T, m) array/tensor.  Returns ``(y_hat, states)`` as
    tensors of shape (..., T, l) and (..., T, n) (``states`` is None unless
    ``cfg.record_states``).  Each state coordinate is clamped to
    [-clip_bound, clip_bound] after every step when clipping is on.
    """
    if isinstance(u, Signal):
        u = u.values
    u = ad.as_tensor(u)
    x = ad.as_tensor(x0)
    steps = u.shape[-2] if cfg.steps is None else cfg.steps
    if steps > u.shape[-2]:
        raise ValueError(f"input has {u.shape[-2]} steps, rollout asked for {steps}")
    if x.ndim == 1 and u.ndim == 3:
        raise ValueError("batched input needs batched x0")
    ys, xs = [], []
    for t in range(steps):
        u_t = u[..., t, :]
        try:
            xdot, y = field(x, u_t)
        except ad.NonFiniteError as exc:
            raise DivergenceError(t, f"non-finite field at step {t}: {exc}") from exc
        ys.append(y)
        if cfg.record_states:
            xs.append(x)
        try:
            x = x + xdot * cfg.dt
        except ad.NonFiniteError as exc:
            raise DivergenceError(t) from exc
        if cfg.clip_bound is not None:
            x = ad.clamp(x, -cfg.clip_bound, cfg.clip_bound)
    y_hat = ad.stack(ys, axis=-2)
    states = ad.stack(xs, axis=-2) if cfg.record_states else None
    return y_hat, states


def model_field(model, mode: str = "fgh", k: float = 0.5, stop_grad: bool = False, params=None) -> Field:
    def _field(x, u_t):
        return modified_vector_field(model, x, u_t, mode, k, stop_grad, params)

    return _field


def simulate(model, x0, u, dt: float, mode: str = "fgh", k: float = 0.5, clip_bound: float | None = 10.0,
             record_states: bool = False):
    """Untracked rollout returning arrays ``(y_hat, states)``."""
    cfg = RolloutConfig(dt=dt, clip_bound=clip_bound, record_states=record_states)
    y, xs = euler_rollout(x0, u, model_field(model, mode, k), cfg)
    return y.data, (xs.data if xs is not None else None)


@dataclass
class ProbeVerdict:
    magnitude: float
    bounded: bool
    max_abs_y: float
    max_abs_x: float
    divergence_step: int | None


def step_response_probe(
    model,
    magnitudes: Sequence[float],
    mode: str = "fgh",
    k: float = 0.5,
    dt: float = 0.01,
    steps: int = 10_000,
    divergence_bound: float = 1e6,
    x0=None,
):
    """Constant-input responses, unclipped, one batch row per magnitude.

    A row is declared diverged at the first step whose state is non-finite
    or exceeds ``divergence_bound`` in magnitude; that row is then frozen so
    it cannot poison the others.  Returns ``(signals, verdicts)``.
    """
    mags = np.asarray(list(magnitudes), dtype=np.float64)
    B = mags.size
    x0 = model.x0 if x0 is None else np.asarray(x0, dtype=np.float64)
    x = np.tile(x0, (B, 1))
    u_t = np.repeat(mags[:, None], model.m, axis=1)
    alive = np.ones(B, dtype=bool)
    div_step: list[int | None] = [None] * B
    ys = np.full((steps, B, model.l), np.nan)
    max_x = np.zeros(B)
    field_fn = model_field(model, mode, k)
    with np.errstate(all="ignore"):
        for t in range(steps):
            xdot, y = _probe_eval(field_fn, x, u_t, model.n, model.l)
            ys[t] = np.where(alive[:, None], y, np.nan)
            x_new = x + dt * xdot
            bad = alive & (~np.isfinite(x_new).all(1) | (np.abs(x_new).max(1) > divergence_bound))
            for i in np.flatnonzero(bad):
                div_step[i] = t + 1
            alive &= ~bad
            x = np.where(alive[:, None], x_new, x0)
            max_x = np.where(alive, np.maximum(max_x, np.abs(x).max(1)), max_x)
            if not alive.any():
                break
    signals, verdicts = [], []
    for i, mag in enumerate(mags):
        yi = ys[:, i, :]
        finite = yi[np.isfinite(yi).all(1)]
        max_y = float(np.abs(finite).max()) if finite.size else float("nan")
        bounded = div_step[i] is None
        signals.append(yi)
        verdicts.append(ProbeVerdict(float(mag), bounded, max_y, float(max_x[i]), div_step[i]))
    return signals, verdicts


def _probe_eval(field_fn, x, u_t, n, l):
    try:
        xdot, y = field_fn(Tensor(x), Tensor(u_t))
        return xdot.data, y.data
    except ad.NonFiniteError:
        pass
    # fall back to row-wise evaluation so one bad row does not take down the rest
    xdot, y = np.full((x.shape[0], n), np.nan), np.full((x.shape[0], l), np.nan)
    for i in range(x.shape[0]):
        try:
            a, b = field_fn(Tensor(x[i : i + 1]), Tensor(u_t[i : i + 1]))
            xdot[i], y[i] = a.data[0], b.data[0]
        except ad.NonFiniteError:
            continue
    return xdot, y
