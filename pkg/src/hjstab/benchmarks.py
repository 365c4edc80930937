"""Ground-truth generators: the bistable toy system and a glucose-insulin model.

Both integrate their true dynamics with explicit Euler at the sampling step
and start from a stable equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, make_split
from .simulation import Signal

# -- bistable -----------------------------------------------------------------


def bistable_field(x, u):
    """x (1 - x^2) + u; stable equilibria at x = +1 and x = -1."""
    return x * (1.0 - x * x) + u


@dataclass
class BistableGenConfig:
    n_sequences: int = 1000
    horizon: float = 10.0
    dt: float = 0.1
    x0: float = -1.0
    amplitude_range: tuple[float, float] = (0.5, 2.0)
    width_range: tuple[float, float] = (0.5, 3.0)
    seed: int = 0

    @property
    def steps(self) -> int:
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer multiple of dt")
        return int(round(steps))


def bistable_pulse(cfg: BistableGenConfig, rng: np.random.Generator) -> np.ndarray:
    """One rectangular pulse of random sign, amplitude, width and onset."""
    t = np.arange(cfg.steps) * cfg.dt
    sign = rng.choice((-1.0, 1.0))
    amp = rng.uniform(*cfg.amplitude_range)
    width = rng.uniform(*cfg.width_range)
    onset = rng.uniform(0.0, cfg.horizon)
    return np.where((t >= onset) & (t < onset + width), sign * amp, 0.0)


def simulate_bistable(u: np.ndarray, x0: float, dt: float) -> np.ndarray:
    """Euler trajectory for inputs ``u`` of shape (..., T); y_t = x_t."""
    u = np.asarray(u, dtype=np.float64)
    x = np.full(u.shape[:-1], float(x0))
    xs = np.empty_like(u)
    for t in range(u.shape[-1]):
        xs[..., t] = x
        x = x + dt * bistable_field(x, u[..., t])
    return xs


def gen_bistable(cfg: BistableGenConfig) -> Dataset:
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sequences)
    u = np.stack([bistable_pulse(cfg, np.random.default_rng(s)) for s in children]) if children else \
        np.zeros((0, cfg.steps))
    y = simulate_bistable(u, cfg.x0, cfg.dt)
    meta = {
        "benchmark": "bistable",
        "seed": cfg.seed,
        "labels": {"u": ["u"], "y": ["x"]},
        "generator": {
            "horizon": cfg.horizon,
            "x0": cfg.x0,
            "amplitude_range": list(cfg.amplitude_range),
            "width_range": list(cfg.width_range),
        },
    }
    return Dataset(cfg.dt, np.full((cfg.n_sequences, 1), cfg.x0), u[..., None], y[..., None],
                   make_split(cfg.n_sequences, cfg.seed), meta)


# -- glucose-insulin ----------------------------------------------------------


@dataclass(frozen=True)
class GlucoseParams:
    k1: float = 3.35e-2  # 1/min
    k2: float = 5.22e-5  # 1/(min uUI/ml)
    k3: float = 1.055  # 1/min
    k4: float = 0.293  # (uUI/ml)/(min mg/100ml)
    g0: float = 3.13  # (mg/100ml)/min
    tau: float = 6.0  # min

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4", "g0", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def glucose_equilibrium(p: GlucoseParams = GlucoseParams()) -> tuple[float, float, float]:
    """Unique positive equilibrium (G*, I*, X*) with X* = G* tau."""
    root = -p.k1 * p.k3 + np.sqrt((p.k1 * p.k3) ** 2 + 4.0 * p.k2 * p.k3 * p.k4 * p.g0)
    G = root / (2.0 * p.k2 * p.k4)
    I = root / (2.0 * p.k2 * p.k3)
    return float(G), float(I), float(G * p.tau)


def glucose_field(G, I, X, G_delayed, u, p: GlucoseParams = GlucoseParams()):
    """(dG, dI, dX) given the current state and G(t - tau)."""
    dG = -p.k1 * G - p.k2 * G * I + p.g0 + u
    dI = -p.k3 * I + p.k4 / p.tau * X
    dX = G - G_delayed
    return dG, dI, dX


@dataclass
class GlucoseState:
    """State plus the G history over the last tau minutes (oldest first)."""

    G: np.ndarray
    I: np.ndarray
    X: np.ndarray
    history: np.ndarray

    @classmethod
    def at_equilibrium(cls, p: GlucoseParams, dt: float, shape=()) -> "GlucoseState":
        G, I, X = glucose_equilibrium(p)
        lag = _lag_steps(p, dt)
        return cls(np.full(shape, G), np.full(shape, I), np.full(shape, X), np.full(tuple(shape) + (lag,), G))


def _lag_steps(p: GlucoseParams, dt: float) -> int:
    lag = p.tau / dt
    if abs(lag - round(lag)) > 1e-9 or round(lag) < 1:
        raise ValueError("dt must divide tau")
    return int(round(lag))


def glucose_step(state: GlucoseState, u, p: GlucoseParams, dt: float) -> GlucoseState:
    if state.history.shape[-1] != _lag_steps(p, dt):
        raise ValueError("history length does not match tau / dt")
    dG, dI, dX = glucose_field(state.G, state.I, state.X, state.history[..., 0], u, p)
    G = state.G + dt * dG
    I = state.I + dt * dI
    X = state.X + dt * dX
    if not (np.isfinite(G).all() and np.isfinite(I).all() and np.isfinite(X).all()):
        raise FloatingPointError("glucose state became non-finite")
    hist = np.concatenate([state.history[..., 1:], np.asarray(state.G)[..., None]], axis=-1)
    return GlucoseState(G, I, X, hist)


def simulate_glucose(u: np.ndarray, p: GlucoseParams = GlucoseParams(), dt: float = 1.0) -> np.ndarray:
    """Trajectory of (G, I, X) from equilibrium; ``u`` has shape (..., T)."""
    u = np.asarray(u, dtype=np.float64)
    state = GlucoseState.at_equilibrium(p, dt, u.shape[:-1])
    out = np.empty(u.shape + (3,))
    for t in range(u.shape[-1]):
        out[..., t, 0], out[..., t, 1], out[..., t, 2] = state.G, state.I, state.X
        state = glucose_step(state, u[..., t], p, dt)
    return out


@dataclass
class MealSchedule:
    """Randomized gamma-kernel absorption pulses (a stand-in for a gut model)."""

    steps: int = 1000
    dt: float = 1.0
    meals: tuple[int, int] = (1, 3)
    dose_range: tuple[float, float] = (100.0, 500.0)  # mg/kg
    shape_range: tuple[float, float] = (20.0, 60.0)  # min
    blood_volume: float = 0.80  # 100 ml/kg
    onset_fraction: float = 0.8


def absorption_kernel(t, s):
    """(t / s^2) exp(-t / s) for t >= 0; integrates to 1."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 0, np.maximum(t, 0.0) / s**2 * np.exp(-np.maximum(t, 0.0) / s), 0.0)


def gen_meal_input(seed, schedule: MealSchedule = MealSchedule()) -> Signal:
    """Glucose appearance rate in (mg/100ml)/min for one sequence."""
    rng = np.random.default_rng(seed)
    t = np.arange(schedule.steps) * schedule.dt
    lo, hi = schedule.meals
    count = int(rng.integers(lo, hi + 1))
    rate = np.zeros_like(t)
    for _ in range(count):
        onset = rng.uniform(0.0, schedule.onset_fraction * schedule.steps * schedule.dt)
        dose = rng.uniform(*schedule.dose_range)
        s = rng.uniform(*schedule.shape_range)
        rate += dose * absorption_kernel(t - onset, s)
    return Signal(schedule.dt, rate / schedule.blood_volume, ["glucose_appearance"])


def gen_glucose_dataset(n_sequences: int, seed: int = 0, schedule: MealSchedule = MealSchedule(),
                        p: GlucoseParams = GlucoseParams()) -> Dataset:
    """Simulated (u, [G, I]) pairs, normalized with statistics of the training pool.

    u is divided by its maximum over train+val so that pool peaks at 1; each
    output channel is min-max scaled over the same pool.
    """
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    u_phys = np.stack([gen_meal_input(s, schedule).values[:, 0] for s in children])
    traj = simulate_glucose(u_phys, p, schedule.dt)
    y_phys = traj[..., :2]
    split = make_split(n_sequences, seed)
    pool = split["train"] + split["val"]
    u_scale = float(np.max(np.abs(u_phys[pool]))) if pool else 1.0
    u_scale = u_scale if u_scale > 0 else 1.0
    y_min = y_phys[pool].min(axis=(0, 1))
    y_max = y_phys[pool].max(axis=(0, 1))
    span = np.where(y_max - y_min > 0, y_max - y_min, 1.0)
    y = (y_phys - y_min) / span
    eq = np.array(glucose_equilibrium(p))
    meta = {
        "benchmark": "glucose",
        "seed": seed,
        "labels": {"u": ["glucose_appearance"], "y": ["G", "I"]},
        "normalization": {"u_scale": u_scale, "y_min": y_min.tolist(), "y_max": y_max.tolist()},
        "generator": {
            "params": {k: getattr(p, k) for k in ("k1", "k2", "k3", "k4", "g0", "tau")},
            "meals": list(schedule.meals),
            "dose_range": list(schedule.dose_range),
            "shape_range": list(schedule.shape_range),
            "blood_volume": schedule.blood_volume,
        },
    }
    return Dataset(schedule.dt, np.tile(eq, (n_sequences, 1)), (u_phys / u_scale)[..., None], y, split, meta)
