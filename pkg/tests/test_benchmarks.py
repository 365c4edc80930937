import filecmp
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from hjstab.benchmarks import (BistableGenConfig, GlucoseParams, GlucoseState, MealSchedule, absorption_kernel,
                               bistable_field, gen_bistable, gen_glucose_dataset, gen_meal_input,
                               glucose_equilibrium, glucose_field, glucose_step, simulate_bistable,
                               simulate_glucose)
from hjstab.data import Dataset, make_split


def test_bistable_field_examples():
    assert bistable_field(1.0, 0.0) == 0.0
    assert bistable_field(0.0, 0.0) == 0.0
    assert bistable_field(2.0, 0.0) == -6.0


def test_bistable_zero_input_stays_at_minus_one():
    assert np.array_equal(simulate_bistable(np.zeros(100), -1.0, 0.1), np.full(100, -1.0))


def test_bistable_generator_shapes_and_bounds():
    ds = gen_bistable(BistableGenConfig(n_sequences=300, seed=1))
    assert ds.u.shape == (300, 100, 1) and ds.y.shape == (300, 100, 1)
    assert np.array_equal(ds.x0, np.full((300, 1), -1.0))
    assert np.abs(ds.y).max() <= 10.0
    # both wells are visited often enough to be learnable
    crossed = (ds.y[:, -1, 0] > 0).mean()
    assert crossed >= 0.05
    # pulses: one contiguous block of constant value per sequence
    for u in ds.u[:20, :, 0]:
        nz = np.flatnonzero(u)
        if nz.size:
            assert np.all(np.diff(nz) == 1) and np.ptp(u[nz]) == 0.0
            assert 0.5 <= abs(u[nz[0]]) <= 2.0


def test_bistable_config_requires_integer_steps():
    with pytest.raises(ValueError):
        BistableGenConfig(horizon=1.05, dt=0.1).steps


def test_generators_are_seed_deterministic(tmp_path):
    a = gen_bistable(BistableGenConfig(n_sequences=12, seed=5)).save(tmp_path / "a")
    b = gen_bistable(BistableGenConfig(n_sequences=12, seed=5)).save(tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
    c = gen_bistable(BistableGenConfig(n_sequences=12, seed=6))
    assert not np.array_equal(c.u, Dataset.load(a).u)


def test_dataset_round_trip(tmp_path):
    ds = gen_glucose_dataset(5, seed=2, schedule=MealSchedule(steps=50))
    back = Dataset.load(ds.save(tmp_path / "g"))
    assert np.array_equal(back.u, ds.u) and np.array_equal(back.y, ds.y) and np.array_equal(back.x0, ds.x0)
    assert back.split == ds.split and back.dt == ds.dt
    assert back.meta["normalization"] == ds.meta["normalization"]


def test_split_fractions():
    s = make_split(100, seed=0)
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (81, 9, 10)
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(100))
    assert make_split(100, seed=0) == s


# -- glucose -------------------------------------------------------------------------


def test_glucose_equilibrium_values():
    G, I, X = glucose_equilibrium()
    assert G == pytest.approx(89.9, rel=5e-3)
    assert I == pytest.approx(25.0, rel=5e-3)
    assert X == pytest.approx(539.7, rel=5e-3)
    assert X == G * 6.0


def test_glucose_equilibrium_is_a_root():
    p = GlucoseParams()
    G, I, X = glucose_equilibrium(p)
    assert np.abs(glucose_field(G, I, X, G, 0.0, p)).max() < 1e-9
    for g0 in (1.0, 10.0, 0.01):
        q = replace(p, g0=g0)
        Gq, Iq, Xq = glucose_equilibrium(q)
        assert np.abs(glucose_field(Gq, Iq, Xq, Gq, 0.0, q)).max() < 1e-9


def test_glucose_equilibrium_vanishes_with_g0():
    Gs = [glucose_equilibrium(replace(GlucoseParams(), g0=g0))[0] for g0 in (1.0, 1e-3, 1e-6, 1e-9)]
    assert all(a > b for a, b in zip(Gs, Gs[1:])) and Gs[-1] < 1e-6


def test_glucose_params_must_be_positive():
    with pytest.raises(ValueError):
        GlucoseParams(k1=0.0)


def test_glucose_zero_input_holds_equilibrium():
    traj = simulate_glucose(np.zeros(1000))
    eq = np.array(glucose_equilibrium())
    assert np.abs(traj - eq).max() < 1e-6


def test_glucose_pulse_raises_G_then_I():
    p, dt = GlucoseParams(), 1.0
    s0 = GlucoseState.at_equilibrium(p, dt)
    s1 = glucose_step(s0, 5.0, p, dt)
    assert s1.G > s0.G and s1.I == pytest.approx(s0.I)
    # insulin follows through the accumulated glucose X one step later
    s2 = glucose_step(s1, 0.0, p, dt)
    assert s2.X > s1.X
    s3 = glucose_step(s2, 0.0, p, dt)
    assert s3.I > s2.I


def test_glucose_history_length_checked():
    p = GlucoseParams()
    s = GlucoseState.at_equilibrium(p, 1.0)
    with pytest.raises(ValueError):
        glucose_step(s, 0.0, p, 0.5)
    with pytest.raises(ValueError):
        GlucoseState.at_equilibrium(p, 4.0)


def test_absorption_kernel_integrates_to_one():
    for s in (20.0, 45.0):
        val, _ = quad(lambda t: float(absorption_kernel(t, s)), 0, 50 * s, limit=200)
        assert val == pytest.approx(1.0, abs=1e-8)


def test_zero_meals_give_zero_input():
    sig = gen_meal_input(0, MealSchedule(meals=(0, 0)))
    assert np.array_equal(sig.values, np.zeros((1000, 1)))


def test_single_pulse_mass():
    sched = MealSchedule(steps=3000, meals=(1, 1), onset_fraction=0.01)
    sig = gen_meal_input(3, sched)
    rng = np.random.default_rng(3)
    rng.integers(1, 2)
    rng.uniform(0.0, 0.01 * 3000)
    dose = rng.uniform(*sched.dose_range)
    assert sig.values.sum() * sched.dt * sched.blood_volume == pytest.approx(dose, rel=1e-3)


def test_glucose_dataset_properties():
    ds = gen_glucose_dataset(20, seed=0)
    assert ds.u.shape == (20, 1000, 1) and ds.l == 2
    pool = ds.split["train"] + ds.split["val"]
    assert np.max(np.abs(ds.u[pool])) == pytest.approx(1.0, rel=1e-15)
    assert ds.meta["labels"]["y"] == ["G", "I"]
    norm = ds.meta["normalization"]
    y_phys = ds.y * (np.array(norm["y_max"]) - np.array(norm["y_min"])) + np.array(norm["y_min"])
    assert (y_phys > 0).all()


def test_glucose_zero_input_normalized_output_is_constant():
    ds = gen_glucose_dataset(3, seed=1, schedule=MealSchedule(steps=200, meals=(0, 0)))
    assert np.ptp(ds.y, axis=1).max() == 0.0
