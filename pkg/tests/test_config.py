from pathlib import Path

import pytest

from hjstab.config import ConfigError, RunConfig, dump_config, load_config, parse_config, preset_path

PRESETS = sorted(p.stem for p in (Path(__file__).parents[1] / "src" / "hjstab" / "configs").glob("*.yaml"))


def test_empty_document_gives_defaults():
    assert parse_config("") == RunConfig()


@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse_and_round_trip(name):
    cfg = load_config(preset_path(name))
    again = parse_config(dump_config(cfg))
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.benchmark in name


def test_bistable_preset_values():
    cfg = load_config(preset_path("bistable_fgh_plus"))
    assert cfg.model.f_hidden == [17, 10, 22] and cfg.model.G_hidden == [34] and cfg.model.h_hidden == [10, 62, 58]
    assert cfg.train.lr == 3.01e-4 and cfg.train.weight_decay == 4.76e-9 and cfg.train.epsilon == 0.63
    assert cfg.train.optimizer == "rmsprop" and cfg.train.batch_size == 100
    assert cfg.model.lyapunov_centers == [[-1.0], [1.0]]
    assert cfg.train.lam > 0


def test_glucose_preset_values():
    cfg = load_config(preset_path("glucose_fgh_plus"))
    assert cfg.model.n == 6 and cfg.model.f_hidden == [8] and cfg.model.G_hidden == [27, 29]
    assert cfg.model.h_hidden == [35, 18] and cfg.train.lr == 3.28e-4 and cfg.train.epsilon == 0.75


def test_integer_coercion_in_float_fields():
    cfg = parse_config("train:\n  lr: 1\n  clip_bound: 5\nmodel:\n  x0: [0]\n")
    assert isinstance(cfg.train.lr, float) and cfg.train.clip_bound == 5.0
    assert cfg.model.x0 == [0.0] and isinstance(cfg.model.x0[0], float)
    assert parse_config("train:\n  clip_bound: null\n").train.clip_bound is None


def test_unsigned_exponents_are_numbers():
    cfg = parse_config("model:\n  f_scale: 1.0e6\ntrain:\n  lr: 3e-4\n  clip_bound: 1e2\n"
                       "probe:\n  magnitudes: [2e0, 1.5E1]\n")
    assert cfg.model.f_scale == 1e6 and cfg.train.clip_bound == 100.0 and cfg.probe.magnitudes == [2.0, 15.0]
    with pytest.raises(ConfigError):
        parse_config("train:\n  batch_size: 1e2\n")


@pytest.mark.parametrize("text, line, fragment", [
    ("train:\n  lr: 0.1\n  bogus: 3\n", 3, "unknown key train.bogus"),
    ("model:\n  n: 1\n  n: 2\n", 3, "duplicate key"),
    ("train:\n  batch_size: 2.5\n", 2, "expected an integer"),
    ("train:\n  stop_grad: 1\n", 2, "expected a boolean"),
    ("train:\n  mode: 3\n", 2, "expected a string"),
    ("model:\n  f_hidden: [4, 2.5]\n", 2, "expected integers"),
    ("model:\n  f_hidden: 4\n", 2, "expected a list"),
    ("benchmark: pendulum\n", 1, "benchmark must be one of"),
    ("extras:\n  a: 1\n", 1, "unknown section"),
    ("train: [1, 2]\n", 1, "must be a mapping"),
    ("train:\n  lr: [1\n", 3, "malformed YAML"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.yaml")
    assert info.value.line == line
    assert fragment in str(info.value)
    assert str(info.value).startswith(f"run.yaml:{line}: ")


@pytest.mark.parametrize("text", [
    "train:\n  k: 2.0\n",
    "train:\n  mode: gh\n",
    "model:\n  n: 2\n  x0: [0.0]\n",
    "model:\n  n: 2\n  lyapunov_centers: [[1.0]]\n",
    "model:\n  gamma_init: 0.0\n",
    "model:\n  gamma_mode: learned\n",
])
def test_semantic_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file_and_preset(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(FileNotFoundError):
        preset_path("no_such_preset")


def test_digest_changes_with_any_value():
    a = parse_config("train:\n  lr: 0.001\n")
    b = parse_config("train:\n  lr: 0.002\n")
    assert a.digest() != b.digest()
    assert a.digest() == parse_config("train:\n  lr: 1.0e-3\n").digest()


def test_model_build_uses_config():
    cfg = load_config(preset_path("bistable_fgh_plus"))
    model = cfg.model.build(1, 1)
    assert model.n == 1 and list(model.x0) == [-1.0]
    assert model.gamma.value == pytest.approx(cfg.model.gamma_init)
    assert model.f_spec.hidden == (17, 10, 22)
