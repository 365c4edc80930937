"""``hjstab generate|train|eval|probe|hj-audit``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .benchmarks import BistableGenConfig, MealSchedule, gen_bistable, gen_glucose_dataset
from .config import BENCHMARKS, ConfigError, RunConfig, dump_config, load_config
from .data import Dataset
from .dynamics import load_checkpoint, save_checkpoint
from .metrics import evaluate_predictions
from .simulation import DivergenceError, write_signal_csv
from .training import (TrainConfig, TrainingError, feasibility_audit, predict, sample_states, train,
                       write_trace)

log = logging.getLogger("hjstab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config_hash: str | None
    seed: int | None
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    argv: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        p = out_dir / MANIFEST
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_cfg_from_extra(extra: dict) -> TrainConfig:
    tc = TrainConfig()
    for key in ("mode", "k", "clip_bound", "hj_sigma"):
        if key in extra:
            setattr(tc, key, extra[key])
    tc.hj_means = extra.get("hj_means")
    return tc


def _listing(out: Path) -> list[str]:
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)


# -- commands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    benchmark = args.benchmark
    cfg = load_config(args.config) if args.config else None
    if benchmark is None:
        benchmark = cfg.benchmark if cfg else None
    if benchmark not in BENCHMARKS:
        raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {benchmark!r}")
    seed = 0 if args.seed is None else args.seed
    started = _now()
    if benchmark == "bistable":
        ds = gen_bistable(BistableGenConfig(n_sequences=args.n or 1000, seed=seed))
    else:
        ds = gen_glucose_dataset(args.n or 1000, seed, MealSchedule())
    out = _prepare_out(args.out)
    ds.save(out)
    RunManifest("generate", cfg.digest() if cfg else None, seed, started=started, finished=_now(),
                outputs=_listing(out), inputs={"benchmark": benchmark, "n": len(ds)},
                argv=sys.argv[1:]).write(out)
    print(f"wrote {len(ds)} {benchmark} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg: RunConfig = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.model.seed = args.seed
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    ds = Dataset.load(args.data)
    if ds.meta.get("benchmark") not in (None, cfg.benchmark):
        raise ConfigError(f"config is for {cfg.benchmark!r} but data is {ds.meta.get('benchmark')!r}")
    model = cfg.model.build(ds.m, ds.l)
    started = _now()
    result = train(ds, model, cfg.train, threads=args.threads, progress=True)
    out = _prepare_out(args.out)
    extra = {
        "mode": cfg.train.mode, "k": cfg.train.k, "clip_bound": cfg.train.clip_bound,
        "hj_sigma": cfg.train.hj_sigma, "hj_means": cfg.train.hj_means, "benchmark": cfg.benchmark,
        "best_iteration": result.best_iteration, "best_val_loss": result.best_val_loss,
        "config_hash": cfg.digest(), "probe": asdict(cfg.probe), "audit": asdict(cfg.audit),
    }
    save_checkpoint(out / "model.npz", result.model, extra)
    save_checkpoint(out / "model_final.npz", result.final_model, extra)
    write_trace(out / "loss_trace.csv", result.trace)
    _write_json(out / "feasibility_checks.json", result.audits)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    RunManifest("train", cfg.digest(), cfg.train.seed, started=started, finished=_now(), outputs=_listing(out),
                inputs={"config": str(args.config), "data": str(args.data),
                        "data_meta_sha256": _file_hash(Path(args.data) / "meta.json"), "threads": args.threads},
                argv=sys.argv[1:]).write(out)
    print(f"trained {cfg.train.iterations} iterations; best validation loss {result.best_val_loss:.6g} "
          f"at iteration {result.best_iteration}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    ds = Dataset.load(args.data)
    if ds.m != model.m or ds.l != model.l:
        raise ConfigError(f"checkpoint dims (m={model.m}, l={model.l}) do not match data (m={ds.m}, l={ds.l})")
    tc = _train_cfg_from_extra(extra)
    _, u, y, idx = ds.subset(args.split)
    started = _now()
    y_hat = y.copy() if args.replay else predict(model, ds, idx, tc)
    report = evaluate_predictions(u, y, y_hat, ds.dt, idx)
    out = _prepare_out(args.out)
    report.write(out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for j, i in enumerate(idx):
        write_signal_csv(pred_dir / f"seq_{i}_y_hat.csv", y_hat[j], ds.dt)
    RunManifest("eval", extra.get("config_hash"), None, started=started, finished=_now(), outputs=_listing(out),
                inputs={"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                        "checkpoint_sha256": _file_hash(Path(args.checkpoint)), "replay": bool(args.replay)},
                argv=sys.argv[1:]).write(out)
    s = report.summary()
    print(f"rmse {s['rmse']:.6g}  gain_io_data {s['gain_io_data']:.6g}  gain_io_pred {s['gain_io_pred']:.6g}  "
          f"gain_io_error {s['gain_io_error']:.6g}")
    return EXIT_OK


def _magnitudes(text: str | None, default) -> list[float]:
    if not text:
        return [float(v) for v in default]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--magnitudes must be comma-separated numbers, got {text!r}") from None


def cmd_probe(args) -> int:
    from .simulation import step_response_probe

    model, extra = load_checkpoint(args.checkpoint)
    probe = extra.get("probe", {})
    mags = _magnitudes(args.magnitudes, probe.get("magnitudes", range(2, 11)))
    dt = args.dt or probe.get("dt", 0.01)
    steps = args.steps or probe.get("steps", 10000)
    started = _now()
    signals, verdicts = step_response_probe(model, mags, extra.get("mode", "fgh"), extra.get("k", 0.5), dt, steps,
                                            probe.get("divergence_bound", 1e6))
    out = _prepare_out(args.out)
    for v, sig in zip(verdicts, signals):
        write_signal_csv(out / f"step_{v.magnitude:g}.csv", sig, dt)
    with open(out / "verdicts.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["magnitude", "verdict", "max_abs_y", "max_abs_x", "divergence_step"])
        for v in verdicts:
            w.writerow([repr(v.magnitude), "bounded" if v.bounded else "diverged", repr(v.max_abs_y),
                        repr(v.max_abs_x), "" if v.divergence_step is None else v.divergence_step])
    RunManifest("probe", extra.get("config_hash"), None, started=started, finished=_now(), outputs=_listing(out),
                inputs={"checkpoint": str(args.checkpoint), "dt": dt, "steps": steps, "magnitudes": mags},
                argv=sys.argv[1:]).write(out)
    for v in verdicts:
        print(f"u={v.magnitude:g}: {'bounded' if v.bounded else 'diverged'} max|y|={v.max_abs_y:.6g}")
    return EXIT_OK


def cmd_hj_audit(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    audit = extra.get("audit", {})
    n = args.samples or audit.get("n_samples", 10000)
    box = audit.get("box", 5.0)
    tc = _train_cfg_from_extra(extra)
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    means = np.asarray(tc.hj_means, dtype=np.float64) if tc.hj_means else model.lyapunov.center_array
    started = _now()
    report = {"mode": tc.mode, "n_samples": n, "gamma": model.gamma.value, "seed": seed}
    for name, states in (
        ("hj_distribution", sample_states(rng, means, tc.hj_sigma, n)),
        ("uniform_box", rng.uniform(-box, box, size=(n, model.n))),
    ):
        report[name] = feasibility_audit(model, tc, states)
    out = _prepare_out(args.out)
    _write_json(out / "hj_audit.json", report)
    RunManifest("hj-audit", extra.get("config_hash"), seed, started=started, finished=_now(),
                outputs=_listing(out), inputs={"checkpoint": str(args.checkpoint)}, argv=sys.argv[1:]).write(out)
    for name in ("hj_distribution", "uniform_box"):
        r = report[name]
        mod = r.get("max_hj_modified")
        print(f"{name}: max nominal HJ {r['max_hj_nominal']:.6g}"
              + ("" if mod is None else f", max modified HJ {mod:.3g}"))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjstab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hjstab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, data=False, checkpoint=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1, help="worker cap; 1 is bitwise deterministic")
        sp.add_argument("--config", required=config, default=None)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", help="write a benchmark dataset")
    common(g)
    g.add_argument("--benchmark", choices=BENCHMARKS, default=None)
    g.add_argument("--n", type=int, default=None, help="number of sequences (default 1000)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model to a dataset")
    common(t, config=True, data=True)
    t.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="RMSE and GainIO on a split")
    common(e, data=True, checkpoint=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--replay", action="store_true", help="score the ground truth against itself")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("probe", help="unclipped step responses")
    common(s, checkpoint=True)
    s.add_argument("--magnitudes", default=None, help="comma-separated, default 2..10")
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(func=cmd_probe)

    a = sub.add_parser("hj-audit", help="max HJ value over sampled states")
    common(a, checkpoint=True)
    a.add_argument("--samples", type=int, default=None, help="default 10000")
    a.set_defaults(func=cmd_hj_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, DivergenceError, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
