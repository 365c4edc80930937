"""Loss = prediction error + lambda * L_HJ + alpha * gamma^2, and the training loop."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .optim import KINDS, Optimizer
from .projection import MODES, hj_function, modified_triplet
from .simulation import DivergenceError, RolloutConfig, euler_rollout, model_field

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "pred_loss", "hj_loss", "gamma", "total")


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, batch: Sequence[int], reason: str):
        self.iteration, self.batch = iteration, list(batch)
        super().__init__(f"non-finite loss at iteration {iteration} (batch ids {self.batch[:10]}...): {reason}")


@dataclass
class TrainConfig:
    lam: float = 0.0
    alpha: float = 0.0
    epsilon: float = 0.0
    hj_samples: int = 64
    hj_sigma: float = 1.0
    hj_means: list[list[float]] | None = None
    mode: str = "fgh"
    k: float = 0.5
    stop_grad: bool = False
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 100
    iterations: int = 1000
    seed: int = 0
    clip_bound: float | None = 10.0
    eval_every: int = 10
    audit_samples: int = 1000

    def __post_init__(self):
        for name in ("lam", "alpha", "epsilon", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer not in KINDS:
            raise ValueError(f"optimizer must be one of {KINDS}")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError("k must lie in [0, 1]")
        if self.batch_size < 1 or self.hj_samples < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size, hj_samples, eval_every must be >= 1 and iterations >= 0")
        if not self.hj_sigma > 0:
            raise ValueError("hj_sigma must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# -- loss pieces -----------------------------------------------------------------


def prediction_loss(model, x0, u, y, dt: float, cfg: TrainConfig, params=None) -> Tensor:
    """Mean over the batch of sum_t ||y_t - y_hat_t||^2 dt."""
    if len(u) == 0:
        raise ValueError("empty batch")
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (len(u), model.n)).copy()
    field_fn = model_field(model, cfg.mode, cfg.k, cfg.stop_grad, params)
    y_hat, _ = euler_rollout(x0, u, field_fn, RolloutConfig(dt=dt, clip_bound=cfg.clip_bound))
    err = y_hat - y
    return ad.tsum(ad.square(err)) * (dt / len(u))


def sample_states(rng: np.random.Generator, means, sigma: float, count: int) -> np.ndarray:
    """Draws from the equal-weight mixture of N(mu_i, sigma^2 I)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    comp = rng.integers(0, len(means), size=count)
    return means[comp] + sigma * rng.standard_normal((count, means.shape[1]))


def l_hj_penalty(model, states: np.ndarray, epsilon: float, params=None) -> Tensor:
    """Mean of R(HJ(f_n, G_n, h_n)(x) + epsilon) over the sampled states."""
    x = Tensor(states)
    hj = hj_function(model.eval_f(x, params), model.eval_G(x, params), model.eval_h(x, params),
                     model.lyapunov.grad(x), model.gamma_value(params))
    return ad.mean(ad.ramp(hj + epsilon))


def hj_means(model, cfg: TrainConfig) -> np.ndarray:
    return np.asarray(cfg.hj_means, dtype=np.float64) if cfg.hj_means else model.lyapunov.center_array


def total_loss(model, x0, u, y, dt: float, cfg: TrainConfig, states: np.ndarray, params=None):
    """Returns (total, pred, hj, gamma) as tensors."""
    pred = prediction_loss(model, x0, u, y, dt, cfg, params)
    hj = l_hj_penalty(model, states, cfg.epsilon, params)
    gamma = model.gamma_value(params)
    return pred + cfg.lam * hj + cfg.alpha * ad.square(gamma), pred, hj, gamma


def _leaves(model, tape: ad.Tape):
    trainable = set(model.trainable_names())
    params, leaves = {}, {}
    for name, value in model.all_params().items():
        if name in trainable:
            leaves[name] = params[name] = tape.leaf(value, name)
        else:
            params[name] = Tensor(value)
    return params, leaves


def loss_and_grads(model, x0, u, y, dt, cfg: TrainConfig, states, threads: int = 1):
    """Value and gradient of the total loss with one tape per batch shard.

    Shards are summed in shard order, so the result for a given ``threads``
    is deterministic; ``threads=1`` uses a single shard.
    """
    B = len(u)
    shards = np.array_split(np.arange(B), max(1, min(threads, B)))

    def shard_pred(idx):
        with ad.Tape() as tape:
            params, leaves = _leaves(model, tape)
            pred = prediction_loss(model, x0, u[idx], y[idx], dt, cfg, params) * (len(idx) / B)
            g = ad.backward(tape, pred)
        return pred.item(), {k: g[v.node] for k, v in leaves.items()}

    if len(shards) == 1:
        results = [shard_pred(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(shard_pred, shards))

    with ad.Tape() as tape:
        params, leaves = _leaves(model, tape)
        hj = l_hj_penalty(model, states, cfg.epsilon, params)
        gamma = model.gamma_value(params)
        reg = cfg.lam * hj + cfg.alpha * ad.square(gamma)
        g_reg = ad.backward(tape, reg)

    grads = {k: g_reg[v.node].copy() for k, v in leaves.items()}
    pred_val = 0.0
    for val, g in results:
        pred_val += val
        for k in grads:
            grads[k] += g[k]
    return {
        "pred": pred_val, "hj": hj.item(), "gamma": gamma.item(), "total": pred_val + reg.item(),
    }, grads


# -- evaluation helpers --------------------------------------------------------------


def predict(model, dataset: Dataset, indices, cfg: TrainConfig, x0=None) -> np.ndarray:
    """Untracked rollout of the (modified) model over ``indices``."""
    idx = list(indices)
    x0 = model.x0 if x0 is None else x0
    x0b = np.tile(np.asarray(x0, dtype=np.float64), (len(idx), 1))
    y_hat, _ = euler_rollout(x0b, dataset.u[idx], model_field(model, cfg.mode, cfg.k),
                             RolloutConfig(dt=dataset.dt, clip_bound=cfg.clip_bound))
    return y_hat.data


def feasibility_audit(model, cfg: TrainConfig, states: np.ndarray) -> dict:
    """Max HJ of the modified and nominal triplets over ``states``."""
    x = Tensor(states)
    gamma = model.gamma_value()
    grad_v = model.lyapunov.grad(x)
    nominal = hj_function(model.eval_f(x), model.eval_G(x), model.eval_h(x), grad_v, gamma).data
    out = {"max_hj_nominal": float(nominal.max()), "frac_nominal_feasible": float((nominal <= 0).mean())}
    if cfg.mode != "none":
        f_m, G_m, h_m, gv = modified_triplet(model, states, cfg.mode, cfg.k)
        active = (gv * gv).sum(-1) > 1e-12
        mod = hj_function(f_m, G_m, h_m, gv, gamma).data
        out["max_hj_modified"] = float(mod[active].max()) if active.any() else float("-inf")
    return out


# -- loop -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    final_model: object
    trace: list[dict]
    best_iteration: int
    best_val_loss: float
    audits: list[dict] = field(default_factory=list)


def train(dataset: Dataset, model, cfg: TrainConfig, threads: int = 1, progress: bool = False) -> TrainResult:
    """Algorithm: roll out, evaluate the loss, back-propagate, update; repeat.

    Mini-batches are drawn without replacement from a seeded permutation of
    the training split.  The model with the lowest validation prediction
    loss (checked every ``eval_every`` iterations) is returned as
    ``result.model``; the last iterate is ``result.final_model``.
    """
    if dataset.m != model.m or dataset.l != model.l:
        raise ValueError(f"dataset dims (m={dataset.m}, l={dataset.l}) do not match model "
                         f"(m={model.m}, l={model.l})")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    audit_rng = np.random.default_rng([cfg.seed, 99])
    train_idx = np.asarray(dataset.split["train"])
    val_idx = dataset.split.get("val") or list(train_idx)
    _, u_val, y_val, _ = dataset.subset("val") if dataset.split.get("val") else dataset.subset("train")
    means = hj_means(model, cfg)
    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)

    def val_loss(m) -> float:
        with np.errstate(all="ignore"):
            try:
                return float(prediction_loss(m, m.x0, u_val, y_val, dataset.dt, cfg).data)
            except (ad.NonFiniteError, DivergenceError):
                return float("inf")

    best_val, best_iter, best_params = val_loss(model), 0, model.all_params()
    best_params = {k: np.array(v, copy=True) for k, v in best_params.items()}
    trace: list[dict] = []
    audits: list[dict] = []
    order: list[int] = []
    for it in range(1, cfg.iterations + 1):
        if len(order) == 0:
            order = list(rng.permutation(train_idx))
        batch, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = sorted(int(b) for b in batch)
        states = sample_states(rng, means, cfg.hj_sigma, cfg.hj_samples)
        try:
            vals, grads = loss_and_grads(model, model.x0, dataset.u[batch], dataset.y[batch], dataset.dt,
                                         cfg, states, threads)
        except (ad.NonFiniteError, DivergenceError) as exc:
            raise TrainingError(it, batch, str(exc)) from exc
        if not np.isfinite(vals["total"]):
            raise TrainingError(it, batch, "loss is not finite")
        params = {k: model.all_params()[k] for k in grads}
        opt.step(params, grads)
        model.set_params(params)
        trace.append({"iter": it, "pred_loss": vals["pred"], "hj_loss": vals["hj"],
                      "gamma": vals["gamma"], "total": vals["total"]})
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            v = val_loss(model)
            if v < best_val:
                best_val, best_iter = v, it
                best_params = {k: np.array(p, copy=True) for k, p in model.all_params().items()}
            audit = feasibility_audit(model, cfg, sample_states(audit_rng, means, cfg.hj_sigma, cfg.audit_samples))
            audit.update(iter=it, val_loss=v)
            audits.append(audit)
            if progress:
                log.info("iter %d pred %.5g hj %.4g gamma %.4g val %.5g", it, vals["pred"], vals["hj"],
                         vals["gamma"], v)
    best = model.copy()
    best.set_params(best_params)
    return TrainResult(best, model, trace, best_iter, best_val, audits)


def write_trace(path, trace: list[dict]) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["iter"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
