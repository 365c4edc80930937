"""Nominal dynamics x' = f(x) + G(x)u, y = h(x) built from small ReLU MLPs.

Parameters live in a flat ``dict[str, ndarray]`` owned by
:class:`NominalDynamics`.  Evaluation functions take an optional parameter
mapping so the same code runs on plain arrays or on tape-tracked leaves.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_HEADER = "hjstab-model-v1"
GAMMA_MIN = 1e-3


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected ReLU network; ``hidden=()`` means a single affine map."""

    input_dim: int
    output_shape: tuple[int, ...]
    hidden: tuple[int, ...] = ()
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def init_params(self, prefix: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
        params = {}
        w = self.widths
        for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{prefix}.b{i}"] = rng.uniform(-bound, bound, size=(fan_out,))
        return params

    def apply(self, prefix: str, params: Mapping, x):
        """Evaluate on a batch ``x`` of shape (..., input_dim)."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ad.ShapeError(f"{prefix}: expected input dim {self.input_dim}, got {x.shape[-1]}")
        n_layers = len(self.hidden) + 1
        z = x
        for i in range(n_layers):
            z = ad.matmul(z, params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
            if i < n_layers - 1:
                z = ad.ramp(z)
        if self.output_scale != 1.0:
            z = z * self.output_scale
        return ad.reshape(z, x.shape[:-1] + self.output_shape)


@dataclass
class GammaParam:
    """Candidate L2 gain, gamma = softplus(theta) + GAMMA_MIN > 0."""

    mode: str = "trainable"
    theta: float = float(np.log(np.expm1(1.0 - GAMMA_MIN)))

    def __post_init__(self):
        if self.mode not in ("fixed", "trainable"):
            raise ValueError(f"gamma mode must be 'fixed' or 'trainable', got {self.mode!r}")

    @classmethod
    def from_value(cls, gamma: float, mode: str = "trainable") -> "GammaParam":
        if gamma <= GAMMA_MIN:
            raise ValueError(f"gamma must exceed {GAMMA_MIN}")
        return cls(mode=mode, theta=float(np.log(np.expm1(gamma - GAMMA_MIN))))

    @property
    def value(self) -> float:
        return float(np.logaddexp(0.0, self.theta) + GAMMA_MIN)

    @staticmethod
    def transform(theta):
        return ad.softplus(theta) + GAMMA_MIN


@dataclass(frozen=True)
class LyapunovSpec:
    """V(x) = min_i w * ||x - c_i||^2 over the stable-point centers c_i."""

    centers: tuple[tuple[float, ...], ...]
    weight: float = 0.5

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in row) for row in c))
        if self.weight <= 0:
            raise ValueError("Lyapunov weight must be positive")

    @classmethod
    def quadratic(cls, dim: int, center=None, weight: float = 0.5) -> "LyapunovSpec":
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
        return cls(centers=(tuple(c),), weight=weight)

    @classmethod
    def mixture(cls, centers, weight: float = 0.5) -> "LyapunovSpec":
        return cls(centers=tuple(map(tuple, np.atleast_2d(centers))), weight=weight)

    @property
    def kind(self) -> str:
        return "quadratic" if len(self.centers) == 1 else "min-mixture"

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.centers, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.center_array.shape[1]

    def branch(self, x: np.ndarray) -> np.ndarray:
        """Index of the minimizing branch; ties go to the lowest index."""
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[..., None, :] - self.center_array) ** 2).sum(-1)
        return np.argmin(d2, axis=-1)

    def value(self, x):
        x = ad.as_tensor(x)
        c = self.center_array[self.branch(x.data)]
        return ad.sqnorm(x - c) * self.weight

    def grad(self, x):
        x = ad.as_tensor(x)
        c = self.center_array[self.branch(x.data)]
        return (x - c) * (2.0 * self.weight)


def lyapunov_value(spec: LyapunovSpec, x) -> np.ndarray:
    return spec.value(x).data


def lyapunov_grad(spec: LyapunovSpec, x) -> np.ndarray:
    return spec.grad(x).data


@dataclass
class NominalDynamics:
    """The triplet (f_n, G_n, h_n) with its parameters, gamma and V."""

    n: int
    m: int
    l: int
    f_spec: MlpSpec
    G_spec: MlpSpec
    h_spec: MlpSpec
    lyapunov: LyapunovSpec
    gamma: GammaParam = field(default_factory=GammaParam)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.f_spec.input_dim != self.n or self.f_spec.output_shape != (self.n,):
            raise ValueError("f network must map R^n to R^n")
        if self.G_spec.input_dim != self.n or self.G_spec.output_shape != (self.n, self.m):
            raise ValueError("G network must map R^n to R^(n x m)")
        if self.h_spec.input_dim != self.n or self.h_spec.output_shape != (self.l,):
            raise ValueError("h network must map R^n to R^l")
        if self.lyapunov.dim != self.n:
            raise ValueError("Lyapunov centers must live in R^n")
        if self.x0 is None:
            self.x0 = self.lyapunov.center_array[0].copy()
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(self.n)

    @classmethod
    def create(
        cls,
        n: int,
        m: int,
        l: int,
        lyapunov: LyapunovSpec,
        f_hidden: Sequence[int] = (),
        G_hidden: Sequence[int] = (),
        h_hidden: Sequence[int] = (),
        f_scale: float = 1.0,
        gamma: GammaParam | None = None,
        x0=None,
        seed: int = 0,
    ) -> "NominalDynamics":
        rng = np.random.default_rng(seed)
        f_spec = MlpSpec(n, (n,), tuple(f_hidden), f_scale)
        G_spec = MlpSpec(n, (n, m), tuple(G_hidden))
        h_spec = MlpSpec(n, (l,), tuple(h_hidden))
        params = {}
        params.update(f_spec.init_params("f", rng))
        params.update(G_spec.init_params("G", rng))
        params.update(h_spec.init_params("h", rng))
        return cls(n, m, l, f_spec, G_spec, h_spec, lyapunov, gamma or GammaParam(), params, x0)

    def copy(self) -> "NominalDynamics":
        return NominalDynamics(
            self.n, self.m, self.l, self.f_spec, self.G_spec, self.h_spec, self.lyapunov,
            GammaParam(self.gamma.mode, self.gamma.theta),
            {k: v.copy() for k, v in self.params.items()},
            self.x0.copy(),
        )

    def trainable_names(self) -> list[str]:
        names = sorted(self.params)
        if self.gamma.mode == "trainable":
            names.append("gamma.theta")
        return names

    def all_params(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out["gamma.theta"] = np.asarray(self.gamma.theta, dtype=np.float64)
        return out

    def set_params(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k == "gamma.theta":
                self.gamma.theta = float(np.asarray(v))
            else:
                self.params[k] = np.asarray(v, dtype=np.float64).reshape(self.params[k].shape)

    def _p(self, params):
        return self.params if params is None else params

    def eval_f(self, x, params=None):
        return self.f_spec.apply("f", self._p(params), x)

    def eval_G(self, x, params=None):
        return self.G_spec.apply("G", self._p(params), x)

    def eval_h(self, x, params=None):
        return self.h_spec.apply("h", self._p(params), x)

    def gamma_value(self, params=None):
        if params is not None and "gamma.theta" in params:
            return GammaParam.transform(params["gamma.theta"])
        return Tensor(self.gamma.value)

    # -- checkpoint ---------------------------------------------------------------

    def meta(self) -> dict:
        return {
            "dims": {"n": self.n, "m": self.m, "l": self.l},
            "f": asdict(self.f_spec),
            "G": asdict(self.G_spec),
            "h": asdict(self.h_spec),
            "lyapunov": {"centers": [list(c) for c in self.lyapunov.centers], "weight": self.lyapunov.weight},
            "gamma": {"mode": self.gamma.mode, "theta": self.gamma.theta, "value": self.gamma.value},
            "x0": self.x0.tolist(),
            "param_shapes": {k: list(v.shape) for k, v in self.params.items()},
        }


def _spec_from(d: dict) -> MlpSpec:
    return MlpSpec(int(d["input_dim"]), tuple(d["output_shape"]), tuple(d["hidden"]), float(d["output_scale"]))


def save_checkpoint(path, model: NominalDynamics, extra: dict | None = None) -> Path:
    """Write ``model`` as a flat key -> array npz with a JSON meta record."""
    path = Path(path)
    meta = model.meta()
    meta["extra"] = extra or {}
    arrays = {k: v.reshape(-1) for k, v in model.params.items()}
    arrays["gamma.theta"] = np.array([model.gamma.theta])
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __header__=np.array(CHECKPOINT_HEADER),
            __meta__=np.array(json.dumps(meta, sort_keys=True)),
            **arrays,
        )
    return path


def load_checkpoint(path) -> tuple[NominalDynamics, dict]:
    """Inverse of :func:`save_checkpoint`; returns the model and the extra dict."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = str(z["__header__"])
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"unsupported checkpoint header {header!r}")
        meta = json.loads(str(z["__meta__"]))
        flat = {k: z[k] for k in z.files if not k.startswith("__")}
    dims = meta["dims"]
    params = {k: flat[k].reshape(s) for k, s in meta["param_shapes"].items()}
    lyap = LyapunovSpec(tuple(map(tuple, meta["lyapunov"]["centers"])), meta["lyapunov"]["weight"])
    gamma = GammaParam(meta["gamma"]["mode"], float(flat["gamma.theta"][0]))
    model = NominalDynamics(
        dims["n"], dims["m"], dims["l"],
        _spec_from(meta["f"]), _spec_from(meta["G"]), _spec_from(meta["h"]),
        lyap, gamma, params, np.asarray(meta["x0"]),
    )
    return model, meta.get("extra", {})
