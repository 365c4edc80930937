"""Closed-form projections of (f_n, G_n, h_n) onto the Hamilton-Jacobi feasible set.

All functions are batched: ``f`` is (..., n), ``G`` is (..., n, m), ``h`` is
(..., l), ``grad_v`` is (..., n) and ``gamma`` a scalar.  Inputs may be
arrays or tape tensors; outputs are tensors.

Modes:

* ``"fgh"``: modify f, G and h (k weights the f distance against G, h).
* ``"f"``: modify f only, the minimal-norm shift along grad V.
* ``"fg"``: modify f and G with h held fixed.
* ``"none"``: pass the nominal triplet through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_NUM = 1e-12
MODES = ("fgh", "f", "fg", "none")


def _gamma_sq_inv_half(gamma) -> Tensor:
    gamma = ad.as_tensor(gamma)
    if np.any(gamma.data <= 0):
        raise ValueError("gamma must be positive")
    return 0.5 / ad.square(gamma)


def _gt_beta(G, grad_v) -> Tensor:
    """G^T grad V, shape (..., m)."""
    G, grad_v = ad.as_tensor(G), ad.as_tensor(grad_v)
    return ad.tsum(G * ad.reshape(grad_v, grad_v.shape + (1,)), axis=-2)


def hj_function(f, G, h, grad_v, gamma) -> Tensor:
    """grad V^T f + ||G^T grad V||^2 / (2 gamma^2) + ||h||^2 / 2."""
    c = _gamma_sq_inv_half(gamma)
    return ad.dot(grad_v, f) + ad.sqnorm(_gt_beta(G, grad_v)) * c + 0.5 * ad.sqnorm(h)


@dataclass
class HjTerms:
    """Scalar pieces shared by the projections, each of shape (...)."""

    V_f: Tensor
    V_G: Tensor
    V_h: Tensor
    gradnorm2: Tensor
    gt_beta: Tensor

    @property
    def V_Gh(self) -> Tensor:
        return self.V_G + self.V_h

    @property
    def V_fh(self) -> Tensor:
        return self.V_f + self.V_h

    def projector(self, grad_v) -> np.ndarray:
        """grad V grad V^T / ||grad V||^2 as an array of shape (..., n, n)."""
        b = np.asarray(ad.as_tensor(grad_v).data)
        den = np.where(self.gradnorm2.data < EPS_NUM, 1.0, self.gradnorm2.data)
        return b[..., :, None] * b[..., None, :] / den[..., None, None]


def hj_terms(f, G, h, grad_v, gamma) -> HjTerms:
    c = _gamma_sq_inv_half(gamma)
    gtb = _gt_beta(G, grad_v)
    return HjTerms(
        V_f=ad.dot(grad_v, f),
        V_G=ad.sqnorm(gtb) * c,
        V_h=0.5 * ad.sqnorm(h),
        gradnorm2=ad.sqnorm(grad_v),
        gt_beta=gtb,
    )


def _scale_factor(lin, quad, k2: float):
    """s = C(-lin/quad; k^2, 1) with the quad -> 0 limit handled."""
    degenerate = quad.data < EPS_NUM
    safe_quad = ad.where(degenerate, EPS_NUM, quad)
    s_reg = ad.clamp(-lin / safe_quad, k2, 1.0)
    s_deg = np.where(lin.data <= 0.0, 1.0, k2)
    return ad.where(degenerate, s_deg, s_reg)


def _shift_and_shrink(f, G, grad_v, t: HjTerms, lin, quad, k: float, stop_grad: bool):
    """Shared body of the fgh and fg projections; returns (f_m, G_m, sqrt(s))."""
    f, G, grad_v = ad.as_tensor(f), ad.as_tensor(G), ad.as_tensor(grad_v)
    k2 = float(k) ** 2
    deg = t.gradnorm2.data < EPS_NUM
    safe_b2 = ad.where(deg, 1.0, t.gradnorm2)
    shift = ad.ramp(lin + quad * k2) / safe_b2
    f_corr = grad_v * ad.reshape(shift, shift.shape + (1,))
    root_s = ad.sqrt(_scale_factor(lin, quad, k2))
    # (1 - sqrt s) P_V G = grad V (1 - sqrt s) (G^T grad V)^T / ||grad V||^2
    coef = (1.0 - root_s) / safe_b2
    row = t.gt_beta * ad.reshape(coef, coef.shape + (1,))
    G_corr = ad.reshape(grad_v, grad_v.shape + (1,)) * ad.reshape(row, row.shape[:-1] + (1,) + row.shape[-1:])
    if stop_grad:
        f_corr, G_corr = ad.stop_gradient(f_corr), ad.stop_gradient(G_corr)
    f_m = ad.where(deg[..., None], f, f - f_corr)
    G_m = ad.where(deg[..., None, None], G, G - G_corr)
    root_s = ad.where(deg, 1.0, root_s)
    return f_m, G_m, root_s


def project_fgh(f, G, h, grad_v, gamma, k: float = 0.5, stop_grad: bool = False):
    """Modify all three maps; returns (f_m, G_m, h_m)."""
    _check_k(k)
    t = hj_terms(f, G, h, grad_v, gamma)
    f_m, G_m, root_s = _shift_and_shrink(f, G, grad_v, t, t.V_f, t.V_Gh, k, stop_grad)
    h = ad.as_tensor(h)
    h_m = h * ad.reshape(root_s, root_s.shape + (1,))
    return f_m, G_m, h_m


def project_fg(f, G, h, grad_v, gamma, k: float = 0.5, stop_grad: bool = False):
    """Modify f and G with h fixed; returns (f_m, G_m, h_n)."""
    _check_k(k)
    t = hj_terms(f, G, h, grad_v, gamma)
    f_m, G_m, _ = _shift_and_shrink(f, G, grad_v, t, t.V_fh, t.V_G, k, stop_grad)
    return f_m, G_m, ad.as_tensor(h)


def project_f(f, G, h, grad_v, gamma, stop_grad: bool = False):
    """Shift f along grad V by R(HJ)/||grad V||^2; G and h pass through."""
    f, grad_v = ad.as_tensor(f), ad.as_tensor(grad_v)
    t = hj_terms(f, G, h, grad_v, gamma)
    deg = t.gradnorm2.data < EPS_NUM
    safe_b2 = ad.where(deg, 1.0, t.gradnorm2)
    shift = ad.ramp(t.V_f + t.V_G + t.V_h) / safe_b2
    f_corr = grad_v * ad.reshape(shift, shift.shape + (1,))
    if stop_grad:
        f_corr = ad.stop_gradient(f_corr)
    f_m = ad.where(deg[..., None], f, f - f_corr)
    return f_m, ad.as_tensor(G), ad.as_tensor(h)


def project(mode: str, f, G, h, grad_v, gamma, k: float = 0.5, stop_grad: bool = False):
    if mode == "fgh":
        return project_fgh(f, G, h, grad_v, gamma, k, stop_grad)
    if mode == "fg":
        return project_fg(f, G, h, grad_v, gamma, k, stop_grad)
    if mode == "f":
        return project_f(f, G, h, grad_v, gamma, stop_grad)
    if mode == "none":
        return ad.as_tensor(f), ad.as_tensor(G), ad.as_tensor(h)
    raise ValueError(f"unknown projection mode {mode!r}; expected one of {MODES}")


def _check_k(k: float) -> None:
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k}")


def projection_distance(f_m, G_m, h_m, f_n, G_n, h_n, grad_v, gamma, k: float) -> np.ndarray:
    """Weighted distance minimized by the fgh projection.

    (1-k)/|b| |df| + k/(2 gamma^2) |dG|_F^2 + k/(2 |b|^2) |dh|^2 with
    b = grad V.  This weighting makes the closed form exact; see
    ``tests/test_projection.py`` for the numeric check.
    """
    b = np.asarray(grad_v, dtype=np.float64)
    bn2 = (b * b).sum(-1)
    df = np.linalg.norm(np.asarray(f_m) - np.asarray(f_n), axis=-1)
    dG = ((np.asarray(G_m) - np.asarray(G_n)) ** 2).sum((-1, -2))
    dh = ((np.asarray(h_m) - np.asarray(h_n)) ** 2).sum(-1)
    return (1 - k) * df / np.sqrt(bn2) + k * dG / (2 * gamma**2) + k * dh / (2 * bn2)


def modified_vector_field(model, x, u, mode: str = "fgh", k: float = 0.5, stop_grad: bool = False, params=None):
    """Return (x_dot, y) of the modified system at states ``x`` under inputs ``u``."""
    x = ad.as_tensor(x)
    f_n = model.eval_f(x, params)
    G_n = model.eval_G(x, params)
    h_n = model.eval_h(x, params)
    if mode == "none":
        f_m, G_m, h_m = f_n, G_n, h_n
    else:
        grad_v = model.lyapunov.grad(x)
        f_m, G_m, h_m = project(mode, f_n, G_n, h_n, grad_v, model.gamma_value(params), k, stop_grad)
    u = ad.as_tensor(u)
    xdot = f_m + ad.tsum(G_m * ad.reshape(u, u.shape[:-1] + (1,) + u.shape[-1:]), axis=-1)
    return xdot, h_m


def modified_triplet(model, x, mode: str = "fgh", k: float = 0.5, params=None):
    """Pointwise (f_m, G_m, h_m) and grad V at states ``x`` as arrays."""
    x = ad.as_tensor(x)
    f_n, G_n, h_n = model.eval_f(x, params), model.eval_G(x, params), model.eval_h(x, params)
    grad_v = model.lyapunov.grad(x)
    f_m, G_m, h_m = project(mode, f_n, G_n, h_n, grad_v, model.gamma_value(params), k)
    return f_m.data, G_m.data, h_m.data, grad_v.data
