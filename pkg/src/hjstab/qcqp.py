"""Particular QCQP behind the projections, solved in closed form.

    minimize    k_x x^T A x + k_y |y|
    subject to  y >= x^T A x - 2 b^T x + c

with A symmetric positive definite.  A brute-force grid oracle for d <= 3 is
provided for verification; it shares no code with the closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

CASES = ("c-nonpositive", "interior-clamp", "upper-branch")


class NotPositiveDefinite(ValueError):
    pass


@dataclass(frozen=True)
class QcqpInstance:
    A: np.ndarray
    b: np.ndarray
    c: float
    k_x: float = 1.0
    k_y: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if A.shape != (b.size, b.size):
            raise ValueError(f"A has shape {A.shape}, expected {(b.size, b.size)}")
        if not np.allclose(A, A.T, atol=1e-10, rtol=0.0):
            raise NotPositiveDefinite("A is not symmetric")
        if self.k_x <= 0 or self.k_y <= 0:
            raise ValueError("k_x and k_y must be positive")

    @property
    def dim(self) -> int:
        return self.b.size

    def objective(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(self.k_x * x @ self.A @ x + self.k_y * abs(y))

    def residual(self, x) -> float:
        """x^T A x - 2 b^T x + c; the constraint reads y >= residual."""
        x = np.asarray(x, dtype=np.float64)
        return float(x @ self.A @ x - 2.0 * self.b @ x + self.c)


@dataclass(frozen=True)
class QcqpSolution:
    x_star: np.ndarray
    y_star: float
    active_case: str

    def objective(self, inst: QcqpInstance) -> float:
        return inst.objective(self.x_star, self.y_star)


def solve_closed_form(inst: QcqpInstance) -> QcqpSolution:
    try:
        factor = cho_factor(inst.A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("A is not positive definite") from exc
    d = inst.dim
    if inst.c <= 0:
        return QcqpSolution(np.zeros(d), 0.0, "c-nonpositive")
    a_inv_b = cho_solve(factor, inst.b)
    q = float(inst.b @ a_inv_b)
    if q <= 0.0:
        # b = 0: the constraint is y >= x^T A x + c, minimized at x = 0
        return QcqpSolution(np.zeros(d), float(inst.c), "upper-branch")
    c_t = inst.c / q
    kx_t = inst.k_x / (inst.k_x + inst.k_y)
    kx2 = kx_t * kx_t
    s = min(max(1.0 - c_t, kx2), 1.0)
    x_star = (1.0 - np.sqrt(s)) * a_inv_b
    y_star = max(inst.c - (1.0 - kx2) * q, 0.0)
    case = "upper-branch" if c_t > 1.0 - kx2 else "interior-clamp"
    return QcqpSolution(x_star, y_star, case)


def _oracle_objective(inst: QcqpInstance, X: np.ndarray) -> np.ndarray:
    quad = np.einsum("...i,ij,...j->...", X, inst.A, X)
    resid = quad - 2.0 * X @ inst.b + inst.c
    return inst.k_x * quad + inst.k_y * np.maximum(resid, 0.0)


def solve_numeric_oracle(
    inst: QcqpInstance,
    points: int = 41,
    radius: float | None = None,
    tol: float = 1e-8,
    max_levels: int = 200,
) -> QcqpSolution:
    """Dense grid search with y eliminated as R(residual), then zoomed refinement.

    The grid is centred on the midpoint between 0 and the unconstrained
    point A^-1 b and covers both.  Each level keeps the best grid point and
    halves the box.  The last grid point seeds an SLSQP solve of the smooth
    epigraph form (y >= residual, y >= 0), and a compass search along
    coordinate and diagonal directions has the final word.
    """
    d = inst.dim
    if d > 3:
        raise ValueError("the grid oracle supports d <= 3")
    if inst.c <= 0:
        return QcqpSolution(np.zeros(d), 0.0, "c-nonpositive")
    target = np.linalg.solve(inst.A, inst.b)
    center = 0.5 * target
    if radius is None:
        radius = float(np.max(np.abs(target))) + 1.0
    best = center.copy()
    best_val = float(_oracle_objective(inst, best[None])[0])
    per = {1: 201, 2: points, 3: 15}[d]
    axes = np.linspace(-1.0, 1.0, per)
    r = radius
    offsets = np.array(list(product(axes, repeat=d)))
    for _ in range(max_levels):
        cand = center + r * offsets
        vals = _oracle_objective(inst, cand)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best = float(vals[i]), cand[i].copy()
        center = best
        r *= 0.5
        if r < tol:
            break
    best, best_val = _polish(inst, best, best_val)
    best, best_val = _compass(inst, best, best_val, step=1e-6, tol=tol * 1e-3)
    resid = inst.residual(best)
    y = max(resid, 0.0)
    case = "upper-branch" if y > 1e-7 else "interior-clamp"
    return QcqpSolution(best, y, case)


def _polish(inst: QcqpInstance, x: np.ndarray, val: float):
    d = x.size

    def obj(z):
        return inst.k_x * z[:d] @ inst.A @ z[:d] + inst.k_y * z[d]

    def jac(z):
        return np.concatenate([2.0 * inst.k_x * inst.A @ z[:d], [inst.k_y]])

    cons = [
        {"type": "ineq", "fun": lambda z: z[d] - inst.residual(z[:d]),
         "jac": lambda z: np.concatenate([-(2.0 * inst.A @ z[:d] - 2.0 * inst.b), [1.0]])},
        {"type": "ineq", "fun": lambda z: z[d], "jac": lambda z: np.eye(d + 1)[d]},
    ]
    z0 = np.concatenate([x, [max(inst.residual(x), 0.0)]])
    res = minimize(obj, z0, jac=jac, constraints=cons, method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    cand = res.x[:d]
    cand_val = float(_oracle_objective(inst, cand[None])[0])
    if cand_val < val:
        return cand, cand_val
    return x, val


def _compass(inst: QcqpInstance, x: np.ndarray, val: float, step: float, tol: float):
    d = x.size
    dirs = [np.eye(d)[i] * s for i in range(d) for s in (1.0, -1.0)]
    for i in range(d):
        for j in range(i + 1, d):
            for si, sj in product((1.0, -1.0), repeat=2):
                v = np.zeros(d)
                v[i], v[j] = si, sj
                dirs.append(v / np.sqrt(2.0))
    dirs = np.array(dirs)
    while step > tol:
        cand = x + step * dirs
        vals = _oracle_objective(inst, cand)
        i = int(np.argmin(vals))
        if vals[i] < val:
            x, val = cand[i], float(vals[i])
        else:
            step *= 0.5
    return x, val


def random_instance(rng: np.random.Generator, d: int) -> QcqpInstance:
    """Random well-conditioned instance used by the property tests."""
    M = rng.normal(size=(d, d))
    A = M @ M.T + 0.5 * np.eye(d)
    b = rng.normal(size=d)
    q = float(b @ np.linalg.solve(A, b))
    c = float(rng.uniform(-0.5, 2.0) * q)
    return QcqpInstance(A, b, c, float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.1, 2.0)))
