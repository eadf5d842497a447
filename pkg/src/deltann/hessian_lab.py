"""Empirical Hessian blocks, smallest eigenpairs and spectral diagnostics."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from . import rng as rngmod
from .data_synth import sample_dataset, sample_target
from .model_core import ModelConfigError, activation_eval, g_weights, loss_eval, preacts

DENSE_LIMIT = 2500
FULL_LIMIT = 4000


class EigenSolveError(RuntimeError):
    pass


@dataclass
class HessianBlock:
    """H = (1/n) X^T diag(g) X kept in factored form."""

    x: np.ndarray
    g: np.ndarray
    j: int = 0
    t: int = 0

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def shape(self):
        return (self.d, self.d)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        xv = self.x @ v
        w = self.g * xv if v.ndim == 1 else self.g[:, None] * xv
        return self.x.T @ w / self.n

    def dense(self, limit=DENSE_LIMIT):
        if self.d > limit:
            raise MemoryError(f"dense block of size {self.d} exceeds limit {limit}")
        h = (self.x.T * self.g) @ self.x / self.n
        return 0.5 * (h + h.T)

    def operator(self):
        return LinearOperator(self.shape, matvec=self.matvec, matmat=self.matvec,
                              dtype=float)


def hessian_block(params, act, loss, data, j=0, t=0):
    v = data.x @ params.theta
    g = g_weights(act, loss, data.y, v, params.a, params.b, j)
    return HessianBlock(data.x, g, j, t)


def full_hessian(params, act, loss, data, curvature=True, limit=FULL_LIMIT):
    """Dense Hessian of the empirical risk in vec(theta), neuron blocks contiguous.

    With curvature=False the l'' term is dropped, leaving the block diagonal part.
    """
    x, n = data.x, data.n
    m, d = params.m, params.d
    if m * d > limit:
        raise MemoryError(f"full Hessian of size {m * d} exceeds limit {limit}")
    s, ds, d2s = activation_eval(act, preacts(params, x))
    f = s @ params.a / m
    _, dl, d2l, _ = loss_eval(loss, data.y, f)
    a = params.a
    h = np.zeros((m * d, m * d))
    for j in range(m):
        w = dl * a[j] * d2s[:, j] / (n * m)
        h[j * d:(j + 1) * d, j * d:(j + 1) * d] += (x.T * w) @ x
    if curvature:
        u = (ds * a / m)  # n x m, gradient of f is u_ij x_i
        for j in range(m):
            for k in range(j, m):
                w = d2l * u[:, j] * u[:, k] / n
                blk = (x.T * w) @ x
                h[j * d:(j + 1) * d, k * d:(k + 1) * d] += blk
                if k != j:
                    h[k * d:(k + 1) * d, j * d:(j + 1) * d] += blk.T
    return 0.5 * (h + h.T)


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray


def _norm_estimate(matvec, d, iters=30):
    v = rngmod.stream(0, "norm-estimate").standard_normal(d)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam = np.linalg.norm(w)
        if lam == 0:
            return 0.0
        v = w / lam
    return float(lam)


def smallest_eigenpairs(h, p=1, tol=1e-8, dense_limit=DENSE_LIMIT):
    """p smallest eigenpairs of a symmetric matrix, HessianBlock or LinearOperator.

    Small problems use a dense subset eigensolver; large ones use Lanczos on
    the matrix-free product.  Residuals must fall below tol * |H|.
    """
    if isinstance(h, HessianBlock):
        d = h.d
        dense = h.dense() if d <= dense_limit else None
        matvec = h.matvec
    elif isinstance(h, np.ndarray):
        d = h.shape[0]
        dense = 0.5 * (h + h.T)
        matvec = dense.__matmul__
    else:
        d = h.shape[0]
        dense = None
        matvec = h.__matmul__
    if not 1 <= p <= d:
        raise ValueError(f"p must lie in [1, {d}]")
    if dense is not None:
        vals, vecs = sla.eigh(dense, subset_by_index=[0, p - 1])
        scale = np.abs(sla.eigh(dense, eigvals_only=True, subset_by_index=[d - 1, d - 1])[0])
        scale = max(scale, np.abs(vals).max())
    else:
        op = h.operator() if isinstance(h, HessianBlock) else h
        try:
            vals, vecs = eigsh(op, k=p, which="SA", tol=tol * 1e-2, maxiter=20 * d)
        except ArpackNoConvergence as err:
            raise EigenSolveError(f"Lanczos did not converge: {err}") from err
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        scale = max(_norm_estimate(matvec, d), np.abs(vals).max())
    res = np.linalg.norm(matvec(vecs) - vecs * vals, axis=0)
    if np.any(res > tol * max(scale, 1e-300)):
        raise EigenSolveError(f"eigen residual {res.max():.3e} above {tol} * |H| = {tol * scale:.3e}")
    return EigenResult(vals, vecs, res)


def alignment(vectors, theta_hard):
    """sum_q |theta_hard^T xi_q|^2."""
    v = np.asarray(vectors)
    if v.ndim == 1:
        v = v[:, None]
    th = np.asarray(theta_hard)
    if th.ndim == 1:
        th = th[:, None]
    return float(np.sum((th.T @ v) ** 2))


@dataclass
class SandwichResult:
    lower: float
    middle: float
    upper: float
    C: float
    m: int

    @property
    def ok(self):
        slack = 1e-10 * max(1.0, abs(self.middle))
        return self.lower <= self.middle + slack and self.middle <= self.upper + slack


def sandwich_check(params, act, loss, data):
    """Compare lambda_min(H_diag), lambda_min(m Hess) and lambda_min(H_diag) + C/m."""
    if not loss.convex:
        raise ModelConfigError("sandwich bounds need a convex loss")
    m, d, x = params.m, params.d, data.x
    full = m * full_hessian(params, act, loss, data)
    hdiag = m * full_hessian(params, act, loss, data, curvature=False)
    lower = min(smallest_eigenpairs(hdiag[j * d:(j + 1) * d, j * d:(j + 1) * d]).values[0]
                for j in range(m))
    middle = smallest_eigenpairs(full).values[0]
    s, ds, _ = activation_eval(act, preacts(params, x))
    _, _, d2l, _ = loss_eval(loss, data.y, s @ params.a / m)
    cov_norm = np.linalg.norm(x, 2) ** 2 / data.n
    C = cov_norm * float(np.max(np.abs(d2l[:, None] * params.a**2 * ds**2)))
    return SandwichResult(float(lower), float(middle), float(lower + C / m), C, m)


@dataclass
class Esd:
    eigenvalues: np.ndarray
    edges: np.ndarray
    density: np.ndarray

    def cdf(self, x):
        return np.searchsorted(np.sort(self.eigenvalues), x, side="right") / len(self.eigenvalues)


def esd(h, bins=100, limit=DENSE_LIMIT):
    mat = h.dense(limit) if isinstance(h, HessianBlock) else np.asarray(h)
    if mat.shape[0] > limit:
        raise MemoryError(f"ESD of size {mat.shape[0]} exceeds limit {limit}")
    ev = sla.eigh(mat, eigvals_only=True)
    density, edges = np.histogram(ev, bins=bins, density=True)
    return Esd(ev, edges, density)


def kolmogorov_distance(samples, cdf):
    """sup_x |F_n(x) - F(x)| for a vectorised model cdf."""
    xs = np.sort(np.asarray(samples))
    n = len(xs)
    f = cdf(xs)
    return float(max(np.max(np.arange(1, n + 1) / n - f), np.max(f - np.arange(n) / n)))


@dataclass
class SpikedSample:
    block: HessianBlock
    target: object
    y: np.ndarray


def spiked_sample(preproc, link, delta, d, seed=0):
    """(1/n) sum_i G_i x_i x_i^T with G_i = preproc(y_i, zeta_i) and zeta_i ~ U(0, 1)."""
    target = sample_target(d, link, seed=seed)
    n = max(1, int(round(delta * d)))
    data = sample_dataset(n, target, seed=seed)
    zeta = rngmod.stream(seed, "zeta").random(n)
    g = np.asarray(preproc(data.y, zeta), dtype=float)
    return SpikedSample(HessianBlock(data.x, g), target, data.y)
