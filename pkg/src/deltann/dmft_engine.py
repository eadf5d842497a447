"""Mean-field recursion for full-batch GD in the proportional regime.

The effective one-coordinate process is

    V(t) = W(t) - (1/delta) sum_{s<t} R_theta(t, s) F(V(s), W_star, eps)
    theta(t+1) = theta(t) - eta sum_{s<=t} R_l(t, s) theta(s)
                 - eta R_l(t, *) theta_star + eta q(t)

with W ~ GP(C_theta) jointly with W_star ~ N(0, I_k), q ~ GP(C_l / delta) and
F_j = (eta/m) a_j l'(y, f) sigma'(V_j + b_j).  The theta side is linear, so its
kernels follow exactly from the response matrices:

    theta(t) = A_t theta(0) + B_t theta_star + eta sum_u R_theta(t, u) q(u).

Only the V side is sampled.  Step t draws fresh paths (W_star, W(0..t), eps)
from the stream (seed, t, block), so a run to horizon t is a prefix of any
longer run with the same seed, N and block size.  Paths come in antithetic
pairs that flip W_star while keeping the part of W independent of it.
Response kernels use reverse-mode pathwise Jacobians.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .model_core import activation_eval, check_prediction_mode, g_weights, loss_eval

MIN_PATHS = 1000
BLOCK = 25_000


class DmftError(RuntimeError):
    pass


@dataclass
class DmftProblem:
    activation: object
    loss: object
    link: object
    eta: float
    m: int = 1
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    u_hard: Optional[np.ndarray] = None

    def __post_init__(self):
        check_prediction_mode(self.activation, self.loss, self.link)
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        self.a = np.ones(self.m) if self.a is None else np.broadcast_to(
            np.asarray(self.a, dtype=float), (self.m,)).copy()
        self.b = np.zeros(self.m) if self.b is None else np.broadcast_to(
            np.asarray(self.b, dtype=float), (self.m,)).copy()
        self.u_hard = self.link.hard_basis() if self.u_hard is None else np.asarray(self.u_hard, float)

    @property
    def k(self):
        return self.link.k

    def describe(self):
        act = self.activation
        return {"activation": act.kind, "alpha": act.alpha, "beta": act.beta,
                "loss": self.loss.kind, "M": self.loss.M, "link": self.link.kind,
                "eta": self.eta, "m": self.m, "a": self.a.tolist(), "b": self.b.tolist()}


@dataclass
class DmftKernels:
    """Kernels on the grid 0..T; blocks are m x m (m x k for the starred ones).

    C_theta[t, s] = E[theta(t) theta(s)^T], C_star[t] = E[theta(t) theta_star^T],
    C_l[t, s], R_l[t, s] (zero for s > t), R_l_star[t] and R_theta[t, s]
    (zero for s >= t).  Rows t = T of the loss-side kernels are left at zero.
    """

    T: int
    m: int
    k: int
    delta: float
    eta: float
    C_theta: np.ndarray
    C_star: np.ndarray
    C_l: np.ndarray
    R_l: np.ndarray
    R_l_star: np.ndarray
    R_theta: np.ndarray
    A: np.ndarray
    meta: dict = field(default_factory=dict)

    _ARRAYS = ("C_theta", "C_star", "C_l", "R_l", "R_l_star", "R_theta", "A")

    @classmethod
    def empty(cls, cap, m, k, delta, eta):
        z = np.zeros
        return cls(0, m, k, delta, eta, z((cap + 1, cap + 1, m, m)), z((cap + 1, m, k)),
                   z((cap + 1, cap + 1, m, m)), z((cap + 1, cap + 1, m, m)), z((cap + 1, m, k)),
                   z((cap + 1, cap + 1, m, m)), z((cap + 1, m, m)))

    @property
    def capacity(self):
        return self.C_theta.shape[0] - 1

    def grow(self, cap):
        if cap <= self.capacity:
            return
        for name in self._ARRAYS:
            old = getattr(self, name)
            n = old.shape[0]
            shape = (cap + 1,) + old.shape[1:]
            if name in ("C_theta", "C_l", "R_l", "R_theta"):
                shape = (cap + 1, cap + 1) + old.shape[2:]
            new = np.zeros(shape)
            if name in ("C_theta", "C_l", "R_l", "R_theta"):
                new[:n, :n] = old
            else:
                new[:n] = old
            setattr(self, name, new)

    def trimmed(self):
        """Copy restricted to the grid 0..T."""
        n = self.T + 1
        arrs = {}
        for name in self._ARRAYS:
            a = getattr(self, name)
            arrs[name] = a[:n, :n].copy() if name in ("C_theta", "C_l", "R_l", "R_theta") else a[:n].copy()
        return DmftKernels(self.T, self.m, self.k, self.delta, self.eta, meta=dict(self.meta), **arrs)

    def save(self, path):
        """Self-describing npz container: arrays plus a JSON header."""
        k = self.trimmed()
        header = {"T": k.T, "m": k.m, "k": k.k, "delta": k.delta, "eta": k.eta, "meta": k.meta,
                  "format": "dmft-kernels/1"}
        np.savez(path, header=np.array(json.dumps(header)),
                 **{n: getattr(k, n) for n in self._ARRAYS})

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != "dmft-kernels/1":
                raise ValueError("unknown kernel container format")
            arrs = {n: z[n] for n in cls._ARRAYS}
        return cls(header["T"], header["m"], header["k"], header["delta"], header["eta"],
                   meta=header["meta"], **arrs)


@dataclass
class GLaw:
    """Samples of the Hessian weight G together with the hard projections v (N x r)."""

    g: np.ndarray
    v: np.ndarray
    t: Optional[int] = None
    j: int = 0

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        v = np.asarray(self.v, dtype=float)
        self.v = v[:, None] if v.ndim == 1 else v
        if self.v.shape[0] != self.g.shape[0]:
            raise ValueError("g and v need the same number of samples")

    @property
    def n(self):
        return self.g.shape[0]

    @property
    def r(self):
        return self.v.shape[1]

    @classmethod
    def constant(cls, value, n=100_000, r=1, seed=0):
        v = rngmod.stream(seed, "glaw-const").standard_normal((n, r))
        return cls(np.full(n, float(value)), v)

    @classmethod
    def from_preprocessing(cls, preproc, link, n=100_000, seed=0, u_hard=None):
        """G = preproc(y, zeta) with y = h(z, eps), z ~ N(0, I_k), zeta ~ U(0, 1)."""
        g = rngmod.stream(seed, "glaw-pre")
        z = g.standard_normal((n, link.k))
        eps = g.standard_normal(n)
        zeta = g.random(n)
        u = link.hard_basis() if u_hard is None else np.asarray(u_hard, float)
        return cls(preproc(link(z, eps), zeta), z @ u)


@dataclass
class Cloud:
    """Sampled paths at time t; V has shape (t+1, N, m)."""

    t: int
    w_star: np.ndarray
    y: np.ndarray
    V: np.ndarray
    g: np.ndarray


class DmftState:
    """Kernels through the current horizon plus the most recent path cloud."""

    def __init__(self, problem, delta, n_paths=100_000, seed=0, block=BLOCK, keep_laws=False,
                 capacity=16, antithetic=True):
        if n_paths < MIN_PATHS:
            raise ValueError(f"need at least {MIN_PATHS} Monte Carlo paths")
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.problem = problem
        self.delta = float(delta)
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self.block = int(block)
        self.keep_laws = keep_laws
        self.antithetic = antithetic
        m, k = problem.m, problem.k
        self.kernels = DmftKernels.empty(capacity, m, k, self.delta, problem.eta)
        self.kernels.C_theta[0, 0] = np.eye(m)
        self.kernels.A[0] = np.eye(m)
        self.kernels.meta = dict(problem.describe(), N=self.n_paths, seed=self.seed,
                                 block=self.block, antithetic=antithetic)
        self.cloud = None
        self.laws = {}

    @property
    def horizon(self):
        return self.kernels.T


def dmft_init(problem, delta, n_paths=100_000, seed=0, **kw):
    return DmftState(problem, delta, n_paths, seed, **kw)


# ---------------------------------------------------------------------------
# V side


def _f_parts(problem, V, y, grad_h):
    """F, dF/dV (N x m x m) and dF/dW_star (N x m x k) at one time."""
    m, a, eta = problem.m, problem.a, problem.eta
    s, ds, d2s = activation_eval(problem.activation, V + problem.b)
    f = s @ a / m
    _, dl, d2l, dyl = loss_eval(problem.loss, y, f)
    coef = eta * a / m
    F = coef * dl[:, None] * ds
    DV = coef[None, :, None] * d2l[:, None, None] * ds[:, :, None] * (ds * a / m)[:, None, :]
    idx = np.arange(m)
    DV[:, idx, idx] += coef * dl[:, None] * d2s
    DWs = (coef * dyl[:, None] * ds)[:, :, None] * grad_h[:, None, :]
    return F, DV, DWs


def propagate(problem, delta, R_theta, w_star, W, eps):
    """Run the V recursion for given drivers W (t+1, N, m); returns (y, V, F, DV, DWs)."""
    T1, n, m = W.shape
    link = problem.link
    y = link(w_star, eps)
    grad_h = link.grad_z(w_star, eps)
    V = np.empty_like(W)
    F = np.empty_like(W)
    DV = np.empty((T1, n, m, m))
    DWs = np.empty((T1, n, m, problem.k))
    for s in range(T1):
        V[s] = W[s]
        if s:
            V[s] -= np.einsum("unj,uij->ni", F[:s], R_theta[s, :s]) / delta
        F[s], DV[s], DWs[s] = _f_parts(problem, V[s], y, grad_h)
    return y, V, F, DV, DWs


def reverse_jacobians(R_theta, DV, DWs, delta):
    """dV(t)/dW(s) for s <= t and dV(t)/dW_star at the last time t of the paths."""
    T1, n, m, _ = DV.shape
    t = T1 - 1
    lam = np.empty_like(DV)
    lam[t] = np.eye(m)
    jstar = np.zeros((n, m, DWs.shape[-1]))
    for u in range(t - 1, -1, -1):
        mv = np.einsum("wnij,wjk->nik", lam[u + 1:], R_theta[u + 1:T1, u]) * (-1.0 / delta)
        lam[u] = mv @ DV[u]
        jstar += mv @ DWs[u]
    return lam, jstar


def forward_jacobians(R_theta, DV, DWs, delta):
    """Same Jacobians for every t by forward recursion; J[t, s] is dV(t)/dW(s)."""
    T1, n, m, _ = DV.shape
    J = np.zeros((T1, T1, n, m, m))
    Js = np.zeros((T1, n, m, DWs.shape[-1]))
    for t in range(T1):
        J[t, t] = np.eye(m)
        for s in range(t):
            acc = np.zeros((n, m, m))
            for u in range(s, t):
                acc += R_theta[t, u] @ (DV[u] @ J[u, s])
            J[t, s] = -acc / delta
        acc = np.zeros((n, m, DWs.shape[-1]))
        for u in range(t):
            acc += R_theta[t, u] @ (DV[u] @ Js[u] + DWs[u])
        Js[t] = -acc / delta
    return J, Js


def _driver_factor(kern, t, k):
    """Regression of W(0..t) on W_star and the square root of the residual covariance.

    W = C_s W_star + L xi with xi standard normal; the joint covariance of
    (W_star, W) is PSD exactly when L L^T is.
    """
    m = kern.m
    cs = kern.C_star[:t + 1].reshape(m * (t + 1), k)
    cov = kern.C_theta[:t + 1, :t + 1].transpose(0, 2, 1, 3).reshape(m * (t + 1), m * (t + 1))
    resid = cov - cs @ cs.T
    resid = 0.5 * (resid + resid.T)
    w, U = np.linalg.eigh(resid)
    if w[0] < -1e-8 * max(1.0, w[-1]):
        raise DmftError(f"driver covariance not PSD at t={t}: min eigenvalue {w[0]:.3e}")
    return cs, U * np.sqrt(np.maximum(w, 1e-12))


def _sample_block(state, t, b, size, factor):
    """Antithetic pairs (W_star, Z) and (-W_star, Z): both have the driver law."""
    cs, L = factor
    g = rngmod.stream(state.seed, "dmft", t, b)
    k, m = state.problem.k, state.problem.m
    half = (size + 1) // 2
    w_star = g.standard_normal((half, k))
    z = g.standard_normal((half, L.shape[0])) @ L.T
    eps = g.standard_normal(half)
    if state.antithetic:
        w_star = np.concatenate([w_star, -w_star])[:size]
        z = np.concatenate([z, z])[:size]
        eps = np.concatenate([eps, eps])[:size]
    else:
        extra = size - half
        w_star = np.concatenate([w_star, g.standard_normal((extra, k))])
        z = np.concatenate([z, g.standard_normal((extra, L.shape[0])) @ L.T])
        eps = np.concatenate([eps, g.standard_normal(extra)])
    W = (w_star @ cs.T + z).reshape(size, t + 1, m).transpose(1, 0, 2).copy()
    return w_star, W, eps


def _blocks(n, size):
    out, start = [], 0
    while start < n:
        out.append(min(size, n - start))
        start += size
    return out


def _sweep(state, t, estimate):
    """Draw the step-t paths; optionally accumulate the row-t loss kernels."""
    prob, kern = state.problem, state.kernels
    m, k = prob.m, prob.k
    factor = _driver_factor(kern, t, k)
    R = kern.R_theta
    sums = {"C": np.zeros((t + 1, t + 1, m, m)), "R": np.zeros((t + 1, m, m)),
            "Rs": np.zeros((m, k))}
    ws_all, y_all, V_all, g_all = [], [], [], []
    for b, size in enumerate(_blocks(state.n_paths, state.block)):
        w_star, W, eps = _sample_block(state, t, b, size, factor)
        y, V, F, DV, DWs = propagate(prob, state.delta, R, w_star, W, eps)
        if estimate:
            lam, jstar = reverse_jacobians(R, DV, DWs, state.delta)
            sums["C"] += np.einsum("uni,vnj->uvij", F, F)
            sums["R"] += np.einsum("nij,snjk->sik", DV[t], lam)
            sums["Rs"] += np.einsum("nij,njk->ik", DV[t], jstar) + DWs[t].sum(axis=0)
        g = np.stack([g_weights(prob.activation, prob.loss, y, V[t], prob.a, prob.b, j)
                      for j in range(m)], axis=1)
        ws_all.append(w_star)
        y_all.append(y)
        V_all.append(V)
        g_all.append(g)
    cloud = Cloud(t, np.concatenate(ws_all), np.concatenate(y_all), np.concatenate(V_all, axis=1),
                  np.concatenate(g_all))
    return cloud, sums


def _theta_update(kern, t):
    """Exact theta-side update; C_theta is rebuilt on the whole grid 0..t+1."""
    eta, delta = kern.eta, kern.delta
    Rl = kern.R_l[t, :t + 1]
    A, B, R = kern.A, kern.C_star, kern.R_theta
    A[t + 1] = A[t] - eta * np.einsum("sij,sjk->ik", Rl, A[:t + 1])
    B[t + 1] = B[t] - eta * np.einsum("sij,sjk->ik", Rl, B[:t + 1]) - eta * kern.R_l_star[t]
    for u in range(t + 1):
        acc = R[t, u].copy()
        if u < t:
            acc -= eta * np.einsum("sij,sjk->ik", Rl[u + 1:], R[u + 1:t + 1, u])
        else:
            acc += np.eye(kern.m)
        R[t + 1, u] = acc
    rows = R[:t + 2, :t + 1]
    P = np.einsum("tuij,uvjk->tvik", rows, kern.C_l[:t + 1, :t + 1])
    noise = np.einsum("tvik,svlk->tsil", P, rows) * (eta**2 / delta)
    kern.C_theta[:t + 2, :t + 2] = (np.einsum("tij,skj->tsik", A[:t + 2], A[:t + 2])
                                    + np.einsum("tij,skj->tsik", B[:t + 2], B[:t + 2]) + noise)


def dmft_advance(state):
    """Estimate the loss-side kernels at the current horizon t and move to t + 1."""
    kern = state.kernels
    t = kern.T
    kern.grow(max(t + 1, 2 * kern.capacity if t + 1 > kern.capacity else 0))
    cloud, sums = _sweep(state, t, estimate=True)
    n, eta = state.n_paths, kern.eta
    # the whole block comes from one path cloud, which keeps C_theta a Gram matrix
    c = sums["C"] / (n * eta**2)
    kern.C_l[:t + 1, :t + 1] = 0.5 * (c + np.swapaxes(c, 0, 1).swapaxes(2, 3))
    kern.R_l[t, :t + 1] = sums["R"] / (n * eta)
    kern.R_l_star[t] = sums["Rs"] / (n * eta)
    _theta_update(kern, t)
    kern.T = t + 1
    if state.keep_laws:
        state.laws[t] = (cloud.g, cloud.w_star @ state.problem.u_hard)
    state.cloud = cloud
    return state


def sample_cloud(state):
    """Paths at the current horizon (the same draw a further advance would use)."""
    if state.cloud is None or state.cloud.t != state.horizon:
        state.cloud, _ = _sweep(state, state.horizon, estimate=False)
        if state.keep_laws:
            state.laws[state.horizon] = (state.cloud.g, state.cloud.w_star @ state.problem.u_hard)
    return state.cloud


def dmft_run(problem, delta, T, n_paths=100_000, seed=0, keep_laws=False, block=BLOCK,
             antithetic=True):
    """Kernels on 0..T and the path cloud at time T."""
    if T < 0:
        raise ValueError("T must be non-negative")
    state = DmftState(problem, delta, n_paths, seed, block=block, keep_laws=keep_laws,
                      capacity=max(T, 1), antithetic=antithetic)
    for _ in range(T):
        dmft_advance(state)
    sample_cloud(state)
    return state


def law_of_g(state, t=None, j=0):
    """Empirical law of (G_j(t), v_hard) from the sampled paths."""
    t = state.horizon if t is None else t
    if t > state.horizon or t < 0:
        raise ValueError(f"t={t} outside the computed horizon 0..{state.horizon}")
    if not 0 <= j < state.problem.m:
        raise ValueError(f"neuron index {j} out of range")
    if state.cloud is not None and state.cloud.t == t:
        g, v = state.cloud.g, state.cloud.w_star @ state.problem.u_hard
    elif t in state.laws:
        g, v = state.laws[t]
    elif state.cloud is not None and state.cloud.t > t:
        # the cloud at a later time carries V(t) for the same law
        c, p = state.cloud, state.problem
        g = np.stack([g_weights(p.activation, p.loss, c.y, c.V[t], p.a, p.b, i)
                      for i in range(p.m)], axis=1)
        v = c.w_star @ p.u_hard
    else:
        raise ValueError(f"no samples stored for t={t}; rerun with keep_laws=True")
    return GLaw(g[:, j], v, t=t, j=j)


def stationarity_gap(state, t, s):
    """E|V(t) - V(s)|^2 over the current path cloud."""
    c = sample_cloud(state)
    if max(t, s) > c.t or min(t, s) < 0:
        raise ValueError("times outside the sampled horizon")
    return float(np.mean(np.sum((c.V[t] - c.V[s]) ** 2, axis=-1)))
