"""Two-layer network, activations, losses and link functions.

The network is f(x) = (1/m) sum_j a_j sigma(theta_j . x + b_j) with the first
layer weights Theta (d x m) trained and (a, b) frozen.  Everything is written
for batches of inputs stored as rows.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DomainError(ValueError):
    """Raised when an activation or loss produces a non-finite value."""


class ModelConfigError(ValueError):
    """Raised for combinations the spectral prediction path does not support."""


def _finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# activations


def _gelu(z):
    pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    return z * cdf, cdf + z * pdf, (2.0 - z * z) * pdf


def _relu(z):
    pos = (z > 0).astype(float)
    return np.maximum(z, 0.0), pos, np.zeros_like(z)


@dataclass(frozen=True)
class Activation:
    """Scalar activation with its first two derivatives.

    ``kind`` is one of "gelu", "quad", "relu" or "custom".  The quad family is
    alpha * (1 - exp(-beta^2 z^2)).  ``bounds`` holds (sup|sigma'|, sup|sigma''|).
    """

    kind: str
    alpha: float = 9.0
    beta: float = 1.0 / 3.0
    fns: Optional[tuple] = field(default=None, compare=False, repr=False)
    custom_bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("gelu", "quad", "relu", "custom"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "custom" and (self.fns is None or len(self.fns) != 3):
            raise ValueError("custom activation needs (sigma, dsigma, d2sigma)")

    @property
    def smooth(self):
        return self.kind != "relu"

    @property
    def bounds(self):
        if self.kind == "gelu":
            r = _SQRT2
            d1 = 0.5 * (1.0 + erf(r / _SQRT2)) + r * _INV_SQRT2PI * np.exp(-0.5 * r * r)
            return float(d1), float(2.0 * _INV_SQRT2PI)
        if self.kind == "quad":
            a, b = self.alpha, self.beta
            return float(_SQRT2 * a * b * np.exp(-0.5)), float(2.0 * a * b * b)
        if self.kind == "relu":
            return 1.0, 0.0
        if self.custom_bounds is None:
            return np.inf, np.inf
        return tuple(float(v) for v in self.custom_bounds)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "gelu":
            out = _gelu(z)
        elif self.kind == "quad":
            b2 = self.beta**2
            e = np.exp(-b2 * z * z)
            c = 2.0 * self.alpha * b2
            out = self.alpha * (1.0 - e), c * z * e, c * e * (1.0 - 2.0 * b2 * z * z)
        elif self.kind == "relu":
            out = _relu(z)
        else:
            out = tuple(np.asarray(f(z), dtype=float) for f in self.fns)
        return out


def gelu():
    return Activation("gelu")


def quad(alpha=9.0, beta=1.0 / 3.0):
    return Activation("quad", alpha=alpha, beta=beta)


def relu():
    return Activation("relu")


def custom_activation(sigma, dsigma, d2sigma, bounds=None):
    return Activation("custom", fns=(sigma, dsigma, d2sigma), custom_bounds=bounds)


def activation_eval(act, z):
    """Return (sigma, sigma', sigma'') at z, raising DomainError on non-finite output."""
    s, ds, d2s = act(z)
    _finite(f"activation {act.kind}", s, ds, d2s)
    return s, ds, d2s


ACTIVATIONS = {"gelu": gelu, "quad": quad, "relu": relu}


# ---------------------------------------------------------------------------
# losses

_FD_STEP = 1e-6


@dataclass(frozen=True)
class Loss:
    """Loss l(y, z) in the prediction z.

    Calling returns (l, dl/dz, d2l/dz2, d/dy dl/dz).  Huber uses the quadratic
    branch on |z - y| <= M.
    """

    kind: str
    M: float = 1.0
    fns: Optional[tuple] = field(default=None, compare=False, repr=False)
    convex: bool = True

    def __post_init__(self):
        if self.kind not in ("huber", "square", "custom"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "huber" and not self.M > 0:
            raise ValueError("Huber threshold M must be positive")
        if self.kind == "custom" and (self.fns is None or len(self.fns) != 3):
            raise ValueError("custom loss needs (l, dl, d2l)")

    def __call__(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        r = z - y
        if self.kind == "huber":
            inside = np.abs(r) <= self.M
            val = np.where(inside, 0.5 * r * r, self.M * np.abs(r) - 0.5 * self.M**2)
            d1 = np.clip(r, -self.M, self.M)
            d2 = inside.astype(float)
            return val, d1, d2, -d2
        if self.kind == "square":
            one = np.ones_like(r)
            return 0.5 * r * r, r, one, -one
        f, df, d2f = self.fns
        dy = (df(y + _FD_STEP, z) - df(y - _FD_STEP, z)) / (2 * _FD_STEP)
        return f(y, z), df(y, z), d2f(y, z), dy


def huber(M=1.0):
    return Loss("huber", M=M)


def square():
    return Loss("square")


def custom_loss(l, dl, d2l, convex=False):
    return Loss("custom", fns=(l, dl, d2l), convex=convex)


def loss_eval(loss, y, z):
    """Return (l, l', l'', d_y l') with derivatives taken in the prediction."""
    out = loss(y, z)
    _finite(f"loss {loss.kind}", *out)
    return out


def make_loss(kind, M=1.0):
    if kind == "huber":
        return huber(M)
    if kind == "square":
        return square()
    raise ModelConfigError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# links


def _pr_fn(z, eps):
    return z[:, 0] ** 2


def _pr_grad(z, eps):
    g = np.zeros_like(z)
    g[:, 0] = 2.0 * z[:, 0]
    return g


def _linear_fn(z, eps):
    return z[:, 0]


def _linear_grad(z, eps):
    g = np.zeros_like(z)
    g[:, 0] = 1.0
    return g


@dataclass(frozen=True)
class Link:
    """Response y = h(z, eps) with z the k projections on the target directions.

    ``fn`` and ``grad`` act on batches: z has shape (N, k), eps shape (N,).
    Without ``grad`` the z-gradient is taken by central differences.
    """

    kind: str
    k: int = 1
    fn: Callable = field(default=_pr_fn, compare=False, repr=False)
    grad: Optional[Callable] = field(default=_pr_grad, compare=False, repr=False)
    bounded: bool = False
    default_hard: Optional[tuple] = field(default=None, compare=False)

    def __call__(self, z, eps):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.asarray(self.fn(z, np.asarray(eps, dtype=float)), dtype=float)

    def grad_z(self, z, eps):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        eps = np.asarray(eps, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(z, eps), dtype=float)
        out = np.empty_like(z)
        for i in range(z.shape[1]):
            e = np.zeros(z.shape[1])
            e[i] = _FD_STEP
            out[:, i] = (self.fn(z + e, eps) - self.fn(z - e, eps)) / (2 * _FD_STEP)
        return out

    def hard_basis(self):
        """Default orthonormal basis (k x r) of the hard subspace."""
        if self.default_hard is None:
            return np.eye(self.k)
        return np.asarray(self.default_hard, dtype=float)


def phase_retrieval():
    return Link("phase_retrieval", k=1, fn=_pr_fn, grad=_pr_grad, default_hard=((1.0,),))


def linear_link():
    return Link("linear", k=1, fn=_linear_fn, grad=_linear_grad, bounded=False,
                default_hard=((),))


def custom_link(fn, k, grad=None, bounded=False, hard=None):
    hard = None if hard is None else tuple(map(tuple, np.asarray(hard, dtype=float)))
    return Link("custom", k=k, fn=fn, grad=grad, bounded=bounded, default_hard=hard)


LINKS = {"phase_retrieval": phase_retrieval, "linear": linear_link}


def check_prediction_mode(act, loss, link):
    """Reject combinations outside the smooth, convex, well-posed setting."""
    if not act.smooth:
        raise ModelConfigError("ReLU is only supported for training, not spectral prediction")
    if not loss.convex:
        raise ModelConfigError("spectral prediction needs a convex loss")
    if loss.kind == "square" and not link.bounded:
        raise ModelConfigError("square loss needs a link with bounded responses")


# ---------------------------------------------------------------------------
# network


@dataclass
class NetworkParams:
    """First-layer weights theta (d x m) with frozen output weights a and biases b."""

    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim == 1:
            self.theta = self.theta[:, None]
        m = self.theta.shape[1]
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), (m,)).copy()
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (m,)).copy()
        self.a.flags.writeable = False
        self.b.flags.writeable = False

    @property
    def d(self):
        return self.theta.shape[0]

    @property
    def m(self):
        return self.theta.shape[1]

    def with_theta(self, theta):
        return replace(self, theta=np.asarray(theta, dtype=float))


def init_params(d, m=1, a=None, b=None, rng=None):
    """Neurons drawn uniformly on the unit sphere; a = 1 and b = 0 by default."""
    rng = np.random.default_rng() if rng is None else rng
    theta = rng.standard_normal((d, m))
    theta /= np.linalg.norm(theta, axis=0, keepdims=True)
    return NetworkParams(theta, np.ones(m) if a is None else a, np.zeros(m) if b is None else b)


def preacts(params, x):
    """Pre-activations theta_j . x + b_j, shape (n, m)."""
    return np.atleast_2d(x) @ params.theta + params.b


def forward(params, act, x):
    x = np.asarray(x, dtype=float)
    s, _, _ = activation_eval(act, preacts(params, x))
    out = s @ params.a / params.m
    return float(out[0]) if x.ndim == 1 else out


def risk_and_grad(params, act, loss, data):
    """Empirical risk and its gradient in theta (d x m)."""
    x, y = data.x, data.y
    n = x.shape[0]
    s, ds, _ = activation_eval(act, preacts(params, x))
    f = s @ params.a / params.m
    val, dl, _, _ = loss_eval(loss, y, f)
    coef = dl[:, None] * ds * (params.a / (n * params.m))
    return float(val.mean()), x.T @ coef


def risk(params, act, loss, data):
    s, _, _ = activation_eval(act, preacts(params, data.x))
    val = loss_eval(loss, data.y, s @ params.a / params.m)[0]
    return float(val.mean())


# flipped only by the fault-injection hook of the validation suite
_WEIGHT_SIGN = 1.0


def g_weights(act, loss, y, v, a, b, j):
    """Hessian-block weights for neuron j.

    v holds pre-bias projections theta_k . x, shape (N, m).  For m > 1 the
    weight is l'(y, f) sigma''(v_j + b_j); for m = 1 it is the full second
    derivative a^2 l'' sigma'^2 + a l' sigma''.
    """
    v = np.atleast_2d(v)
    m = v.shape[1]
    s, ds, d2s = activation_eval(act, v + b)
    f = s @ a / m
    _, dl, d2l, _ = loss_eval(loss, y, f)
    if m == 1:
        g = a[0] ** 2 * d2l * ds[:, 0] ** 2 + a[0] * dl * d2s[:, 0]
    else:
        g = dl * d2s[:, j]
    return _WEIGHT_SIGN * g


def weight_g(params, act, loss, j, v, y):
    """Scalar form of g_weights for one sample: v is the length-m projection vector."""
    v = np.asarray(v, dtype=float).reshape(1, -1)
    return float(g_weights(act, loss, np.atleast_1d(y), v, params.a, params.b, j)[0])
