"""Synthetic multi-index targets and Gaussian datasets.

Binary dataset container (little endian)::

    magic  b"DNDS"      4 bytes
    version uint32      currently 1
    n, d, k, r uint64
    seed   int64
    link   16 bytes     ascii kind, NUL padded
    x      n*d float64  row major
    y      n   float64
    eps    n   float64
    theta_star d*k float64 row major
    u_hard k*r float64 row major
"""

import struct
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import eval_hermitenorm, factorial
from scipy.stats import norm, rankdata

from . import rng as rngmod
from .model_core import LINKS, phase_retrieval

_MAGIC = b"DNDS"
_VERSION = 1
_HEADER = struct.Struct("<4sI4Qq16s")


@dataclass
class TargetSpec:
    """Orthonormal target directions theta_star (d x k) and hard basis u_hard (k x r)."""

    theta_star: np.ndarray
    link: object
    u_hard: np.ndarray

    @property
    def d(self):
        return self.theta_star.shape[0]

    @property
    def k(self):
        return self.theta_star.shape[1]

    @property
    def r(self):
        return self.u_hard.shape[1]

    @property
    def theta_hard(self):
        """Hard directions in input space, d x r."""
        return self.theta_star @ self.u_hard


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    eps: np.ndarray
    target: TargetSpec
    seed: int = 0

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]


def _orthonormal(a):
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def sample_target(d, link=None, u_hard=None, seed=0):
    """Draw orthonormal target directions by QR of a Gaussian matrix (R diagonal > 0)."""
    link = phase_retrieval() if link is None else link
    k = link.k
    if d < k:
        raise ValueError(f"need d >= k, got d={d}, k={k}")
    theta = _orthonormal(rngmod.stream(seed, "target").standard_normal((d, k)))
    u = link.hard_basis() if u_hard is None else np.asarray(u_hard, dtype=float)
    if u.ndim != 2 or u.shape[0] != k:
        raise ValueError(f"u_hard must be k x r with k={k}")
    if u.shape[1] and not np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-10):
        raise ValueError("u_hard columns must be orthonormal")
    return TargetSpec(theta, link, u)


def sample_dataset(n, target, seed=0, stream="train"):
    """Rows x_i ~ N(0, I_d), noise eps_i ~ N(0, 1), y_i = h(theta_star^T x_i, eps_i)."""
    if n < 1:
        raise ValueError("n must be positive")
    g = rngmod.stream(seed, "data", stream)
    x = g.standard_normal((n, target.d))
    eps = g.standard_normal(n)
    y = target.link(x @ target.theta_star, eps)
    return Dataset(x, y, eps, target, seed)


# ---------------------------------------------------------------------------
# hard subspace check

_CLIP = 4.0


def _hermite_bank(max_degree, n_vars):
    """Index tuples of normalised Hermite products up to max_degree in each variable."""
    return list(product(range(max_degree + 1), repeat=n_vars))


def _he(deg, u):
    return eval_hermitenorm(deg, u) / np.sqrt(factorial(deg))


def hard_subspace_check(link, u_candidate, mc=100_000, seed=0, max_degree=3):
    """Largest |E[T(y, P_perp z, eps) P_U z]| over a Hermite test bank.

    y is rank-transformed to Gaussian scores and all arguments are clipped to
    [-4, 4], so each test function is bounded.  A value at the Monte Carlo
    noise floor (see ``check_noise_floor``) supports U lying in the hard subspace.
    """
    u = np.asarray(u_candidate, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    k = link.k
    if u.shape[0] != k or u.shape[1] == 0:
        raise ValueError("u_candidate must be k x r with r >= 1")
    u = _orthonormal(u)
    g = rngmod.stream(seed, "hard-check")
    z = g.standard_normal((mc, k))
    eps = g.standard_normal(mc)
    y = link(z, eps)
    yg = norm.ppf((rankdata(y) - 0.5) / mc)
    perp = np.linalg.svd(np.eye(k) - u @ u.T)[0][:, : k - u.shape[1]]
    coords = [yg, *(z @ perp).T, eps]
    coords = [np.clip(c, -_CLIP, _CLIP) for c in coords]
    proj = z @ u
    worst = 0.0
    for degs in _hermite_bank(max_degree, len(coords)):
        t = np.ones(mc)
        for deg, c in zip(degs, coords):
            if deg:
                t = t * _he(deg, c)
        worst = max(worst, float(np.linalg.norm(t @ proj / mc)))
    return worst


def check_noise_floor(link, mc=100_000, max_degree=3, r=1):
    """Tolerance 3 * bank_size / sqrt(mc) for hard_subspace_check."""
    n_vars = 2 + link.k - r
    return 3.0 * (max_degree + 1) ** n_vars / np.sqrt(mc)


# ---------------------------------------------------------------------------
# binary container


def save_dataset(path, data):
    t = data.target
    tag = t.link.kind.encode("ascii")
    if len(tag) > 16:
        raise ValueError("link tag longer than 16 bytes")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, data.n, data.d, t.k, t.r, int(data.seed), tag))
        for arr in (data.x, data.y, data.eps, t.theta_star, t.u_hard):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path, link=None):
    """Read a container written by save_dataset; custom links must be supplied."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dataset header")
    magic, version, n, d, k, r, seed, tag = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not a dataset container or unsupported version")
    kind = tag.rstrip(b"\0").decode("ascii")
    if link is None:
        if kind not in LINKS:
            raise ValueError(f"link {kind!r} must be passed explicitly")
        link = LINKS[kind]()
    sizes = [n * d, n, n, d * k, k * r]
    if len(raw) != _HEADER.size + 8 * sum(sizes):
        raise ValueError("payload size does not match header")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    target = TargetSpec(parts[3].reshape(d, k), link, parts[4].reshape(k, r))
    return Dataset(parts[0].reshape(n, d), parts[1], parts[2], target, seed)
