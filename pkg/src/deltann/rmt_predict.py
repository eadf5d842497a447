"""Spectral predictions for H = (1/n) X^T diag(G) X with a spiked weight law.

The Stieltjes transform alpha(z) of the bulk solves

    z + 1/alpha = delta E[G / (delta + G alpha)],

its left edge is c = sup_{0 < alpha < A} z(alpha) with z(alpha) the right
hand side minus 1/alpha, and isolated eigenvalues below c are the roots z of
det(-z I + E[delta G v v^T / (delta + G alpha(z))]) = 0.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .dmft_engine import GLaw, dmft_run, law_of_g

__all__ = ["GLaw", "stieltjes", "left_edge", "edge_point", "density", "outlier_roots",
           "alignment_predict", "threshold_at_t", "threshold_curve", "extrapolate_inf",
           "ExistenceOracle"]


class SpectralError(ValueError):
    pass


class NonMonotoneError(RuntimeError):
    pass


def _zfun(g, delta, alpha):
    return -1.0 / alpha + delta * np.mean(g / (delta + g * alpha))


def _alpha_cap(g, delta):
    gmin = g.min()
    return delta / -gmin if gmin < 0 else np.inf


@dataclass
class StieltjesSolution:
    z: complex
    alpha: complex
    residual: float
    iterations: int


def _residual(g, delta, z, alpha):
    return abs(z + 1.0 / alpha - delta * np.mean(g / (delta + g * alpha)))


def edge_point(glaw, delta, grid=300):
    """Left bulk edge c and the maximiser alpha_c of z(alpha)."""
    g = glaw.g if isinstance(glaw, GLaw) else np.asarray(glaw, float)
    cap = _alpha_cap(g, delta)
    hi = cap * (1 - 1e-9) if np.isfinite(cap) else 1e8
    alphas = np.geomspace(1e-8, hi, grid)
    vals = np.array([_zfun(g, delta, a) for a in alphas])
    i = int(np.argmax(vals))
    if i == grid - 1 and not np.isfinite(cap):
        return float(vals[i]), float(alphas[i])
    lo_a, hi_a = alphas[max(i - 1, 0)], alphas[min(i + 1, grid - 1)]
    res = minimize_scalar(lambda a: -_zfun(g, delta, a), bounds=(lo_a, hi_a), method="bounded",
                          options={"xatol": 1e-12 * hi_a})
    if -res.fun >= vals[i]:
        return float(-res.fun), float(res.x)
    return float(vals[i]), float(alphas[i])


def left_edge(glaw, delta):
    return edge_point(glaw, delta)[0]


def _real_alpha(g, delta, z, edge=None):
    c, ac = edge_point(g, delta) if edge is None else edge
    if z >= c:
        raise SpectralError(f"real z={z} is not below the left edge {c}")
    # z(alpha) increases from -inf at 0 to c at alpha_c
    a_lo = 0.5 * ac
    while _zfun(g, delta, a_lo) > z:
        a_lo *= 0.5
    return brentq(lambda a: _zfun(g, delta, a) - z, a_lo, ac, xtol=1e-15, rtol=1e-15, maxiter=500)


def stieltjes(glaw, delta, z, damping=0.5, tol=1e-10, max_iter=10_000, alpha0=None):
    """Solve for alpha(z).

    Real z below the left edge is handled by inverting z(alpha) on (0, alpha_c).
    Complex z uses damped fixed-point iteration from alpha0 = -1/z followed by
    Newton steps that stay in the upper half plane.
    """
    g = glaw.g if isinstance(glaw, GLaw) else np.asarray(glaw, float)
    if np.isscalar(z) and np.isreal(z):
        z = float(np.real(z))
        a = _real_alpha(g, delta, z)
        return StieltjesSolution(z, a, float(_residual(g, delta, z, a)), 0)
    z = complex(z)
    if z.imag <= 0:
        raise SpectralError("complex z must lie in the upper half plane")
    a = -1.0 / z if alpha0 is None else complex(alpha0)
    it = 0
    res = _residual(g, delta, z, a)
    while res > 1e-6 and it < max_iter:
        new = 1.0 / (delta * np.mean(g / (delta + g * a)) - z)
        a = (1 - damping) * a + damping * new
        res = _residual(g, delta, z, a)
        it += 1
    while res > tol and it < max_iter:
        den = delta + g * a
        f = z + 1.0 / a - delta * np.mean(g / den)
        fp = -1.0 / a**2 + delta * np.mean(g * g / den**2)
        step = f / fp
        cand = a - step
        while cand.imag < 0 and abs(step) > 1e-300:
            step *= 0.5
            cand = a - step
        a = cand
        new_res = _residual(g, delta, z, a)
        it += 1
        if new_res >= res and res < 10 * tol:
            res = new_res
            break
        res = new_res
    if res > tol:
        raise SpectralError(f"Stieltjes iteration stalled at residual {res:.2e} for z={z}")
    return StieltjesSolution(z, a, float(res), it)


def density(glaw, delta, xs, eta=1e-3):
    """Bulk density Im alpha(x + i eta) / pi with warm starts along the grid."""
    g = glaw.g if isinstance(glaw, GLaw) else np.asarray(glaw, float)
    out = np.empty(len(xs))
    a = None
    for i, x in enumerate(xs):
        try:
            sol = stieltjes(g, delta, complex(x, eta), alpha0=a, tol=1e-9)
        except SpectralError:
            sol = stieltjes(g, delta, complex(x, eta), tol=1e-9)
        a = sol.alpha
        out[i] = a.imag / np.pi
    return out


def spectral_cdf(glaw, delta, lo, hi, points=2000, eta=1e-3):
    """Grid and cumulative distribution of the bulk law on [lo, hi]."""
    xs = np.linspace(lo, hi, points)
    rho = density(glaw, delta, xs, eta)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(xs))])
    return xs, cdf / cdf[-1]


# ---------------------------------------------------------------------------
# outliers


@dataclass
class OutlierReport:
    delta: float
    edge: float
    alpha_edge: float
    z_dagger: float
    boundary_value: float
    roots: list = field(default_factory=list)
    multiplicities: list = field(default_factory=list)
    bases: list = field(default_factory=list)
    omega: list = field(default_factory=list)

    @property
    def exists(self):
        return len(self.roots) > 0

    def summary(self):
        return {"delta": self.delta, "edge": self.edge, "z_dagger": self.z_dagger,
                "boundary_value": self.boundary_value, "exists": self.exists,
                "roots": list(map(float, self.roots)), "multiplicities": self.multiplicities,
                "omega": list(map(float, self.omega))}


def _spike_matrix(glaw, delta, alpha):
    w = delta * glaw.g / (delta + glaw.g * alpha)
    return (glaw.v * w[:, None]).T @ glaw.v / glaw.n


def outlier_roots(glaw, delta, gap=0.01, edge=None):
    """Isolated eigenvalues below min(c, 0) - gap, with kernel bases of the spike matrix."""
    if glaw.r == 0:
        raise SpectralError("the law has no hard directions")
    g = glaw.g
    c, ac = edge_point(g, delta) if edge is None else edge
    zd = min(c, 0.0) - gap

    def branches(z):
        mat = _spike_matrix(glaw, delta, _real_alpha(g, delta, z, (c, ac)))
        return np.linalg.eigvalsh(mat) - z

    bval = branches(zd)
    rep = OutlierReport(delta, c, ac, zd, float(bval.min()))
    if np.all(bval >= 0):
        return rep
    # branches grow like -z, so step left until all are positive
    step = max(1.0, abs(zd))
    zlo = zd - step
    while np.any(branches(zlo) < 0):
        step *= 2
        zlo = zd - step
        if step > 1e8:
            raise SpectralError("spike function does not turn positive")
    roots = []
    for i in np.flatnonzero(bval < 0):
        f = lambda z, i=i: branches(z)[i]
        roots.append(brentq(f, zlo, zd, xtol=1e-12, rtol=1e-12))
    roots = np.sort(np.array(roots))
    clusters = []
    for z in roots:
        if clusters and abs(z - clusters[-1][0]) < 1e-6:
            clusters[-1][1] += 1
        else:
            clusters.append([z, 1])
    for z, mult in clusters:
        mat = _spike_matrix(glaw, delta, _real_alpha(g, delta, z, (c, ac)))
        w, U = np.linalg.eigh(mat)
        idx = np.argsort(np.abs(w - z))[:mult]
        rep.roots.append(float(z))
        rep.multiplicities.append(int(mult))
        rep.bases.append(U[:, idx])
    return rep


def alignment_predict(report, glaw, delta):
    """Limiting sum_q |Theta_H^T xi_q|^2 for each root of the report."""
    g = glaw.g
    omegas = []
    for z, S in zip(report.roots, report.bases):
        a = _real_alpha(g, delta, z, (report.edge, report.alpha_edge))
        den = delta + g * a
        inv_deriv = 1.0 / a**2 - delta * np.mean(g * g / den**2)
        if inv_deriv <= 1e-14:
            raise SpectralError(f"root {z} sits at the bulk edge; alignment undefined")
        dalpha = 1.0 / inv_deriv
        w = delta * g * g * dalpha / den**2
        D = np.eye(glaw.r) + (glaw.v * w[:, None]).T @ glaw.v / glaw.n
        omegas.append(float(np.trace(np.linalg.inv(S.T @ D @ S))))
    report.omega = omegas
    return omegas


def predict_outliers(glaw, delta, gap=0.01):
    rep = outlier_roots(glaw, delta, gap)
    alignment_predict(rep, glaw, delta)
    return rep


# ---------------------------------------------------------------------------
# thresholds


@dataclass
class ThresholdResult:
    t: int
    mean: float
    std: float
    per_seed: list
    infinite: bool = False
    probes: list = field(default_factory=list)


class ExistenceOracle:
    """Outlier existence as a function of (delta, t, seed) with memoised runs."""

    def __init__(self, problem, n_paths, gap, neuron):
        self.problem = problem
        self.n_paths = n_paths
        self.gap = gap
        self.neuron = neuron
        self.cache = {}

    def __call__(self, delta, t, seed):
        key = (round(delta, 12), t, seed)
        if key not in self.cache:
            state = dmft_run(self.problem, delta, t, self.n_paths, seed)
            js = range(self.problem.m) if self.neuron is None else [self.neuron]
            self.cache[key] = any(outlier_roots(law_of_g(state, t, j), delta, self.gap).exists
                                  for j in js)
        return self.cache[key]


def _bisect(oracle, t, seed, bracket, tol, cap, floor=0.05):
    """Bisection on outlier existence, then two probes either side of the result.

    Bisection alone nests its interval and so can never see a violation; the
    side probes at +-max(5 tol, 5%) expose a missing outlier just above the
    reported threshold or one just below it.
    """
    lo, hi = bracket
    path = []

    def probe(d):
        flag = oracle(d, t, seed)
        path.append((d, flag))
        return flag

    while probe(lo):
        hi, lo = lo, lo / 2
        if lo < floor:
            return lo, path
    while not probe(hi):
        lo, hi = hi, hi * 2
        if hi > cap:
            return np.inf, path
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            hi = mid
        else:
            lo = mid
    est = 0.5 * (lo + hi)
    side = max(5 * tol, 0.05 * est)
    probe(est + side)
    if est - side > 0:
        probe(est - side)
    ordered = sorted(path, key=lambda p: p[0])
    for (d1, f1), (d2, f2) in zip(ordered, ordered[1:]):
        if (f1 and not f2) or (d1 == d2 and f1 != f2):
            raise NonMonotoneError(f"existence not monotone in delta at t={t}, seed={seed}: "
                                   f"{[(round(d, 4), f) for d, f in ordered]}")
    return est, path


def threshold_at_t(problem, t, seeds=(0, 1, 2), n_paths=100_000, tol=0.01, bracket=(1.0, 16.0),
                   cap=64.0, gap=0.01, neuron=None, oracle=None):
    """Smallest delta with an outlier at time t, by bisection per seed."""
    oracle = ExistenceOracle(problem, n_paths, gap, neuron) if oracle is None else oracle
    vals, probes = [], []
    for seed in seeds:
        d, path = _bisect(oracle, t, seed, bracket, tol, cap)
        vals.append(d)
        probes.append(path)
    vals = np.array(vals, dtype=float)
    inf = bool(np.any(~np.isfinite(vals)))
    mean = float(np.inf) if inf else float(vals.mean())
    std = float(np.nan) if inf else float(vals.std())
    return ThresholdResult(t, mean, std, vals.tolist(), inf, probes)


@dataclass
class Extrapolation:
    delta_inf: float
    coeffs: np.ndarray
    residual: float
    n_points: int


def extrapolate_inf(ts, deltas, degree=4):
    """Least-squares fit of delta*(t) on {1, 1/t, ..., 1/t^degree}; returns the constant."""
    ts = np.asarray(ts, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    keep = (ts >= 1) & np.isfinite(deltas)
    ts, deltas = ts[keep], deltas[keep]
    if len(ts) < degree + 2:
        raise SpectralError(f"need at least {degree + 2} finite points with t >= 1")
    X = np.vander(1.0 / ts, degree + 1, increasing=True)
    coef, res, rank, _ = np.linalg.lstsq(X, deltas, rcond=None)
    if rank < degree + 1:
        raise SpectralError("rank-deficient extrapolation design")
    resid = float(np.sqrt(np.mean((X @ coef - deltas) ** 2)))
    return Extrapolation(float(coef[0]), coef, resid, len(ts))


@dataclass
class ThresholdCurve:
    ts: list
    results: list
    extrapolation: Optional[Extrapolation] = None

    def rows(self):
        return [{"t": r.t, "delta_star_mean": r.mean, "delta_star_std": r.std,
                 "per_seed": " ".join(f"{v:.4f}" for v in r.per_seed), "infinite": r.infinite}
                for r in self.results]

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def summary(self):
        out = {"rows": self.rows()}
        if self.extrapolation is not None:
            e = self.extrapolation
            out["delta_inf"] = e.delta_inf
            out["fit_residual"] = e.residual
            out["fit_points"] = e.n_points
        return out


def threshold_curve(problem, ts, seeds=(0, 1, 2), n_paths=100_000, tol=0.01, gap=0.01,
                    bracket=(1.0, 16.0), cap=64.0, extrapolate=True, progress=None, oracle=None):
    """delta*(t) over a grid of times; pass an ExistenceOracle to share DMFT runs across calls."""
    oracle = ExistenceOracle(problem, n_paths, gap, None) if oracle is None else oracle
    results = []
    for t in ts:
        res = threshold_at_t(problem, t, seeds, n_paths, tol, bracket, cap, gap, oracle=oracle)
        results.append(res)
        if progress is not None:
            progress(res)
    curve = ThresholdCurve(list(ts), results)
    if extrapolate and sum(1 for t in ts if t >= 1) >= 6:
        curve.extrapolation = extrapolate_inf([r.t for r in results], [r.mean for r in results])
    return curve


def stationary_time(problem, delta, t_max=25, n_paths=100_000, seed=0, tol=1e-3):
    """First T with E|V(T) - V(T-1)|^2 < tol, or None."""
    from .dmft_engine import DmftState, dmft_advance, sample_cloud, stationarity_gap
    state = DmftState(problem, delta, n_paths, seed)
    for T in range(1, t_max + 1):
        dmft_advance(state)
        sample_cloud(state)
        if stationarity_gap(state, T, T - 1) < tol:
            return T
    return None
