"""Full-batch gradient descent on the first layer, with stopping rules and sweeps."""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .data_synth import sample_dataset, sample_target
from .model_core import (ACTIVATIONS, NetworkParams, init_params, make_loss, phase_retrieval,
                         risk, risk_and_grad)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    eta: float = 1.5
    t_max: int = 1000
    rho_stop: float = 0.9
    post_stop_steps: int = 100
    plateau_delta: float = 0.01
    plateau_window: int = 500
    test_n: int = 10_000
    log_every: int = 1
    divergence_factor: float = 1e3


# step sizes used in the experiments
PRESETS = {
    "gelu": TrainConfig(eta=1.5),
    "quad": TrainConfig(eta=0.25),
    "grokking": TrainConfig(eta=0.5),
}


@dataclass
class ModelSpec:
    activation: object
    loss: object
    m: int = 1
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None


@dataclass
class ProblemSpec:
    d: int
    delta: float
    link: object = field(default_factory=phase_retrieval)
    u_hard: Optional[np.ndarray] = None

    @property
    def n(self):
        return max(1, int(round(self.delta * self.d)))


@dataclass
class TrainTrace:
    t: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    train_risk: list = field(default_factory=list)
    test_risk: Optional[list] = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    params: Optional[NetworkParams] = None
    stop_reason: str = ""
    final_rho: float = float("nan")
    success: float = float("nan")

    def columns(self):
        cols = {"t": self.t, "rho": self.rho, "train_risk": self.train_risk}
        if self.test_risk is not None:
            cols["test_risk"] = self.test_risk
        cols["grad_norm"] = self.grad_norm
        return cols

    def to_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(zip(*cols.values()))


def gd_step(params, act, loss, data, eta):
    """One full-batch step theta <- theta - eta grad. Returns (params, risk, grad)."""
    val, grad = risk_and_grad(params, act, loss, data)
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite risk or gradient")
    return params.with_theta(params.theta - eta * grad), val, grad


def correlation(params, theta_star):
    """Per-neuron |Theta_star^T theta_j| / |theta_j| and its maximum."""
    th = params.theta if isinstance(params, NetworkParams) else np.asarray(params)
    ts = np.asarray(theta_star)
    if ts.ndim == 1:
        ts = ts[:, None]
    norms = np.linalg.norm(th, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    # a zero-norm neuron has no direction and counts as uncorrelated
    per = np.where(norms > 0, np.linalg.norm(ts.T @ th, axis=0) / safe, 0.0)
    return per, float(per.max())


def success_metric(params, theta_star):
    """min over target directions of max over neurons of the absolute cosine."""
    th = params.theta
    ts = np.asarray(theta_star)
    if ts.ndim == 1:
        ts = ts[:, None]
    norms = np.linalg.norm(th, axis=0)
    cos = np.where(norms > 0, np.abs(ts.T @ th) / np.where(norms > 0, norms, 1.0), 0.0)
    return float(cos.max(axis=1).min())


def train(model, problem, cfg=None, seed=0):
    """Run GD from a spherical init on fresh data; see TrainConfig for the stopping rules."""
    cfg = TrainConfig() if cfg is None else cfg
    if cfg.eta <= 0:
        raise ValueError("eta must be positive")
    target = sample_target(problem.d, problem.link, problem.u_hard, seed=seed)
    data = sample_dataset(problem.n, target, seed=seed, stream="train")
    test = sample_dataset(cfg.test_n, target, seed=seed, stream="test") if cfg.test_n > 0 else None
    params = init_params(problem.d, model.m, model.a, model.b, rng=rngmod.stream(seed, "init"))
    act, loss = model.activation, model.loss

    trace = TrainTrace(test_risk=[] if test is not None else None)
    rho_hist = []
    risk0 = None
    gate_t = None
    t = 0
    while True:
        try:
            new, val, grad = gd_step(params, act, loss, data, cfg.eta)
        except DivergenceError:
            trace.stop_reason = "divergence"
            break
        if risk0 is None:
            risk0 = val
        rho = correlation(params, target.theta_star)[1]
        rho_hist.append(rho)
        if t % cfg.log_every == 0:
            trace.t.append(t)
            trace.rho.append(rho)
            trace.train_risk.append(val)
            trace.grad_norm.append(float(np.linalg.norm(grad)))
            if test is not None:
                trace.test_risk.append(risk(params, act, loss, test))
        if val > cfg.divergence_factor * max(risk0, 1e-300):
            trace.stop_reason = "divergence"
            break
        if gate_t is None and rho >= cfg.rho_stop:
            gate_t = t
        if gate_t is not None and t >= gate_t + cfg.post_stop_steps:
            trace.stop_reason = "gate"
            break
        if (gate_t is None and t >= cfg.plateau_window
                and abs(rho - rho_hist[t - cfg.plateau_window]) < cfg.plateau_delta):
            trace.stop_reason = "plateau"
            break
        if t >= cfg.t_max:
            trace.stop_reason = "t_max"
            break
        params = new
        t += 1
    trace.params = params
    trace.final_rho = rho_hist[-1] if rho_hist else float("nan")
    trace.success = success_metric(params, target.theta_star)
    return trace


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    d: int
    delta: float
    trials: int
    success_mean: float
    success_std: float
    rho_median: float
    rho_q30: float
    rho_q70: float


def _trial(args):
    model, problem, cfg, seed, threshold = args
    tr = train(model, problem, cfg, seed=seed)
    return tr.success, float(tr.success >= threshold)


def trial_seed(base, d, delta, trial):
    return rngmod.derive_seed(base, int(d), int(round(delta * 1000)), int(trial))


def success_sweep(model, d_grid, delta_grid, trials, cfg=None, seed=0, workers=1,
                  link=None, threshold=0.5):
    """Success probability over a (d, delta) grid.

    Each trial gets an independent seed derived from (seed, d, delta, trial),
    so the table does not depend on the worker count.
    """
    cfg = TrainConfig(log_every=10, test_n=0) if cfg is None else cfg
    link = phase_retrieval() if link is None else link
    tasks = []
    for d in d_grid:
        for delta in delta_grid:
            prob = ProblemSpec(int(d), float(delta), link)
            tasks += [(model, prob, cfg, trial_seed(seed, d, delta, i), threshold)
                      for i in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_trial, tasks, chunksize=1))
    else:
        results = [_trial(t) for t in tasks]
    rows = []
    i = 0
    for d in d_grid:
        for delta in delta_grid:
            chunk = np.array(results[i:i + trials])
            i += trials
            rho, ok = chunk[:, 0], chunk[:, 1]
            rows.append(SweepRow(int(d), float(delta), trials, float(ok.mean()), float(ok.std()),
                                 float(np.median(rho)), float(np.quantile(rho, 0.3)),
                                 float(np.quantile(rho, 0.7))))
    return rows


def sweep_to_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])))
        w.writeheader()
        w.writerows(asdict(r) for r in rows)


def model_from_names(activation="gelu", loss="huber", M=1.0, m=1):
    return ModelSpec(ACTIVATIONS[activation](), make_loss(loss, M), m=m)
