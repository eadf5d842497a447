"""Experiment commands. Each writes CSV/JSON outputs plus a manifest with digests."""

import csv
import hashlib
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import model_core as mc
from . import rng as rngmod
from .data_synth import sample_dataset, sample_target
from .dmft_engine import DmftProblem, dmft_run, law_of_g, sample_cloud, stationarity_gap
from .hessian_lab import DENSE_LIMIT, alignment, esd, hessian_block, smallest_eigenpairs
from .rmt_predict import GLaw, SpectralError, extrapolate_inf, predict_outliers, stationary_time, threshold_curve
from .trainer import ProblemSpec, TrainConfig, gd_step, success_sweep, train
from .validation import flipped_weight_sign, run_suite

SCHEMAS = {
    "threshold_curve.csv": "threshold/1",
    "sweep.csv": "sweep/1",
    "trace.csv": "trace/1",
    "esd.csv": "esd/1",
    "eigenpairs.csv": "eigenpairs/1",
    "moments.csv": "dmft-moments/1",
    "validate.csv": "validate/1",
}


class TaskError(RuntimeError):
    """Numerical failure inside a named task."""


def _model(cfg):
    act = mc.ACTIVATIONS[cfg["activation"]]()
    loss = mc.make_loss(cfg["loss"]["kind"], cfg["loss"]["M"])
    return act, loss, mc.LINKS[cfg["link"]]()


def _dmft_problem(cfg):
    act, loss, link = _model(cfg)
    return DmftProblem(act, loss, link, eta=cfg["eta"], m=cfg["m"])


def _train_config(cfg, **kw):
    base = dict(eta=cfg["eta"], t_max=cfg["t_max"], rho_stop=cfg["rho_stop"],
                post_stop_steps=cfg["post_stop_steps"], plateau_delta=cfg["plateau_delta"],
                plateau_window=cfg["plateau_window"], test_n=cfg["test_n"],
                log_every=cfg["log_every"])
    base.update(kw)
    return TrainConfig(**base)


def _write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _git_tag():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out, command, cfg, files, seeds, started):
    manifest = {
        "command": command,
        "config": cfg,
        "version": __version__,
        "git": _git_tag(),
        "seeds": seeds,
        "wall_seconds": time.time() - started,
        "outputs": {f: _digest(Path(out) / f) for f in files},
        "schemas": {f: SCHEMAS[f] for f in files if f in SCHEMAS},
    }
    _write_json(Path(out) / "manifest.json", manifest)
    return manifest


def _warn(msg, warnings):
    warnings.append(msg)
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# predict-threshold


def _curve_for_seed(args):
    problem, ts, seed, cfg = args
    try:
        return threshold_curve(problem, ts, seeds=(seed,), n_paths=cfg["N_mc"], tol=cfg["tol"],
                               gap=cfg["gap"], bracket=tuple(cfg["bracket"]), extrapolate=False)
    except Exception as err:
        raise TaskError(f"threshold curve for seed {seed}: {err}") from err


def cmd_predict_threshold(cfg, out):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _dmft_problem(cfg)
    ts = sorted(set(cfg["t_grid"]))
    warnings = []
    tasks = [(problem, ts, s, cfg) for s in cfg["seeds"]]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as ex:
            curves = list(ex.map(_curve_for_seed, tasks))
    else:
        curves = [_curve_for_seed(t) for t in tasks]
    rows = []
    means = []
    for i, t in enumerate(ts):
        vals = np.array([c.results[i].per_seed[0] for c in curves])
        finite = np.all(np.isfinite(vals))
        mean = float(vals.mean()) if finite else float("inf")
        means.append(mean)
        rows.append({"t": t, "delta_star_mean": mean,
                     "delta_star_std": float(vals.std()) if finite else float("nan"),
                     "seeds": " ".join(str(s) for s in cfg["seeds"]),
                     "per_seed": " ".join(f"{v:.6f}" for v in vals)})
    _write_csv(out / "threshold_curve.csv", rows)
    summary = {"rows": rows, "warnings": warnings}
    if sum(1 for t in ts if t >= 1) >= 6:
        try:
            fit = extrapolate_inf(ts, means)
            summary.update(delta_inf=fit.delta_inf, fit_residual=fit.residual,
                           fit_coeffs=fit.coeffs.tolist(), fit_points=fit.n_points)
        except SpectralError as err:
            _warn(f"extrapolation failed: {err}", warnings)
    else:
        _warn("fewer than 6 points with t >= 1; no extrapolation", warnings)
    # stationarity proxy: first T where V stops moving, evaluated at the last threshold
    last = means[-1]
    proxy = None
    if np.isfinite(last) and max(ts) >= 1:
        T = stationary_time(problem, last, t_max=max(ts), n_paths=cfg["N_mc"], seed=cfg["seeds"][0])
        proxy = {"T": T, "delta_star": means[ts.index(T)] if T in ts else None}
    summary["stationarity_proxy"] = proxy
    _write_json(out / "threshold_summary.json", summary)
    files = ["threshold_curve.csv", "threshold_summary.json"]
    return write_manifest(out, "predict-threshold", cfg, files, {"seeds": cfg["seeds"]}, started)


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg, out):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    act, loss, link = _model(cfg)
    from .trainer import ModelSpec, trial_seed
    model = ModelSpec(act, loss, m=cfg["m"])
    tcfg = _train_config(cfg, log_every=10, test_n=0)
    rows = success_sweep(model, cfg["d_grid"], cfg["delta_grid"], cfg["trials"], tcfg,
                         seed=cfg["seed"], workers=cfg["workers"], link=link,
                         threshold=cfg["success_threshold"])
    from dataclasses import asdict
    _write_csv(out / "sweep.csv", [asdict(r) for r in rows])
    _write_json(out / "sweep_summary.json", {"rows": [asdict(r) for r in rows]})
    seeds = {f"{d}/{delta}/{i}": trial_seed(cfg["seed"], d, delta, i)
             for d in cfg["d_grid"] for delta in cfg["delta_grid"] for i in range(cfg["trials"])}
    return write_manifest(out, "sweep", cfg, ["sweep.csv", "sweep_summary.json"], seeds, started)


# ---------------------------------------------------------------------------
# grokking


def grokking_events(trace):
    """Step indices of the train-risk halving, rho crossing 0.5 and the gap peak."""
    tr = np.array(trace.train_risk)
    te = np.array(trace.test_risk)
    rho = np.array(trace.rho)
    ts = np.array(trace.t)
    gap = te - tr

    def first(mask):
        idx = np.flatnonzero(mask)
        return int(ts[idx[0]]) if len(idx) else None

    peak = int(np.argmax(gap))
    return {"t_train_half": first(tr < 0.5 * tr[0]), "t_rho_half": first(rho > 0.5),
            "t_gap_peak": int(ts[peak]), "gap_peak": float(gap[peak]), "gap_final": float(gap[-1]),
            "rho_final": float(rho[-1]), "steps": int(ts[-1]), "stop_reason": trace.stop_reason}


def cmd_grokking(cfg, out):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    act, loss, link = _model(cfg)
    from .trainer import ModelSpec
    tcfg = _train_config(cfg, test_n=max(cfg["test_n"], 1))
    trace = train(ModelSpec(act, loss, m=cfg["m"]), ProblemSpec(cfg["d"], cfg["delta"], link),
                  tcfg, seed=cfg["seed"])
    rows = [{"t": t, "rho": r, "train_risk": a, "test_risk": b, "gap": b - a}
            for t, r, a, b in zip(trace.t, trace.rho, trace.train_risk, trace.test_risk)]
    _write_csv(out / "trace.csv", rows)
    _write_json(out / "grokking_summary.json", grokking_events(trace))
    return write_manifest(out, "grokking", cfg, ["trace.csv", "grokking_summary.json"],
                          {"train": cfg["seed"]}, started)


# ---------------------------------------------------------------------------
# hessian-spectrum


def cmd_hessian_spectrum(cfg, out):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d, delta, seed = cfg["d"], cfg["delta"], cfg["seed"]
    act, loss, link = _model(cfg)
    target = sample_target(d, link, seed=seed)
    data = sample_dataset(int(round(delta * d)), target, seed=seed)
    params = mc.init_params(d, cfg["m"], rng=rngmod.stream(seed, "init"))
    params = params.with_theta(cfg["init_scale"] * params.theta)
    for _ in range(cfg["t"]):
        params = gd_step(params, act, loss, data, cfg["eta"])[0]
    block = hessian_block(params, act, loss, data, j=0, t=cfg["t"])
    files = ["eigenpairs.csv", "overlay.json"]
    warnings = []
    if d <= DENSE_LIMIT:
        spec = esd(block, bins=cfg["bins"])
        _write_csv(out / "esd.csv", [{"bin_left": a, "bin_right": b, "density": c} for a, b, c
                                     in zip(spec.edges[:-1], spec.edges[1:], spec.density)])
        files.insert(0, "esd.csv")
    else:
        _warn(f"d={d} exceeds the dense budget {DENSE_LIMIT}; ESD skipped, eigenpairs by Lanczos",
              warnings)
    eig = smallest_eigenpairs(block, p=cfg["p"])
    th = target.theta_hard
    _write_csv(out / "eigenpairs.csv", [
        {"index": i, "eigenvalue": float(eig.values[i]),
         "alignment": alignment(eig.vectors[:, i], th), "residual": float(eig.residuals[i])}
        for i in range(cfg["p"])])
    law = GLaw(block.g, data.x @ th, t=cfg["t"], j=0)
    try:
        rep = predict_outliers(law, delta, gap=cfg["gap"])
        overlay = rep.summary()
    except SpectralError as err:
        overlay = {"error": str(err)}
    overlay["lambda_min"] = float(eig.values[0])
    overlay["alignment_min"] = alignment(eig.vectors[:, 0], th)
    overlay["warnings"] = warnings
    _write_json(out / "overlay.json", overlay)
    return write_manifest(out, "hessian-spectrum", cfg, files, {"data": seed}, started)


# ---------------------------------------------------------------------------
# dmft-run


def cmd_dmft_run(cfg, out):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _dmft_problem(cfg)
    T = cfg["T_dmft"]
    state = dmft_run(problem, cfg["delta"], T, cfg["N_mc"], cfg["seed"], keep_laws=True)
    state.kernels.trimmed().save(out / "kernels.npz")
    cloud = sample_cloud(state)
    rows = []
    for t in range(T + 1):
        law = law_of_g(state, t)
        rows.append({"t": t, "C_theta": float(state.kernels.C_theta[t, t, 0, 0]),
                     "C_star": float(np.abs(state.kernels.C_star[t]).max()),
                     "EV2": float(np.mean(cloud.V[t] ** 2)), "EG": float(np.mean(law.g)),
                     "EGv2": float(np.mean(law.g * law.v[:, 0] ** 2)),
                     "stationarity": stationarity_gap(state, t, t - 1) if t else float("nan")})
    _write_csv(out / "moments.csv", rows)
    rep = predict_outliers(law_of_g(state, T), cfg["delta"], gap=cfg["gap"])
    _write_json(out / "dmft_summary.json", {"T": T, "outliers": rep.summary()})
    files = ["kernels.npz", "moments.csv", "dmft_summary.json"]
    return write_manifest(out, "dmft-run", cfg, files, {"dmft": cfg["seed"]}, started)


# ---------------------------------------------------------------------------
# validate


def cmd_validate(cfg, out, fault=None):
    started = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if fault == "weight_sign":
        with flipped_weight_sign():
            checks = run_suite(n_mc=min(cfg["N_mc"], 20_000), seed=cfg["seed"])
    else:
        checks = run_suite(n_mc=min(cfg["N_mc"], 20_000), seed=cfg["seed"])
    _write_csv(out / "validate.csv", [c.row() for c in checks])
    report = {"passed": all(c.passed for c in checks), "checks": [c.row() for c in checks]}
    _write_json(out / "validate.json", report)
    write_manifest(out, "validate", cfg, ["validate.csv", "validate.json"], {"suite": cfg["seed"]},
                   started)
    return report


COMMANDS = {
    "predict-threshold": cmd_predict_threshold,
    "sweep": cmd_sweep,
    "grokking": cmd_grokking,
    "hessian-spectrum": cmd_hessian_spectrum,
    "dmft-run": cmd_dmft_run,
    "validate": cmd_validate,
}
