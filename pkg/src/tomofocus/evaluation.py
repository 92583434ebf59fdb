"""MSE metric, SNR sweeps and wall-clock timing of the reconstruction methods.

A *solver* is any callable ``f(model, g, snr_db) -> complex M-vector`` taking
one complex echo.  A *network* entry is ``(NetworkParams, train_snr_db)``;
networks are evaluated in one batched forward pass per test SNR.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines
from .errors import InvalidInput
from .geometry import SteeringModel, real_extract_vec
from .lvamp import Focuser, forward
from .synth import DatasetSpec, generate_arrays

SWEEP_FIELDS = ("algorithm", "train_snr_db", "test_snr_db", "trials", "mse", "mse_std",
                "failures")
TIMING_FIELDS = ("algorithm", "trials", "total_seconds", "seconds_per_trial", "mode")


def mse(gamma_hat, gamma_true) -> float:
    """Per-bin mean squared complex error ||a - b||^2 / M."""
    a = np.asarray(gamma_hat)
    b = np.asarray(gamma_true)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInput(f"mse needs two equal-length vectors, got {a.shape} and {b.shape}")
    d = a - b
    return float(np.vdot(d, d).real) / a.size


# solver adapters ------------------------------------------------------------

def echo_noise_var(g, snr_db):
    # the echo already contains noise: P_noisy = P_signal (1 + 10^(-snr/10))
    p = float(np.vdot(g, g).real) / g.size
    return p / (10.0 ** (snr_db / 10.0) + 1.0)


def bp_solver(model, g, snr_db):
    """Back projection scaled by 1/N so a unit on-grid scatterer maps to 1."""
    return baselines.bp(model, g) / model.N


def omp_solver(model, g, snr_db, k_max=8):
    cfg = baselines.OmpConfig(k_max=k_max, noise_var=echo_noise_var(g, snr_db))
    return baselines.omp(model, g, cfg)


def sbl_solver(model, g, snr_db, max_iters=500):
    cfg = baselines.SblConfig(max_iters=max_iters, noise_var=echo_noise_var(g, snr_db))
    return baselines.sbl(model, g, cfg)


def vamp_solver(model, g, snr_db, iters=8):
    return baselines.lmmse_vamp(model, g, max(echo_noise_var(g, snr_db), 1e-12), iters)


STANDARD_SOLVERS = {"bp": bp_solver, "omp": omp_solver, "sbl": sbl_solver}


# sweep ----------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def cell(self, algorithm, test_snr_db) -> dict:
        for r in self.rows:
            if r["algorithm"] == algorithm and r["test_snr_db"] == test_snr_db:
                return r
        raise KeyError((algorithm, test_snr_db))

    def to_csv(self, path) -> None:
        _write_csv(path, SWEEP_FIELDS, self.rows)

    def series_csv(self, path) -> None:
        """One column per algorithm, one row per test SNR (plot-ready)."""
        algs = list(dict.fromkeys(r["algorithm"] for r in self.rows))
        snrs = sorted(set(r["test_snr_db"] for r in self.rows))
        rows = []
        for s in snrs:
            row = {"snr_db": s}
            for a in algs:
                row[a] = self.cell(a, s)["mse"]
            rows.append(row)
        _write_csv(path, ["snr_db"] + algs, rows)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def draw_test_set(model: SteeringModel, test_snr_db: float, trials: int, seed: int) -> dict:
    """Test draws for one SNR; scene and noise streams are keyed by (seed, index)."""
    spec = DatasetSpec(P=trials, snr_db=float(test_snr_db), seed=seed)
    return generate_arrays(model, spec)


def _stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def snr_sweep(model: SteeringModel, solvers: dict, networks: dict, test_snrs, trials: int,
              seed: int = 0, workers: int = 1) -> SweepResult:
    """Mean and std of the MSE of every method at every test SNR.

    All methods see identical inputs.  Solver exceptions are counted per
    trial in ``failures`` and excluded from the mean.
    """
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    for p, _ in networks.values():
        if p.N != model.N or p.M != model.M:
            raise InvalidInput("network does not match the model geometry")
    out = SweepResult()
    for snr in test_snrs:
        snr = float(snr)
        data = draw_test_set(model, snr, trials, seed)
        g = real_extract_vec(data["g_embed"])
        truth = real_extract_vec(data["gamma_embed"])
        for name, solver in solvers.items():
            def one(i, solver=solver):
                try:
                    return mse(solver(model, g[i], snr), truth[i])
                except Exception:  # noqa: BLE001 - counted, not fatal
                    return None
            if workers > 1:
                with ThreadPoolExecutor(workers) as ex:
                    vals = list(ex.map(one, range(trials)))
            else:
                vals = [one(i) for i in range(trials)]
            ok = [v for v in vals if v is not None]
            m, s = _stats(ok)
            out.rows.append(dict(algorithm=name, train_snr_db="n/a", test_snr_db=snr,
                                 trials=trials, mse=m, mse_std=s, failures=trials - len(ok)))
        for name, (params, train_snr) in networks.items():
            est = real_extract_vec(forward(params, model, data["g_embed"])[0])
            d = est - truth
            vals = np.sum(d.real ** 2 + d.imag ** 2, axis=1) / model.M
            m, s = _stats(vals)
            out.rows.append(dict(algorithm=name, train_snr_db=train_snr, test_snr_db=snr,
                                 trials=trials, mse=m, mse_std=s, failures=0))
    return out


# timing ---------------------------------------------------------------------

@dataclass
class TimingResult:
    rows: list = field(default_factory=list)

    def per_trial(self, algorithm, mode="single") -> float:
        for r in self.rows:
            if r["algorithm"] == algorithm and r["mode"] == mode:
                return r["seconds_per_trial"]
        raise KeyError(algorithm)

    def to_csv(self, path) -> None:
        _write_csv(path, TIMING_FIELDS, self.rows)


def timing_inputs(model, trials, seed, snrs=(0.0, 5.0, 10.0, 15.0)):
    """Pre-generated inputs cycling through ``snrs`` (results average over SNR levels)."""
    spec = DatasetSpec(P=trials, snr_db=tuple(float(s) for s in snrs), seed=seed)
    data = generate_arrays(model, spec)
    return real_extract_vec(data["g_embed"]), data["g_embed"], data["snr_db"]


def _time_loop(fn, n):
    fn(0)  # warm-up
    t = time.perf_counter()
    for i in range(n):
        fn(i)
    return time.perf_counter() - t


def timing_bench(model: SteeringModel, solvers: dict, networks: dict, trials: int,
                 seed: int = 0, parallel_workers: int = 0, trial_limits: dict | None = None
                 ) -> TimingResult:
    """Sequential single-input wall-clock per algorithm, BLAS pinned to one thread.

    Networks run through the compiled :class:`~tomofocus.lvamp.Focuser`.

    ``trial_limits`` caps the trial count of slow methods (per-trial time is
    still reported).  With ``parallel_workers > 1`` the solvers are timed a
    second time over a thread pool and reported with mode ``parallel``.
    """
    g, g_embed, snr = timing_inputs(model, trials, seed)
    limits = trial_limits or {}
    res = TimingResult()

    def add(name, n, total, mode):
        res.rows.append(dict(algorithm=name, trials=n, total_seconds=total,
                             seconds_per_trial=total / n, mode=mode))

    with threadpool_limits(limits=1):
        for name, solver in solvers.items():
            n = min(trials, limits.get(name, trials))
            add(name, n, _time_loop(lambda i: solver(model, g[i], snr[i]), n), "single")
        for name, (params, _) in networks.items():
            n = min(trials, limits.get(name, trials))
            focus = Focuser(params)
            add(name, n, _time_loop(lambda i: focus(g_embed[i]), n), "single")
    if parallel_workers > 1:
        for name, solver in solvers.items():
            n = min(trials, limits.get(name, trials))
            with ThreadPoolExecutor(parallel_workers) as ex:
                list(ex.map(lambda i: solver(model, g[i], snr[i]), range(min(n, 1))))
                t = time.perf_counter()
                list(ex.map(lambda i: solver(model, g[i], snr[i]), range(n)))
                add(name, n, time.perf_counter() - t, "parallel")
    return res
