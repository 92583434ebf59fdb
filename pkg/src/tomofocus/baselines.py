"""Reference reconstructions: back projection, OMP, SBL and untrained VAMP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidConfig, InvalidShape
from .geometry import SteeringModel, real_embed_vec, real_extract_vec
from .lvamp import ALPHA_MIN, SOFT_THETA, _shrink


@dataclass(frozen=True)
class OmpConfig:
    k_max: int = 8
    residual_tol: float = 1e-3
    # when set, stop once the residual energy is within two standard deviations
    # of the expected noise energy N * noise_var
    noise_var: float | None = None

    def __post_init__(self):
        if self.k_max < 1:
            raise InvalidConfig("k_max must be >= 1")


@dataclass(frozen=True)
class SblConfig:
    max_iters: int = 500
    tol: float = 1e-4
    prune_threshold: float = 1e-8
    noise_var: float | None = None

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0 or self.prune_threshold < 0:
            raise InvalidConfig("invalid SBL settings")


@dataclass
class SolverInfo:
    iterations: int = 0
    converged: bool = True
    rank_deficient: bool = False
    support: list = field(default_factory=list)
    history: list = field(default_factory=list)


def _check(model, g):
    g = np.asarray(g, dtype=complex)
    if g.shape[-1] != model.N:
        raise InvalidShape(f"echo length {g.shape[-1]} does not match N={model.N}")
    return g


def bp(model: SteeringModel, g) -> np.ndarray:
    """Back projection H^H g (rows of a 2-D input are separate echoes)."""
    g = _check(model, g)
    return g @ model.H.conj()


def omp(model: SteeringModel, g, cfg: OmpConfig = OmpConfig(), return_info=False):
    g = _check(model, g)
    H = model.H
    M = model.M
    info = SolverInfo()
    out = np.zeros(M, dtype=complex)
    gnorm = np.linalg.norm(g)
    if gnorm == 0:
        return (out, info) if return_info else out
    if cfg.noise_var is not None:
        stop2 = cfg.noise_var * (model.N + 2 * np.sqrt(model.N))
    else:
        stop2 = (cfg.residual_tol * gnorm) ** 2
    r = g.copy()
    support = []
    coef = np.zeros(0, dtype=complex)
    info.history.append(gnorm)
    for _ in range(min(cfg.k_max, model.N)):
        if r.real @ r.real + r.imag @ r.imag <= stop2:
            break
        corr = np.abs(H.conj().T @ r)
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        A = H[:, support]
        coef, _, rank, _ = np.linalg.lstsq(A, g, rcond=None)
        if rank < len(support):
            info.rank_deficient = True
        r = g - A @ coef
        info.history.append(float(np.linalg.norm(r)))
    out[support] = coef
    info.iterations = len(support)
    info.support = support
    return (out, info) if return_info else out


def _estimate_noise_var(model, g):
    """Residual power after the best scalar fit of the back-projected image."""
    x = model.H @ bp(model, g)
    a = np.vdot(x, g) / max(np.vdot(x, x).real, 1e-300)
    res = g - a * x
    power = np.vdot(g, g).real / model.N
    return max(np.vdot(res, res).real / model.N, 1e-6 * power)


def sbl_evidence(H, gam, noise_var, g) -> float:
    """Log marginal likelihood of ``g`` under CN(0, noise_var I + H diag(gam) H^H)."""
    N = H.shape[0]
    C = noise_var * np.eye(N) + (H * gam) @ H.conj().T
    c, low = linalg.cho_factor(C, lower=True)
    logdet = 2 * np.sum(np.log(np.abs(np.diag(c))))
    quad = np.vdot(g, linalg.cho_solve((c, low), g)).real
    return float(-N * np.log(np.pi) - logdet - quad)


def sbl(model: SteeringModel, g, cfg: SblConfig = SblConfig(), return_info=False,
        track_evidence=False):
    """EM sparse Bayesian learning with per-atom prior variances 1/alpha_m.

    Each iteration computes the Gaussian posterior of the active atoms and
    resets every variance to its posterior second moment.  Atoms whose
    variance falls below ``prune_threshold`` times the largest are dropped.
    """
    g = _check(model, g)
    H = model.H
    N, M = H.shape
    info = SolverInfo(converged=False)
    out = np.zeros(M, dtype=complex)
    power = np.vdot(g, g).real / N
    if power == 0:
        info.converged = True
        return (out, info) if return_info else out
    s2 = cfg.noise_var if cfg.noise_var is not None else _estimate_noise_var(model, g)
    active = np.arange(M)
    gam = np.full(M, power / M)
    mu = np.zeros(M, dtype=complex)
    eye = np.eye(N)
    for it in range(1, cfg.max_iters + 1):
        Ha = H[:, active]
        C = s2 * eye + (Ha * gam) @ Ha.conj().T
        cf = linalg.cho_factor(C, lower=True, check_finite=False)
        CiH = linalg.cho_solve(cf, Ha, check_finite=False)
        Cig = linalg.cho_solve(cf, g, check_finite=False)
        mu = gam * (Ha.conj().T @ Cig)
        sigma_diag = gam - gam ** 2 * np.einsum("ij,ij->j", Ha.conj(), CiH).real
        new = mu.real ** 2 + mu.imag ** 2 + np.maximum(sigma_diag, 0.0)
        if track_evidence:
            info.history.append(sbl_evidence(Ha, gam, s2, g))
        change = np.max(np.abs(new - gam)) / max(np.max(gam), 1e-300)
        gam = new
        if cfg.prune_threshold > 0:
            keep = gam > cfg.prune_threshold * gam.max()
            if not keep.all():
                active, gam, mu = active[keep], gam[keep], mu[keep]
        info.iterations = it
        if change < cfg.tol:
            info.converged = True
            break
    out[active] = mu
    info.support = active.tolist()
    return (out, info) if return_info else out


def _soft_theta(M2, threshold):
    th = np.tile(SOFT_THETA, (M2, 1))
    th[:, 0] = threshold
    th[:, 1] = threshold + 1.0
    return th


def lmmse_vamp(model: SteeringModel, g, noise_var: float, iters: int = 8,
               threshold: float = 1.0, alpha_min: float = ALPHA_MIN, return_trace=False,
               init_theta=None):
    """VAMP with an exact LMMSE linear stage and a soft-threshold denoiser.

    ``noise_var`` is the complex per-sample noise variance.  The recursion is
    the same initialization-then-layers schedule as the unfolded network, with
    the layer-0 estimate H^T g / N; every linear step solves its own
    regularized normal equations.  ``return_trace`` adds the per-iteration
    scalar variances ``chi1`` used by the linear stage.
    """
    if noise_var <= 0:
        raise InvalidConfig("noise_var must be positive")
    g = _check(model, g)
    y = real_embed_vec(g)
    A = np.asarray(model.H_embed)
    N, twoM = model.N, A.shape[1]
    lo, hi = alpha_min, 1 - alpha_min
    prec_w = 2.0 / noise_var          # precision of each real noise coordinate
    AtA = A.T @ A
    Aty = A.T @ y
    eig = np.linalg.eigvalsh(AtA)
    theta = _soft_theta(twoM, threshold)
    chi_hist = []

    v2 = Aty / N
    chi2 = float(y @ y) / N
    theta0 = theta if init_theta is None else np.broadcast_to(init_theta, theta.shape)
    xhat, slope = _shrink(v2, np.full(twoM, chi2), theta0)
    a2 = min(max(slope.mean(), lo), hi)
    for _ in range(iters):
        v1 = (xhat - a2 * v2) / (1 - a2)
        chi1 = a2 * chi2 / (1 - a2)
        chi_hist.append(chi1)
        prec_p = 1.0 / chi1
        K = prec_w * AtA + prec_p * np.eye(twoM)
        try:
            xt = linalg.solve(K, prec_w * Aty + prec_p * v1, assume_a="pos")
        except linalg.LinAlgError:
            K += 1e-10 * np.eye(twoM)
            xt = linalg.solve(K, prec_w * Aty + prec_p * v1)
        a1 = float(np.mean(prec_p / (prec_w * eig + prec_p)))
        a1 = min(max(a1, lo), hi)
        v2 = (xt - a1 * v1) / (1 - a1)
        chi2 = a1 * chi1 / (1 - a1)
        xhat, slope = _shrink(v2, np.full(twoM, chi2), theta)
        a2 = min(max(slope.mean(), lo), hi)
    out = real_extract_vec(xhat)
    return (out, chi_hist) if return_trace else out


def lmmse_matrices(model: SteeringModel, noise_var: float, chi1: float):
    """(G, R) of the exact LMMSE linear stage for prior variance ``chi1``."""
    A = np.asarray(model.H_embed)
    prec_w = 2.0 / noise_var
    K = prec_w * A.T @ A + np.eye(A.shape[1]) / chi1
    Kinv = np.linalg.inv(K)
    return Kinv / chi1, Kinv @ (prec_w * A.T)


def lmmse_network(model: SteeringModel, g, noise_var: float, iters: int = 8,
                  threshold: float = 1.0):
    """Network parameters that reproduce :func:`lmmse_vamp` on the echo ``g``.

    The LMMSE stage depends on the data only through the scalar ``chi1`` of
    each iteration, so freezing those values yields a fixed unfolded network
    with beta = 1 and soft-threshold denoisers.
    """
    from .lvamp import init_network

    _, chis = lmmse_vamp(model, g, noise_var, iters, threshold, return_trace=True)
    params = init_network(model, len(chis))
    theta = _soft_theta(2 * model.M, threshold)
    params.theta0 = theta.copy()
    for L, chi1 in zip(params.layers, chis):
        L.G, L.R = lmmse_matrices(model, noise_var, chi1)
        L.theta = theta.copy()
    return params
