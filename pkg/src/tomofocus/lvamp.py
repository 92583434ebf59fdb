"""Unfolded learned-VAMP network for cross-track focusing.

One layer maps the previous denoiser output through the affine estimator
``G v1 + R g`` and a per-element piecewise-linear shrinkage, with the scalar
divergence corrections of VAMP between them.  The same recursion code runs on
plain numpy arrays (inference) and on :mod:`tomofocus.autodiff` tensors
(training); only the primitive operations differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np
from numba import njit

from . import autodiff as ad
from .errors import InvalidPrecision, InvalidShape, NumericalDivergence
from .geometry import SteeringModel

ALPHA_MIN = 1e-4
THETA_DIM = 5
SOFT_THETA = (1.0, 2.0, 0.0, 1.0, 1.0)
INIT_MODES = ("lmmse", "gradient", "identity")


@dataclass
class LayerParams:
    G: np.ndarray
    R: np.ndarray
    beta: np.ndarray
    theta: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.G.copy(), self.R.copy(), self.beta.copy(), self.theta.copy())


@dataclass
class NetworkParams:
    layers: list
    R0: np.ndarray
    beta0: np.ndarray
    theta0: np.ndarray
    init_mode: str = "lmmse"
    alpha_min: float = ALPHA_MIN
    fingerprint: str = ""

    @property
    def T(self) -> int:
        return len(self.layers)

    @property
    def M(self) -> int:
        return self.R0.shape[0] // 2

    @property
    def N(self) -> int:
        return self.R0.shape[1] // 2

    def copy(self) -> "NetworkParams":
        return replace(self, layers=[L.copy() for L in self.layers], R0=self.R0.copy(),
                       beta0=self.beta0.copy(), theta0=self.theta0.copy())

    def truncated(self, T: int) -> "NetworkParams":
        out = self.copy()
        out.layers = out.layers[:T]
        return out


@dataclass
class LayerState:
    v1: np.ndarray | None = None
    chi1: np.ndarray | None = None
    gamma_tilde: np.ndarray | None = None
    alpha1: float | None = None
    v2: np.ndarray | None = None
    chi2: np.ndarray | None = None
    gamma_hat: np.ndarray | None = None
    alpha2: np.ndarray | None = None
    alpha1_raw: float | None = None
    alpha2_raw: np.ndarray | None = None
    deriv: np.ndarray | None = field(default=None, repr=False)


class Trace(list):
    """Per-layer states; ``init`` holds the layer-0 initialization state."""

    init: LayerState


# elementwise denoiser -------------------------------------------------------

@njit(cache=True)
def _shrink_rows(v, chi, theta, f, slope):
    n, k = v.shape
    for p in range(n):
        for i in range(k):
            sig = np.sqrt(chi[p, i])
            t1 = theta[i, 0] * sig
            t2 = theta[i, 1] * sig
            a, b, c = theta[i, 2], theta[i, 3], theta[i, 4]
            u = abs(v[p, i])
            if u > t2:
                y, s = a * t1 + b * (t2 - t1) + c * (u - t2), c
            elif u > t1:
                y, s = a * t1 + b * (u - t1), b
            else:
                y, s = a * u, a
            x = v[p, i]
            # numpy's sign: +-1, 0 for either zero, nan for nan
            sgn = 1.0 if x > 0 else (-1.0 if x < 0 else (0.0 if x == 0 else np.nan))
            f[p, i] = sgn * y
            slope[p, i] = s


def _shrink(v, chi, theta):
    v = np.asarray(v, dtype=float)
    shape = v.shape
    v2 = v.reshape(-1, shape[-1]) if v.ndim != 2 else v
    chi2 = np.broadcast_to(np.asarray(chi, dtype=float), shape).reshape(v2.shape)
    f = np.empty(v2.shape)
    slope = np.empty(v2.shape)
    _shrink_rows(v2, chi2, np.asarray(theta, dtype=float), f, slope)
    return f.reshape(shape), slope.reshape(shape)


def eta2(v, chi, theta):
    """Odd 5-parameter piecewise-linear shrinkage and its elementwise slope.

    Knots sit at ``theta[:, 0] * sqrt(chi)`` and ``theta[:, 1] * sqrt(chi)``;
    ``theta[:, 2:5]`` are the slopes of the inner, middle and outer segment.
    At a knot the left segment's slope is reported.
    """
    v = np.asarray(v, dtype=float)
    chi = np.broadcast_to(np.asarray(chi, dtype=float), v.shape)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (v.shape[-1], THETA_DIM):
        raise InvalidShape(f"theta must be {(v.shape[-1], THETA_DIM)}, got {theta.shape}")
    if not np.all(chi > 0):
        raise InvalidPrecision("chi must be strictly positive")
    return _shrink(v, chi, theta)


def segments(v, chi, theta) -> np.ndarray:
    """Active segment (0, 1, 2) of every element; knots belong to the left."""
    sig = np.sqrt(chi)
    u = np.abs(v)
    return (u > theta[:, 0] * sig).astype(int) + (u > theta[:, 1] * sig)


def eta1(v1, G, R, g_embed, alpha_min=ALPHA_MIN):
    """Affine estimator ``G v1 + R g`` and its clamped mean Jacobian diagonal."""
    v1 = np.asarray(v1, dtype=float)
    gt = v1 @ G.T + np.asarray(g_embed, dtype=float) @ R.T
    a1 = float(np.clip(np.trace(G) / G.shape[0], alpha_min, 1 - alpha_min))
    return gt, a1


# backends for the shared recursion ------------------------------------------

def _np_clamp(x, lo, hi):
    return np.clip(x, lo, hi)


NUMPY_OPS = SimpleNamespace(
    linear=lambda x, W: x @ W.T,
    eta2=_shrink,
    mean_last=lambda x: x.mean(axis=-1, keepdims=True),
    diag_mean=lambda G: np.trace(G) / G.shape[0],
    clamp=_np_clamp,
    value=lambda x: x,
)

TENSOR_OPS = SimpleNamespace(
    linear=ad.linear,
    eta2=ad.pwlin_shrink,
    mean_last=ad.mean_last,
    diag_mean=ad.diag_mean,
    clamp=ad.clamp,
    value=lambda x: x.data,
)


def _finite(x, ops):
    return bool(np.all(np.isfinite(ops.value(x))))


def run_recursion(ops, layers, init, g, N, alpha_min=ALPHA_MIN, trace=None, check=False):
    """Execute the initialization line and every layer of the recursion.

    ``layers`` is a sequence of (G, R, beta, theta) and ``init`` is
    (R0, beta0, theta0), as arrays or tensors matching ``ops``.  ``g`` holds
    one embedded echo per row (or a single 1-D echo).
    """
    lo, hi = alpha_min, 1 - alpha_min
    R0, beta0, theta0 = init
    gv = ops.value(g)
    energy = np.sum(gv * gv, axis=-1, keepdims=True) / N

    def chk(x, layer, step):
        if check and not _finite(x, ops):
            raise NumericalDivergence(f"non-finite value at layer {layer}, step {step}",
                                      layer=layer, step=step)

    v2 = ops.linear(g, R0)
    chi2 = beta0 * energy
    gamma_hat, d = ops.eta2(v2, chi2, theta0)
    a2_raw = ops.mean_last(d)
    a2 = ops.clamp(a2_raw, lo, hi)
    chk(gamma_hat, 0, "init")
    if trace is not None:
        trace.init = LayerState(v2=ops.value(v2), chi2=ops.value(chi2),
                                gamma_hat=ops.value(gamma_hat), alpha2=ops.value(a2),
                                alpha2_raw=ops.value(a2_raw), deriv=ops.value(d))
    for t, (G, R, beta, theta) in enumerate(layers, start=1):
        v1 = (gamma_hat - a2 * v2) / (1 - a2)
        chk(v1, t, 1)
        chi1 = a2 * chi2 / (1 - a2)
        chk(chi1, t, 2)
        gamma_tilde = ops.linear(v1, G) + ops.linear(g, R)
        chk(gamma_tilde, t, 3)
        a1_raw = ops.diag_mean(G)
        a1 = ops.clamp(a1_raw, lo, hi)
        v2 = (gamma_tilde - a1 * v1) / (1 - a1)
        chk(v2, t, 5)
        chi2 = a1 / (1 - a1) * chi1 * beta
        chk(chi2, t, 6)
        gamma_hat, d = ops.eta2(v2, chi2, theta)
        chk(gamma_hat, t, 7)
        a2_raw = ops.mean_last(d)
        a2 = ops.clamp(a2_raw, lo, hi)
        chk(a2, t, 8)
        if trace is not None:
            trace.append(LayerState(
                v1=ops.value(v1), chi1=ops.value(chi1), gamma_tilde=ops.value(gamma_tilde),
                alpha1=float(ops.value(a1)), v2=ops.value(v2), chi2=ops.value(chi2),
                gamma_hat=ops.value(gamma_hat), alpha2=ops.value(a2),
                alpha1_raw=float(ops.value(a1_raw)), alpha2_raw=ops.value(a2_raw),
                deriv=ops.value(d)))
    return gamma_hat


def _layer_tuples(params: NetworkParams):
    return [(L.G, L.R, L.beta, L.theta) for L in params.layers]


def forward(params: NetworkParams, model: SteeringModel | None, g_embed, record_trace=False):
    """Run the network on one embedded echo (length 2N) or a batch (rows).

    Returns ``(gamma_hat_T, trace)``; ``trace`` is None unless requested.
    """
    g = np.asarray(g_embed, dtype=float)
    N = params.N
    if g.shape[-1] != 2 * N or (model is not None and model.N != N):
        raise InvalidShape(f"expected embedded echoes of length {2 * N}, got {g.shape}")
    layers = _layer_tuples(params)
    init = (params.R0, params.beta0, params.theta0)
    trace = Trace() if record_trace else None
    with np.errstate(all="ignore"):
        out = run_recursion(NUMPY_OPS, layers, init, g, N, params.alpha_min, trace=trace)
    if not np.all(np.isfinite(out)):
        # rerun with per-step checks to name the failing layer/step
        with np.errstate(all="ignore"):
            run_recursion(NUMPY_OPS, layers, init, g, N, params.alpha_min, check=True)
        raise NumericalDivergence("non-finite network output")
    return out, trace


# initialization -------------------------------------------------------------

def lmmse_step(model: SteeringModel) -> float:
    """Step size 1 / ||H_embed||_2^2 of the gradient-type linear stage."""
    return 1.0 / np.linalg.norm(model.H_embed, 2) ** 2


def init_network(model: SteeringModel, T: int, mode: str = "lmmse",
                 alpha_min: float = ALPHA_MIN) -> NetworkParams:
    """Untrained parameters; beta = 1 and a one-sigma soft threshold everywhere.

    Linear stage per ``mode`` (k = 1 / ||H_embed||_2^2):

    * ``"lmmse"``: G = (1 - k d) I, R = k H^T, where d = trace(H^T H) / 2M.
      This is the small-variance LMMSE linearization I - k H^T H with the
      Gram matrix replaced by its diagonal, so the extrinsic input of every
      untrained layer is exactly the normalized matched filter H^T g / N.
    * ``"gradient"``: G = I - k H^T H, R = k H^T.
    * ``"identity"``: G = I, R = H^T (alpha1 is then held at 1 - alpha_min).

    Layer 0 starts from the normalized matched filter R0 = H^T / N, except in
    ``"identity"`` mode where R0 = H^T.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}")
    He = np.asarray(model.H_embed)
    twoM = He.shape[1]
    HT = He.T.copy()
    k = lmmse_step(model)
    if mode == "identity":
        G, R = np.eye(twoM), HT
    elif mode == "gradient":
        G, R = np.eye(twoM) - k * (HT @ He), k * HT
    else:
        d = np.einsum("ij,ij->", He, He) / twoM
        G, R = (1 - k * d) * np.eye(twoM), k * HT
    theta = np.tile(SOFT_THETA, (twoM, 1))
    layers = [LayerParams(G.copy(), R.copy(), np.ones(twoM), theta.copy()) for _ in range(T)]
    R0 = HT.copy() if mode == "identity" else HT / model.N
    return NetworkParams(layers=layers, R0=R0, beta0=np.ones(twoM),
                         theta0=theta.copy(), init_mode=mode, alpha_min=alpha_min,
                         fingerprint=model.cfg.fingerprint())


def project_params(params: NetworkParams, min_knot: float = 1e-3, min_beta: float = 1e-6) -> None:
    """Restore 0 < theta1 < theta2 and beta > 0 in place after an update."""
    thetas = [params.theta0] + [L.theta for L in params.layers]
    for th in thetas:
        np.maximum(th[:, 0], min_knot, out=th[:, 0])
        np.maximum(th[:, 1], th[:, 0] + min_knot, out=th[:, 1])
    for b in [params.beta0] + [L.beta for L in params.layers]:
        np.maximum(b, min_beta, out=b)


# compiled single-echo inference ----------------------------------------------

@njit(cache=True)
def _shrink_vec(v, chi, theta, out):
    """In-place eta2 on one vector; returns the mean slope."""
    total = 0.0
    for i in range(v.size):
        sig = np.sqrt(chi[i])
        t1 = theta[i, 0] * sig
        t2 = theta[i, 1] * sig
        a, b, c = theta[i, 2], theta[i, 3], theta[i, 4]
        u = abs(v[i])
        if u > t2:
            f = a * t1 + b * (t2 - t1) + c * (u - t2)
            total += c
        elif u > t1:
            f = a * t1 + b * (u - t1)
            total += b
        else:
            f = a * u
            total += a
        out[i] = np.sign(v[i]) * f
    return total / v.size


@njit(cache=True, fastmath={"reassoc", "contract"})
def _matvec(W, x, out):
    """out += W @ x in the dtype of x, four rows per pass.

    Independent accumulators keep the reduction throughput-bound rather than
    latency-bound; the sums are reassociated so the order differs from numpy.
    """
    n, m = W.shape
    zero = x[0] - x[0]
    i = 0
    while i + 4 <= n:
        a0 = a1 = a2 = a3 = zero
        for j in range(m):
            xj = x[j]
            a0 += W[i, j] * xj
            a1 += W[i + 1, j] * xj
            a2 += W[i + 2, j] * xj
            a3 += W[i + 3, j] * xj
        out[i] += a0
        out[i + 1] += a1
        out[i + 2] += a2
        out[i + 3] += a3
        i += 4
    for k in range(i, n):
        acc = zero
        for j in range(m):
            acc += W[k, j] * x[j]
        out[k] += acc


@njit(cache=True)
def _run_vec(g, R0, beta0, theta0, Gs, Rs, betas, thetas, a1s, N, lo, hi):
    energy = np.dot(g, g) / N
    gw = g.astype(Gs.dtype)
    v2 = np.zeros(R0.shape[0])
    _matvec(R0, gw, v2)
    chi2 = beta0 * energy
    gh = np.empty_like(v2)
    v1 = np.empty_like(v2)
    v1w = np.empty(v2.size, Gs.dtype)
    a2 = min(max(_shrink_vec(v2, chi2, theta0, gh), lo), hi)
    for t in range(Gs.shape[0]):
        for i in range(v1.size):
            v1[i] = (gh[i] - a2 * v2[i]) / (1 - a2)
            v1w[i] = v1[i]
        chi1 = a2 * chi2 / (1 - a2)
        a1 = a1s[t]
        v2[:] = 0.0
        _matvec(Gs[t], v1w, v2)
        _matvec(Rs[t], gw, v2)
        for i in range(v2.size):
            v2[i] = (v2[i] - a1 * v1[i]) / (1 - a1)
        chi2 = a1 / (1 - a1) * chi1 * betas[t]
        a2 = min(max(_shrink_vec(v2, chi2, thetas[t], gh), lo), hi)
    return gh, np.all(np.isfinite(gh))


class Focuser:
    """Frozen, compiled copy of a network for fast one-echo-at-a-time inference.

    The matrices are stored in ``weights`` precision (float32 by default) and
    the matrix-vector products run in that precision, which roughly halves
    the cost of a single-echo pass; the recursion state is kept in float64.
    With ``weights="float64"`` the output equals :func:`forward` up to
    rounding in the matrix-vector products.
    """

    def __init__(self, params: NetworkParams, weights: str = "float32"):
        c = np.ascontiguousarray
        wt = np.dtype(weights)
        if wt not in (np.float32, np.float64):
            raise ValueError("weights must be float32 or float64")
        self.N = params.N
        self.lo, self.hi = params.alpha_min, 1 - params.alpha_min
        self.R0 = c(params.R0, dtype=wt)
        self.beta0, self.theta0 = c(params.beta0), c(params.theta0)
        self.Gs = c(np.array([L.G for L in params.layers]), dtype=wt)
        self.Rs = c(np.array([L.R for L in params.layers]), dtype=wt)
        self.betas = c(np.array([L.beta for L in params.layers]))
        self.thetas = c(np.array([L.theta for L in params.layers]))
        self.a1s = np.clip([np.trace(L.G) / L.G.shape[0] for L in params.layers],
                           self.lo, self.hi)

    def __call__(self, g_embed) -> np.ndarray:
        g = np.ascontiguousarray(g_embed, dtype=float)
        if g.shape != (2 * self.N,):
            raise InvalidShape(f"expected one embedded echo of length {2 * self.N}")
        out, ok = _run_vec(g, self.R0, self.beta0, self.theta0, self.Gs, self.Rs, self.betas,
                           self.thetas, self.a1s, self.N, self.lo, self.hi)
        if not ok:
            raise NumericalDivergence("non-finite network output")
        return out
