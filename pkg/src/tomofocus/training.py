"""Loss, gradients, optimizer and the layer-by-layer training schedule."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .errors import (IncompatibleCheckpoint, InvalidBatch, InvalidConfig,
                     NumericalDivergence, TomofocusError)
from .geometry import GeometryConfig, SteeringModel
from .lvamp import (INIT_MODES, TENSOR_OPS, LayerParams, NetworkParams,
                    forward, init_network, project_params, run_recursion)

log = logging.getLogger(__name__)

# samples per gradient chunk; fixes the reduction tree independently of workers
CHUNK = 250
LAYER_FIELDS = ("G", "R", "beta", "theta")
INIT_FIELDS = ("R0", "beta0", "theta0")


@dataclass
class TrainConfig:
    P: int = 200_000
    Q: int = 500
    T: int = 8
    lr_new: float = 1e-3
    lr_refine: float = 1e-4
    patience: int = 5
    val_size: int = 5_000
    seed: int = 0
    snr_db: float = 10.0
    eval_every: int = 200
    max_rounds: int = 40
    init_mode: str = "lmmse"
    warm_start: bool = True

    def __post_init__(self):
        if self.Q < 1 or self.P < 1:
            raise InvalidConfig("P and Q must be positive")
        if self.lr_new < 0 or self.lr_refine < 0:
            raise InvalidConfig("learning rates must be non-negative")
        if self.T < 1 or self.patience < 1 or self.eval_every < 1:
            raise InvalidConfig("T, patience and eval_every must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise InvalidConfig(f"unknown init_mode {self.init_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(f"train: {exc}") from None


class TrainingDiverged(TomofocusError):
    def __init__(self, message, log_rows):
        super().__init__(message)
        self.log = log_rows


@dataclass
class GradientSet:
    layers: list
    R0: np.ndarray
    beta0: np.ndarray
    theta0: np.ndarray

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "GradientSet":
        return cls(layers=[LayerParams(*(np.zeros_like(getattr(L, f)) for f in LAYER_FIELDS))
                           for L in params.layers],
                   R0=np.zeros_like(params.R0), beta0=np.zeros_like(params.beta0),
                   theta0=np.zeros_like(params.theta0))

    def items(self):
        yield from _items(self)


def _items(obj):
    """(key, array) pairs of a NetworkParams or GradientSet in a fixed order."""
    for f in INIT_FIELDS:
        yield f, getattr(obj, f)
    for t, L in enumerate(obj.layers, start=1):
        for f in LAYER_FIELDS:
            yield f"L{t}.{f}", getattr(L, f)


def param_items(params: NetworkParams):
    return list(_items(params))


def keys_for(params: NetworkParams, layers=None, include_init=True) -> set:
    """Parameter keys of the given 1-based layers (all when None)."""
    layers = range(1, params.T + 1) if layers is None else layers
    keys = {f"L{t}.{f}" for t in layers for f in LAYER_FIELDS}
    if include_init:
        keys |= set(INIT_FIELDS)
    return keys


def _check_batch(params, batch):
    g, truth = (np.asarray(a, dtype=float) for a in batch)
    if g.ndim != 2 or truth.ndim != 2 or g.shape[0] != truth.shape[0] or g.shape[0] == 0:
        raise InvalidBatch("batch must be two non-empty 2-D arrays with equal rows")
    if g.shape[1] != 2 * params.N or truth.shape[1] != 2 * params.M:
        raise InvalidBatch(f"batch shapes {g.shape}, {truth.shape} do not match "
                           f"N={params.N}, M={params.M}")
    return g, truth


def loss(params: NetworkParams, model: SteeringModel | None, batch) -> float:
    """Mean over the batch of the squared error of the final layer output."""
    g, truth = _check_batch(params, batch)
    out, _ = forward(params, model, g)
    return float(np.sum((out - truth) ** 2) / g.shape[0])


def _chunk_grad(params, g, truth, Q, trainable):
    leaves = {}
    for key, arr in param_items(params):
        leaves[key] = ad.Tensor(arr, requires_grad=key in trainable, name=key)
    layers = [tuple(leaves[f"L{t}.{f}"] for f in LAYER_FIELDS) for t in range(1, params.T + 1)]
    init = tuple(leaves[f] for f in INIT_FIELDS)
    with np.errstate(all="ignore"):
        out = run_recursion(TENSOR_OPS, layers, init, ad.Tensor(g), params.N, params.alpha_min)
        err = out - truth
        L = ad.sum_squares(err) * (1.0 / Q)
        if any(leaf.requires_grad for leaf in leaves.values()):
            L.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(L.data), grads


def backward(params: NetworkParams, model: SteeringModel | None, batch, trainable=None,
             workers: int = 1):
    """Exact loss gradient by reverse-mode differentiation of the unfolded graph.

    Returns ``(loss, GradientSet)``.  The batch is split into fixed chunks whose
    contributions are summed in chunk order, so the result does not depend on
    ``workers``.
    """
    g, truth = _check_batch(params, batch)
    Q = g.shape[0]
    trainable = keys_for(params) if trainable is None else set(trainable)
    bounds = list(range(0, Q, CHUNK)) + [Q]
    jobs = [(g[a:b], truth[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def run(job):
        return _chunk_grad(params, job[0], job[1], Q, trainable)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    total = 0.0
    acc = None
    for value, grads in results:
        total += value
        if acc is None:
            acc = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                acc[k] += v
    gs = GradientSet.zeros_like(params)
    for key, arr in gs.items():
        arr[...] = acc[key]
    if not np.isfinite(total):
        raise NumericalDivergence("non-finite loss", layer=None, step="loss")
    for key, arr in gs.items():
        if not np.all(np.isfinite(arr)):
            layer = 0 if "." not in key else int(key[1:key.index(".")])
            raise NumericalDivergence(f"non-finite gradient for {key}", layer=layer, step=key)
    return total, gs


class Adam:
    """Adam with bias correction over a fixed set of parameter keys."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: NetworkParams, grads: GradientSet, keys) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        gdict = dict(grads.items())
        for key, p in param_items(params):
            if key not in keys:
                continue
            g = gdict[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _append_layer(params: NetworkParams, model, cfg: TrainConfig) -> NetworkParams:
    out = params.copy()
    if cfg.warm_start and out.T:
        out.layers.append(out.layers[-1].copy())
    else:
        out.layers.append(init_network(model, 1, cfg.init_mode, out.alpha_min).layers[0])
    return out


def _run_phase(params, model, cfg, data, keys, lr, layer, phase, log_rows, t0, workers,
               progress):
    g_tr, y_tr, g_val, y_val = data
    n = g_tr.shape[0]
    Q = min(cfg.Q, n)
    rng = np.random.default_rng([cfg.seed, layer, 0 if phase == "A" else 1])
    best_val = loss(params, model, (g_val, y_val))
    best = params.copy()
    opt = Adam(lr)
    stale = 0
    step = 0
    epoch = 0
    running = []
    rounds = 0
    while True:
        order = rng.permutation(n)
        epoch += 1
        for a in range(0, n - Q + 1, Q):
            idx = order[a:a + Q]
            try:
                value, grads = backward(params, model, (g_tr[idx], y_tr[idx]), keys, workers)
            except NumericalDivergence as exc:
                raise TrainingDiverged(f"layer {layer} phase {phase}: {exc}", log_rows) from exc
            opt.step(params, grads, keys)
            project_params(params)
            running.append(value)
            step += 1
            if step % cfg.eval_every:
                continue
            try:
                val = loss(params, model, (g_val, y_val))
            except NumericalDivergence:
                val = float("nan")
            row = dict(layer=layer, phase=phase, epoch=epoch, step=step,
                       train_loss=float(np.mean(running)), val_loss=val,
                       wallclock_s=round(time.perf_counter() - t0, 3))
            log_rows.append(row)
            running = []
            if progress:
                log.info("layer %d phase %s step %d train %.5g val %.5g", layer, phase, step,
                         row["train_loss"], val)
            if not np.isfinite(val):
                raise TrainingDiverged(f"validation loss diverged at layer {layer} "
                                       f"phase {phase} step {step}", log_rows)
            rounds += 1
            if val < best_val:
                best_val, best, stale = val, params.copy(), 0
            else:
                stale += 1
            if stale >= cfg.patience or rounds >= cfg.max_rounds:
                return best, best_val


def train_layerwise(model: SteeringModel, cfg: TrainConfig, dataset: dict, workers: int = 1,
                    progress: bool = False, init: NetworkParams | None = None):
    """Grow the network one layer at a time.

    For each new layer: phase A trains the new layer alone (layer 1 also trains
    the initialization parameters) at ``lr_new``; phase B refines all layers
    at ``lr_refine``.  Each phase keeps its best-validation parameters.
    Returns ``(params, log_rows)``.
    """
    g = np.asarray(dataset["g_embed"], dtype=float)[: cfg.P]
    y = np.asarray(dataset["gamma_embed"], dtype=float)[: cfg.P]
    if g.shape[0] <= cfg.val_size:
        raise InvalidConfig("dataset must be larger than val_size")
    if g.shape[1] != 2 * model.N or y.shape[1] != 2 * model.M:
        raise InvalidBatch("dataset does not match the geometry")
    cut = g.shape[0] - cfg.val_size
    data = (g[:cut], y[:cut], g[cut:], y[cut:])
    t0 = time.perf_counter()
    log_rows = []
    if init is None:
        params = init_network(model, 1, cfg.init_mode)
        params.layers = []
    else:
        params = init.copy()
    for layer in range(params.T + 1, cfg.T + 1):
        params = _append_layer(params, model, cfg)
        keys_a = keys_for(params, [layer], include_init=(layer == 1))
        params, _ = _run_phase(params, model, cfg, data, keys_a, cfg.lr_new, layer, "A",
                               log_rows, t0, workers, progress)
        params, _ = _run_phase(params, model, cfg, data, keys_for(params), cfg.lr_refine,
                               layer, "B", log_rows, t0, workers, progress)
    return params, log_rows


LOG_FIELDS = ("layer", "phase", "epoch", "step", "train_loss", "val_loss", "wallclock_s")


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# checkpoints ----------------------------------------------------------------

def checkpoint_arrays(params: NetworkParams) -> dict:
    return {key: arr for key, arr in param_items(params)}


def save_checkpoint(params: NetworkParams, path, geometry: GeometryConfig | None = None,
                    train: TrainConfig | None = None) -> None:
    meta = {"kind": "tomofocus-network", "T": params.T, "M": params.M, "N": params.N,
            "init_mode": params.init_mode, "alpha_min": params.alpha_min,
            "fingerprint": params.fingerprint}
    if geometry is not None:
        meta["geometry"] = geometry.to_dict()
    if train is not None:
        meta["train"] = asdict(train)
    container.save(path, checkpoint_arrays(params), meta)


def checkpoint_meta(path) -> dict:
    return container.load(path)[1]


def load_checkpoint(path, geometry: GeometryConfig | None = None, T: int | None = None
                    ) -> NetworkParams:
    """Load a checkpoint, verifying the geometry fingerprint and depth."""
    arrays, meta = container.load(path)
    if meta.get("kind") != "tomofocus-network":
        raise IncompatibleCheckpoint(f"{path} is not a network checkpoint")
    if geometry is not None and meta.get("fingerprint") != geometry.fingerprint():
        raise IncompatibleCheckpoint("checkpoint was trained for a different geometry "
                                     f"({meta.get('fingerprint')} != {geometry.fingerprint()})")
    depth = int(meta["T"])
    if T is not None and depth != T:
        raise IncompatibleCheckpoint(f"checkpoint has T={depth}, expected {T}")
    try:
        layers = [LayerParams(*(arrays[f"L{t}.{f}"] for f in LAYER_FIELDS))
                  for t in range(1, depth + 1)]
        params = NetworkParams(layers=layers, R0=arrays["R0"], beta0=arrays["beta0"],
                               theta0=arrays["theta0"], init_mode=meta["init_mode"],
                               alpha_min=float(meta["alpha_min"]),
                               fingerprint=meta["fingerprint"])
    except KeyError as exc:
        raise IncompatibleCheckpoint(f"checkpoint is missing {exc}") from None
    if params.M != int(meta["M"]) or params.N != int(meta["N"]):
        raise IncompatibleCheckpoint("checkpoint header disagrees with its arrays")
    return params


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
