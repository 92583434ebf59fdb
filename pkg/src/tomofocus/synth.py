"""Synthetic scenes, echoes and training datasets.

Echoes are synthesized at the scatterers' continuous positions; the ground
truth is the same scene snapped to the nearest grid bin.  Every sample draws
from its own random substream keyed by ``(seed, index)`` so any partition of
the index range yields the same dataset.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import container
from .errors import DegenerateSignal, InvalidConfig, InvalidSpec
from .geometry import SteeringModel, real_embed_vec, steering_matrix


@dataclass(frozen=True)
class Scatterer:
    s: float
    gamma: complex


@dataclass(frozen=True)
class DatasetSpec:
    P: int
    snr_db: float | tuple = 10.0
    seed: int = 0
    scatterer_count_support: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if int(self.P) != self.P or self.P < 1:
            raise InvalidSpec(f"P must be a positive integer, got {self.P!r}")
        if not len(self.scatterer_count_support):
            raise InvalidSpec("scatterer_count_support is empty")
        if isinstance(self.snr_db, (list, tuple)):
            if not len(self.snr_db):
                raise InvalidSpec("snr_db list is empty")
            object.__setattr__(self, "snr_db", tuple(float(v) for v in self.snr_db))
        object.__setattr__(self, "scatterer_count_support",
                           tuple(int(k) for k in self.scatterer_count_support))

    def snr_choices(self) -> tuple:
        return self.snr_db if isinstance(self.snr_db, tuple) else (float(self.snr_db),)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = list(self.snr_db) if isinstance(self.snr_db, tuple) else self.snr_db
        d["scatterer_count_support"] = list(self.scatterer_count_support)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        if "P" not in d:
            raise InvalidConfig("dataset: missing field 'P'")
        kw = dict(d)
        if "scatterer_count_support" in kw:
            kw["scatterer_count_support"] = tuple(kw["scatterer_count_support"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InvalidConfig(f"dataset: {exc}") from None


@dataclass
class TrainingSample:
    g_embed: np.ndarray
    gamma_embed: np.ndarray
    snr_db: float
    scene: list = field(default_factory=list)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def _draw(rng, support, extent):
    support = tuple(support)
    if not support:
        raise InvalidSpec("scatterer_count_support is empty")
    k = support[rng.integers(len(support))]
    s = rng.uniform(-extent / 2, extent / 2, size=k)
    gamma = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    return s, gamma


def sample_scene(rng, spec: DatasetSpec, extent: float) -> list[Scatterer]:
    """Draw 1..K point scatterers uniformly over ``[-extent/2, extent/2)``."""
    s, gamma = _draw(rng, spec.scatterer_count_support, extent)
    return [Scatterer(float(a), complex(c)) for a, c in zip(s, gamma)]


def _scene_arrays(scene):
    if isinstance(scene, tuple):
        s, gamma = scene
        return np.atleast_1d(np.asarray(s, float)), np.atleast_1d(np.asarray(gamma, complex))
    s = np.array([sc.s for sc in scene], dtype=float)
    gamma = np.array([sc.gamma for sc in scene], dtype=complex)
    return s, gamma


def synthesize_echo(model: SteeringModel, scene) -> np.ndarray:
    """Echo at continuous positions; ``scene`` is a Scatterer list or ``(s, gamma)``."""
    s, gamma = _scene_arrays(scene)
    if s.size == 0:
        return np.zeros(model.N, dtype=complex)
    return steering_matrix(model.cfg, model.b, s) @ gamma


def grid_index(model: SteeringModel, s) -> np.ndarray:
    """Nearest grid bin, exact midpoints resolved to the lower index."""
    cfg = model.cfg
    x = (np.asarray(s, float) + cfg.delta_s / 2) / cfg.grid_spacing
    idx = np.ceil(x - 0.5).astype(int)
    return np.clip(idx, 0, model.M - 1)


def grid_truth(model: SteeringModel, scene) -> np.ndarray:
    s, gamma = _scene_arrays(scene)
    out = np.zeros(model.M, dtype=complex)
    if s.size:
        np.add.at(out, grid_index(model, s), gamma)
    return out


def noise_variance(g, snr_db: float) -> float:
    """Complex per-sample noise variance for mean signal power / sigma^2 = SNR."""
    g = np.asarray(g)
    p = float(np.vdot(g, g).real) / g.shape[-1]
    return p * 10.0 ** (-snr_db / 10.0)


def add_noise(rng, g, snr_db: float) -> np.ndarray:
    g = np.asarray(g, dtype=complex)
    if np.isposinf(snr_db):
        return g.copy()
    if not np.any(g):
        raise DegenerateSignal("cannot set a finite SNR on an all-zero echo")
    sigma2 = noise_variance(g, snr_db)
    w = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    return g + np.sqrt(sigma2 / 2) * w


def make_sample(model: SteeringModel, spec: DatasetSpec, index: int,
                keep_scene: bool = True) -> TrainingSample:
    rng = sample_rng(spec.seed, index)
    choices = spec.snr_choices()
    snr = choices[rng.integers(len(choices))] if len(choices) > 1 else choices[0]
    s, gamma = _draw(rng, spec.scatterer_count_support, model.cfg.delta_s)
    g = add_noise(rng, synthesize_echo(model, (s, gamma)), snr)
    truth = grid_truth(model, (s, gamma))
    scene = [Scatterer(float(a), complex(c)) for a, c in zip(s, gamma)] if keep_scene else []
    return TrainingSample(real_embed_vec(g), real_embed_vec(truth), float(snr), scene)


def make_dataset(model: SteeringModel, spec: DatasetSpec) -> Iterator[TrainingSample]:
    """Lazily yield the ``spec.P`` samples in index order."""
    for p in range(spec.P):
        yield make_sample(model, spec, p)


def generate_arrays(model: SteeringModel, spec: DatasetSpec,
                    indices: Sequence[int] | None = None, workers: int = 1) -> dict:
    """Materialize samples as stacked arrays ``g_embed``, ``gamma_embed``, ``snr_db``."""
    idx = np.arange(spec.P) if indices is None else np.asarray(indices, dtype=int)
    g = np.empty((idx.size, 2 * model.N))
    t = np.empty((idx.size, 2 * model.M))
    snr = np.empty(idx.size)

    def fill(rows):
        for row in rows:
            smp = make_sample(model, spec, int(idx[row]), keep_scene=False)
            g[row], t[row], snr[row] = smp.g_embed, smp.gamma_embed, smp.snr_db

    chunks = np.array_split(np.arange(idx.size), max(1, workers * 4))
    if workers <= 1:
        for c in chunks:
            fill(c)
    else:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(fill, chunks))
    return {"g_embed": g, "gamma_embed": t, "snr_db": snr}


def save_dataset(path, arrays: dict, spec: DatasetSpec, model: SteeringModel) -> None:
    meta = {"dataset": spec.to_dict(), "geometry": model.cfg.to_dict(),
            "fingerprint": model.cfg.fingerprint()}
    container.save(path, arrays, meta)
    Path(str(path) + ".json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[dict, dict]:
    return container.load(path)
