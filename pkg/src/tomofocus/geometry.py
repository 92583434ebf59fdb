"""Cross-track imaging geometry: aperture, grid, steering matrix.

The cross-track echo of one range-azimuth pixel is modelled as

    g_n = sum_m exp(2j * k_c * b_n * s_m / r) * gamma_m

with aperture positions ``b`` and cross-track grid ``s``.  Everything
downstream works on the real embedding of this complex system.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InvalidConfig, InvalidShape

C_LIGHT = 299_792_458.0

# "much smaller than" in the extent constraint, as a factor-4 margin
EXTENT_MARGIN = 0.25


@dataclass(frozen=True)
class GeometryConfig:
    f_c: float
    bandwidth: float
    r: float
    delta_b: float
    N: int
    delta_s: float
    M: int
    aperture_kind: str = "uniform"
    seed: int = 0
    jitter_fraction: float = 0.9

    def __post_init__(self):
        for name in ("f_c", "r", "delta_b", "delta_s"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidConfig(f"{name} must be positive, got {v!r}")
        if self.bandwidth < 0 or not np.isfinite(self.bandwidth):
            raise InvalidConfig(f"bandwidth must be non-negative, got {self.bandwidth!r}")
        if int(self.N) != self.N or self.N < 2:
            raise InvalidConfig(f"N must be an integer >= 2, got {self.N!r}")
        if int(self.M) != self.M or self.M < 2:
            raise InvalidConfig(f"M must be an integer >= 2, got {self.M!r}")
        if self.aperture_kind not in ("uniform", "jittered"):
            raise InvalidConfig(f"unknown aperture_kind {self.aperture_kind!r}")
        if not 0 <= self.jitter_fraction < 1:
            raise InvalidConfig("jitter_fraction must lie in [0, 1)")

    @property
    def k_c(self) -> float:
        return 2 * np.pi * self.f_c / C_LIGHT

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.f_c

    @property
    def grid_spacing(self) -> float:
        return self.delta_s / self.M

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryConfig":
        known = {f.name for f in fields(cls)}
        required ={"f_c", "bandwidth", "r", "delta_b", "N", "delta_s", "M"}
        missing = sorted(required - set(d))
        if missing:
            raise InvalidConfig(f"geometry: missing field {missing[0]!r}")
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"geometry: unknown field {unknown[0]!r}")
        kw = dict(d)
        kw["N"] = int(kw["N"])
        kw["M"] = int(kw["M"])
        return cls(**kw)

    def fingerprint(self) -> str:
        """Stable hash identifying this geometry (used by checkpoints)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def table1_config(**overrides) -> GeometryConfig:
    """Spaceborne simulation geometry (10 GHz, 800 km, 31 passes over 300 m)."""
    base = dict(f_c=10e9, bandwidth=200e6, r=800e3, delta_b=300.0, N=31,
                delta_s=300.0, M=78)
    base.update(overrides)
    return GeometryConfig(**base)


def table4_config(**overrides) -> GeometryConfig:
    """Anechoic-chamber geometry (35 GHz, 3.3 m range, 6 cm aperture)."""
    base = dict(f_c=35e9, bandwidth=6e9, r=3.3, delta_b=0.06, N=31,
                delta_s=0.6, M=35)
    base.update(overrides)
    return GeometryConfig(**base)


@dataclass(frozen=True, eq=False)
class SteeringModel:
    cfg: GeometryConfig
    b: np.ndarray
    s: np.ndarray
    H: np.ndarray
    H_embed: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.H.shape[0]

    @property
    def M(self) -> int:
        return self.H.shape[1]


def build_aperture(cfg: GeometryConfig) -> np.ndarray:
    N = cfg.N
    if N < 2:
        raise InvalidConfig("N must be >= 2")
    b = np.linspace(-cfg.delta_b / 2, cfg.delta_b / 2, N)
    if cfg.aperture_kind == "jittered" and N > 2:
        d = cfg.delta_b / (N - 1)
        rng = np.random.default_rng(cfg.seed)
        half = cfg.jitter_fraction * d / 2
        b[1:-1] += rng.uniform(-half, half, size=N - 2)
    return b


def build_grid(cfg: GeometryConfig) -> np.ndarray:
    return -cfg.delta_s / 2 + np.arange(cfg.M) * (cfg.delta_s / cfg.M)


def steering_matrix(cfg: GeometryConfig, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Complex steering matrix for arbitrary (possibly off-grid) positions ``s``."""
    b = np.asarray(b, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.exp(2j * cfg.k_c / cfg.r * np.outer(b, s))


def embed_matrix(H: np.ndarray) -> np.ndarray:
    """Real 2N x 2M block form [[Re, -Im], [Im, Re]] of a complex matrix."""
    return np.block([[H.real, -H.imag], [H.imag, H.real]])


def build_steering(cfg: GeometryConfig, b=None, s=None) -> SteeringModel:
    b = build_aperture(cfg) if b is None else np.asarray(b, dtype=float)
    s = build_grid(cfg) if s is None else np.asarray(s, dtype=float)
    H = steering_matrix(cfg, b, s)
    for a in (b, s, H):
        a.setflags(write=False)
    He = embed_matrix(H)
    He.setflags(write=False)
    return SteeringModel(cfg=cfg, b=b, s=s, H=H, H_embed=He)


def real_embed_vec(z) -> np.ndarray:
    """Stack real part over imaginary part along the last axis."""
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1).astype(float, copy=False)


def real_extract_vec(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n % 2:
        raise InvalidShape(f"embedded vector must have even length, got {n}")
    return x[..., : n // 2] + 1j * x[..., n // 2:]


def resolution(cfg: GeometryConfig) -> float:
    """Nonparametric cross-track resolution lambda_c * r / (2 * delta_b)."""
    if cfg.delta_b <= 0:
        raise InvalidConfig("delta_b must be positive")
    return cfg.wavelength * cfg.r / (2 * cfg.delta_b)


def range_resolution(cfg: GeometryConfig) -> float:
    if cfg.bandwidth <= 0:
        raise InvalidConfig("bandwidth must be positive for the extent check")
    return C_LIGHT / (2 * cfg.bandwidth)


def extent_check(cfg: GeometryConfig, delta_s: float | None = None) -> dict:
    """Check that the illuminated extent is well below rho_r * r / delta_b."""
    rho_r = range_resolution(cfg)
    ds = cfg.delta_s if delta_s is None else float(delta_s)
    bound = rho_r * cfg.r / cfg.delta_b
    ratio = ds / bound
    return {
        "rho_r": rho_r,
        "bound": bound,
        "delta_s": ds,
        "ratio": ratio,
        "pass": bool(ds <= EXTENT_MARGIN * bound and ds < bound),
    }


def superresolution_factor(cfg: GeometryConfig) -> float:
    return resolution(cfg) / cfg.grid_spacing
