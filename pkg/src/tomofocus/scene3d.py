"""End-to-end 3-D demonstration on a synthetic building.

The scene is a set of unit-amplitude point scatterers on the ground apron,
the radar-facing wall and the roof of a box-shaped building.  Points are
rotated into the radar frame (along-track x, slant-range offset r, cross-track
s), binned into (x, r) pixels, and every pixel's cross-track echo is focused
independently.  Reconstructed voxels map back to (x, y, z) for projections.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import ExtentViolation, InvalidConfig
from .evaluation import bp_solver, omp_solver, sbl_solver
from .geometry import SteeringModel, real_embed_vec, real_extract_vec
from .lvamp import NetworkParams, forward
from .synth import add_noise, synthesize_echo

ALGORITHMS = ("bp", "omp", "sbl", "network")
_SOLVERS = {"bp": bp_solver, "omp": omp_solver, "sbl": sbl_solver}


@dataclass(frozen=True)
class SceneConfig:
    building_height: float = 84.0
    footprint_x: float = 100.0
    footprint_y: float = 60.0
    surface_spacing: float = 4.0
    elevation_deg: float = 45.0
    pixel_dx: float = 2.0
    pixel_dr: float = 0.75
    apron_depth: float = 24.0     # ground in front of the wall
    ground_margin: float = 12.0   # ground beside and behind the building
    snr_db: float = 15.0
    detect_fraction: float = 0.1  # detection threshold relative to the volume max
    seed: int = 0

    def __post_init__(self):
        dims = (self.building_height, self.footprint_x, self.footprint_y, self.surface_spacing,
                self.pixel_dx, self.pixel_dr)
        if min(dims) <= 0 or self.apron_depth < 0 or self.ground_margin < 0:
            raise InvalidConfig("scene dimensions must be positive")
        if not 0 < self.elevation_deg < 90:
            raise InvalidConfig("elevation_deg must lie in (0, 90)")
        if not 0 < self.detect_fraction < 1:
            raise InvalidConfig("detect_fraction must lie in (0, 1)")

    @property
    def theta(self) -> float:
        return np.deg2rad(self.elevation_deg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(f"scene: {exc}") from None


@dataclass
class PointCloud:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    gamma: np.ndarray

    def __len__(self):
        return self.x.size


@dataclass
class PixelStack:
    ix: int
    ir: int
    s: np.ndarray
    gamma: np.ndarray
    g: np.ndarray
    gamma_hat: np.ndarray | None = None


@dataclass
class Volume:
    """|gamma_hat| of every occupied (x, r) pixel over the cross-track grid."""
    ix: np.ndarray
    ir: np.ndarray
    mag: np.ndarray
    s_grid: np.ndarray
    cfg: SceneConfig
    algorithm: str = ""
    seconds: float = 0.0
    failures: list = field(default_factory=list)

    def world_points(self, threshold: float | None = None):
        """Cartesian (x, y, z, magnitude) of voxels at or above ``threshold``."""
        if threshold is None:
            threshold = self.cfg.detect_fraction * (self.mag.max() if self.mag.size else 0.0)
        p, m = np.nonzero(self.mag >= threshold) if self.mag.size else (np.zeros(0, int),) * 2
        x = (self.ix[p] + 0.5) * self.cfg.pixel_dx
        r = (self.ir[p] + 0.5) * self.cfg.pixel_dr
        y, z = radar_to_world_yz(r, self.s_grid[m], self.cfg.theta)
        return x, y, z, self.mag[p, m]


# geometry of the scene ------------------------------------------------------

def build_building(cfg: SceneConfig) -> PointCloud:
    """Ground, front wall (y = -footprint_y/2) and roof on a square lattice.

    The ground covers the apron in front of the wall and a margin beside and
    behind the building, excluding the footprint itself.
    """
    d = cfg.surface_spacing
    half_x = cfg.footprint_x / 2
    xs = np.arange(0.0, cfg.footprint_x + d / 2, d) - half_x
    y_wall = -cfg.footprint_y / 2
    zs = np.arange(0.0, cfg.building_height + d / 2, d)
    roof_y = y_wall + np.arange(d, cfg.footprint_y + d / 2, d)
    n_side = int(np.floor(cfg.ground_margin / d + 1e-9))
    gx = np.r_[xs[0] - d * np.arange(n_side, 0, -1), xs, xs[-1] + d * np.arange(1, n_side + 1)]
    n_front = int(np.floor(cfg.apron_depth / d + 1e-9))
    gy = np.r_[y_wall - d * np.arange(n_front, 0, -1), y_wall + d * np.arange(
        int(np.floor((cfg.footprint_y + cfg.ground_margin) / d + 1e-9)) + 1)]
    GX, GY = np.meshgrid(gx, gy, indexing="ij")
    outside = (np.abs(GX) > half_x + 1e-9) | (GY < y_wall - 1e-9)
    parts = [(GX[outside], GY[outside], np.zeros(int(outside.sum())))]
    for ys, zz in (([y_wall], zs), (roof_y, [cfg.building_height])):
        X, Y, Z = np.meshgrid(xs, ys, zz, indexing="ij")
        parts.append((X.ravel(), Y.ravel(), Z.ravel()))
    x, y, z = (np.concatenate(c) for c in zip(*parts))
    rng = np.random.default_rng([cfg.seed, 0])
    gamma = np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=x.size))
    return PointCloud(x, y, z, gamma)


def world_to_radar(x, y, z, theta):
    """(x, y, z) -> (x, r_offset, s) for elevation angle ``theta`` (radians)."""
    c, s_ = np.cos(theta), np.sin(theta)
    y, z = np.asarray(y, float), np.asarray(z, float)
    return x, y * c - z * s_, y * s_ + z * c


def radar_to_world_yz(r, s, theta):
    c, s_ = np.cos(theta), np.sin(theta)
    r, s = np.asarray(r, float), np.asarray(s, float)
    return r * c + s * s_, -r * s_ + s * c


def radar_to_world(x, r, s, theta):
    y, z = radar_to_world_yz(r, s, theta)
    return x, y, z


def rasterize(points: PointCloud, cfg: SceneConfig, model: SteeringModel,
              snr_db: float | None = None) -> list[PixelStack]:
    """Bin points into (x, r) pixels and synthesize each pixel's noisy echo.

    Pixels are returned sorted by (ix, ir); pixel k draws its noise from
    the substream ``(seed, 1, k)``.
    """
    snr = cfg.snr_db if snr_db is None else snr_db
    x, r, s = world_to_radar(points.x, points.y, points.z, cfg.theta)
    half = model.cfg.delta_s / 2
    bad = np.nonzero(np.abs(s) > half)[0]
    if bad.size:
        i = int(bad[0])
        raise ExtentViolation(f"point {i} at (x={points.x[i]:.3f}, y={points.y[i]:.3f}, "
                              f"z={points.z[i]:.3f}) has s={s[i]:.3f}, outside +-{half:g}")
    ix = np.floor(x / cfg.pixel_dx).astype(int)
    ir = np.floor(r / cfg.pixel_dr).astype(int)
    order = np.lexsort((ir, ix))
    keys = np.stack([ix[order], ir[order]], axis=1)
    starts = np.nonzero(np.r_[True, np.any(keys[1:] != keys[:-1], axis=1)])[0]
    stacks = []
    for k, (a, b) in enumerate(zip(starts, np.r_[starts[1:], order.size])):
        sel = order[a:b]
        g = synthesize_echo(model, (s[sel], points.gamma[sel]))
        if np.isfinite(snr):
            g = add_noise(np.random.default_rng([cfg.seed, 1, k]), g, snr)
        stacks.append(PixelStack(int(keys[a, 0]), int(keys[a, 1]), s[sel].copy(),
                                 points.gamma[sel].copy(), g))
    return stacks


# focusing -------------------------------------------------------------------

def focus_stack(stacks, algorithm: str, model: SteeringModel, cfg: SceneConfig,
                params: NetworkParams | None = None, snr_db: float | None = None) -> Volume:
    """Focus every pixel independently and assemble the volume.

    ``seconds`` covers reconstruction only.  Per-pixel solver errors are
    recorded in ``failures`` and leave that pixel's column at zero.
    """
    if algorithm not in ALGORITHMS:
        raise InvalidConfig(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if algorithm == "network" and params is None:
        raise InvalidConfig("algorithm 'network' requires a checkpoint")
    snr = cfg.snr_db if snr_db is None else snr_db
    stacks = sorted(stacks, key=lambda p: (p.ix, p.ir))
    P = len(stacks)
    est = np.zeros((P, model.M), dtype=complex)
    failures = []
    t = time.perf_counter()
    if algorithm == "network" and P:
        g = real_embed_vec(np.array([p.g for p in stacks]))
        try:
            est = real_extract_vec(forward(params, model, g)[0])
        except Exception:  # noqa: BLE001 - redo per pixel to isolate the failures
            for k in range(P):
                try:
                    est[k] = real_extract_vec(forward(params, model, g[k])[0])
                except Exception as exc:  # noqa: BLE001
                    failures.append((stacks[k].ix, stacks[k].ir, str(exc)))
    elif P:
        solver = _SOLVERS[algorithm]
        for k, p in enumerate(stacks):
            try:
                est[k] = solver(model, p.g, snr)
            except Exception as exc:  # noqa: BLE001
                failures.append((p.ix, p.ir, str(exc)))
    seconds = time.perf_counter() - t
    for k, p in enumerate(stacks):
        p.gamma_hat = est[k]
    return Volume(ix=np.array([p.ix for p in stacks], dtype=int),
                  ir=np.array([p.ir for p in stacks], dtype=int),
                  mag=np.abs(est), s_grid=np.asarray(model.s), cfg=cfg,
                  algorithm=algorithm, seconds=seconds, failures=failures)


# projections ----------------------------------------------------------------

def _zbin_width(volume: Volume) -> float:
    ds = float(volume.s_grid[1] - volume.s_grid[0]) if volume.s_grid.size > 1 else 1.0
    return ds * np.cos(volume.cfg.theta)


def project(volume: Volume, mode: str):
    """Projections of a focused volume.

    * ``max_xs``: (image, x0) with image[x - x0, m] the max over range pixels.
    * ``hotmap_xy``: (image, x0, y0) of detected magnitude on pixel_dx bins.
    * ``hist_z``: (centers, weights) normalized to sum 1, bins centred on
      multiples of the cross-track grid spacing times cos(elevation).
    """
    empty = volume.mag.size == 0 or not np.any(volume.mag)
    if mode == "max_xs":
        if volume.ix.size == 0:
            warnings.warn("empty volume")
            return np.zeros((0, volume.s_grid.size)), 0
        x0 = int(volume.ix.min())
        img = np.zeros((int(volume.ix.max()) - x0 + 1, volume.s_grid.size))
        np.maximum.at(img, volume.ix - x0, volume.mag)
        return img, x0
    if mode == "hotmap_xy":
        if empty:
            warnings.warn("empty volume")
            return np.zeros((0, 0)), 0, 0
        x, y, _, w = volume.world_points()
        d = volume.cfg.pixel_dx
        bx = np.floor(x / d).astype(int)
        by = np.floor(y / d).astype(int)
        x0, y0 = int(bx.min()), int(by.min())
        img = np.zeros((int(bx.max()) - x0 + 1, int(by.max()) - y0 + 1))
        np.add.at(img, (bx - x0, by - y0), w)
        return img, x0, y0
    if mode == "hist_z":
        if empty:
            warnings.warn("empty volume")
            return np.zeros(0), np.zeros(0)
        _, _, z, w = volume.world_points()
        width = _zbin_width(volume)
        k = np.round(z / width).astype(int)
        k0 = int(k.min())
        h = np.bincount(k - k0, weights=w)
        return (np.arange(h.size) + k0) * width, h / h.sum()
    raise InvalidConfig(f"unknown projection mode {mode!r}")


def hist_peaks(centers, weights, count=2):
    """Centres of the ``count`` largest local maxima of a histogram."""
    w = np.asarray(weights, float)
    padded = np.r_[-np.inf, w, -np.inf]
    is_peak = (w > padded[:-2]) & (w >= padded[2:])
    idx = np.nonzero(is_peak)[0]
    idx = idx[np.argsort(-w[idx], kind="stable")][:count]
    return np.asarray(centers)[idx]


# export ---------------------------------------------------------------------

def write_pgm16(path, image) -> None:
    """Binary 16-bit PGM, scaled so the image maximum maps to 65535."""
    img = np.asarray(image, float)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape) if peak <= 0 else img / peak * 65535.0
    data = np.round(scaled).astype(">u2")
    h, w = data.shape if data.ndim == 2 else (0, 0)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(int)


def write_hist_csv(path, centers, weights) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["z_m", "weight"])
        for c, w in zip(centers, weights):
            out.writerow([repr(float(c)), repr(float(w))])


def save_volume(path, volume: Volume) -> None:
    meta = {"kind": "tomofocus-volume", "algorithm": volume.algorithm,
            "scene": volume.cfg.to_dict(), "failures": [list(f) for f in volume.failures]}
    container.save(path, {"ix": volume.ix.astype(float), "ir": volume.ir.astype(float),
                          "mag": volume.mag, "s_grid": volume.s_grid}, meta)
