"""Command-line entry point: ``tomofocus <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage,
3 incompatible checkpoint or data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, container, evaluation, scene3d, synth, training
from .errors import IncompatibleCheckpoint, InvalidConfig, TomofocusError
from .geometry import (GeometryConfig, build_steering, extent_check, range_resolution,
                       real_embed_vec, real_extract_vec, resolution, superresolution_factor)
from .lvamp import forward

log = logging.getLogger("tomofocus")

DEFAULT_BENCH = {"test_snrs": [0.0, 5.0, 10.0, 15.0], "trials": 1000, "seed": 12345,
                 "sbl_trials": 50}


@dataclass
class RunConfig:
    geometry: GeometryConfig
    dataset: synth.DatasetSpec | None = None
    train: training.TrainConfig | None = None
    scene: scene3d.SceneConfig = field(default_factory=scene3d.SceneConfig)
    bench: dict = field(default_factory=lambda: dict(DEFAULT_BENCH))
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        if "geometry" not in d:
            raise InvalidConfig("config: missing section 'geometry'")
        geo = GeometryConfig.from_dict(d["geometry"])
        ds = synth.DatasetSpec.from_dict(d["dataset"]) if "dataset" in d else None
        tr = training.TrainConfig.from_dict(d["train"]) if "train" in d else None
        sc = scene3d.SceneConfig.from_dict(d.get("scene", {}))
        bench = dict(DEFAULT_BENCH)
        bench.update(d.get("bench", {}))
        unknown = set(bench) - set(DEFAULT_BENCH)
        if unknown:
            raise InvalidConfig(f"bench: unknown field(s) {sorted(unknown)}")
        cfg = cls(geo, ds, tr, sc, bench, dict(d.get("paths", {})))
        if ds is not None and tr is not None and tr.P > ds.P:
            raise InvalidConfig(f"train.P={tr.P} exceeds dataset.P={ds.P}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(data)


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("TOMOFOCUS_THREADS", "1"))
        except ValueError:
            raise InvalidConfig("TOMOFOCUS_THREADS must be an integer") from None
    if n < 1:
        raise InvalidConfig("--threads must be >= 1")
    return n


def _need(section, name):
    if section is None:
        raise InvalidConfig(f"config: missing section '{name}'")
    return section


# commands -------------------------------------------------------------------

def cmd_check(args) -> int:
    cfg = RunConfig.load(args.config).geometry
    ext = extent_check(cfg)
    report = {"rho_s": resolution(cfg), "rho_r": range_resolution(cfg),
              "extent_bound": ext["bound"], "delta_s": cfg.delta_s,
              "extent_ok": bool(ext["pass"]), "grid_spacing": cfg.grid_spacing,
              "superresolution_factor": superresolution_factor(cfg)}
    print(f"cross-track resolution rho_s = {report['rho_s']:.4f} m")
    print(f"range resolution       rho_r = {report['rho_r']:.6f} m")
    print(f"extent bound                  = {report['extent_bound']:.2f} m "
          f"(delta_s = {cfg.delta_s:g} m): {'pass' if report['extent_ok'] else 'FAIL'}")
    print(f"grid spacing                  = {report['grid_spacing']:.4f} m")
    print(f"super-resolution factor       = {report['superresolution_factor']:.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_datagen(args) -> int:
    cfg = RunConfig.load(args.config)
    spec = _need(cfg.dataset, "dataset")
    model = build_steering(cfg.geometry)
    arrays = synth.generate_arrays(model, spec, workers=_threads(args))
    synth.save_dataset(args.out, arrays, spec, model)
    log.info("wrote %d samples to %s", spec.P, args.out)
    return 0


def _load_data_for(path, geometry):
    arrays, meta = container.load(path)
    fp = meta.get("fingerprint")
    if fp is not None and fp != geometry.fingerprint():
        raise IncompatibleCheckpoint(f"{path} was generated for a different geometry")
    return arrays, meta


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    tcfg = _need(cfg.train, "train")
    model = build_steering(cfg.geometry)
    data, _ = _load_data_for(args.data, cfg.geometry)
    try:
        params, rows = training.train_layerwise(model, tcfg, data, workers=_threads(args),
                                                progress=True)
    except training.TrainingDiverged as exc:
        if args.log:
            training.write_log(args.log, exc.log)
        raise
    training.save_checkpoint(params, args.out, cfg.geometry, tcfg)
    if args.log:
        training.write_log(args.log, rows)
    return 0


def _infer_one(model, algorithm, g, snr):
    if algorithm == "omp":
        nv = None if snr is None else evaluation.echo_noise_var(g, snr)
        return baselines.omp(model, g, baselines.OmpConfig(noise_var=nv))
    if algorithm == "sbl":
        nv = None if snr is None else evaluation.echo_noise_var(g, snr)
        return baselines.sbl(model, g, baselines.SblConfig(noise_var=nv))
    if snr is None:
        raise InvalidConfig("algorithm 'vamp' needs per-sample snr_db in the input")
    return baselines.lmmse_vamp(model, g, evaluation.echo_noise_var(g, snr))


def cmd_infer(args) -> int:
    cfg = RunConfig.load(args.config)
    model = build_steering(cfg.geometry)
    params = None
    if args.algorithm == "network":
        if not args.checkpoint:
            raise InvalidConfig("algorithm 'network' requires --checkpoint")
        params = training.load_checkpoint(args.checkpoint, cfg.geometry)
    arrays, _ = _load_data_for(args.input, cfg.geometry)
    if "g_embed" not in arrays:
        raise InvalidConfig(f"{args.input} has no 'g_embed' array")
    g = real_extract_vec(np.atleast_2d(arrays["g_embed"]))
    if g.shape[1] != model.N:
        raise IncompatibleCheckpoint(f"echo length {g.shape[1]} does not match N={model.N}")
    snr = arrays.get("snr_db")
    if params is not None:
        out = real_extract_vec(forward(params, model, real_embed_vec(g))[0])
    elif args.algorithm == "bp":
        out = baselines.bp(model, g)
    else:
        out = np.array([_infer_one(model, args.algorithm, g[i],
                                   None if snr is None else float(snr[i]))
                        for i in range(g.shape[0])])
    container.save(args.out, {"gamma_hat": out}, {"algorithm": args.algorithm})
    return 0


def _networks(checkpoints, geometry):
    nets = {}
    for path in checkpoints or []:
        params = training.load_checkpoint(path, geometry)
        tr = training.checkpoint_meta(path).get("train") or {}
        snr = tr.get("snr_db", "n/a")
        name = f"network_{snr:g}dB" if isinstance(snr, (int, float)) else Path(path).stem
        if name in nets:
            name = Path(path).stem
        nets[name] = (params, snr)
    return nets


def cmd_bench_mse(args) -> int:
    cfg = RunConfig.load(args.config)
    model = build_steering(cfg.geometry)
    b = cfg.bench
    res = evaluation.snr_sweep(model, {"bp": evaluation.bp_solver, "omp": evaluation.omp_solver,
                                       "sbl": evaluation.sbl_solver},
                               _networks(args.checkpoints, cfg.geometry), b["test_snrs"],
                               args.trials or b["trials"], b["seed"], workers=_threads(args))
    res.to_csv(args.out)
    if args.series:
        res.series_csv(args.series)
    return 0


def cmd_bench_time(args) -> int:
    cfg = RunConfig.load(args.config)
    model = build_steering(cfg.geometry)
    b = cfg.bench
    res = evaluation.timing_bench(model, {"bp": evaluation.bp_solver,
                                          "omp": evaluation.omp_solver,
                                          "sbl": evaluation.sbl_solver},
                                  _networks(args.checkpoints, cfg.geometry),
                                  args.trials or b["trials"], b["seed"],
                                  parallel_workers=_threads(args),
                                  trial_limits={"sbl": b["sbl_trials"]})
    res.to_csv(args.out)
    return 0


def cmd_scene(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.algorithm == "network" and not args.checkpoint:
        raise InvalidConfig("algorithm 'network' requires --checkpoint")
    model = build_steering(cfg.geometry)
    params = training.load_checkpoint(args.checkpoint, cfg.geometry) if args.checkpoint else None
    sc = cfg.scene
    stacks = scene3d.rasterize(scene3d.build_building(sc), sc, model)
    if args.max_pixels:
        step = max(1, len(stacks) // args.max_pixels)
        stacks = stacks[::step][: args.max_pixels]
    vol = scene3d.focus_stack(stacks, args.algorithm, model, sc, params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene3d.save_volume(out / "volume.tfc", vol)
    img, _ = scene3d.project(vol, "max_xs")
    scene3d.write_pgm16(out / "max_xs.pgm", img.T[::-1])
    hot = scene3d.project(vol, "hotmap_xy")[0]
    scene3d.write_pgm16(out / "hotmap_xy.pgm", hot.T[::-1])
    centers, weights = scene3d.project(vol, "hist_z")
    scene3d.write_hist_csv(out / "hist_z.csv", centers, weights)
    summary = {"algorithm": args.algorithm, "pixels": len(stacks),
               "scatterers": int(sum(p.s.size for p in stacks)),
               "hist_z_peaks": [float(z) for z in scene3d.hist_peaks(centers, weights)],
               "failures": len(vol.failures)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"focus_seconds": vol.seconds}) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tomofocus",
                                description="Cross-track SAR focusing with an unfolded network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $TOMOFOCUS_THREADS or 1)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("check", cmd_check, "print resolution and extent checks")
    sp.add_argument("--json", help="also write the report as JSON")
    sp = add("datagen", cmd_datagen, "generate a training dataset")
    sp.add_argument("--out", required=True)
    sp = add("train", cmd_train, "train a network layer by layer")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="training log CSV")
    sp = add("infer", cmd_infer, "reconstruct every echo of a container")
    sp.add_argument("--input", required=True)
    sp.add_argument("--algorithm", required=True,
                    choices=["bp", "omp", "sbl", "vamp", "network"])
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)
    sp = add("bench-mse", cmd_bench_mse, "MSE versus SNR sweep")
    sp.add_argument("--checkpoints", nargs="*", default=[])
    sp.add_argument("--trials", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--series", help="also write one column per algorithm")
    sp = add("bench-time", cmd_bench_time, "per-trial wall-clock timing")
    sp.add_argument("--checkpoints", nargs="*", default=[])
    sp.add_argument("--trials", type=int)
    sp.add_argument("--out", required=True)
    sp = add("scene", cmd_scene, "focus the synthetic building scene")
    sp.add_argument("--algorithm", required=True, choices=list(scene3d.ALGORITHMS))
    sp.add_argument("--checkpoint")
    sp.add_argument("--max-pixels", type=int, default=0,
                    help="focus an evenly spaced subset of pixels")
    sp.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train"
                        else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TomofocusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
