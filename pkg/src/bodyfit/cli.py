"""Command-line interface: ``bodyfit <command> [options]``.

Exit status is 0 on success, 2 on invalid input, 3 when an optimizer or
inference stage fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluate import (DEFAULT_THRESHOLDS, cumulative_distribution, frame_statistics, nn_distances, vertex_rms,
                       write_table)
from .landmarks import LandmarkTopology
from .measure import MeasurementError, measure_body

logger = logging.getLogger("bodyfit")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


class CommandError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _load_config(path):
    from .pipeline import PipelineConfig

    if path is None:
        return PipelineConfig()
    try:
        return PipelineConfig.from_dict(io.load_json(path))
    except (TypeError, ValueError) as exc:
        raise CommandError(f"{path}: {exc}") from None


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(args):
    from .pipeline import train_models
    from .skeleton import RiggedTemplate  # noqa: F401  (validates rig on construction)

    cfg = _load_config(args.config)
    root = Path(args.data)
    manifest = io.load_json(root / "manifest.json")
    topology = io.topology_from_dict(io.load_json(args.topology)) if args.topology else LandmarkTopology.default()
    meshes, lms, standard = [], [], []
    for entry in manifest["scans"]:
        meshes.append(io.load_mesh(root / entry["mesh"]))
        idx = io.load_landmarks(root / entry["landmarks"], topology.names)
        if idx.ndim != 1:
            raise CommandError(f"{entry['landmarks']}: training landmarks must be vertex indices")
        lms.append(idx)
        standard.append(bool(entry.get("standard", False)))
    skel = io.skeleton_from_dict(io.load_json(root / manifest["skeleton"]))
    weights = np.array(io.load_json(root / manifest["weights"])["weights"], dtype=float)
    models = train_models(meshes, np.array(lms), standard, skel, weights, cfg, topology)
    out = _out_dir(args)
    models.save(out)
    io.save_json(out / "config.json", cfg.as_dict())
    print(f"trained on {len(meshes)} scans: {models.shape_space.n_components} shape components; models in {out}")


def cmd_fit(args):
    from .pipeline import TrainedModels, fit_sequence, save_report

    cfg = _load_config(args.config)
    models = TrainedModels.load(args.models, cfg)
    if not args.frames:
        raise CommandError("no frames given (--frames)")
    frames = [io.load_mesh(p) for p in args.frames]
    user = io.load_landmarks(args.landmarks, models.landmark_model.topology.names)
    confidence = None
    if args.confidence:
        confidence = np.loadtxt(args.confidence, ndmin=1)
        if len(confidence) != len(frames):
            raise CommandError("need one confidence weight per frame")
    report = fit_sequence(models, frames, user, cfg, confidence)
    out = _out_dir(args)
    save_report(report, out, list(models.landmark_model.topology.names))
    if not report.ok:
        code = EXIT_INVALID if report.error_kind == "validation" else EXIT_FAILED
        raise CommandError(f"stage {report.failed_stage} failed: {report.error}", code)
    stats = report.frame_stats()
    for i, (m, s) in enumerate(stats, 1):
        print(f"frame {i}\tmean {m:.6f}\tstd {s:.6f}")
    print("\t".join(f"{k} {v:.4f}" for k, v in report.measurements.as_dict().items()))


def cmd_synth(args):
    from .skeleton import PostureParams
    from .synth import SynthBodyParams, generate_body, generate_sequence, simulate_clothing, squat_curve, \
        training_set

    out = _out_dir(args)
    names = LandmarkTopology.default().names
    if args.kind == "training":
        ts = training_set(args.subjects, args.seed, args.resolution)
        scans = []
        for i, (m, lm, std) in enumerate(zip(ts.meshes, ts.landmarks, ts.standard)):
            io.save_obj(out / f"scan_{i:03d}.obj", m)
            io.save_landmarks(out / f"scan_{i:03d}.txt", names, lm)
            scans.append({"mesh": f"scan_{i:03d}.obj", "landmarks": f"scan_{i:03d}.txt", "standard": bool(std)})
        io.save_json(out / "skeleton.json", io.skeleton_to_dict(ts.skeleton))
        io.save_json(out / "weights.json", {"bones": list(ts.skeleton.names), "weights": ts.weights.tolist()})
        io.save_json(out / "manifest.json", {"scans": scans, "skeleton": "skeleton.json", "weights": "weights.json",
                                             "params": [p.as_dict() for p in ts.params]})
        print(f"wrote {len(scans)} training scans to {out}")
        return
    rng = np.random.default_rng(args.seed)
    params = SynthBodyParams.random(rng, seed=args.seed)
    if args.kind == "body":
        body = generate_body(params, args.resolution)
        frames = [body.mesh]
        truth = [PostureParams.identity()]
        lm = body.landmarks
    else:
        body = generate_body(params, args.resolution)
        seq = generate_sequence(params, squat_curve(args.frames, body.skeleton), args.resolution)
        frames = [f.mesh for f in seq]
        truth = [f.posture for f in seq]
        lm = body.landmarks
    io.save_json(out / "subject.json", params.as_dict())
    for i, (m, p) in enumerate(zip(frames, truth), 1):
        io.save_obj(out / f"truth_{i:03d}.obj", m)
        scan = simulate_clothing(m, args.clothing, args.folds, seed=args.seed + i) if args.clothing or args.folds else m
        io.save_obj(out / f"frame_{i:03d}.obj", scan)
        io.save_json(out / f"posture_{i:03d}.json", {"params": p.pack().tolist()})
    io.save_landmarks(out / "landmarks_001.txt", names, frames[0].vertices[lm])
    io.save_landmarks(out / "landmark_indices.txt", names, lm)
    print(f"wrote {len(frames)} frame(s) to {out}")


def cmd_corrupt(args):
    from .synth import NoiseSpec, corrupt

    spec = NoiseSpec(args.kind, sigma_fraction=args.sigma, probability=args.probability,
                     outlier_range=args.range, hole_count=args.holes, hole_radius=args.hole_radius)
    out = _out_dir(args)
    for i, path in enumerate(args.frames or []):
        mesh = corrupt(io.load_mesh(path), spec, args.seed + i)
        target = out / Path(path).name
        if not np.all(mesh.valid):
            mesh, _ = mesh.compacted()
        io.save_mesh(target, mesh)
        print(target)


def cmd_eval(args):
    from .plotting import plot_cumulative, plot_frame_errors

    if len(args.results) != len(args.reference):
        raise CommandError("need one reference per result mesh")
    out = _out_dir(args)
    per_frame = []
    rms = []
    for r, t in zip(args.results, args.reference):
        a, b = io.load_mesh(r), io.load_mesh(t)
        per_frame.append(nn_distances(a, b))
        rms.append(vertex_rms(a, b) if a.n_vertices == b.n_vertices else float("nan"))
    stats = frame_statistics(per_frame)
    write_table(out / "frame_errors.tsv", ["frame", "mean", "std", "vertex_rms"],
                [(i, m, s, q) for i, ((m, s), q) in enumerate(zip(stats, rms), 1)])
    cum = cumulative_distribution(np.concatenate(per_frame))
    write_table(out / "cumulative.tsv", ["distance", "fraction"], zip(DEFAULT_THRESHOLDS, cum))
    write_table(out / "distances.tsv", ["frame", "vertex", "distance"],
                [(i, j, d) for i, dd in enumerate(per_frame, 1) for j, d in enumerate(dd)])
    plot_frame_errors({"result": stats}, out / "frame_errors.png")
    plot_cumulative({"result": (DEFAULT_THRESHOLDS, cum)}, out / "cumulative.png")
    for i, (m, s) in enumerate(stats, 1):
        print(f"frame {i}\tmean {m:.6f}\tstd {s:.6f}")


def cmd_measure(args):
    normal = np.array(args.floor_normal, dtype=float)
    for path in args.meshes:
        try:
            m = measure_body(io.load_mesh(path), normal)
        except MeasurementError as exc:
            raise CommandError(f"{path}: {exc}") from None
        print(f"{path}\theight {m.height:.6f}\twaist {m.waist:.6f}\tchest {m.chest:.6f}")


def cmd_check_gradients(args):
    from .gradcheck import run_gradient_suites

    results = run_gradient_suites(args.seed, args.samples, args.resolution)
    rows = [(k, v, "pass" if v < args.tolerance else "fail") for k, v in results.items()]
    if args.out_dir:
        write_table(_out_dir(args) / "gradients.tsv", ["energy", "max_relative_error", "status"], rows)
    for k, v, st in rows:
        print(f"{k}\t{v:.3e}\t{st}")
    if any(r[2] == "fail" for r in rows):
        raise CommandError("gradient check failed", EXIT_FAILED)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bodyfit", description="Fit a statistical body model to scan sequences.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="pipeline configuration (JSON)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=out_required)

    p = sub.add_parser("train", help="train landmark model and shape space")
    common(p)
    p.add_argument("--data", required=True, help="directory with manifest.json")
    p.add_argument("--topology", help="landmark topology (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit a frame sequence")
    common(p)
    p.add_argument("--models", required=True, help="directory written by 'train'")
    p.add_argument("--frames", nargs="+", required=True)
    p.add_argument("--landmarks", required=True, help="landmarks on the first frame")
    p.add_argument("--confidence", help="text file with one weight per frame")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="generate synthetic bodies and sequences")
    common(p)
    p.add_argument("--kind", choices=("training", "body", "sequence"), default="sequence")
    p.add_argument("--frames", type=int, default=31)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--resolution", type=float, default=0.025)
    p.add_argument("--clothing", type=float, default=0.0, help="clothing offset (m)")
    p.add_argument("--folds", type=float, default=0.0, help="clothing fold amplitude (m)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="add noise, outliers or holes to meshes")
    common(p)
    p.add_argument("--frames", nargs="+", required=True)
    p.add_argument("--kind", choices=("gaussian", "outliers", "holes"), required=True)
    p.add_argument("--sigma", type=float, default=0.05, help="gaussian sigma / bounding-ball radius")
    p.add_argument("--probability", type=float, default=1 / 50)
    p.add_argument("--range", type=float, default=4.0, help="outlier range / average edge length")
    p.add_argument("--holes", type=int, default=5)
    p.add_argument("--hole-radius", type=float, default=0.05)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("eval", help="distance tables and figures")
    common(p)
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--reference", nargs="+", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("measure", help="height, waist and chest circumference")
    p.add_argument("meshes", nargs="+")
    p.add_argument("--floor-normal", type=float, nargs=3, default=(0.0, 0.0, 1.0))
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("check-gradients", help="finite-difference gradient suites")
    common(p, out_required=False)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--resolution", type=float, default=0.04)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_gradients)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"bodyfit: {exc}", file=sys.stderr)
        return exc.code
    except (io.FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"bodyfit: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"bodyfit: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
