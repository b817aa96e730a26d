"""Training and the four-stage fitting pipeline.

Fitting a sequence runs, in order: landmark tracking, per-frame posture
fitting (landmarks, then nearest neighbours, initialized from the previous
frame), per-frame non-rigid shape fitting, and a shared shape estimate
(project every fitted frame into the shape space, combine, clamp, and
reconstruct each frame from the combined point).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .evaluate import DEFAULT_THRESHOLDS, cumulative_distribution, frame_statistics, nn_distances, write_table
from .landmarks import (CANDIDATE_COUNT, LandmarkModel, LandmarkTopology, track_landmarks,
                        train_landmark_model)
from .measure import BodyMeasurements, measure_body
from .mesh import TriangleMesh
from .nonrigid import ShapeSchedule, fit_shape
from .optimize import MinimizeOptions
from .shape_space import (ShapeSpace, clamp_to_ellipsoid, first_neighbors, mean_representative,
                          reconstruct_mesh, shape_feature, train_shape_space)
from .skeleton import (PostureParams, RiggedTemplate, Skeleton, compute_mean_template, fit_posture_landmarks,
                       fit_posture_nn, posed_mesh)

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every tunable constant of training and fitting.

    The defaults for the candidate count, schedule weights, stopping
    constants, clamp radius and retained variance are the method's own;
    the iteration budgets are implementation choices.
    """

    template_dir: str | None = None
    shape_space: str | None = None
    landmark_model: str | None = None
    candidate_count: int = CANDIDATE_COUNT
    omega_data: float = 1.0
    omega_clothing: float = 1.0
    omega_smooth: float = 5.0
    smooth_decay: float = 0.5
    stop_rel_change: float = 1e-3
    stop_min_smooth: float = 0.1
    relax_rel_change: float = 1e-2
    clamp_sigma: float = 3.0
    retained_fraction: float = 0.70
    confidence: list | None = None
    anchor_count: int = 200
    shape_rounds: int = 5
    shape_iterations: int = 200
    shape_ftol: float = 1e-9
    posture_outer_iterations: int = 10
    posture_iterations: int = 200
    reconstruct_iterations: int = 3000
    floor_normal: tuple = (0.0, 0.0, 1.0)

    def schedule(self) -> ShapeSchedule:
        return ShapeSchedule(self.omega_data, self.omega_clothing, self.omega_smooth, self.smooth_decay,
                             self.stop_rel_change, self.stop_min_smooth, self.relax_rel_change, self.shape_rounds)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["floor_normal"] = list(self.floor_normal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        d = dict(d)
        if "floor_normal" in d:
            d["floor_normal"] = tuple(float(v) for v in d["floor_normal"])
        return cls(**d)

    def validate(self):
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be positive")
        if not 0 < self.retained_fraction <= 1:
            raise ValueError("retained_fraction must lie in (0, 1]")
        if self.clamp_sigma <= 0:
            raise ValueError("clamp_sigma must be positive")
        if not 0 < self.smooth_decay < 1:
            raise ValueError("smooth_decay must lie in (0, 1)")


@dataclass
class TrainedModels:
    template: RiggedTemplate
    landmark_model: LandmarkModel
    shape_space: ShapeSpace
    first: np.ndarray   # first-neighbour choice shared by every shape feature

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        io.save_template(d / "template", self.template, self.landmark_model.topology.names)
        io.save_landmark_model(d / "landmark_model.bfit", self.landmark_model)
        io.save_shape_space(d / "shape_space.bfit", self.shape_space)
        io.save_json(d / "topology.json", io.topology_to_dict(self.landmark_model.topology))

    @classmethod
    def load(cls, directory=None, config: PipelineConfig | None = None) -> "TrainedModels":
        config = config or PipelineConfig()
        d = Path(directory) if directory is not None else None
        lm_path = config.landmark_model or d / "landmark_model.bfit"
        lm = io.load_landmark_model(lm_path)
        tpl = io.load_template(config.template_dir or d / "template", lm.topology.names)
        space = io.load_shape_space(config.shape_space or d / "shape_space.bfit")
        return cls(tpl, lm, space, first_neighbors(tpl.mesh))


def train_models(meshes, landmark_indices, standard, skeleton: Skeleton, weights,
                 config: PipelineConfig | None = None, topology: LandmarkTopology | None = None) -> TrainedModels:
    """Landmark model and shape space from registered scans.

    ``standard`` flags the scans in the standard posture; their vertex mean is
    the template, rigged with ``skeleton`` and ``weights``.  The shape space
    uses every scan, whatever its posture.
    """
    config = config or PipelineConfig()
    topology = topology or LandmarkTopology.default()
    standard = np.asarray(standard, dtype=bool)
    if len(meshes) < 2 or len(standard) != len(meshes):
        raise ValueError("need at least two scans and one posture flag per scan")
    faces = meshes[0].faces
    if any(m.faces.shape != faces.shape or np.any(m.faces != faces) for m in meshes):
        raise ValueError("training scans must be registered (identical faces)")
    if not np.any(standard):
        raise ValueError("no standard-posture scan to build the template from")
    L = np.asarray(landmark_indices, dtype=np.int64)
    mean = compute_mean_template([meshes[i] for i in np.flatnonzero(standard)])
    template = RiggedTemplate(mean, skeleton, weights, L[np.flatnonzero(standard)[0]])
    first = first_neighbors(template.mesh)
    lm = train_landmark_model(meshes, L, topology, anchor_count=config.anchor_count)
    space = train_shape_space([shape_feature(m, first) for m in meshes], config.retained_fraction)
    return TrainedModels(template, lm, space, first)


@dataclass
class FitReport:
    config: PipelineConfig
    landmarks: list = field(default_factory=list)        # LandmarkAssignment per frame
    postures: list = field(default_factory=list)         # PostureParams per frame
    posture_energies: list = field(default_factory=list)
    deformed: list = field(default_factory=list)         # T_i meshes
    shape_traces: list = field(default_factory=list)
    frame_coefficients: list = field(default_factory=list)
    representative: np.ndarray | None = None
    representative_clamped: np.ndarray | None = None
    final: list = field(default_factory=list)            # reconstructed meshes per frame
    shape_estimate: TriangleMesh | None = None           # reconstruction in the template posture
    frame_distances: list = field(default_factory=list)  # per-vertex NN distances final -> frame
    measurements: BodyMeasurements | None = None
    completed: list = field(default_factory=list)
    error: str | None = None
    error_kind: str | None = None
    failed_stage: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def frame_stats(self) -> np.ndarray:
        return frame_statistics(self.frame_distances) if self.frame_distances else np.zeros((0, 2))


def _compact(frames):
    out = []
    maps = []
    for f in frames:
        if np.all(f.valid):
            out.append(f)
            maps.append(np.arange(f.n_vertices))
        else:
            m, old = f.compacted()
            out.append(m)
            maps.append(old)
    return out, maps


@dataclass
class ShapeEstimate:
    frame_coefficients: list
    representative: np.ndarray
    clamped: np.ndarray
    final: list
    shape_estimate: TriangleMesh
    measurements: BodyMeasurements


def estimate_shape(models: TrainedModels, deformed, config: PipelineConfig | None = None,
                   confidence=None) -> ShapeEstimate:
    """Restrict fitted frames to one point of the shape space and rebuild every frame from it.

    Reads only the fitted meshes ``deformed``, so it can be rerun on any
    subset of frames without repeating the earlier stages.
    """
    config = config or PipelineConfig()
    space = models.shape_space
    coefficients = [space.project(shape_feature(T, models.first)) for T in deformed]
    z = mean_representative(coefficients, confidence)
    clamped = clamp_to_ellipsoid(space, z, config.clamp_sigma)
    target = space.synthesize(clamped)
    opts = MinimizeOptions(max_iterations=config.reconstruct_iterations, gtol=1e-12, ftol=1e-13)
    final = [reconstruct_mesh(T, target, models.first, opts)[0] for T in deformed]
    estimate, _ = reconstruct_mesh(models.template.mesh, target, models.first, opts)
    return ShapeEstimate(coefficients, z, clamped, final, estimate, measure_body(estimate, config.floor_normal))


def fit_sequence(models: TrainedModels, frames, user_landmarks, config: PipelineConfig | None = None,
                 confidence=None, stages=("landmarks", "posture", "shape", "combine")) -> FitReport:
    """Run the pipeline over ``frames``; stage failures are recorded, not raised."""
    config = config or PipelineConfig()
    config.validate()
    report = FitReport(config)
    frames, maps = _compact(list(frames))
    if not frames:
        raise ValueError("no frames to fit")
    user = np.asarray(user_landmarks)
    if user.ndim == 1:
        # indices refer to the uncompacted first frame
        inverse = np.full(int(maps[0].max()) + 1, -1)
        inverse[maps[0]] = np.arange(len(maps[0]))
        if np.any(user >= len(inverse)) or np.any(inverse[user] < 0):
            raise ValueError("a user landmark lies on a removed vertex")
        user = inverse[user]
    weights = confidence if confidence is not None else config.confidence
    tpl = models.template
    stage = "landmarks"
    try:
        report.landmarks = track_landmarks(models.landmark_model, frames, user, config.candidate_count,
                                           config.anchor_count)
        report.completed.append(stage)
        if "posture" not in stages:
            return report

        stage = "posture"
        prev = PostureParams.identity()
        opts = MinimizeOptions(max_iterations=config.posture_iterations)
        for i, (frame, lm) in enumerate(zip(frames, report.landmarks)):
            p, _ = fit_posture_landmarks(tpl, lm.positions, prev, opts)
            p, e, _ = fit_posture_nn(tpl, frame, p, config.posture_outer_iterations, options=opts)
            report.postures.append(p)
            report.posture_energies.append(e)
            prev = p
            logger.info("frame %d posture energy %.4g", i + 1, e)
        report.completed.append(stage)
        if "shape" not in stages:
            return report

        stage = "shape"
        sopts = MinimizeOptions(max_iterations=config.shape_iterations, ftol=config.shape_ftol)
        for i, (frame, p) in enumerate(zip(frames, report.postures)):
            res = fit_shape(posed_mesh(tpl, p), frame, schedule=config.schedule(), options=sopts)
            report.deformed.append(res.mesh)
            report.shape_traces.append(res.trace)
            logger.info("frame %d shape fit: %d steps, stop=%s", i + 1, len(res.trace), res.stop_reason)
        report.completed.append(stage)
        if "combine" not in stages:
            return report

        stage = "combine"
        est = estimate_shape(models, report.deformed, config, weights)
        report.frame_coefficients = est.frame_coefficients
        report.representative = est.representative
        report.representative_clamped = est.clamped
        report.final = est.final
        report.frame_distances = [nn_distances(final, frame) for final, frame in zip(est.final, frames)]
        report.shape_estimate = est.shape_estimate
        report.measurements = est.measurements
        report.completed.append(stage)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        report.error, report.failed_stage = str(exc), stage
        # validation problems vs. numerical / optimizer failures
        report.error_kind = "validation" if isinstance(exc, ValueError) else "optimizer"
    if report.error:
        logger.error("stage %s failed: %s", stage, report.error)
    return report


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def save_report(report: FitReport, out_dir, names=None, figures: bool = True):
    """Write meshes, landmark files, postures, tables and figures of a fit."""
    from .plotting import plot_cumulative, plot_frame_errors

    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    names = names or LandmarkTopology.default().names
    header = {
        "config": report.config.as_dict(),
        "completed": report.completed,
        "error": report.error,
        "failed_stage": report.failed_stage,
        "frames": len(report.landmarks),
        "representative": _jsonable(report.representative),
        "representative_clamped": _jsonable(report.representative_clamped),
        "frame_coefficients": [_jsonable(z) for z in report.frame_coefficients],
        "posture_energies": report.posture_energies,
        "shape_traces": report.shape_traces,
        "measurements": report.measurements.as_dict() if report.measurements else None,
    }
    io.save_json(d / "report.json", header)
    for i, lm in enumerate(report.landmarks, 1):
        io.save_landmarks(d / f"landmarks_{i:03d}.txt", names, lm.positions)
    for i, p in enumerate(report.postures, 1):
        io.save_json(d / f"posture_{i:03d}.json", {"params": p.pack().tolist()})
    for i, T in enumerate(report.deformed, 1):
        io.save_obj(d / f"deformed_{i:03d}.obj", T)
    for i, m in enumerate(report.final, 1):
        io.save_obj(d / f"final_{i:03d}.obj", m)
    if report.shape_estimate is not None:
        io.save_obj(d / "shape_estimate.obj", report.shape_estimate)
    if report.frame_distances:
        stats = report.frame_stats()
        write_table(d / "frame_errors.tsv", ["frame", "mean", "std"],
                    [(i, m, s) for i, (m, s) in enumerate(stats, 1)])
        alld = np.concatenate(report.frame_distances)
        cum = cumulative_distribution(alld)
        write_table(d / "cumulative.tsv", ["distance", "fraction"], zip(DEFAULT_THRESHOLDS, cum))
        if figures:
            plot_frame_errors({"fit": stats}, d / "frame_errors.png")
            plot_cumulative({"fit": (DEFAULT_THRESHOLDS, cum)}, d / "cumulative.png")
