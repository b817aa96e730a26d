import numpy as np
import pytest

from bodyfit.canonical import procrustes_align
from bodyfit.mesh import bounding_ball_radius
from bodyfit.pipeline import FitReport, PipelineConfig, fit_sequence, save_report, train_models
from bodyfit.skeleton import posed_mesh
from bodyfit.synth import SynthBodyParams, generate_body, simulate_clothing, squat_posture, training_set

RES = 0.04


@pytest.fixture(scope="module")
def models():
    ts = training_set(4, seed=2, resolution=RES, postures_per_subject=2)
    return train_models(ts.meshes, ts.landmarks, ts.standard, ts.skeleton, ts.weights,
                        PipelineConfig(anchor_count=100))


def _cfg(**kw):
    return PipelineConfig(anchor_count=100, **kw)


def _aligned_rms(a, b):
    T, _ = procrustes_align(a, b)
    return float(np.sqrt(np.mean(np.sum((T.apply(a) - b) ** 2, axis=1))))


def test_config_defaults():
    c = PipelineConfig()
    assert (c.candidate_count, c.omega_data, c.omega_clothing, c.omega_smooth) == (200, 1.0, 1.0, 5.0)
    assert (c.smooth_decay, c.stop_rel_change, c.stop_min_smooth, c.clamp_sigma, c.retained_fraction) == \
        (0.5, 1e-3, 0.1, 3.0, 0.7)


def test_config_round_trip_and_validation():
    c = PipelineConfig(candidate_count=7, omega_smooth=2.5)
    assert PipelineConfig.from_dict(c.as_dict()) == c
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(retained_fraction=0.0).validate()


def test_training_rejects_unregistered(models):
    body = generate_body(SynthBodyParams(), RES)
    from bodyfit.primitives import icosphere
    with pytest.raises(ValueError):
        train_models([body.mesh, icosphere(2)], np.zeros((2, 14), int), [True, True], body.skeleton, body.weights)


def test_single_clean_frame_reconstruction(models):
    # a family member in the standard posture; vertices correspond to the truth
    params = SynthBodyParams(1.04, 1.12, 0.92)
    truth = generate_body(params, RES).mesh
    report = fit_sequence(models, [truth], truth.vertices[models.template.landmarks], _cfg())
    assert report.ok, report.error
    rms = _aligned_rms(report.final[0].vertices, truth.vertices)
    assert rms < 0.01 * bounding_ball_radius(truth)


def test_identical_frames_give_identical_outputs(models):
    body = generate_body(SynthBodyParams(0.97, 1.05, 1.05), RES)
    frame = posed_mesh(body, squat_posture(0.3, body.skeleton))
    user = frame.vertices[body.landmarks]
    one = fit_sequence(models, [frame], user, _cfg())
    three = fit_sequence(models, [frame] * 3, user, _cfg())
    assert one.ok and three.ok
    for T in three.deformed:
        assert np.array_equal(T.vertices, three.deformed[0].vertices)
    assert np.array_equal(three.representative, one.frame_coefficients[0])
    for m in three.final[1:]:
        assert np.array_equal(m.vertices, three.final[0].vertices)


def test_more_clothed_frames_do_not_hurt(models):
    params = SynthBodyParams(1.02, 1.15, 1.0)
    body = generate_body(params, RES)
    frames = [simulate_clothing(posed_mesh(body, squat_posture(d, body.skeleton)), 0.01, 0.01, seed=k)
              for k, d in enumerate((0.0, 0.35, 0.7))]
    user = posed_mesh(body, squat_posture(0.0, body.skeleton)).vertices[body.landmarks]
    errs = []
    for n in (1, 3):
        r = fit_sequence(models, frames[:n], user, _cfg())
        assert r.ok, r.error
        errs.append(_aligned_rms(r.shape_estimate.vertices, body.mesh.vertices))
    assert errs[1] <= errs[0]


def test_fit_is_deterministic(models):
    body = generate_body(SynthBodyParams(), RES)
    frame = simulate_clothing(body.mesh, 0.005)
    user = body.mesh.vertices[body.landmarks]
    a = fit_sequence(models, [frame], user, _cfg(), stages=("landmarks", "posture", "shape"))
    b = fit_sequence(models, [frame], user, _cfg(), stages=("landmarks", "posture", "shape"))
    assert np.array_equal(a.deformed[0].vertices, b.deformed[0].vertices)
    assert np.array_equal(a.postures[0].pack(), b.postures[0].pack())


def test_stage_selection_and_user_indices(models):
    body = generate_body(SynthBodyParams(), RES)
    r = fit_sequence(models, [body.mesh, body.mesh], body.landmarks, _cfg(), stages=("landmarks",))
    assert r.completed == ["landmarks"] and not r.postures
    assert np.array_equal(r.landmarks[0].indices, body.landmarks)


def test_stage_failure_is_reported(models):
    body = generate_body(SynthBodyParams(), RES)
    r = fit_sequence(models, [body.mesh], np.full((14, 3), np.nan), _cfg())
    assert not r.ok and r.completed == [] and r.failed_stage == "landmarks"


def test_save_report_writes_tables_and_figures(models, tmp_path):
    body = generate_body(SynthBodyParams(), RES)
    r = fit_sequence(models, [body.mesh], body.landmarks, _cfg())
    assert r.ok
    save_report(r, tmp_path)
    for name in ("report.json", "frame_errors.tsv", "cumulative.tsv", "frame_errors.png", "cumulative.png",
                 "final_001.obj", "shape_estimate.obj", "landmarks_001.txt", "posture_001.json"):
        assert (tmp_path / name).exists(), name
    import json
    assert json.loads((tmp_path / "report.json").read_text())["config"]["omega_smooth"] == 5.0
