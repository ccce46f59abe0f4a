import json
import os
from dataclasses import replace

import numpy as np
import pytest

from gazereg import pgm
from gazereg.errors import DomainError, PlacementError
from gazereg.flow import OcclusionConfig, occlusion_check, read_flo
from gazereg.gaze import GazeSample, PatchGrid, SmoothingConfig, make_heatmap, make_singular, parse_gaze_csv, patchify
from gazereg.numerics import RngState
from gazereg.pipeline import PreprocessConfig, build_batch, frame_target, reference_targets, sample_targets
from gazereg.synth import (
    OCCLUDER_SPEED,
    SceneSpec,
    _camera_path,
    class_templates,
    generate_gaze_trace,
    generate_scene,
    generate_suite,
    inject_occlusion,
    save_sample,
)

SPEC = SceneSpec()


def same_sample(a, b):
    return (
        all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
        and a.gaze == b.gaze
        and a.flows == b.flows
        and a.occluded == b.occluded
        and (a.label, a.future_label, a.objects) == (b.label, b.future_label, b.objects)
    )


def test_same_seed_same_sample():
    spec = replace(SPEC, seed=11, occlusion_rate=0.3)
    assert same_sample(generate_scene(spec), generate_scene(spec))
    assert not same_sample(generate_scene(spec), generate_scene(replace(spec, seed=12)))


def test_static_scene_has_zero_flow_and_no_occlusion():
    s = generate_scene(replace(SPEC, motion_px_per_frame=0, occlusion_rate=0.0, seed=4))
    assert s.flows
    for a, b in s.flows:
        f = s.flow(a, b)
        assert not f.u.any() and not f.v.any()
    assert not any(s.occluded.values())


def test_true_flows_describe_the_camera_motion():
    s = generate_scene(replace(SPEC, seed=5))
    cams = {t: (cx, cy) for t, cx, cy in s.camera}
    for (a, b), script in s.flows.items():
        # content at time b moves opposite to the camera displacement
        assert (script.du, script.dv) == (cams[b][0] - cams[a][0], cams[b][1] - cams[a][1])


def test_consecutive_frames_are_exact_translations_of_each_other():
    spec = replace(SPEC, seed=6, noise_sigma=0.0)
    s = generate_scene(spec)
    for i in range(spec.n_frames - 1):
        t, t2 = spec.frame_time_ms(i), spec.frame_time_ms(i + 1)
        f = s.flows[(t2, t)]
        a, b = s.frames[i], s.frames[i + 1]
        h, w = a.shape
        ys, xs = np.mgrid[8:h - 8, 8:w - 8]
        # background away from objects and hands follows the flow exactly
        moved = b[ys + f.dv, xs + f.du]
        agree = np.isclose(moved, a[ys, xs], atol=1 / 255)
        assert agree.mean() > 0.5


def test_gaze_timestamps_cover_the_clip():
    s = generate_scene(replace(SPEC, seed=7))
    ts = [g.timestamp_ms for g in s.gaze]
    assert ts == SPEC.gaze_times()
    assert all(b > a for a, b in zip(ts, ts[1:]))
    assert all(b - a in (33, 34) for a, b in zip(ts, ts[1:]))
    assert ts[0] == 0 and ts[-1] == SPEC.duration_s * 1000


def test_frames_sit_mid_interval():
    assert [SPEC.frame_time_ms(i) for i in range(3)] == [500, 1500, 2500]
    assert SPEC.n_frames == 3


def test_spec_validation():
    with pytest.raises(DomainError):
        SceneSpec(occlusion_rate=1.5)
    with pytest.raises(DomainError):
        SceneSpec(n_classes=13)
    with pytest.raises(DomainError):
        SceneSpec.from_json({"width": 64, "wat": 1})
    assert SceneSpec.from_json(SPEC.to_json()) == SPEC


def test_crowded_scene_raises_placement_error():
    with pytest.raises(PlacementError):
        generate_scene(SceneSpec(width=32, height=32, n_objects=6, n_classes=6, motion_px_per_frame=8))


def test_camera_path_steps_are_bounded():
    spec = replace(SPEC, duration_s=6)
    path = _camera_path(spec, RngState(1).stream("x"))
    for _, cx, cy in path:
        assert cx in (-8, 0, 8) and cy in (-8, 0, 8)


# -- gaze trace ------------------------------------------------------------------


def fixed_scene(seed=3):
    s = generate_scene(replace(SPEC, seed=seed))
    path = [tuple(c) for c in s.camera]
    return s, path


def test_zero_jitter_without_saccades_sits_on_the_centroid():
    s, path = fixed_scene()
    spec = replace(SPEC, glance_rate=0.0)
    trace = generate_gaze_trace(spec, s.objects, path, lambda t: 0, RngState(0).stream("g"), jitter_px=0, saccades=False)
    cams = {t: (cx, cy) for t, cx, cy in path}
    half = (SPEC.object_px - 1) / 2
    for g in trace:
        cx, cy = cams[g.timestamp_ms]
        assert (g.x, g.y) == (s.objects[0]["x"] - cx + half, s.objects[0]["y"] - cy + half)


def test_fixations_last_six_samples():
    s, path = fixed_scene()
    spec = replace(SPEC, glance_rate=0.0, motion_px_per_frame=0)
    path = [(t, 0, 0) for t, _, _ in path]
    calls = []

    def alternate(t):
        calls.append(t)
        return len(calls) % 2

    trace = generate_gaze_trace(spec, s.objects, path, alternate, RngState(0).stream("g"), jitter_px=0)
    half = (SPEC.object_px - 1) / 2
    anchors = {(o["x"] + half, o["y"] + half) for o in s.objects[:2]}
    runs, current = [], 0
    for g in trace:
        if (g.x, g.y) in anchors and (current == 0 or (g.x, g.y) == last):
            current += 1
        else:
            if current:
                runs.append(current)
            current = 1 if (g.x, g.y) in anchors else 0
        last = (g.x, g.y)
    # every complete fixation (all but the clipped last one) has 6 samples
    assert runs and set(runs) == {6}


def test_glances_are_fleeting():
    s, path = fixed_scene()
    spec = replace(SPEC, glance_rate=1.0, motion_px_per_frame=0)
    path = [(t, 0, 0) for t, _, _ in path]
    trace = generate_gaze_trace(spec, s.objects, path, lambda t: 0, RngState(0).stream("g"), jitter_px=0, saccades=False)
    # every fixation is a three-sample glance at a distractor
    assert len(trace) == len(path)
    half = (SPEC.object_px - 1) / 2
    target = (s.objects[0]["x"] + half, s.objects[0]["y"] + half)
    assert all((g.x, g.y) != target for g in trace)


def test_fixation_gaze_lands_on_the_target_patch():
    hits = total = 0
    grid = PatchGrid.for_frame(64, 64, 8)
    for seed in range(20):
        spec = replace(SPEC, seed=seed, glance_rate=0.0)
        s = generate_scene(spec)
        trace = generate_gaze_trace(spec, s.objects, [tuple(c) for c in s.camera], lambda t: 0,
                                    RngState(seed).stream("fix"), saccades=False)
        cams = {t: (cx, cy) for t, cx, cy in s.camera}
        for g in trace:
            cx, cy = cams[g.timestamp_ms]
            x0, y0 = s.objects[0]["x"] - cx, s.objects[0]["y"] - cy
            patches = {grid.patch_of(x, y) for x in range(x0, x0 + 16) for y in range(y0, y0 + 16)}
            dist = patchify(make_heatmap(g, 64, 64, SmoothingConfig(6.0)), grid)
            hits += int(np.argmax(dist.probs)) in patches
            total += 1
    assert hits / total >= 0.95


# -- occlusions -----------------------------------------------------------------------


def test_inject_nothing_returns_the_sample():
    s = generate_scene(replace(SPEC, seed=2))
    assert inject_occlusion(s, []) is s


def test_full_occlusion_marks_every_window_frame():
    s = generate_scene(replace(SPEC, seed=3, occlusion_rate=1.0))
    assert s.occluded and all(s.occluded.values())
    for (i, tau), flag in s.occluded.items():
        t = SPEC.frame_time_ms(i)
        assert t - SPEC.flow_window_ms <= tau < t
        assert s.flows[(t, tau)].rect is not None
        assert (s.flows[(t, tau)].rect_du, s.flows[(t, tau)].rect_dv) == OCCLUDER_SPEED


def test_occluder_is_flagged_even_at_stress_threshold():
    s = generate_scene(replace(SPEC, seed=8, occlusion_rate=1.0))
    (i, tau) = sorted(s.occluded)[0]
    t = SPEC.frame_time_ms(i)
    assert s.flows[(t, tau)].covered_fraction(64, 64) >= 0.7
    verdict = occlusion_check(s.flow(t, tau), s.flow(tau, t), OcclusionConfig(eps=3.0, eta=0.6))
    assert verdict.occluded


def test_occlusion_check_reproduces_the_truth():
    cfg = OcclusionConfig()
    for s in generate_suite(replace(SPEC, occlusion_rate=0.5), 10, 9):
        for (i, tau), flag in s.occluded.items():
            t = SPEC.frame_time_ms(i)
            covered = s.flows[(t, tau)].covered_fraction(64, 64)
            verdict = occlusion_check(s.flow(t, tau), s.flow(tau, t), cfg)
            if covered > cfg.eta:
                assert verdict.occluded
            if covered < cfg.eta / 2:
                assert not verdict.occluded
            assert verdict.occluded == flag


def test_fully_occluded_window_collapses_to_singular():
    spec = replace(SPEC, seed=10, occlusion_rate=1.0)
    s = generate_scene(spec)
    cfg = PreprocessConfig(smoothing=SmoothingConfig(6.0))
    for ft in sample_targets(s, cfg):
        now = next(g for g in s.gaze if g.timestamp_ms == ft.t_ms)
        single = make_singular(now, 64, 64, cfg.smoothing)
        assert np.allclose(ft.heatmap.mass, single.mass, atol=1e-12)
        assert ft.checks and all(v == "occluded" for _, _, v in ft.checks)


# -- labels ----------------------------------------------------------------------------


def test_label_is_recoverable_from_the_target_patch():
    spec = replace(SPEC, noise_sigma=0.15)
    templates = class_templates(spec.n_classes, spec.object_px)
    for s in generate_suite(spec, 30, 12):
        x, y = (int(round(v - (spec.object_px - 1) / 2)) for v in s.target_track[0])
        crop = s.frames[0][y : y + 16, x : x + 16] - spec.motif_contrast
        guess = int(np.argmin([np.sum((crop - t) ** 2) for t in templates]))
        assert guess == s.label


def test_predict_task_looks_ahead_to_the_next_object():
    spec = replace(SPEC, task="predict", seed=13)
    s = generate_scene(spec)
    nxt = next(k for k, o in enumerate(s.objects) if o["role"] == "next")
    assert s.future_label == s.objects[nxt]["cls"] != s.label
    assert s.task_label("predict") == s.future_label and s.task_label("understand") == s.label


def test_suite_members_differ_and_are_reproducible():
    a = generate_suite(SPEC, 3, 1)
    b = generate_suite(SPEC, 3, 1)
    assert all(same_sample(x, y) for x, y in zip(a, b))
    assert not same_sample(a[0], a[1])


# -- on disk ------------------------------------------------------------------------------


def test_saved_layout(tmp_path):
    s = generate_scene(replace(SPEC, seed=14, occlusion_rate=0.5))
    save_sample(s, tmp_path)
    for i, frame in enumerate(s.frames):
        img = pgm.from_bytes((tmp_path / "frames" / f"{i}.pgm").read_bytes())
        assert np.allclose(img, frame, atol=0.5 / 255)
    trace = parse_gaze_csv((tmp_path / "gaze.csv").read_text(), 64, 64)
    assert [g.timestamp_ms for g in trace] == [g.timestamp_ms for g in s.gaze]
    assert np.allclose([g.x for g in trace], [g.x for g in s.gaze])
    for a, b in s.flows:
        f = read_flo((tmp_path / "flow" / f"{a}_{b}.flo").read_bytes())
        assert np.array_equal(f.u, s.flow(a, b).u)
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["label"] == s.label
    assert sum(r["occluded"] for r in truth["occluded"]) == sum(s.occluded.values())


# -- pipeline --------------------------------------------------------------------------------


def test_missing_flow_counts_as_occluded(caplog):
    trace = [GazeSample(t, 20.0, 20.0) for t in range(0, 201, 33)]
    cfg = PreprocessConfig(smoothing=SmoothingConfig(6.0))
    ft = frame_target(trace, 198, 64, 64, lambda a, b: None, cfg)
    assert all(v == "missing" for _, _, v in ft.checks)
    assert np.allclose(ft.heatmap.mass, make_heatmap(trace[-1], 64, 64, cfg.smoothing).mass)
    assert "treating it as occluded" in caplog.text


def test_gaze_free_frame_gets_a_uniform_target():
    cfg = PreprocessConfig()
    ft = frame_target([GazeSample(5000, 1.0, 1.0)], 500, 64, 64, lambda a, b: None, cfg)
    assert ft.fallback and np.allclose(ft.dist.probs, 1 / 64)


def test_singular_mode_uses_the_latest_sample():
    trace = [GazeSample(0, 10.0, 10.0), GazeSample(33, 40.0, 40.0)]
    cfg = PreprocessConfig(mode="singular")
    ft = frame_target(trace, 50, 64, 64, lambda a, b: None, cfg)
    assert np.allclose(ft.heatmap.mass, make_singular(trace[1], 64, 64).mass)
    assert ft.checks == []


def test_batch_assembly():
    clips = generate_suite(SPEC, 4, 2)
    cfg = PreprocessConfig(smoothing=SmoothingConfig(6.0))
    batch = build_batch(clips, [sample_targets(c, cfg) for c in clips])
    assert batch.frames.shape == (4, 3, 64, 64)
    assert batch.targets.shape == (4, 3, 64)
    assert np.allclose(batch.targets.sum(axis=-1), 1.0)
    ref = build_batch(clips, reference_targets(clips, cfg))
    assert ref.targets.shape == batch.targets.shape
