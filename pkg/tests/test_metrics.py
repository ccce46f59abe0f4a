import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazereg import pgm
from gazereg.errors import DimensionError, DomainError, GeometryError
from gazereg.gaze import Heatmap, PatchDistribution
from gazereg.metrics import (
    ABLATION_HEADER,
    AblationResult,
    Variant,
    ablation_csv,
    evaluate,
    overlap_report,
    parse_variants,
    render_heatmap_pgm,
    run_ablation,
    summarize,
    topk_overlap,
)
from gazereg.model import Batch, ModelConfig, ModelParams
from gazereg.pipeline import PreprocessConfig
from gazereg.synth import SceneSpec


def sort_oracle(p, k):
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    return set(order[:k])


def test_overlap_examples():
    a = [0.4, 0.3, 0.2, 0.1]
    assert topk_overlap(a, a, 2) == 1.0
    assert topk_overlap(a, [0.1, 0.2, 0.3, 0.4], 2) == 0.0
    assert topk_overlap(PatchDistribution(np.array(a)), [0.3, 0.4, 0.2, 0.1], 2) == 1.0


def test_ties_go_to_the_lower_index():
    flat = np.full(6, 1 / 6)
    assert topk_overlap(flat, [0.3, 0.3, 0.1, 0.1, 0.1, 0.1], 2) == 1.0
    assert topk_overlap(flat, [0.0, 0.0, 0.1, 0.1, 0.4, 0.4], 2) == 0.0


def test_k_out_of_range_and_shape_mismatch():
    with pytest.raises(DomainError):
        topk_overlap([0.5, 0.5], [0.5, 0.5], 0)
    with pytest.raises(DomainError):
        topk_overlap([0.5, 0.5], [0.5, 0.5], 3)
    with pytest.raises(DimensionError):
        topk_overlap([0.5, 0.5], [1.0], 1)


vectors = st.lists(st.integers(0, 5), min_size=8, max_size=8).map(lambda v: np.array(v, dtype=float))


@given(vectors, vectors, st.integers(1, 8))
@settings(max_examples=200, deadline=None)
def test_overlap_matches_sort_oracle_and_is_symmetric(a, b, k):
    expected = len(sort_oracle(a, k) & sort_oracle(b, k)) / k
    assert topk_overlap(a, b, k) == expected
    assert topk_overlap(b, a, k) == expected


@given(vectors, vectors, st.integers(1, 8))
@settings(max_examples=100, deadline=None)
def test_overlap_is_invariant_to_monotone_transforms(a, b, k):
    assert topk_overlap(np.exp(3 * a) + 7, b ** 3, k) == topk_overlap(a, b, k)


def test_overlap_report_averages_per_frame():
    att = np.array([[[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]]])
    tgt = np.array([[[0.6, 0.3, 0.1], [0.6, 0.3, 0.1]]])
    rep = overlap_report(att, tgt, 1)
    assert rep.per_frame.tolist() == [[1.0, 0.0]]
    assert rep.mean == 0.5 and rep.n_frames == 2 and rep.k == 1


# -- evaluate ---------------------------------------------------------------------------


def toy_data(seed, B=60, n_classes=3):
    rng = np.random.default_rng(seed)
    return Batch(rng.random((B, 2, 8, 8)), rng.dirichlet(np.ones(4), size=(B, 2)), rng.integers(n_classes, size=B))


def toy_model(seed, n_classes=3):
    cfg = ModelConfig(d_model=6, d_k=4, patch_px=4, n_classes=n_classes, seed=seed)
    return ModelParams.init(cfg), cfg


def test_oracle_attention_scores_full_overlap_and_zero_kl():
    params, cfg = toy_model(0)
    data = toy_data(0)
    acc, rep, kl = evaluate(params, cfg, data, k=2, attention=data.targets)
    assert rep.mean == 1.0
    assert kl == pytest.approx(0.0, abs=1e-6)
    assert 0 <= acc <= 1


def test_evaluation_is_deterministic():
    params, cfg = toy_model(1)
    data = toy_data(1)
    a = evaluate(params, cfg, data, k=2)
    b = evaluate(params, cfg, data, k=2)
    assert a[0] == b[0] and a[2] == b[2]
    assert np.array_equal(a[1].per_frame, b[1].per_frame)


def test_untrained_model_is_near_chance():
    # a fixed random model predicts a roughly fixed class; labels are balanced, so
    # accuracy stays within a 4-sigma binomial band around 1/n on fresh labels
    n, c = 600, 4
    hits = []
    for seed in range(5):
        params, cfg = toy_model(seed, n_classes=c)
        data = toy_data(100 + seed, B=n, n_classes=c)
        hits.append(evaluate(params, cfg, data, k=1)[0])
    p = 1 / c
    band = 4 * math.sqrt(p * (1 - p) / (5 * n))
    assert abs(np.mean(hits) - p) < band


def test_empty_dataset_rejected():
    params, cfg = toy_model(0)
    with pytest.raises(DomainError):
        evaluate(params, cfg, toy_data(0).subset(np.array([], dtype=int)))


# -- ablation --------------------------------------------------------------------------------


def test_parse_variants():
    assert [v.lam for v in parse_variants("lambda=0,100,1000")] == [0.0, 100.0, 1000.0]
    assert [v.label for v in parse_variants("λ=0,10")] == ["lambda=0", "lambda=10"]
    assert [v.mode for v in parse_variants("mode=singular,aggregated")] == ["singular", "aggregated"]
    assert [v.points for v in parse_variants("points=6,12")] == [6, 12]
    for bad in ("lambda", "colour=1", "mode=fuzzy", "points=six", "lambda="):
        with pytest.raises(DomainError):
            parse_variants(bad)


def test_points_variant_widens_the_window_at_constant_density():
    _, prep = Variant("points=12", points=12).apply(ModelConfig(), PreprocessConfig())
    assert (prep.aggregation.window_ms, prep.aggregation.max_points) == (400, 12)
    _, prep = Variant("points=6", points=6).apply(ModelConfig(), PreprocessConfig())
    assert (prep.aggregation.window_ms, prep.aggregation.max_points) == (200, 6)


TINY = dict(n_train=6, n_test=4)
TINY_MODEL = ModelConfig(epochs=2, n_classes=6)


def test_ablation_cross_product_and_reproducibility(tmp_path):
    variants = parse_variants("lambda=0,10,100")
    res = run_ablation(SceneSpec(), variants, range(3), model_cfg=TINY_MODEL, out_dir=tmp_path, **TINY)
    assert [(r.variant, r.seed) for r in res] == [(v.label, s) for s in range(3) for v in variants]
    again = run_ablation(SceneSpec(), variants, range(3), model_cfg=TINY_MODEL, **TINY)
    assert [r.row() for r in res] == [r.row() for r in again]
    rows = list(csv.reader((tmp_path / "ablation.csv").open()))
    assert tuple(rows[0]) == ABLATION_HEADER and len(rows) == 10
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert len(doc["results"]) == 9
    assert len(list((tmp_path / "logs").iterdir())) == 9


def test_single_lambda_zero_cell_is_plain_training():
    from gazereg.metrics import suite_seeds
    from gazereg.model import train
    from gazereg.pipeline import build_batch, sample_targets
    from gazereg.synth import generate_suite

    res = run_ablation(SceneSpec(), parse_variants("lambda=0"), [0], model_cfg=TINY_MODEL,
                       min_variants=1, min_seeds=1, **TINY)
    clips = generate_suite(SceneSpec(), 6, suite_seeds(0)[0])
    data = build_batch(clips, [sample_targets(c, PreprocessConfig()) for c in clips])
    _, log = train(data, replace(TINY_MODEL, lam=0.0, seed=0))
    assert res[0].log == log


def test_ablation_needs_enough_cells():
    with pytest.raises(DomainError):
        run_ablation(SceneSpec(), parse_variants("lambda=0"), range(3))
    with pytest.raises(DomainError):
        run_ablation(SceneSpec(), parse_variants("lambda=0,1"), range(2))


def test_divergent_cells_are_recorded_not_fatal(tmp_path):
    cfg = replace(TINY_MODEL, epochs=30)
    res = run_ablation(SceneSpec(), parse_variants("lambda=0,1e9"), [0], model_cfg=cfg,
                       min_seeds=1, out_dir=tmp_path, **TINY)
    assert res[0].status == "ok"
    assert res[1].status == "diverged" and math.isnan(res[1].accuracy)
    rows = list(csv.reader((tmp_path / "ablation.csv").open()))
    assert rows[2][2] == "nan"
    assert json.loads((tmp_path / "ablation.json").read_text())["results"][1]["accuracy"] is None


def test_summarize_averages_over_seeds():
    res = [AblationResult("a", 0, 0.5, 1.0, 0.2), AblationResult("a", 1, 0.7, 3.0, 0.4)]
    acc, ov, kl = summarize(res)["a"]
    assert (acc, ov, kl) == pytest.approx((0.6, 0.3, 2.0))
    assert ablation_csv(res).splitlines()[1] == "a,0,0.5,0.2,1.0"


# -- rendering ---------------------------------------------------------------------------------


def decode(data):
    return pgm.from_bytes(data, as_float=False).astype(int)


def test_zero_overlay_halves_the_frame():
    frame = np.random.default_rng(0).random((16, 16))
    out = decode(render_heatmap_pgm(frame, np.zeros((16, 16))))
    assert np.array_equal(out, np.clip(np.rint(0.5 * frame * 255), 0, 255))


def test_uniform_overlay_lifts_evenly():
    frame = np.random.default_rng(1).random((16, 16))
    base = decode(render_heatmap_pgm(frame, np.zeros(4)))
    lifted = decode(render_heatmap_pgm(frame, np.full(4, 0.25)))
    assert np.all(np.abs(lifted - base - 127.5) <= 1)


def test_single_hot_patch_is_one_bright_square():
    frame = np.zeros((32, 32))
    overlay = np.zeros(16)
    overlay[6] = 1.0  # row 1, column 2 of a 4x4 grid of 8 px patches
    out = decode(render_heatmap_pgm(frame, overlay))
    expected = np.zeros((32, 32), dtype=int)
    expected[8:16, 16:24] = 128
    assert np.array_equal(out, expected)


def test_heatmap_overlay_and_grid_overlay_agree():
    frame = np.full((16, 16), 0.2)
    grid = np.arange(4.0).reshape(2, 2)
    pixels = np.repeat(np.repeat(grid, 8, axis=0), 8, axis=1)
    assert render_heatmap_pgm(frame, grid) == render_heatmap_pgm(frame, Heatmap(pixels / pixels.sum()))


def test_render_dimension_mismatch():
    with pytest.raises(GeometryError):
        render_heatmap_pgm(np.zeros((16, 16)), np.zeros(5))
    with pytest.raises(GeometryError):
        render_heatmap_pgm(np.zeros((16, 16)), np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        render_heatmap_pgm(np.zeros((16, 16)), np.zeros((2, 4)))
