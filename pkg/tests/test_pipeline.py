import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperscat.data_io import N_BANDS, WAVELENGTHS, MsiImage, SpectralCube, gen_synthetic
from hyperscat.pipeline import (
    EVEN_BANDS,
    ODD_BANDS,
    SHARED_BAND,
    ModelBundle,
    NormStats,
    PipelineConfig,
    StageError,
    cubic_baseline,
    derive_seed,
    evaluate,
    fit_coeff_stats,
    infer,
    label_to_band,
    normalize,
    otsu_mask,
    parity_merge,
    parity_split,
    sam,
    train_all,
)

TINY = dict(matching_epochs=2, inverse_epochs=2, misr_epochs=30, matching_hidden=8,
            misr_hidden=8, inverse_widths=(4, 4), batch_size=2)


def test_label_scheme():
    assert len(EVEN_BANDS) == len(ODD_BANDS) == 31
    assert set(EVEN_BANDS) | set(ODD_BANDS) == set(range(N_BANDS))
    assert set(EVEN_BANDS) & set(ODD_BANDS) == {SHARED_BAND}
    assert WAVELENGTHS[SHARED_BAND] == 700.0
    assert EVEN_BANDS[:3] == (0, 2, 4) and EVEN_BANDS[-1] == 59
    assert ODD_BANDS[:3] == (1, 3, 5) and ODD_BANDS[-1] == 60
    assert label_to_band(30) == label_to_band(31) == 30
    with pytest.raises(ValueError):
        label_to_band(62)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2, N_BANDS), elements=st.floats(0, 1)))
def test_parity_round_trip_property(values):
    merged = parity_merge(*parity_split(SpectralCube(values)))
    np.testing.assert_array_equal(merged.values, values)


def test_split_picks_band_planes():
    stack = np.arange(N_BANDS, dtype=float)[:, None, None] * np.ones((1, 2, 2))
    even, odd = parity_split(stack)
    assert np.all(even[0] == 0) and np.all(odd[0] == 1)
    assert even[15, 0, 0] == odd[15, 0, 0] == SHARED_BAND


def test_shared_band_is_averaged():
    even, odd = np.full((31, 2, 2), 0.2), np.full((31, 2, 2), 0.4)
    merged = parity_merge(even, odd).values
    np.testing.assert_allclose(merged[:, :, SHARED_BAND], 0.3, atol=1e-15)
    assert merged[0, 0, 0] == 0.2 and merged[0, 0, 1] == 0.4


def test_parity_shape_errors():
    with pytest.raises(ValueError):
        parity_split(np.zeros((60, 2, 2)))
    with pytest.raises(ValueError):
        parity_merge(np.zeros((31, 2, 2)), np.zeros((30, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3, 3), elements=st.floats(-5, 5)))
def test_normalize_round_trip(maps):
    stats = fit_coeff_stats(NormStats(), "msi", maps[None])
    z = normalize(maps, stats, "forward", "msi")
    np.testing.assert_allclose(normalize(z, stats, "inverse", "msi"), maps, atol=1e-9)
    x = maps / 10
    np.testing.assert_allclose(normalize(normalize(x, None), None, "inverse"), x, atol=1e-15)


def test_standardized_training_coefficients():
    maps = np.random.default_rng(3).gamma(2.0, 1.5, (5, 7, 4, 4))
    stats = fit_coeff_stats(NormStats(), "even", maps)
    z = np.stack([normalize(m, stats, kind="even") for m in maps])
    assert np.abs(z.mean(axis=(0, 2, 3))).max() < 1e-10
    assert np.abs(z.std(axis=(0, 2, 3)) - 1).max() < 1e-6


def test_normalize_needs_fitted_stats():
    with pytest.raises(ValueError):
        normalize(np.zeros((2, 2, 2)), NormStats(), kind="even")
    assert normalize(np.array([0.0, 0.5, 1.0]), None).tolist() == [-1.0, 0.0, 1.0]


def test_constant_path_uses_std_floor():
    stats = fit_coeff_stats(NormStats(), "odd", np.ones((2, 3, 2, 2)))
    assert np.all(stats.coeff_std["odd"] == 1e-8)
    assert np.all(np.isfinite(normalize(np.ones((3, 2, 2)), stats, kind="odd")))


def test_sam_values():
    assert sam([1, 2, 3], [1, 2, 3]) == pytest.approx(0, abs=1e-7)
    assert abs(sam([1, 0], [0, 1]) - np.pi / 2) <= 1e-12
    assert abs(sam([1, 1], [1, 0]) - np.pi / 4) <= 1e-12
    with pytest.raises(ValueError):
        sam([0, 0], [1, 0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.01, 10)), st.floats(0.1, 100))
def test_sam_scale_invariance(u, k):
    assert sam(u, k * u) == pytest.approx(0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_sam_symmetric_and_bounded(u, v):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    a = sam(u, v)
    assert 0 <= a <= np.pi and a == sam(v, u)


def test_evaluate_report(tmp_path):
    truth = SpectralCube(np.ones((2, 2, 3)), [1.0, 2.0, 3.0])
    pred_a = SpectralCube(np.ones((2, 2, 3)), [1.0, 2.0, 3.0])
    pred_b = truth.values.copy()
    pred_b[:, :, 0] = 0.0
    masks = [np.ones((2, 2), bool), np.ones((2, 2), bool), np.zeros((2, 2), bool)]
    report = evaluate([pred_a, pred_b, pred_a], [truth] * 3, masks, ["a", "b", "c"])
    assert report.skipped_images == ["c"]
    expected_b = np.arccos(2 / np.sqrt(6))
    assert report.mean == pytest.approx(expected_b / 2)
    assert report.std == pytest.approx(expected_b / 2)  # population std of {0, x}
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "image,sam,skin_pixels,skipped_zero_norm"
    assert lines[-1].startswith("mean ± std,")


def test_evaluate_skips_zero_norm_pixels():
    truth = np.ones((1, 2, 3))
    pred = truth.copy()
    pred[0, 0] = 0.0
    report = evaluate([pred], [truth], [np.ones((1, 2), bool)])
    assert report.images[0].skipped_zero_norm == 1 and report.mean == pytest.approx(0, abs=1e-7)


def test_pixel_count_excludes_zero_norm():
    truth = np.random.default_rng(4).random((4, 4, 5)) + 0.1
    pred = truth.copy()
    pred[0, :2] = 0.0
    mask = np.zeros((4, 4), bool)
    mask[:2] = True
    score = evaluate([pred], [truth], [mask]).images[0]
    assert score.skin_pixels == mask.sum() - 2 and score.skipped_zero_norm == 2


def test_cubic_baseline_reproduces_msi_levels():
    msi = MsiImage(np.tile([0.3, 0.3, 0.3, 0.3], (4, 4, 1)))
    np.testing.assert_allclose(cubic_baseline(msi).values, 0.3, atol=1e-12)
    msi = MsiImage(np.random.default_rng(0).random((4, 4, 4)))
    out = cubic_baseline(msi).values
    assert out.shape == (4, 4, N_BANDS) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out[:, :, 22], np.clip(msi.values[:, :, 0], 0, 1), atol=1e-12)  # 620 nm


def test_otsu_mask_splits_bright_nir():
    values = np.zeros((8, 8, 4))
    values[2:6, 2:6, 3] = 0.8
    mask = otsu_mask(MsiImage(values))
    assert mask.sum() == 16 and mask[3, 3]
    assert not otsu_mask(MsiImage(np.zeros((4, 4, 4)))).any()


def test_config_rejects_other_scales():
    with pytest.raises(ValueError):
        PipelineConfig(J=3)


def test_derived_seeds_are_distinct_and_stable():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3


@pytest.fixture(scope="module")
def tiny_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    scenes = gen_synthetic(4, 16, 0)
    return train_all(scenes, PipelineConfig(**TINY), out_dir=out), out, scenes


def test_train_all_writes_everything(tiny_bundle):
    bundle, out, _ = tiny_bundle
    names = {p.name for p in out.iterdir()}
    for f in ["matching_even.ckpt", "matching_odd.ckpt", "inverse_even.ckpt", "inverse_odd.ckpt",
              "misr.ckpt", "pipeline.json", "loss_misr.csv", "loss_inverse_odd.csv"]:
        assert f in names
    assert len(bundle.logs["matching_even"]) == 2 and len(bundle.logs["misr"]) == 30


def test_inference_after_reload_is_identical(tiny_bundle):
    bundle, out, scenes = tiny_bundle
    loaded = ModelBundle.load(out)
    s = scenes[0]
    a, b = infer(s.msi, bundle, s.mask), infer(s.msi, loaded, s.mask)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == (16, 16, N_BANDS) and 0 <= a.values.min() and a.values.max() <= 1


def test_misr_only_touches_masked_pixels(tiny_bundle):
    bundle, _, scenes = tiny_bundle
    s = scenes[1]
    plain, refined = infer(s.msi, bundle, use_misr=False), infer(s.msi, bundle, s.mask)
    np.testing.assert_array_equal(plain.values[~s.mask], refined.values[~s.mask])
    assert not np.array_equal(plain.values[s.mask], refined.values[s.mask])


def test_infer_errors(tiny_bundle):
    bundle, _, scenes = tiny_bundle
    with pytest.raises(ValueError):
        infer(MsiImage(np.zeros((18, 16, 4))), bundle)
    with pytest.raises(ValueError):
        infer(scenes[0].msi, bundle, np.ones((8, 8), bool))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_stage_errors_are_wrapped():
    scenes = gen_synthetic(2, 16, 0)
    with pytest.raises(StageError) as info:
        train_all(scenes, PipelineConfig(**{**TINY, "lr": float("inf")}))
    assert info.value.stage == "matching"


def test_threaded_training_matches_serial(tiny_bundle, tmp_path):
    _, serial_dir, scenes = tiny_bundle
    train_all(scenes, PipelineConfig(**TINY, threads=2), out_dir=tmp_path)
    for f in serial_dir.glob("*.ckpt"):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()
