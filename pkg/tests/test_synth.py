import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfalign.geometry import INVISIBLE, SUBSETS, TRUNCATED, VISIBLE
from dfalign.synth import (GenerationConfig, GenerationError, RenderStyle, generate_dataset,
                           generate_sample, load_dataset, render_image, save_dataset, split)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GenerationConfig(n_samples=300), seed=7)


def test_generation_is_deterministic(dataset):
    again = generate_dataset(GenerationConfig(n_samples=300), seed=7)
    assert dataset.equals(again)
    other = generate_dataset(GenerationConfig(n_samples=300), seed=8)
    assert not np.array_equal(dataset.images, other.images)


def test_samples_do_not_depend_on_dataset_size(dataset):
    small = generate_dataset(GenerationConfig(n_samples=20), seed=7)
    assert np.array_equal(small.images, dataset.images[:20])


def test_visibility_agrees_with_frame(dataset):
    px = dataset.coords
    inside = np.all((px >= 0) & (px < 64), axis=-1)
    assert np.all((dataset.visibility == TRUNCATED) == ~inside)


def test_every_subset_is_generated_in_roughly_the_configured_mix(dataset):
    subs = np.array(dataset.subsets)
    share = {s: np.mean(subs == s) for s in SUBSETS}
    expected = GenerationConfig().subset_mix
    for s in SUBSETS:
        assert abs(share[s] - expected[s]) < 0.08, (s, share[s])


def test_zoom_subsets_have_the_promised_truncation_counts(dataset):
    n_trunc = np.sum(dataset.visibility == TRUNCATED, axis=1)
    subs = np.array(dataset.subsets)
    assert np.all((n_trunc[subs == "medium-zoom"] >= 2) & (n_trunc[subs == "medium-zoom"] <= 3))
    assert np.all(n_trunc[subs == "large-zoom"] >= 4)
    assert np.all(n_trunc[np.isin(subs, SUBSETS[:3])] <= 1)


def test_images_are_8bit_levels(dataset):
    assert dataset.images.min() >= 0 and dataset.images.max() <= 1
    assert np.allclose(dataset.images * 255, np.round(dataset.images * 255))


def test_invisible_fraction(dataset):
    inside = dataset.visibility != TRUNCATED
    frac = np.mean(dataset.visibility[inside] == INVISIBLE)
    assert 0.02 < frac < 0.09


def test_save_load_round_trip(tmp_path, dataset):
    part = dataset.subset_of(np.arange(25))
    save_dataset(part, tmp_path)
    back = load_dataset(tmp_path)
    assert back.equals(part)


def test_load_reports_bad_rows(tmp_path, dataset):
    save_dataset(dataset.subset_of([0, 1]), tmp_path)
    lines = (tmp_path / "annotations.csv").read_text().splitlines()
    fields = lines[2].split(",")
    fields[7] = "7"                       # visibility token of landmark 0
    lines[2] = ",".join(fields)
    (tmp_path / "annotations.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r"annotations.csv:3"):
        load_dataset(tmp_path)


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


def test_split_is_disjoint_and_exhaustive(dataset):
    parts = split(dataset, [0.5, 0.3, 0.2], seed=1)
    ids = [i for p in parts for i in p.sample_ids]
    assert sorted(ids) == sorted(dataset.sample_ids)
    assert [len(p) for p in parts] == [150, 90, 60]
    with pytest.raises(ValueError):
        split(dataset, [0.5, 0.6], seed=1)


@pytest.mark.parametrize("kw", [
    dict(n_landmarks=6), dict(image_size=16), dict(large_zoom_truncated=(4, 9)),
    dict(medium_zoom_truncated=(1, 3)), dict(subset_mix={"normal-pose": 0.5}),
    dict(subset_mix={"bogus": 1.0}),
])
def test_generation_config_validation(kw):
    with pytest.raises(GenerationError):
        GenerationConfig(**kw).validate()


def test_render_is_pure_without_noise():
    coords = np.array([[20, 10], [40, 10], [8, 25], [56, 25], [22, 38], [42, 38], [20, 55], [44, 55]], float)
    vis = np.array([VISIBLE] * 7 + [INVISIBLE])
    a = render_image(coords, vis, style=RenderStyle())
    b = render_image(coords, vis, style=RenderStyle())
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_image(coords, vis, style=RenderStyle(), pose="back"))
    with pytest.raises(ValueError):
        render_image(coords, vis, template="hat")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(0, 10_000))
def test_any_sample_is_consistent(seed, index):
    s = generate_sample(GenerationConfig(), seed, index)
    assert s.image.shape == (64, 64)
    inside = np.all((s.landmarks.coords >= 0) & (s.landmarks.coords < 64), axis=1)
    assert np.array_equal(s.landmarks.visibility == TRUNCATED, ~inside)
    assert s.subset in SUBSETS
