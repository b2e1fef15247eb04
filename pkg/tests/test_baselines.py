import csv

import numpy as np
import pytest

from dfalign.baselines import (REPORT_HEADER, cascade_entry, compare, extract_patches, network_entry,
                               padded_size, patch_size, train_direct, train_patch_cascade,
                               train_two_branch, write_pdl_svg, write_report_csv)
from dfalign.cascade import predict
from dfalign.geometry import LANDMARK_NAMES, SUBSETS

from conftest import small_train_config


def test_patch_size_scales_from_reference():
    assert patch_size(224) == 120
    assert patch_size(64) == 34
    assert padded_size(34, 2) == 36


def test_extract_patches_with_borders():
    img = np.arange(64, dtype=float).reshape(1, 8, 8)
    crops, empty = extract_patches(img, np.array([[4.0, 4.0]]), 4)
    assert np.array_equal(crops[0], img[0, 2:6, 2:6]) and not empty[0]
    crops, empty = extract_patches(img, np.array([[0.0, 0.0]]), 4, out_size=6)
    assert crops.shape == (1, 6, 6)
    assert np.array_equal(crops[0, 3:5, 3:5], img[0, :2, :2])
    assert crops[0, 1:3, 1:3].sum() == 0
    _, empty = extract_patches(img, np.array([[-20.0, 3.0]]), 4)
    assert empty[0]


@pytest.fixture(scope="module")
def patch_model(small_splits):
    train, val, _ = small_splits
    cfg = small_train_config(iterations=10)
    direct = train_direct(train, cfg, 0, val)
    return direct, train_patch_cascade(train, direct.net, cfg, 0, val)


def test_network_counts_four_versus_seventeen(patch_model, small_cascade):
    _, patch = patch_model
    assert patch.n_networks == 17
    assert small_cascade.model.n_networks == 4
    assert patch.side == padded_size(patch_size(32), 2)


def test_patch_cascade_first_stage_is_the_direct_net(patch_model, small_splits):
    direct, patch = patch_model
    test = small_splits[2]
    stages = patch.predict_stages(test.images)
    assert len(stages) == 3
    assert np.array_equal(stages[0], direct.net.predict(test.images)[0].reshape(stages[0].shape))


def test_two_branch_averages_both_branches(small_cascade, small_splits):
    train, val, test = small_splits
    two, res = train_two_branch(train, small_cascade.model, small_train_config(), 3, val)
    # one explicit partition leaves branch 2 empty, so both branches see every sample
    assert res.fallback and np.all(res.routes == 1)
    p1 = predict(small_cascade.model, test.images, routes=np.ones(len(test)))
    p2 = predict(small_cascade.model, test.images, routes=np.full(len(test), 2))
    # with the cascade's own branches swapped in, the average is the midpoint
    from dfalign.baselines import TwoBranchModel
    mid = TwoBranchModel(*[getattr(small_cascade.model, k) for k in ("stage1", "stage2", "stage3")])
    assert np.allclose(mid.predict_landmarks(test.images), (p1.stage3 + p2.stage3) / 2, atol=1e-6)
    assert two.predict_landmarks(test.images).shape == p1.stage3.shape


def test_compare_report(tmp_path, patch_model, small_cascade, small_splits):
    direct, patch = patch_model
    test = small_splits[2]
    entries = [cascade_entry("DFA", small_cascade.model), network_entry("direct", direct.net)]
    report = compare(entries, test, 4.3)
    assert len(report.rows) == (len(LANDMARK_NAMES) + len(SUBSETS)) * 2
    assert report.network_counts == {"DFA": 4, "direct": 1}
    write_report_csv(tmp_path / "r.csv", report)
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_HEADER and len(rows) == 1 + len(report.rows)
    write_pdl_svg(tmp_path / "a.svg", report.thresholds, report.curves)
    write_pdl_svg(tmp_path / "b.svg", report.thresholds, report.curves)
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
