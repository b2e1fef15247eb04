import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfalign.cascade import (LossSchedule, Targets, TrainingDiverged, alpha_at, beta_at, fit_stage,
                             load_bundle, overall_loss, position_targets, predict, route,
                             routing_score, save_bundle, schedule_weight, train_stage1, warm_start)
from dfalign.geometry import TRUNCATED, mean_ne
from dfalign.network import StageNetwork
from dfalign.pseudolabel import RoutingTable

import oracles
from conftest import small_train_config


# -- schedule -----------------------------------------------------------------------

def test_schedule_reference_points():
    s = LossSchedule(alpha=0.7, beta=2.0, t1=2000, t2=4000)
    assert alpha_at(1000, s) == 0.7
    assert alpha_at(3000, s) == 0.35
    assert alpha_at(5000, s) == 0.0
    assert beta_at(3000, s) == 1.0


def test_schedule_breakpoints_and_decay_mode():
    assert schedule_weight(2000, 1.0, 2000, 4000) == 0.0      # ramp starts at 0
    assert schedule_weight(1999, 1.0, 2000, 4000) == 1.0
    assert schedule_weight(4000, 1.0, 2000, 4000) == 0.0
    assert schedule_weight(2000, 1.0, 2000, 4000, "decay") == 1.0
    assert schedule_weight(3500, 1.0, 2000, 4000, "decay") == 0.25


def test_schedule_validation():
    with pytest.raises(ValueError):
        LossSchedule(t1=10, t2=10)
    with pytest.raises(ValueError):
        schedule_weight(-1, 1.0, 1, 2)
    with pytest.raises(ValueError):
        schedule_weight(0, 1.0, 1, 2, "cosine")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10), st.integers(1, 3000), st.integers(1, 3000))
def test_schedule_weight_bounded(t, base, t1, gap):
    for mode in ("as-written", "decay"):
        w = schedule_weight(t, base, t1, t1 + gap, mode)
        assert 0.0 <= w <= base


# -- routing ------------------------------------------------------------------------

def test_routing_boundary_is_strict():
    table = RoutingTable(np.array([0.3, 0.5]), epsilon=0.3)
    g = routing_score(np.array([[1.0, 0.0], [0.5, 0.0]]), table)
    assert list(g) == [0.3, 0.15]
    assert list(route(g, 0.3)) == [2, 1]


def test_routing_matches_bruteforce_on_1000_labels():
    rng = np.random.default_rng(0)
    errors = rng.uniform(0, 0.1, size=20)
    errors[[3, 11]] = np.inf
    f = rng.uniform(size=(1000, 20))
    f[rng.uniform(size=f.shape) < 0.5] = 0.0
    f[:, [3, 11]] *= rng.uniform(size=(1000, 1)) < 0.7
    table = RoutingTable(errors, epsilon=0.3)
    got = route(routing_score(f, table), table.epsilon)
    assert np.array_equal(got, oracles.route_bruteforce(f, errors, 0.3))
    assert 0 < np.sum(got == 1) < 1000


def test_empty_cluster_forces_branch_two_only_when_hit():
    table = RoutingTable(np.array([0.1, np.inf]), epsilon=0.3)
    g = routing_score(np.array([[1.0, 0.0], [1.0, 1e-9]]), table)
    assert g[0] == pytest.approx(0.1) and np.isinf(g[1])


def test_routing_dimension_check():
    with pytest.raises(ValueError):
        routing_score(np.zeros((1, 3)), RoutingTable(np.zeros(2)))


# -- losses and targets --------------------------------------------------------------

def test_position_targets_mask_truncated():
    coords = np.array([[[0.1, 0.2], [0.3, 0.4]]])
    target, mask = position_targets(coords, [[0, TRUNCATED]], base=np.full((1, 4), 0.1))
    assert np.allclose(target, [[0.0, 0.1, 0.0, 0.0]])
    assert np.array_equal(mask, [[1, 1, 0, 0]])


def test_overall_loss_composition():
    net = StageNetwork.initialize(small_train_config().architecture(8, 32), np.random.default_rng(0))
    out = net.forward(np.zeros((2, 32, 32)))
    rng = np.random.default_rng(1)
    tg = Targets(rng.normal(size=(2, 16)), np.ones((2, 16)), rng.integers(0, 3, size=(2, 8)),
                 rng.uniform(size=(2, 4)))
    sched = LossSchedule(0.5, 2.0, 10, 20)
    _, parts = overall_loss(out.graph, out, tg, 15, sched)
    assert parts["alpha"] == 0.25 and parts["beta"] == 1.0
    assert parts["L"] == pytest.approx(parts["L_pos"] + 0.25 * parts["L_vis"] + parts["L_labels"], rel=1e-6)
    _, off = overall_loss(out.graph, out, tg, 15, sched, use_visibility=False, use_labels=False)
    assert np.isnan(off["L_vis"]) and np.isnan(off["L_labels"]) and off["L"] == off["L_pos"]


# -- training ------------------------------------------------------------------------

def test_stage1_overfits_one_sample(small_splits):
    train = small_splits[0].subset_of([0])
    cfg = small_train_config(iterations=150, batch_size=1, n_clusters=1, select_best=False)
    res = train_stage1(train, cfg, 0, with_pseudolabels=False, with_visibility=False)
    assert res.log[-1]["L_pos"] < 1e-3 * res.log[0]["L_pos"] + 1e-6


def test_training_is_deterministic(small_splits):
    train, val, _ = small_splits
    cfg = small_train_config(iterations=20)
    a = train_stage1(train, cfg, 11, val)
    b = train_stage1(train, cfg, 11, val)
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)
    assert a.log == b.log or json.dumps(a.log) == json.dumps(b.log)


def test_best_validation_checkpoint_is_kept(small_splits):
    train, val, _ = small_splits
    cfg = small_train_config(iterations=30, val_every=10)
    res = train_stage1(train, cfg, 2, val)
    vals = [r["val_NE"] for r in res.log if not np.isnan(r["val_NE"])]
    p = res.net.predict(val.images)[0].reshape(val.normalized.shape)
    final = mean_ne(p, val.normalized, val.visibility)
    assert final <= min(vals) + 1e-6
    assert sum(r["selected"] for r in res.log) <= 1


def test_divergence_is_reported(small_splits):
    train = small_splits[0]
    cfg = small_train_config(iterations=200, learning_rate=1e6, select_best=False)
    with pytest.raises(TrainingDiverged, match="iteration"):
        train_stage1(train, cfg, 0)


def test_warm_start_begins_with_zero_correction(small_splits):
    train = small_splits[0]
    cfg = small_train_config()
    prev = StageNetwork.initialize(cfg.architecture(8, 32), np.random.default_rng(0))
    net = warm_start(cfg.architecture(8, 32, aux_dim=16), prev, np.random.default_rng(1))
    pos, vis, _ = net.predict(train.images[:4], np.ones((4, 16)))
    assert np.all(pos == 0)
    assert np.allclose(vis, prev.predict(train.images[:4])[1], atol=1e-5)


def test_fit_stage_rejects_empty_set():
    cfg = small_train_config()
    net = StageNetwork.initialize(cfg.architecture(8, 32), np.random.default_rng(0))
    tg = Targets(np.zeros((0, 16)), np.zeros((0, 16)), np.zeros((0, 8), int), None)
    with pytest.raises(ValueError):
        fit_stage(net, np.zeros((0, 32, 32)), None, tg, cfg, 0, "x")


# -- the full cascade ------------------------------------------------------------------

def test_stages_compose_additively(small_cascade, small_splits):
    model = small_cascade.model
    test = small_splits[2]
    p = predict(model, test.images)
    est1 = model.stage1.predict(test.images)[0]
    c2 = model.stage2.predict(test.images, est1)[0]
    assert np.allclose(p.stage2.reshape(len(test), -1), est1 + c2)
    for b in (1, 2):
        idx = np.flatnonzero(p.branches == b)
        if len(idx):
            aux = np.concatenate([p.stage2.reshape(len(test), -1), p.pseudolabels2], axis=1)[idx]
            c3 = model.stage3[b - 1].predict(test.images[idx], aux)[0]
            assert np.allclose(p.stage3[idx].reshape(len(idx), -1), p.stage2[idx].reshape(len(idx), -1) + c3)
    assert np.array_equal(p.branches, route(p.scores, model.routing.epsilon))


def test_explicit_routes_override(small_cascade, small_splits):
    test = small_splits[2]
    p = predict(small_cascade.model, test.images, routes=np.full(len(test), 2))
    assert np.all(p.branches == 2)


def test_bundle_round_trip(tmp_path, small_cascade, small_splits):
    train, _, test = small_splits
    save_bundle(tmp_path, small_cascade, train.sample_ids, {"seed": 3})
    model = load_bundle(tmp_path)
    a, b = predict(small_cascade.model, test.images), predict(model, test.images)
    assert np.array_equal(a.stage3, b.stage3)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_networks"] == 4 and manifest["seed"] == 3
    for name in ("stage1", "stage2", "stage3_branch1", "stage3_branch2"):
        header = (tmp_path / f"train_log_{name}.csv").read_text().splitlines()[0]
        assert header == "iteration,L_pos,L_vis,L_labels,alpha,beta,val_NE,selected"


def test_untrained_model_cannot_predict():
    from dfalign.cascade import CascadeModel
    with pytest.raises(RuntimeError):
        predict(CascadeModel(), np.zeros((1, 32, 32)))
