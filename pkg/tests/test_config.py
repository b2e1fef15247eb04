import pytest
from hypothesis import given, settings, strategies as st

from dfalign.config import ConfigError, RunConfig


def test_defaults_are_the_standard_benchmark():
    cfg = RunConfig().validate()
    assert (cfg.n_train, cfg.n_val, cfg.n_test, cfg.image_size, cfg.n_landmarks) == (2000, 400, 400, 64, 8)
    assert (cfg.n_clusters, cfg.temperature, cfg.epsilon) == (20, 20.0, 0.3)
    assert cfg.pdl_threshold == pytest.approx(15 * 64 / 224)


def test_text_round_trip():
    cfg = RunConfig(seed=2 ** 64 - 1, channels=(4, 8, 16), image_size=64, learning_rate=0.1 + 0.2,
                    warm_start=False)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# comment\n\nseed = 5   # trailing\n")
    assert cfg.seed == 5


@pytest.mark.parametrize("text,msg", [
    ("sed = 1\n", "unknown key"),
    ("seed = 1\nseed = 2\n", "duplicate key"),
    ("seed\n", "expected 'key = value'"),
    ("iterations = many\n", "bad value"),
    ("warm_start = maybe\n", "bad value"),
    ("t1 = 5000\n", "t1 < t2"),
    ("seed = -1\n", "unsigned"),
])
def test_errors_name_the_line(text, msg):
    with pytest.raises(ConfigError, match=msg) as info:
        RunConfig.from_text(text, "run.cfg")
    assert "run.cfg" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "absent.cfg")


def test_hash_ignores_locations_only():
    a = RunConfig()
    assert a.hash() == RunConfig(data_dir="elsewhere", bundle_dir="b2").hash()
    assert a.hash() != RunConfig(seed=1).hash()


def test_training_view_copies_fields():
    tc = RunConfig(iterations=77, channels=(2, 4)).training()
    assert tc.iterations == 77 and tc.channels == (2, 4) and tc.label_scale == 224.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.floats(1e-6, 10, allow_nan=False), st.floats(0, 5))
def test_round_trip_property(seed, lr, alpha):
    cfg = RunConfig(seed=seed, learning_rate=lr, alpha=alpha)
    assert RunConfig.from_text(cfg.to_text()) == cfg
