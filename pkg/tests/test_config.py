import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipalab import config as cm


def test_round_trip_defaults():
    cfg = cm.ExperimentConfig()
    assert cm.parse(cm.to_text(cfg)) == cfg


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e4), st.floats(0.0, 50.0),
       st.lists(st.floats(0.1, 1e4), min_size=1, max_size=4))
def test_round_trip_values(seed, beta, lam, grid):
    text = (f"seed = {seed}\nobjective.beta = {beta!r}\nobjective.lam = {lam!r}\n"
            f"sweep.beta_grid = {', '.join(repr(g) for g in grid)}\n")
    cfg = cm.parse(text)
    assert cfg.seed == seed and cfg.objective.beta == beta and cfg.sweep.beta_grid == tuple(grid)
    assert cm.parse(cm.to_text(cfg)) == cfg


def test_comments_and_blank_lines():
    cfg = cm.parse("# header\n\nseed = 7  # trailing\nobjective.kind = sft\n")
    assert cfg.seed == 7 and cfg.objective.kind == "sft"


def test_seed_propagates():
    cfg = cm.parse("seed = 5")
    assert cfg.scene_spec().seed == 5
    assert cfg.pretrain_config().seed == 5
    assert cfg.train_config().seed == 5
    assert cfg.train_config().objective == cfg.objective


def test_every_key_listed():
    text = cm.to_text(cm.ExperimentConfig())
    assert [line.split(" = ")[0] for line in text.splitlines() if line] == cm.known_keys()
    assert "train.seed" not in cm.known_keys() and "train.objective" not in cm.known_keys()


@pytest.mark.parametrize("text,needle", [
    ("nonsense", "line 1"),
    ("seed = 0\nscene.bogus = 1", "line 2"),
    ("train.steps = many", "train.steps"),
    ("objective.kind = magic", "kind"),
    ("objective.beta = -1", "beta"),
])
def test_errors(text, needle):
    with pytest.raises(cm.ConfigError) as exc:
        cm.parse(text)
    assert needle in str(exc.value)


def test_header_and_load(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("train.steps = 12\n")
    cfg = cm.load(p)
    assert cfg.train.steps == 12
    assert cm.to_header(cfg)["train.steps"] == "12"
