import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perchom.config import EXPERIMENTS, ExperimentConfig, load_config, parse_config
from perchom.errors import ConfigError


def test_minimal_defaults():
    cfg = parse_config("experiment = theta\n")
    assert cfg == ExperimentConfig(experiment="theta")


def test_full_parse():
    text = """
    # a comment line
    experiment = lclt   # trailing comment
    d = 2
    p = 0.6
    lambda = 0.5
    law = uniform
    box = 255
    seeds = 0..3, 7
    times = 500, 1000, 2e3
    levels = 2, 3
    force = false
    y = 1, -2
    """
    cfg = parse_config(text)
    assert cfg.experiment == "lclt" and cfg.p == 0.6 and cfg.lam == 0.5
    assert cfg.seeds == [0, 1, 2, 3, 7]
    assert cfg.times == [500.0, 1000.0, 2000.0]
    assert cfg.y == [1, -2]
    assert cfg.law == "uniform-on-[lambda,1]"


@pytest.mark.parametrize("text, line, fragment", [
    ("experiment = theta\np = 0.7\np = 0.8\n", 3, "already set"),
    ("experiment = theta\ncolour = red\n", 2, "unknown key"),
    ("experiment = theta\nbox\n", 2, "key = value"),
    ("experiment = theta\nbox = nine\n", 2, "bad value"),
    ("experiment = theta\nbox =\n", 2, "empty value"),
    ("experiment = theta\nseeds = 3..1\n", 2, "empty range"),
    ("experiment = theta\nseeds = 1,,2\n", 2, "empty list"),
    ("experiment = theta\nforce = maybe\n", 2, "boolean"),
    ("experiment = nope\n", 1, "unknown experiment"),
    ("experiment = theta\nd = 4\n", 2, "d must"),
    ("experiment = theta\np = 1.5\n", 2, "p must"),
    ("experiment = theta\np = 0.3\n", 2, "force"),
    ("experiment = theta\nlambda = 0\n", 2, "lambda"),
    ("experiment = theta\nlaw = cauchy\n", 2, "law"),
    ("experiment = theta\nbox = 2\n", 2, "box"),
    ("experiment = theta\ntimes = 4, 2\n", 2, "increasing"),
    ("experiment = theta\ndelta = 0.5\n", 2, "delta"),
    ("experiment = theta\nkappa = 1\n", 2, "kappa"),
    ("experiment = theta\ny = 1\n", 2, "coordinates"),
    ("experiment = theta\nwalk_type = levy\n", 2, "walk_type"),
    ("experiment = theta\nquadrature = simpson\n", 2, "quadrature"),
    ("experiment = theta\nannulus = 40, 20\n", 2, "annulus"),
    ("experiment = cell\nlevels = 1, 2\n", 2, "levels >= 2"),
    ("experiment = theta\nq = 0.5\n", 2, "q must"),
])
def test_errors_with_lines(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert f"line {line}:" in str(exc.value)
    assert fragment in str(exc.value)


def test_missing_experiment():
    with pytest.raises(ConfigError) as exc:
        parse_config("p = 0.7\n")
    assert exc.value.line is None


def test_force_allows_subcritical():
    assert parse_config("experiment = theta\np = 0.3\nforce = true\n").p == 0.3


def test_three_d_threshold():
    # the d=3 guard sits well below the d=2 one
    assert parse_config("experiment = theta\nd = 3\np = 0.3\n").d == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


_floats = st.floats(0.01, 100, allow_nan=False)


@settings(max_examples=100)
@given(
    st.sampled_from(EXPERIMENTS),
    st.floats(0.6, 1.0),
    st.lists(st.integers(0, 1000), min_size=1, max_size=4),
    st.lists(_floats, min_size=1, max_size=5, unique=True).map(sorted),
    st.one_of(st.none(), st.floats(0.05, 3)),
    st.booleans(),
    st.integers(3, 500),
)
def test_to_text_round_trip(exp, p, seeds, times, sigma2, plots, box):
    cfg = ExperimentConfig(experiment=exp, p=p, seeds=seeds, times=times, sigma2=sigma2, plots=plots, box=box)
    assert parse_config(cfg.to_text()) == cfg
