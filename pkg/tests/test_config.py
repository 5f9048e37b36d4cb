import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synmoe import config as cfgmod
from synmoe.config import ConfigError, RunConfig, emit, parse

MINIMAL = """
# smallest useful run
[run]
seed = 3
out = runs/min

[model]
E = 4
k = 2
L = 2
h = 8
d_ff = 8
V = 16

[synth]
n_clusters = 4
n_seqs = 64

[train]
steps = 50
eval_every = 10   # trailing comment
checkpoint_every = 25
eval_seqs = 8

[loss]
sp = 0.01
"""


def test_parse_minimal():
    cfg = parse(MINIMAL)
    assert cfg.seed == 3 and cfg.out == "runs/min"
    assert (cfg.model.E, cfg.model.V, cfg.synth.V) == (4, 16, 16)
    assert cfg.train.steps == 50 and cfg.train.seed == 3 and cfg.synth.seed == 3
    assert cfg.train.weights.sp == 0.01 and cfg.train.weights.lb == 1e-2
    assert cfg.train.betas == (0.9, 0.999)


def test_defaults_are_the_toy_run():
    cfg = RunConfig()
    assert (cfg.model.E, cfg.model.k, cfg.model.L, cfg.model.h) == (8, 2, 4, 32)
    assert cfg.train.steps == 2000


def test_round_trip_default_and_minimal():
    for cfg in (RunConfig(), parse(MINIMAL)):
        assert parse(emit(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**32),
    st.floats(1e-6, 1.0),
    st.floats(0.0, 1.0),
    st.booleans(),
    st.sampled_from([1, 2, 4]),
    st.one_of(st.none(), st.floats(1e-3, 1.0)),
)
def test_round_trip_property(seed, lr, stay, shared, shards, init_std):
    base = RunConfig().with_seed(seed)
    cfg = dataclasses.replace(
        base,
        model=dataclasses.replace(base.model, shared_expert=shared, init_std=init_std),
        synth=dataclasses.replace(base.synth, markov_stay=stay),
        train=dataclasses.replace(base.train, lr=lr),
        placement=cfgmod.PlacementOptions(shards=shards),
    )
    assert parse(emit(cfg)) == cfg


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        ("[run]\nseed = x\n", 2, "seed"),
        ("[nope]\n", 1, "unknown section"),
        ("[model]\nwidth = 3\n", 2, "unknown key"),
        ("[model]\nE = 4\nE = 8\n", 3, "duplicate"),
        ("seed = 1\n", 1, "outside"),
        ("[run]\nseed\n", 2, "key = value"),
        ("[run\n", 1, "malformed"),
        ("[placement]\nshards = 3\n", 2, "shards"),
        ("[model]\nshared_expert = maybe\n", 2, "bool"),
    ],
)
def test_errors_are_line_precise(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse(text, "x.ini")
    assert info.value.line == line
    assert str(info.value).startswith(f"x.ini:{line}:")
    assert fragment in str(info.value)


def test_semantic_error_points_into_section():
    with pytest.raises(ConfigError) as info:
        parse("[run]\nseed = 1\n[model]\nE = 4\nk = 9\n", "c.ini")
    assert info.value.line == 4


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="missing.ini"):
        cfgmod.load(tmp_path / "missing.ini")


def test_with_seed_propagates():
    cfg = RunConfig().with_seed(11)
    assert (cfg.seed, cfg.synth.seed, cfg.train.seed) == (11, 11, 11)
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, seed=12)
