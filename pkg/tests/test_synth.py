import numpy as np
import pytest

from synmoe.moe import MoeConfig, MoeModel
from synmoe.synth import (
    SynthConfig,
    generate_corpus,
    linear_probe_accuracy,
    load_corpus,
    make_allocation,
    plant_embeddings,
    save_corpus,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_clusters=9, V=8)
    with pytest.raises(ValueError):
        SynthConfig(markov_stay=1.5)
    with pytest.raises(ValueError):
        make_allocation(4, 5)


def test_allocation_balanced_when_divisible():
    a = make_allocation(64, 8)
    assert (a.sizes() == 8).all()
    uneven = make_allocation(10, 3)
    assert sorted(uneven.sizes().tolist()) == [3, 3, 4]


def test_stay_one_keeps_single_cluster():
    seqs, alloc = generate_corpus(SynthConfig(markov_stay=1.0, n_seqs=50))
    clusters = alloc.of(seqs)
    assert (clusters == clusters[:, :1]).all()


def test_uniform_switch_gives_uniform_marginals():
    C = 4
    cfg = SynthConfig(n_clusters=C, V=16, markov_stay=1 / C, n_seqs=400, seq_len=20, seed=3)
    seqs, alloc = generate_corpus(cfg)
    counts = np.bincount(alloc.of(seqs).ravel(), minlength=C)
    n = counts.sum()
    sigma = np.sqrt(n * (1 / C) * (1 - 1 / C))
    assert np.abs(counts - n / C).max() <= 3 * sigma


def test_generation_is_deterministic():
    a, _ = generate_corpus(SynthConfig(seed=5, n_seqs=30))
    b, _ = generate_corpus(SynthConfig(seed=5, n_seqs=30))
    c, _ = generate_corpus(SynthConfig(seed=6, n_seqs=30))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert a.dtype == np.uint32


def test_sequence_prefix_independent_of_corpus_size():
    small, _ = generate_corpus(SynthConfig(n_seqs=10))
    big, _ = generate_corpus(SynthConfig(n_seqs=40))
    np.testing.assert_array_equal(small, big[:10])


def _model(seed=0, h=16):
    return MoeModel(MoeConfig(E=4, k=2, L=1, h=h, d_ff=8, V=64), seed)


def test_zero_separation_is_pure_noise():
    m = plant_embeddings(_model(), make_allocation(64, 8), 0.0)
    assert abs(m.embed.data.mean()) < 0.1
    assert m.embed.data.std() == pytest.approx(1.0, abs=0.1)


def test_centers_are_equidistant():
    alloc = make_allocation(64, 8)
    # the noise draw is shared across separations, so the difference is the centers alone
    centers = plant_embeddings(_model(), alloc, 4.0).embed.data - plant_embeddings(_model(), alloc, 0.0).embed.data
    reps = centers[[alloc.block(c)[0] for c in range(8)]]
    d = np.linalg.norm(reps[:, None] - reps[None], axis=2)
    np.testing.assert_allclose(d[~np.eye(8, dtype=bool)], 4.0, atol=1e-12)


def test_wide_separation_probe_recovers_clusters():
    alloc = make_allocation(64, 8)
    m = plant_embeddings(_model(), alloc, 10.0)
    assert linear_probe_accuracy(m.embed.data, alloc.token_cluster) >= 0.99


def test_probe_accuracy_weakly_increasing_in_separation():
    alloc = make_allocation(64, 8)
    accs = [linear_probe_accuracy(plant_embeddings(_model(h=4), alloc, s).embed.data, alloc.token_cluster) for s in (0.5, 2.0, 8.0)]
    assert accs[0] <= accs[1] <= accs[2]


def test_plant_is_deterministic_and_checks_vocab():
    alloc = make_allocation(64, 8)
    a = plant_embeddings(_model(1), alloc, 3.0).embed.data
    b = plant_embeddings(_model(1), alloc, 3.0).embed.data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        plant_embeddings(_model(), make_allocation(32, 8), 1.0)


def test_corpus_file_round_trip(tmp_path):
    cfg = SynthConfig(n_seqs=12, seq_len=5, seed=2)
    seqs, alloc = generate_corpus(cfg)
    path, side = save_corpus(tmp_path / "c.bin", seqs, alloc, cfg)
    assert path.stat().st_size == 12 * 5 * 4
    assert side.name == "c.bin.json"
    back, alloc2, cfg2 = load_corpus(path)
    np.testing.assert_array_equal(back, seqs)
    np.testing.assert_array_equal(alloc2.token_cluster, alloc.token_cluster)
    assert cfg2 == cfg


def test_corpus_file_truncated(tmp_path):
    cfg = SynthConfig(n_seqs=3, seq_len=4)
    seqs, alloc = generate_corpus(cfg)
    path, _ = save_corpus(tmp_path / "c.bin", seqs, alloc, cfg)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_corpus(path)
