import csv
import io
import json

import numpy as np
import pytest

from synmoe import numeric as nm
from synmoe.losses import LossWeights
from synmoe.moe import LayerOutput, MoeConfig, MoeModel
from synmoe.synth import SynthConfig, generate_corpus, plant_embeddings
from synmoe.trace import RoutingTrace
from synmoe.trainer import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    conditional_activation_matrix,
    expert_overlap_metric,
    load_checkpoint,
    lr_at,
    metric_columns,
    metrics_to_csv,
    save_checkpoint,
    stability_fraction,
    train,
)

from .oracles import cos as ref_cos

SMALL = MoeConfig(E=4, k=2, L=2, h=8, d_ff=8, V=16)
ZERO = LossWeights(lb=0.0, z=0.0, sp=0.0, cp=0.0)


def _corpus(seed=0, n=64, V=16, C=4):
    seqs, alloc = generate_corpus(SynthConfig(n_clusters=C, V=V, n_seqs=n, seq_len=9, seed=seed))
    return seqs, alloc


def test_defaults():
    cfg = TrainConfig()
    assert cfg.betas == (0.9, 0.999) and cfg.weight_decay == 0.1
    with pytest.raises(ValueError):
        TrainConfig(betas=(1.0, 0.9))


def test_lr_schedule_warmup_then_constant():
    cfg = TrainConfig(steps=100, lr=1.0, warmup_frac=0.05)
    assert [lr_at(s, cfg) for s in range(6)] == [0.2, 0.4, 0.6, 0.8, 1.0, 1.0]
    assert lr_at(99, cfg) == 1.0


def test_adamw_matches_hand_computation():
    p = nm.Parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.1, eps=1e-8)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    # first step: bias-corrected m/sqrt(v) = sign(g)
    expect = np.array([1.0, -2.0]) - 0.1 * (np.sign([0.5, -0.25]) * (1 / (1 + 1e-8 / np.array([0.5, 0.25]))) + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expect, rtol=1e-14)
    p.grad = np.array([0.5, -0.25])
    before = p.data.copy()
    opt.step()
    m = 0.9 * 0.1 * np.array([0.5, -0.25]) + 0.1 * np.array([0.5, -0.25])
    v = 0.999 * 0.001 * np.array([0.25, 0.0625]) + 0.001 * np.array([0.25, 0.0625])
    mh, vh = m / (1 - 0.81), v / (1 - 0.999**2)
    np.testing.assert_allclose(p.data, before - 0.1 * (mh / (np.sqrt(vh) + 1e-8) + 0.1 * before), rtol=1e-13)


def test_lr_zero_keeps_parameters_bit_identical():
    seqs, _ = _corpus()
    m = MoeModel(SMALL, 0)
    before = {k: v.copy() for k, v in m.state().items()}
    res = train(m, seqs, TrainConfig(steps=5, lr=0.0, eval_every=1, checkpoint_every=1, eval_seqs=8))
    after = m.state()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes(), k
    # checkpoint headers differ only in the step; tensor payloads must match
    bodies = set()
    for blob in res.checkpoints.values():
        hlen = int.from_bytes(blob[8:12], "little")
        bodies.add(blob[12 + hlen :])
    assert len(res.checkpoints) == 6 and len(bodies) == 1
    assert len(res.metrics) == 6


def test_zero_lambda_task_loss_decreases():
    seqs, alloc = _corpus(n=256)
    m = MoeModel(SMALL, 0)
    plant_embeddings(m, alloc, 4.0)
    res = train(m, seqs, TrainConfig(steps=200, weights=ZERO, eval_every=20, checkpoint_every=100, eval_seqs=32))
    task = np.array([r["task"] for r in res.metrics])
    assert len(task) == 11
    assert (np.diff(task) < 0).mean() >= 0.9


def test_metrics_csv_columns_and_determinism(tmp_path):
    seqs, _ = _corpus()
    cfg = TrainConfig(steps=6, eval_every=3, checkpoint_every=3, eval_seqs=8, seed=4)
    train(MoeModel(SMALL, 1), seqs, cfg, out_dir=tmp_path / "a")
    train(MoeModel(SMALL, 1), seqs, cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    for name in ("ckpt_000006.moec", "trace_000003.moet"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(io.StringIO(a.decode())))
    assert list(rows[0]) == metric_columns(2)
    assert [int(r["step"]) for r in rows] == [0, 3, 6]
    assert metric_columns(3)[-4:] == ["overlap", "kappa_0_1", "kappa_1_2", "load_ratio"]


def test_unweighted_components_are_logged():
    seqs, _ = _corpus()
    res = train(MoeModel(SMALL, 0), seqs, TrainConfig(steps=1, weights=ZERO, eval_seqs=8))
    row = res.final_metrics()
    for key in ("lb", "z", "sp", "cp"):
        assert np.isfinite(row[key])


def test_aux_loss_free_bias_moves():
    seqs, _ = _corpus()
    cfg = MoeConfig(E=4, k=2, L=2, h=8, d_ff=8, V=16, aux_loss_free=True)
    m = MoeModel(cfg, 0)
    train(m, seqs, TrainConfig(steps=3, eval_seqs=8))
    assert any(np.abs(layer.bias).sum() > 0 for layer in m.layers)
    for layer in m.layers:
        assert abs(layer.bias.mean()) < 1e-12


def test_divergence_dumps_diagnostics(tmp_path):
    seqs, _ = _corpus()
    m = MoeModel(SMALL, 0)
    m.layers[0].router.data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(m, seqs, TrainConfig(steps=2, eval_seqs=8, eval_every=100), out_dir=tmp_path)
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert dump["step"] == 0 and dump["nonfinite_entries"]["layers.0.router"] > 0


def test_checkpoint_round_trip(tmp_path):
    m = MoeModel(MoeConfig(E=4, k=2, L=2, h=6, d_ff=5, V=9, shared_expert=True), 3)
    save_checkpoint(tmp_path / "c.moec", m, 17, {"note": "x"})
    back, header = load_checkpoint(tmp_path / "c.moec")
    assert header["step"] == 17 and header["extra"] == {"note": "x"}
    assert back.cfg == m.cfg
    for k, v in m.state().items():
        assert back.state()[k].tobytes() == v.tobytes()


def test_checkpoint_corruption(tmp_path):
    m = MoeModel(SMALL, 0)
    p = tmp_path / "c.moec"
    save_checkpoint(p, m, 0)
    blob = p.read_bytes()
    p.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(p)


# ---------------------------------------------------------------- diagnostics


def _trace(top1, E):
    top1 = np.asarray(top1)  # (L, B)
    L, B = top1.shape
    active = top1.T[None, :, :, None].transpose(0, 2, 1, 3)
    scores = np.full((1, L, B, E), 1.0 / E)
    return RoutingTrace(np.zeros((1, B), dtype=np.int64), active, scores)


def test_stability_examples():
    a = _trace([[0, 1, 2, 3], [1, 1, 0, 0]], 4)
    b = _trace([[1, 2, 3, 0], [0, 0, 1, 1]], 4)
    assert stability_fraction(a, a) == 1.0
    assert stability_fraction(a, b) == 0.0
    rng = np.random.default_rng(0)
    x = _trace(rng.integers(0, 8, (3, 20000)), 8)
    y = _trace(rng.integers(0, 8, (3, 20000)), 8)
    assert abs(stability_fraction(x, y) - 1 / 8) < 0.01


def test_stability_config_mismatch():
    with pytest.raises(ValueError):
        stability_fraction(_trace([[0, 1]], 2), _trace([[0, 1]], 3))


def _layer(z):
    z = np.asarray(z, dtype=float)
    return LayerOutput(y=None, logits=None, scores=None, active=np.tile(np.arange(z.shape[1]), (z.shape[0], 1)), activations=nm.Tensor(z))


def test_overlap_examples():
    same = _layer([[[1.0, -2.0, 0.5]] * 2])
    orth = _layer([[[1.0, 0.0], [0.0, 1.0]]])
    assert expert_overlap_metric([same]) == pytest.approx(1.0, abs=1e-12)
    assert expert_overlap_metric([orth]) == 0.0
    assert expert_overlap_metric([_layer([[[1.0, 2.0]]])]) is None


def test_overlap_matches_double_loop():
    from synmoe.moe import model_forward

    m = MoeModel(MoeConfig(E=8, k=2, L=2, h=16, d_ff=16, V=20), 5)
    fwd = model_forward(m, np.arange(20))
    vals = []
    for out in fwd.layer_outputs:
        z = out.activations.data
        for i in range(z.shape[0]):
            for a in range(z.shape[1]):
                for b in range(a + 1, z.shape[1]):
                    vals.append(abs(ref_cos(z[i, a], z[i, b])))
    assert expert_overlap_metric(fwd.layer_outputs) == pytest.approx(np.mean(vals), abs=1e-12)


def test_conditional_matrix_examples():
    E = 4
    ident = _trace([[0, 1, 2, 3, 1], [0, 1, 2, 3, 1]], E)
    np.testing.assert_array_equal(conditional_activation_matrix(ident, 0), np.eye(E))
    rng = np.random.default_rng(1)
    indep = _trace(rng.integers(0, E, (2, 40000)), E)
    M = conditional_activation_matrix(indep, 0)
    np.testing.assert_allclose(M, 1 / E, atol=0.02)
    partial = _trace([[0, 0, 2], [1, 3, 3]], E)
    M = conditional_activation_matrix(partial, 0)
    np.testing.assert_allclose(M.sum(axis=1), [1, 0, 1, 0], atol=1e-9)
    with pytest.raises(ValueError):
        conditional_activation_matrix(partial, 1)


def test_metrics_csv_formats_floats_exactly():
    row = {c: 0.1 for c in metric_columns(2)}
    row["step"] = 3
    text = metrics_to_csv([row], 2)
    assert text.splitlines()[1].startswith("3,0.1,")
