"""Deterministic AdamW training loop, metrics, checkpoints and routing diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .losses import LossWeights, total_loss
from .moe import MoeConfig, MoeModel, expert_loads, model_forward, update_balancing_bias
from .theory import co_occurrence, coupling_coefficient, router_entropy
from .trace import RoutingTrace

CKPT_MAGIC = b"MOEC"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_tokens: int = 128
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 100
    checkpoint_every: int = 500
    eval_seqs: int = 32
    warmup_frac: float = 0.05
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_tokens < 1:
            raise ValueError("steps must be >= 0 and batch_tokens >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("eval_every and checkpoint_every must be >= 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eval_seqs < 1:
            raise ValueError("eval_seqs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.1, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data -= lr * update


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_frac`` of the steps, then constant."""
    warm = max(1, math.ceil(cfg.warmup_frac * cfg.steps))
    return cfg.lr * min(1.0, (step + 1) / warm)


# ---------------------------------------------------------------- diagnostics


def expert_overlap_metric(layer_outputs) -> float | None:
    """Mean ``|cos|`` between co-activated experts' activations; ``None`` when k = 1."""
    vals = []
    for out in layer_outputs:
        z = out.activations.data if hasattr(out.activations, "data") else np.asarray(out.activations)
        k = z.shape[1]
        for a in range(k):
            for b in range(a + 1, k):
                na = np.linalg.norm(z[:, a], axis=1)
                nb = np.linalg.norm(z[:, b], axis=1)
                ok = (na >= nm.COSINE_EPS) & (nb >= nm.COSINE_EPS)
                c = np.zeros(z.shape[0])
                c[ok] = np.einsum("ij,ij->i", z[ok, a], z[ok, b]) / (na[ok] * nb[ok])
                vals.append(np.abs(np.clip(c, -1.0, 1.0)))
    if not vals:
        return None
    return float(np.mean(np.concatenate(vals)))


def stability_fraction(trace_a: RoutingTrace, trace_b: RoutingTrace) -> float:
    """Share of (token, layer) pairs whose top-1 expert is the same in both traces."""
    if not trace_a.same_config(trace_b) or trace_a.n_steps != trace_b.n_steps:
        raise ValueError("traces differ in configuration or length")
    if not np.array_equal(trace_a.tokens, trace_b.tokens):
        raise ValueError("traces cover different tokens")
    if trace_a.tokens.size == 0:
        raise ValueError("empty trace")
    return float((trace_a.top1 == trace_b.top1).mean())


def conditional_activation_matrix(trace: RoutingTrace, layer: int) -> np.ndarray:
    """``M[e, nu] = P[top-1 at layer+1 is nu | top-1 at layer is e]``; unsupported rows are zero."""
    if trace.tokens.size == 0:
        raise ValueError("empty trace")
    if not 0 <= layer < trace.L - 1:
        raise ValueError(f"layer {layer} has no successor in a {trace.L}-layer trace")
    M = co_occurrence(trace.layer_top1(layer), trace.layer_top1(layer + 1), trace.E).astype(np.float64)
    rows = M.sum(axis=1, keepdims=True)
    return np.divide(M, rows, out=np.zeros_like(M), where=rows > 0)


def metric_columns(L: int) -> list[str]:
    cols = ["step", "task", "lb", "z", "sp", "cp"]
    cols += [f"entropy_{l}" for l in range(L)]
    cols += ["overlap"]
    cols += [f"kappa_{l}_{l + 1}" for l in range(L - 1)]
    cols += ["load_ratio"]
    return cols


def evaluate(model: MoeModel, inputs: np.ndarray, targets: np.ndarray, weights: LossWeights) -> tuple[dict, list]:
    """Unweighted loss components and routing diagnostics on a fixed batch."""
    fwd = model_forward(model, inputs)
    parts = total_loss(fwd.logits, targets, fwd.layer_outputs, weights, model.cfg.k).as_dict()
    row = {name: parts[name] for name in ("task", "lb", "z", "sp", "cp")}
    E = model.cfg.E
    for l, out in enumerate(fwd.layer_outputs):
        row[f"entropy_{l}"] = float(np.mean(router_entropy(out.scores.data)))
    ov = expert_overlap_metric(fwd.layer_outputs)
    row["overlap"] = float("nan") if ov is None else ov
    for l in range(len(fwd.layer_outputs) - 1):
        a = fwd.layer_outputs[l].active[:, 0]
        b = fwd.layer_outputs[l + 1].active[:, 0]
        row[f"kappa_{l}_{l + 1}"] = coupling_coefficient(a, b, E)[0]
    ratios = []
    for out in fwd.layer_outputs:
        loads = expert_loads(out.active, E)
        ratios.append(loads.max() / loads.min() if loads.min() > 0 else float("inf"))
    row["load_ratio"] = float(np.mean(ratios))
    return row, fwd.layer_outputs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_to_csv(rows: list[dict], L: int) -> str:
    buf = io.StringIO()
    cols = metric_columns(L)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: MoeModel, step: int, extra: dict | None = None) -> bytes:
    """``MOEC`` | u32 version | u32 header length | JSON header | float64 tensors in header order."""
    state = model.state()
    names = sorted(state)
    header = {
        "step": int(step),
        "model": model.cfg.to_dict(),
        "seed": int(model.seed),
        "tensors": [[n, list(state[n].shape)] for n in names],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + body


def save_checkpoint(path, model: MoeModel, step: int, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, step, extra))


def load_checkpoint(path) -> tuple[MoeModel, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen])
    off = 12 + hlen
    state = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing or missing tensor bytes")
    model = MoeModel(MoeConfig(**header["model"]), header["seed"])
    model.load_state(state)
    return model, header


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: MoeModel
    metrics: list[dict]
    checkpoints: dict[int, bytes]
    traces: dict[int, RoutingTrace]

    def final_metrics(self) -> dict:
        return self.metrics[-1]

    def stability(self) -> float:
        """Mean stability fraction between consecutive checkpoint traces."""
        steps = sorted(self.traces)
        if len(steps) < 2:
            raise ValueError("need at least two checkpoint traces")
        return float(np.mean([stability_fraction(self.traces[a], self.traces[b]) for a, b in zip(steps, steps[1:])]))


def eval_trace(model: MoeModel, eval_inputs: np.ndarray) -> RoutingTrace:
    """One trace step per evaluation sequence."""
    fwd = model_forward(model, eval_inputs)
    n, s = eval_inputs.shape
    active = np.stack([o.active for o in fwd.layer_outputs])  # (L, n*s, k)
    scores = np.stack([o.scores.data for o in fwd.layer_outputs])
    L = active.shape[0]
    active = active.reshape(L, n, s, -1).transpose(1, 0, 2, 3)
    scores = scores.reshape(L, n, s, -1).transpose(1, 0, 2, 3)
    return RoutingTrace(eval_inputs, active, scores)


def _dump_divergence(out_dir, step, model, detail) -> None:
    if out_dir is None:
        return
    norms = {p.name: float(np.linalg.norm(np.nan_to_num(p.data, nan=0.0, posinf=0.0, neginf=0.0))) for p in model.parameters}
    nonfinite = {p.name: int((~np.isfinite(p.data)).sum()) for p in model.parameters}
    dump = {"step": step, "error": detail, "param_norms": norms, "nonfinite_entries": nonfinite}
    Path(out_dir, "divergence.json").write_text(json.dumps(dump, sort_keys=True, indent=1) + "\n")


def train(model: MoeModel, corpus: np.ndarray, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Next-token training on ``corpus`` (n_seqs, seq_len).

    The last ``eval_seqs`` sequences are held out for metrics and routing
    traces. When ``out_dir`` is given, ``metrics.csv``, ``ckpt_<step>.moec``
    and ``trace_<step>.moet`` are written there.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[1] < 2:
        raise ValueError("corpus must be (n_seqs, seq_len >= 2)")
    if corpus.max() >= model.cfg.V:
        raise ValueError(f"corpus uses ids up to {corpus.max()}, model vocab is {model.cfg.V}")
    n_eval = min(cfg.eval_seqs, corpus.shape[0] - 1)
    if n_eval < 1:
        raise ValueError("corpus too small to hold out evaluation sequences")
    train_seqs, eval_seqs = corpus[:-n_eval], corpus[-n_eval:]
    eval_in, eval_tg = eval_seqs[:, :-1], eval_seqs[:, 1:]
    per_step = max(1, cfg.batch_tokens // (corpus.shape[1] - 1))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = AdamW(model.parameters, cfg.lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
    metrics: list[dict] = []
    checkpoints: dict[int, bytes] = {}
    traces: dict[int, RoutingTrace] = {}

    def record(step):
        try:
            _record(step)
        except (nm.NonFiniteError, FloatingPointError) as exc:
            _dump_divergence(out_dir, step, model, str(exc))
            raise TrainingDiverged(f"non-finite value while evaluating step {step}: {exc}") from exc

    def _record(step):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row, _ = evaluate(model, eval_in, eval_tg, cfg.weights)
            row["step"] = step
            metrics.append(row)
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            checkpoints[step] = checkpoint_bytes(model, step, {"train": cfg.to_dict()})
            traces[step] = eval_trace(model, eval_in)

    record(0)
    for step in range(cfg.steps):
        rng = nm.make_rng(cfg.seed, 5, step)
        idx = rng.integers(0, train_seqs.shape[0], size=per_step)
        batch = train_seqs[idx]
        try:
            model.zero_grads()
            fwd = model_forward(model, batch[:, :-1])
            loss = total_loss(fwd.logits, batch[:, 1:], fwd.layer_outputs, cfg.weights, model.cfg.k, skip_unweighted=True)
            nm.backward(loss.total)
        except (nm.NonFiniteError, FloatingPointError) as exc:
            _dump_divergence(out_dir, step, model, str(exc))
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        if not math.isfinite(loss.total.item()):
            _dump_divergence(out_dir, step, model, "non-finite loss")
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.step(lr_at(step, cfg))
        if model.cfg.aux_loss_free:
            for layer, out in zip(model.layers, fwd.layer_outputs):
                update_balancing_bias(layer, expert_loads(out.active, model.cfg.E), model.cfg)
        record(step + 1)

    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(metrics_to_csv(metrics, model.cfg.L))
        for s, blob in checkpoints.items():
            (out_dir / f"ckpt_{s:06d}.moec").write_bytes(blob)
        for s, tr in traces.items():
            tr.save(out_dir / f"trace_{s:06d}.moet")
    return TrainResult(model, metrics, checkpoints, traces)
