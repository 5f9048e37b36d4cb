"""Softmax top-k MoE layers stacked into a residual tower.

Tokens are embedded, pass through ``L`` residual MoE layers
(``x <- x + layer(x)``) and are read out by a linear head. There is no
attention: every position is processed independently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import numeric as nm
from .numeric import Parameter, Tensor

if TYPE_CHECKING:
    from .trace import RoutingTrace


@dataclass(frozen=True)
class MoeConfig:
    E: int = 8
    k: int = 2
    L: int = 4
    h: int = 32
    d_ff: int = 64
    V: int = 64
    shared_expert: bool = False
    aux_loss_free: bool = False
    bias_step: float = 1e-3
    init_std: float | None = None

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not 1 <= self.k <= self.E:
            raise ValueError(f"need 1 <= k <= E, got k={self.k}, E={self.E}")
        for name in ("h", "d_ff", "V"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.aux_loss_free and not self.bias_step > 0:
            raise ValueError("aux_loss_free requires bias_step > 0")

    def to_dict(self) -> dict:
        return asdict(self)


class Expert:
    """SwiGLU feed-forward block: ``z = swish(Wg x) * (Wu x)``, ``y = Wd z``."""

    def __init__(self, w_gate: Parameter, w_up: Parameter, w_down: Parameter):
        self.w_gate = w_gate
        self.w_up = w_up
        self.w_down = w_down

    @property
    def parameters(self) -> list[Parameter]:
        return [self.w_gate, self.w_up, self.w_down]


class MoeLayer:
    """Router vectors, stacked expert weights, optional shared expert and selection bias.

    Expert weights are stored stacked over the expert axis so a whole batch
    is evaluated with a few batched matmuls:
    ``w_gate``/``w_up`` are ``(E, d_ff, h)`` and ``w_down`` is ``(E, h, d_ff)``.
    """

    def __init__(self, cfg: MoeConfig, rng: np.random.Generator, prefix: str = "layer"):
        E, h, f = cfg.E, cfg.h, cfg.d_ff
        self.prefix = prefix
        std_in = cfg.init_std if cfg.init_std is not None else h**-0.5
        std_ff = cfg.init_std if cfg.init_std is not None else f**-0.5
        self.router = Parameter(rng.normal(0.0, std_in, (E, h)), f"{prefix}.router")
        self.w_gate = Parameter(rng.normal(0.0, std_in, (E, f, h)), f"{prefix}.w_gate")
        self.w_up = Parameter(rng.normal(0.0, std_in, (E, f, h)), f"{prefix}.w_up")
        self.w_down = Parameter(rng.normal(0.0, std_ff, (E, h, f)), f"{prefix}.w_down")
        self.shared: Expert | None = None
        if cfg.shared_expert:
            self.shared = Expert(
                Parameter(rng.normal(0.0, std_in, (f, h)), f"{prefix}.shared.w_gate"),
                Parameter(rng.normal(0.0, std_in, (f, h)), f"{prefix}.shared.w_up"),
                Parameter(rng.normal(0.0, std_ff, (h, f)), f"{prefix}.shared.w_down"),
            )
        # selection bias; never touched by the optimizer
        self.bias = np.zeros(E)

    @property
    def parameters(self) -> list[Parameter]:
        params = [self.router, self.w_gate, self.w_up, self.w_down]
        if self.shared is not None:
            params += self.shared.parameters
        return params

    def expert(self, e: int) -> Expert:
        """View of expert ``e`` as standalone tensors (no gradient link to the stack)."""
        return Expert(
            Parameter(self.w_gate.data[e], f"{self.prefix}.expert{e}.w_gate"),
            Parameter(self.w_up.data[e], f"{self.prefix}.expert{e}.w_up"),
            Parameter(self.w_down.data[e], f"{self.prefix}.expert{e}.w_down"),
        )


@dataclass
class LayerOutput:
    y: Tensor  # (B, h), residual not yet added
    logits: Tensor  # (B, E) router logits q
    scores: Tensor  # (B, E) softmax(q)
    active: np.ndarray  # (B, k) int, ordered by selection logit
    activations: Tensor  # (B, k, d_ff) z of each active expert, same order as ``active``
    expert_outputs: Tensor | None = None  # (B, k, h)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, descending, ties to the lowest index."""
    values = np.asarray(values)
    if k > values.shape[-1]:
        raise ValueError(f"k={k} exceeds {values.shape[-1]} candidates")
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def route(layer: MoeLayer, x: Tensor, cfg: MoeConfig) -> tuple[Tensor, Tensor, np.ndarray]:
    """Router logits, softmax scores and the top-k active set for each row of ``x``.

    The balancing bias only shifts the selection; weights always come from
    the bias-free softmax.
    """
    if cfg.k > cfg.E:
        raise ValueError(f"k={cfg.k} > E={cfg.E}")
    x = nm.tensor(x)
    if x.shape[-1] != layer.router.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != h={layer.router.shape[1]}")
    logits = nm.matmul(x, nm.transpose(layer.router))
    scores = nm.softmax(logits, axis=-1)
    select = logits.data + layer.bias if cfg.aux_loss_free else logits.data
    active = topk_indices(select, cfg.k)
    return logits, scores, active


def expert_forward(expert: Expert, x_row) -> tuple[Tensor, Tensor]:
    """Single-expert SwiGLU on a vector ``x_row`` of width ``h``."""
    x = nm.reshape(nm.tensor(x_row), (-1, 1))
    z = nm.mul(nm.swish(nm.matmul(expert.w_gate, x)), nm.matmul(expert.w_up, x))
    y = nm.matmul(expert.w_down, z)
    return nm.reshape(z, (-1,)), nm.reshape(y, (-1,))


def _shared_forward(expert: Expert, x: Tensor) -> Tensor:
    z = nm.mul(nm.swish(nm.matmul(x, nm.transpose(expert.w_gate))), nm.matmul(x, nm.transpose(expert.w_up)))
    return nm.matmul(z, nm.transpose(expert.w_down))


def layer_forward(layer: MoeLayer, x: Tensor, cfg: MoeConfig, forced: int | None = None) -> LayerOutput:
    """``y_i = sum_{e in A_i} s_i^e y_i^e`` (+ shared expert output, unweighted).

    ``forced`` sends every row to that single expert with weight 1.
    """
    x = nm.tensor(x)
    B = x.shape[0]
    logits, scores, active = route(layer, x, cfg)
    if forced is not None:
        if not 0 <= forced < cfg.E:
            raise ValueError(f"forced expert {forced} out of range")
        active = np.full((B, 1), forced, dtype=np.int64)

    # every expert on every row; inactive ones get zero weight below
    xb = nm.reshape(x, (1, B, cfg.h))
    gate = nm.matmul(xb, nm.transpose(layer.w_gate, (0, 2, 1)))  # (E, B, f)
    up = nm.matmul(xb, nm.transpose(layer.w_up, (0, 2, 1)))
    z_all = nm.mul(nm.swish(gate), up)
    y_all = nm.matmul(z_all, nm.transpose(layer.w_down, (0, 2, 1)))  # (E, B, h)

    mask = np.zeros((B, cfg.E))
    rows = np.arange(B)[:, None]
    mask[rows, active] = 1.0
    weights = nm.tensor(mask) if forced is not None else nm.mul(scores, mask)  # (B, E)
    w = nm.reshape(nm.transpose(weights), (cfg.E, B, 1))
    y = nm.tsum(nm.mul(y_all, w), axis=0)
    if layer.shared is not None:
        y = nm.add(y, _shared_forward(layer.shared, x))

    z_act = nm.getitem(z_all, (active, rows))  # (B, k, f)
    y_act = nm.getitem(y_all, (active, rows))
    return LayerOutput(y=y, logits=logits, scores=scores, active=active, activations=z_act, expert_outputs=y_act)


def update_balancing_bias(layer: MoeLayer, loads, cfg: MoeConfig) -> np.ndarray:
    """Sign-of-violation step on the selection bias, then re-center to mean zero."""
    if not cfg.aux_loss_free:
        raise ValueError("bias balancing requires aux_loss_free=True")
    loads = np.asarray(loads, dtype=np.float64)
    if loads.shape != (cfg.E,):
        raise ValueError(f"expected {cfg.E} loads, got shape {loads.shape}")
    bias = layer.bias + cfg.bias_step * np.sign(loads.mean() - loads)
    layer.bias = bias - bias.mean()
    return layer.bias


def expert_loads(active: np.ndarray, E: int) -> np.ndarray:
    return np.bincount(np.asarray(active).ravel(), minlength=E)


class MoeModel:
    """Embedding -> L residual MoE layers -> linear head."""

    def __init__(self, cfg: MoeConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = nm.make_rng(seed, 0)
        self.embed = Parameter(rng.normal(0.0, 1.0, (cfg.V, cfg.h)), "embed")
        self.layers = [MoeLayer(cfg, nm.make_rng(seed, 1, l), prefix=f"layers.{l}") for l in range(cfg.L)]
        self.head = Parameter(nm.make_rng(seed, 2).normal(0.0, cfg.h**-0.5, (cfg.V, cfg.h)), "head")

    @property
    def parameters(self) -> list[Parameter]:
        params = [self.embed]
        for layer in self.layers:
            params += layer.parameters
        params.append(self.head)
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters}

    def zero_grads(self) -> None:
        nm.zero_grads(self.parameters)

    def state(self) -> dict[str, np.ndarray]:
        """Parameter values plus balancing biases, by name."""
        out = {p.name: p.data.copy() for p in self.parameters}
        for l, layer in enumerate(self.layers):
            out[f"layers.{l}.bias"] = layer.bias.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, value in state.items():
            if name.endswith(".bias") and name.startswith("layers."):
                self.layers[int(name.split(".")[1])].bias = np.array(value, dtype=np.float64)
            elif name in params:
                if params[name].shape != np.shape(value):
                    raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {np.shape(value)}")
                params[name].data = np.array(value, dtype=np.float64)
            else:
                raise KeyError(f"unknown parameter {name}")


@dataclass
class ForwardResult:
    logits: Tensor
    layer_outputs: list[LayerOutput]
    hidden: list[Tensor] = field(default_factory=list)  # input to each layer, then final

    def trace(self, tokens, step: int = 0) -> RoutingTrace:
        from .trace import RoutingTrace

        return RoutingTrace.from_layer_outputs(self.layer_outputs, tokens, step=step)


def model_forward(model: MoeModel, tokens) -> ForwardResult:
    """Logits for every token position in ``tokens`` (any integer array, flattened)."""
    return forced_model_forward(model, tokens, {})


def forced_model_forward(model: MoeModel, tokens, forced: dict[int, int]) -> ForwardResult:
    """Like ``model_forward`` but layers in ``forced`` route every token to one expert."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("empty token batch")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError(f"token ids must be integers, got {tokens.dtype}")
    flat = tokens.reshape(-1)
    if flat.min() < 0 or flat.max() >= model.cfg.V:
        raise ValueError(f"token id out of range [0, {model.cfg.V})")
    x = nm.getitem(model.embed, flat)
    outs: list[LayerOutput] = []
    hidden = [x]
    for l, layer in enumerate(model.layers):
        out = layer_forward(layer, x, model.cfg, forced.get(l))
        x = nm.add(x, out.y)
        outs.append(out)
        hidden.append(x)
    logits = nm.matmul(x, nm.transpose(model.head))
    return ForwardResult(logits=logits, layer_outputs=outs, hidden=hidden)
