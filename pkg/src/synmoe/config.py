"""Run configuration: a sectioned ``key = value`` text format.

Example::

    [run]
    seed = 0
    out = runs/toy

    [model]
    E = 8
    k = 2

Unknown sections or keys, duplicates, and malformed values are rejected
with the offending line number. ``#`` starts a comment. ``emit`` writes
every field, so ``parse(emit(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .moe import MoeConfig
from .placement import DEFAULT_REMOTE_PENALTY
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class PlacementOptions:
    shards: int = 2
    remote_penalty: float = DEFAULT_REMOTE_PENALTY

    def __post_init__(self):
        if self.shards < 1:
            raise ValueError("shards must be >= 1")
        if not 0.0 <= self.remote_penalty < 1.0:
            raise ValueError("remote_penalty must lie in [0, 1)")


def _toy_model() -> MoeConfig:
    return MoeConfig(E=8, k=2, L=4, h=32, d_ff=32, V=64)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: MoeConfig = field(default_factory=_toy_model)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    placement: PlacementOptions = field(default_factory=PlacementOptions)

    def __post_init__(self):
        if self.synth.V != self.model.V:
            raise ValueError(f"synth V={self.synth.V} differs from model V={self.model.V}")
        if self.synth.seed != self.seed or self.train.seed != self.seed:
            raise ValueError("synth and train seeds must equal the run seed")

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            synth=dataclasses.replace(self.synth, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


_RUN_KEYS = {"seed": int, "out": str}
_SYNTH_KEYS = {"n_clusters": int, "seq_len": int, "n_seqs": int, "markov_stay": float, "embed_sep": float}
_TRAIN_KEYS = {
    "steps": int,
    "batch_tokens": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "eval_every": int,
    "checkpoint_every": int,
    "eval_seqs": int,
    "warmup_frac": float,
    "adam_eps": float,
}
_LOSS_KEYS = {"lb": float, "z": float, "sp": float, "cp": float}
_PLACEMENT_KEYS = {"shards": int, "remote_penalty": float}
_MODEL_TYPES = {"E": int, "k": int, "L": int, "h": int, "d_ff": int, "V": int, "shared_expert": bool, "aux_loss_free": bool, "bias_step": float, "init_std": "optfloat"}

SECTIONS = {
    "run": _RUN_KEYS,
    "model": _MODEL_TYPES,
    "synth": _SYNTH_KEYS,
    "train": _TRAIN_KEYS,
    "loss": _LOSS_KEYS,
    "placement": _PLACEMENT_KEYS,
}


def _convert(raw: str, kind, source: str, line: int, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if kind == "optfloat":
            return None if raw.lower() == "none" else float(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        name = kind if isinstance(kind, str) else kind.__name__
        raise ConfigError(f"{key}: cannot read {raw!r} as {name}", source, line) from None


def parse(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", source, no)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", source, no)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", source, no)
        if section is None:
            raise ConfigError("key outside of any section", source, no)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SECTIONS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", source, no)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}] (first set on line {lines[section, key]})", source, no)
        values[section][key] = _convert(val, SECTIONS[section][key], source, no, key)
        lines[section, key] = no

    def build(section, fn):
        try:
            return fn(values[section])
        except (ValueError, TypeError) as exc:
            first = min((n for (s, _), n in lines.items() if s == section), default=None)
            raise ConfigError(f"[{section}] {exc}", source, first) from None

    run = values["run"]
    seed = int(run.get("seed", 0))
    model = build("model", lambda v: dataclasses.replace(_toy_model(), **v))
    synth = build("synth", lambda v: SynthConfig(V=model.V, seed=seed, **v))
    weights = build("loss", lambda v: LossWeights(**v))

    def make_train(v):
        v = dict(v)
        d = TrainConfig()
        betas = (v.pop("beta1", d.betas[0]), v.pop("beta2", d.betas[1]))
        return TrainConfig(betas=betas, weights=weights, seed=seed, **v)

    train = build("train", make_train)
    placement = build("placement", lambda v: PlacementOptions(**v))
    if placement.shards and model.E % placement.shards:
        raise ConfigError(f"[placement] shards={placement.shards} must divide E={model.E}", source, lines.get(("placement", "shards")))
    try:
        return RunConfig(seed=seed, out=str(run.get("out", RunConfig.out)), model=model, synth=synth, train=train, placement=placement)
    except ValueError as exc:
        raise ConfigError(str(exc), source) from None


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("config file not found", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse(text, str(path))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit(cfg: RunConfig) -> str:
    t = cfg.train
    sections = {
        "run": {"seed": cfg.seed, "out": cfg.out},
        "model": {k: getattr(cfg.model, k) for k in _MODEL_TYPES},
        "synth": {k: getattr(cfg.synth, k) for k in _SYNTH_KEYS},
        "train": {
            "steps": t.steps,
            "batch_tokens": t.batch_tokens,
            "lr": t.lr,
            "beta1": t.betas[0],
            "beta2": t.betas[1],
            "weight_decay": t.weight_decay,
            "eval_every": t.eval_every,
            "checkpoint_every": t.checkpoint_every,
            "eval_seqs": t.eval_seqs,
            "warmup_frac": t.warmup_frac,
            "adam_eps": t.adam_eps,
        },
        "loss": {k: getattr(t.weights, k) for k in _LOSS_KEYS},
        "placement": {k: getattr(cfg.placement, k) for k in _PLACEMENT_KEYS},
    }
    out = []
    for name, kv in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in kv.items())
        out.append("")
    return "\n".join(out)
