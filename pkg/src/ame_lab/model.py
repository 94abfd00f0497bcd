"""Attentive mixture of experts over disjoint feature groups.

Each expert is a small MLP that reads exactly one feature group and emits a
hidden state h_i plus a contribution c_i. Per-expert gating networks attend
to the combined hidden state of all experts and score a projected
representation against a learned context vector; the softmax of those
scores is the attention vector, which both weights the contributions into
the prediction and doubles as the per-sample feature-importance read-out.

Auxiliary predictors (one per expert, reading everything except that
expert's state, plus one reading everything) provide the error estimates
the Granger-causal objective is built from.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from .diffcore import (
    DenseLayer,
    Tensor,
    concat,
    init_dense,
    softmax,
    take_columns,
)


class ConfigError(ValueError):
    """Raised for invalid architecture or run configuration."""


@dataclass
class AmeConfig:
    """Full architecture plus training description of one model.

    feature_partition uses 0-based feature indices; the groups must be
    pairwise disjoint and cover 0..n_features-1 exactly. expert_hidden and
    aux_hidden are hidden-layer widths shared by all experts / auxiliary
    predictors.
    """

    feature_partition: list[list[int]] = field(default_factory=lambda: [[0]])
    expert_hidden: list[int] = field(default_factory=lambda: [8])
    gate_hidden: int = 8
    aux_hidden: list[int] = field(default_factory=lambda: [8])
    task: str = "regression"
    num_classes: int = 2
    alpha: float = 0.0
    aux_weight: float = 1.0
    detach_targets: bool = True
    aux_grads_to_experts: bool = True
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 0.0001
    batch_size: int = 32
    epochs: int = 100
    patience: int = 12

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.feature_partition:
            raise ConfigError("feature_partition must contain at least one group")
        seen: dict[int, int] = {}
        overlaps: set[int] = set()
        for group in self.feature_partition:
            if not group:
                raise ConfigError("feature_partition groups must be non-empty")
            for idx in group:
                if idx < 0:
                    raise ConfigError(f"feature index {idx} is negative")
                if idx in seen:
                    overlaps.add(idx)
                seen[idx] = seen.get(idx, 0) + 1
        if overlaps:
            raise ConfigError(
                f"feature_partition groups overlap on indices {sorted(overlaps)}")
        covered = set(seen)
        expected = set(range(max(covered) + 1))
        missing = sorted(expected - covered)
        if missing:
            raise ConfigError(f"feature_partition leaves indices {missing} uncovered")
        if not self.expert_hidden or any(w < 1 for w in self.expert_hidden):
            raise ConfigError(f"expert_hidden widths must be >= 1, got {self.expert_hidden}")
        if not self.aux_hidden or any(w < 1 for w in self.aux_hidden):
            raise ConfigError(f"aux_hidden widths must be >= 1, got {self.aux_hidden}")
        if self.gate_hidden < 1:
            raise ConfigError(f"gate_hidden must be >= 1, got {self.gate_hidden}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"task must be 'regression' or 'classification', got {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError(f"classification needs num_classes >= 2, got {self.num_classes}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.aux_weight < 0.0:
            raise ConfigError(f"aux_weight must be non-negative, got {self.aux_weight}")

    @property
    def n_experts(self) -> int:
        return len(self.feature_partition)

    @property
    def n_features(self) -> int:
        return sum(len(g) for g in self.feature_partition)

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "AmeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown AmeConfig fields: {unknown}")
        return cls(**raw)


class Gate:
    """One attentive gating network: projection layer plus context vector."""

    def __init__(self, projection: DenseLayer, context: Tensor):
        self.projection = projection
        self.context = context

    def logit(self, h_all: Tensor) -> Tensor:
        """Similarity of the projected combined state to the context, shape (n, 1)."""
        u = self.projection(h_all)
        return (u * self.context).sum(axis=1, keepdims=True)

    def parameters(self) -> list[Tensor]:
        return self.projection.parameters() + [self.context]


class Mlp:
    """Plain stack of dense layers."""

    def __init__(self, layers: list[DenseLayer]):
        self.layers = layers

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


def _init_mlp(rng, in_dim, hidden, out_dim, hidden_act, out_act, name) -> Mlp:
    layers = []
    prev = in_dim
    for k, width in enumerate(hidden):
        layers.append(init_dense(rng, prev, width, hidden_act, name=f"{name}.hidden_{k}"))
        prev = width
    layers.append(init_dense(rng, prev, out_dim, out_act, name=f"{name}.head"))
    return Mlp(layers)


@dataclass
class AmeOutput:
    """Per-batch forward results; all fields are tape tensors.

    y is the post-head prediction ((n, 1) regression values or (n, k)
    class probabilities); `combined` is the attention-weighted sum of
    contributions before the task head.
    """

    y: Tensor
    a: Tensor
    c: list[Tensor]
    h: list[Tensor]
    h_all: Tensor
    combined: Tensor
    y_aux_excl: list[Tensor]
    y_aux_all: Tensor


class AmeModel:
    """Built model: experts, gates, and auxiliary predictors."""

    def __init__(self, config: AmeConfig, experts: list[Mlp], heads: list[DenseLayer],
                 gates: list[Gate], aux_excl: list[Mlp], aux_all: Mlp):
        self.config = config
        self.experts = experts          # hidden stacks, one per feature group
        self.heads = heads              # per-expert contribution heads
        self.gates = gates
        self.aux_excl = aux_excl
        self.aux_all = aux_all
        self.forward_passes = 0
        self.backward_passes = 0

    @property
    def n_experts(self) -> int:
        return self.config.n_experts

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for expert, head in zip(self.experts, self.heads):
            params.extend(expert.parameters())
            params.extend(head.parameters())
        for gate in self.gates:
            params.extend(gate.parameters())
        for aux in self.aux_excl:
            params.extend(aux.parameters())
        params.extend(self.aux_all.parameters())
        return params

    def aux_parameters(self) -> list[Tensor]:
        params = [p for aux in self.aux_excl for p in aux.parameters()]
        return params + self.aux_all.parameters()

    def main_parameters(self) -> list[Tensor]:
        """Experts, heads, and gates; the sub-networks the prediction reads."""
        aux_ids = {id(p) for p in self.aux_parameters()}
        return [p for p in self.parameters() if id(p) not in aux_ids]

    def reset_pass_counts(self) -> None:
        self.forward_passes = 0
        self.backward_passes = 0

    def count_backward(self) -> None:
        self.backward_passes += 1


def build_ame(config: AmeConfig) -> AmeModel:
    """Assemble a model with independently initialized sub-networks.

    Initialization order is fixed (experts, heads, gates, auxiliaries) so a
    seed fully determines every parameter. Context vectors are Gaussian
    scaled by 1/sqrt(gate_hidden), keeping initial attention near uniform.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    out_dim = config.out_dim
    head_act = "softmax" if config.task == "classification" else "identity"

    experts, heads = [], []
    for i, group in enumerate(config.feature_partition):
        stack = []
        prev = len(group)
        for k, width in enumerate(config.expert_hidden):
            stack.append(init_dense(rng, prev, width, "tanh", name=f"expert_{i}.hidden_{k}"))
            prev = width
        experts.append(Mlp(stack))
        heads.append(init_dense(rng, prev, out_dim, "identity", name=f"expert_{i}.head"))

    h_dim = config.expert_hidden[-1]
    h_all_dim = config.n_experts * (h_dim + out_dim)

    gates = []
    for i in range(config.n_experts):
        proj = init_dense(rng, h_all_dim, config.gate_hidden, "tanh", name=f"gate_{i}.projection")
        context = Tensor(rng.normal(size=config.gate_hidden) / np.sqrt(config.gate_hidden),
                         requires_grad=True, name=f"gate_{i}.context")
        gates.append(Gate(proj, context))

    aux_excl = []
    excl_dim = h_all_dim - (h_dim + out_dim)
    for i in range(config.n_experts):
        aux_excl.append(_init_mlp(rng, max(excl_dim, 1), config.aux_hidden, out_dim,
                                  "relu", head_act, name=f"aux_excl_{i}"))
    aux_all = _init_mlp(rng, h_all_dim, config.aux_hidden, out_dim,
                        "relu", head_act, name="aux_all")
    return AmeModel(config, experts, heads, gates, aux_excl, aux_all)


def combined_state(h: list[Tensor], c: list[Tensor]) -> Tensor:
    """Interleave hidden states and contributions: (h1, c1, ..., hp, cp)."""
    if len(h) != len(c):
        raise ValueError(f"got {len(h)} hidden states but {len(c)} contributions")
    parts: list[Tensor] = []
    for hi, ci in zip(h, c):
        parts.append(hi)
        parts.append(ci)
    return concat(parts, axis=1)


def attention(gates: list[Gate], h_all: Tensor) -> Tensor:
    """Attention vector over experts, shape (n, p), rows on the simplex."""
    logits = concat([gate.logit(h_all) for gate in gates], axis=1)
    return softmax(logits, axis=1)


def forward(model: AmeModel, x) -> AmeOutput:
    """Full forward pass over a batch x of shape (n, n_features)."""
    cfg = model.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.n_features:
        raise ConfigError(
            f"input shape {x.shape} does not provide {cfg.n_features} features")
    model.forward_passes += 1

    h_list, c_list = [], []
    for group, expert, head in zip(cfg.feature_partition, model.experts, model.heads):
        hi = expert(take_columns(x, group))
        h_list.append(hi)
        c_list.append(head(hi))

    h_all = combined_state(h_list, c_list)
    a = attention(model.gates, h_all)

    combined = take_columns(a, [0]) * c_list[0]
    for i in range(1, cfg.n_experts):
        combined = combined + take_columns(a, [i]) * c_list[i]
    y = softmax(combined, axis=1) if cfg.task == "classification" else combined

    # Granger probes. Excluding expert i removes both its hidden state and
    # its contribution, so the probe sees zero information from that expert.
    if cfg.aux_grads_to_experts:
        h_aux = h_list
        c_aux = c_list
        h_all_aux = h_all
    else:
        h_aux = [hi.detach() for hi in h_list]
        c_aux = [ci.detach() for ci in c_list]
        h_all_aux = combined_state(h_aux, c_aux)

    y_aux_excl = []
    for i in range(cfg.n_experts):
        kept_h = [h_aux[j] for j in range(cfg.n_experts) if j != i]
        kept_c = [c_aux[j] for j in range(cfg.n_experts) if j != i]
        if kept_h:
            excl_in = combined_state(kept_h, kept_c)
        else:
            # single-expert model: the probe gets a constant zero input
            excl_in = Tensor(np.zeros((x.shape[0], 1)))
        y_aux_excl.append(model.aux_excl[i](excl_in))
    y_aux_all = model.aux_all(h_all_aux)

    return AmeOutput(y=y, a=a, c=c_list, h=h_list, h_all=h_all,
                     combined=combined, y_aux_excl=y_aux_excl, y_aux_all=y_aux_all)


def importance(output: AmeOutput) -> np.ndarray:
    """Importance read-out: the attention matrix, copied, shape (n, p)."""
    return output.a.data.copy()


# -- serialization ---------------------------------------------------------

def _named_parameters(model: AmeModel) -> list[tuple[str, Tensor]]:
    return [(p.name, p) for p in model.parameters()]


def model_to_dict(model: AmeModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "params": {
            name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in _named_parameters(model)
        },
    }


def model_from_dict(raw: dict) -> AmeModel:
    config = AmeConfig.from_dict(raw["config"])
    model = build_ame(config)
    params = raw["params"]
    for name, p in _named_parameters(model):
        entry = params[name]
        if tuple(entry["shape"]) != p.shape:
            raise ConfigError(
                f"parameter {name}: stored shape {entry['shape']} != built shape {list(p.shape)}")
        p.data = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
    return model


def save_model(model: AmeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> AmeModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def model_hash(model: AmeModel) -> str:
    """Stable identity of config + parameter values (hex digest prefix)."""
    blob = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
