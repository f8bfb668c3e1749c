"""The network: embedding, gated graph convolutions, pooling, task heads.

Architecture, applied to a crystal graph:

1. one-hot node features are embedded linearly into ``d_atom`` dims,
2. ``n_conv`` gated convolutions update each atom from its neighbor
   edges: ``v_i' = v_i + sum_edges sigmoid(z Wf + bf) * softplus(z Ws + bs)``
   with ``z = concat(v_src, v_dst, edge_feat)``,
3. mean pooling over atoms gives one crystal vector,
4. a shared softplus FC layer feeds one linear head per task.

There is no batch normalization anywhere: the exact ensemble identities
this package is built around need forward passes that are pure functions
of (parameters, graph), with no train/eval mode split and no batch-order
dependence.

Everything runs in double precision. Gradients are hand-derived
reverse-mode and are checked against central finite differences in the
test suite; ``fd_gradients`` here is that oracle.

Parameters live in a plain ``dict[str, np.ndarray]`` keyed by canonical
names (``embed_W``, ``Wf_1`` .. ``bs_{n_conv}``, ``fc_W``, ``fc_b``,
``head_W_<task>``, ``head_b_<task>``); ``param_shapes`` defines the
canonical ordering used for initialization and serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .cgraph import CrystalGraph
from .errors import ConfigError, NumericError
from .structio import PROPERTY_NAMES

ParamDict = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ArchConfig:
    """Network architecture plus the init seed that fixes its parameters."""

    d_init: int = 100
    d_atom: int = 64
    d_hidden: int = 128
    n_conv: int = 3
    tasks: Tuple[str, ...] = ("formation_energy",)
    seed: int = 0
    d_edge: int = 41

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for name in ("d_init", "d_atom", "d_hidden", "n_conv", "d_edge"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.tasks:
            raise ConfigError("tasks must be non-empty")
        for task in self.tasks:
            if task not in PROPERTY_NAMES:
                raise ConfigError(f"unknown task {task!r}; expected one of {PROPERTY_NAMES}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"duplicate tasks in {self.tasks}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        return {
            "d_init": self.d_init,
            "d_atom": self.d_atom,
            "d_hidden": self.d_hidden,
            "n_conv": self.n_conv,
            "tasks": list(self.tasks),
            "seed": self.seed,
            "d_edge": self.d_edge,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ArchConfig":
        try:
            return cls(
                d_init=int(obj["d_init"]),
                d_atom=int(obj["d_atom"]),
                d_hidden=int(obj["d_hidden"]),
                n_conv=int(obj["n_conv"]),
                tasks=tuple(str(t) for t in obj["tasks"]),
                seed=int(obj["seed"]),
                d_edge=int(obj["d_edge"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed architecture description: {exc}") from None


def param_shapes(cfg: ArchConfig) -> "dict[str, Tuple[int, ...]]":
    """Canonical parameter names and shapes, in initialization order."""
    d_z = 2 * cfg.d_atom + cfg.d_edge
    shapes: "dict[str, Tuple[int, ...]]" = {
        "embed_W": (cfg.d_init, cfg.d_atom),
        "embed_b": (cfg.d_atom,),
    }
    for t in range(1, cfg.n_conv + 1):
        shapes[f"Wf_{t}"] = (d_z, cfg.d_atom)
        shapes[f"bf_{t}"] = (cfg.d_atom,)
        shapes[f"Ws_{t}"] = (d_z, cfg.d_atom)
        shapes[f"bs_{t}"] = (cfg.d_atom,)
    shapes["fc_W"] = (cfg.d_atom, cfg.d_hidden)
    shapes["fc_b"] = (cfg.d_hidden,)
    for task in cfg.tasks:
        shapes[f"head_W_{task}"] = (cfg.d_hidden, 1)
        shapes[f"head_b_{task}"] = ()
    return shapes


def init_model(cfg: ArchConfig) -> ParamDict:
    """Deterministic init: weights uniform on +-1/sqrt(fan_in), biases zero.

    Weight tensors are drawn in canonical order from one PCG64 stream
    seeded with ``cfg.seed``, so identical configs give bit-identical
    parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    params: ParamDict = {}
    for name, shape in param_shapes(cfg).items():
        if "_W" in name:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def validate_params(params: ParamDict, cfg: ArchConfig) -> None:
    """Check the dict carries exactly the declared tensors, finite, right shapes."""
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(
            f"parameter names do not match architecture (missing: {missing}, extra: {extra})"
        )
    for name, shape in expected.items():
        tensor = params[name]
        if tuple(tensor.shape) != shape:
            raise ConfigError(f"tensor {name} has shape {tensor.shape}, expected {shape}")
        if not np.isfinite(tensor).all():
            raise NumericError(f"tensor {name} contains non-finite entries")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class GraphBatch:
    """Several crystal graphs packed into one node/edge block.

    Edge indices are offset into the concatenated node array;
    ``graph_index[v]`` says which graph node ``v`` belongs to.
    """

    node_feat: np.ndarray
    edge_feat: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    graph_index: np.ndarray
    node_counts: np.ndarray
    ids: List[str]

    @property
    def n_graphs(self) -> int:
        return len(self.node_counts)


def batch_graphs(graphs: Sequence[CrystalGraph]) -> GraphBatch:
    if not graphs:
        raise ConfigError("cannot batch zero graphs")
    widths = {g.edge_feat.shape[1] for g in graphs if g.edge_feat.size}
    if len(widths) > 1:
        raise ConfigError(f"graphs mix edge-feature widths {sorted(widths)}")
    node_feat = np.concatenate([g.node_feat for g in graphs])
    edge_feat = np.concatenate([g.edge_feat for g in graphs])
    src_parts: List[np.ndarray] = []
    dst_parts: List[np.ndarray] = []
    graph_index = np.empty(node_feat.shape[0], dtype=int)
    offset = 0
    for gi, g in enumerate(graphs):
        src_parts.append(g.edge_src + offset)
        dst_parts.append(g.edge_dst + offset)
        graph_index[offset : offset + g.n_atoms] = gi
        offset += g.n_atoms
    return GraphBatch(
        node_feat=node_feat,
        edge_feat=edge_feat,
        edge_src=np.concatenate(src_parts),
        edge_dst=np.concatenate(dst_parts),
        graph_index=graph_index,
        node_counts=np.array([g.n_atoms for g in graphs], dtype=int),
        ids=[g.id for g in graphs],
    )


def _edge_scale(edge_src: np.ndarray, n_nodes: int) -> np.ndarray:
    """1/degree of each edge's receiving node.

    Messages are averaged over the neighbor list rather than summed:
    without batch normalization a raw sum grows with the (truncated)
    degree and compounds across layers, which diverges under plain SGD.
    The averaged update keeps a node with zero edges unchanged.
    """
    deg = np.bincount(edge_src, minlength=n_nodes)
    return 1.0 / np.maximum(deg, 1)[edge_src]


def conv_layer(
    V: np.ndarray,
    edge_src: np.ndarray,
    edge_dst: np.ndarray,
    edge_feat: np.ndarray,
    Wf: np.ndarray,
    bf: np.ndarray,
    Ws: np.ndarray,
    bs: np.ndarray,
) -> np.ndarray:
    """One gated convolution: residual mean of sigmoid-gated softplus messages."""
    Z = np.concatenate([V[edge_src], V[edge_dst], edge_feat], axis=1)
    msg = _sigmoid(Z @ Wf + bf) * _softplus(Z @ Ws + bs)
    out = V.copy()
    np.add.at(out, edge_src, _edge_scale(edge_src, V.shape[0])[:, None] * msg)
    return out


def pool(V: np.ndarray) -> np.ndarray:
    """Crystal vector: arithmetic mean of the atom vectors."""
    return V.mean(axis=0)


def _batch_check(batch: GraphBatch, cfg: ArchConfig) -> None:
    if batch.node_feat.shape[1] != cfg.d_init:
        raise ConfigError(
            f"node features have width {batch.node_feat.shape[1]}, architecture expects {cfg.d_init}"
        )
    if batch.edge_feat.size and batch.edge_feat.shape[1] != cfg.d_edge:
        raise ConfigError(
            f"edge features have width {batch.edge_feat.shape[1]}, architecture expects {cfg.d_edge}"
        )


def forward(batch: GraphBatch, params: ParamDict, cfg: ArchConfig, want_cache: bool = False):
    """Predictions in normalized target space, shape (n_graphs, n_tasks).

    With ``want_cache`` the returned tuple carries the intermediates
    ``backward`` needs.
    """
    _batch_check(batch, cfg)
    src, dst = batch.edge_src, batch.edge_dst
    scale = _edge_scale(src, batch.node_feat.shape[0])[:, None]

    V = batch.node_feat @ params["embed_W"] + params["embed_b"]
    layers = []
    for t in range(1, cfg.n_conv + 1):
        Z = np.concatenate([V[src], V[dst], batch.edge_feat], axis=1)
        As = Z @ params[f"Ws_{t}"] + params[f"bs_{t}"]
        G = _sigmoid(Z @ params[f"Wf_{t}"] + params[f"bf_{t}"])
        F = _softplus(As)
        V_new = V.copy()
        np.add.at(V_new, src, scale * (G * F))
        if not np.isfinite(V_new).all():
            raise NumericError(f"non-finite activations after conv layer {t}")
        if want_cache:
            layers.append((Z, G, _sigmoid(As), F))
        V = V_new

    counts = batch.node_counts.astype(float)
    C = np.zeros((batch.n_graphs, cfg.d_atom))
    np.add.at(C, batch.graph_index, V)
    C /= counts[:, None]

    A = C @ params["fc_W"] + params["fc_b"]
    H = _softplus(A)
    Y = np.empty((batch.n_graphs, cfg.n_tasks))
    for p, task in enumerate(cfg.tasks):
        Y[:, p] = H @ params[f"head_W_{task}"][:, 0] + params[f"head_b_{task}"]
    if not np.isfinite(Y).all():
        raise NumericError("non-finite prediction")
    if want_cache:
        return Y, {"V_final": V, "layers": layers, "C": C, "SA": _sigmoid(A), "H": H}
    return Y


def forward_graph(graph: CrystalGraph, params: ParamDict, cfg: ArchConfig) -> np.ndarray:
    """Single-graph convenience wrapper; returns one (n_tasks,) vector."""
    return forward(batch_graphs([graph]), params, cfg)[0]


def loss_value(preds: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """Weighted sum over tasks of the per-task mean squared error."""
    preds = np.atleast_2d(preds)
    targets = np.atleast_2d(targets)
    weights = np.asarray(weights, dtype=float)
    if preds.shape != targets.shape or preds.shape[1] != weights.shape[0]:
        raise ConfigError(
            f"shape mismatch: preds {preds.shape}, targets {targets.shape}, weights {weights.shape}"
        )
    if (weights <= 0).any():
        raise ConfigError("task weights must be positive")
    per_task = np.mean((preds - targets) ** 2, axis=0)
    return float(np.dot(weights, per_task))


def loss_and_gradients(
    batch: GraphBatch,
    params: ParamDict,
    cfg: ArchConfig,
    targets: np.ndarray,
    weights: np.ndarray,
) -> Tuple[float, ParamDict]:
    """Loss plus exact reverse-mode gradients for every parameter tensor."""
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if targets.shape != (batch.n_graphs, cfg.n_tasks):
        raise ConfigError(
            f"targets shape {targets.shape} does not match ({batch.n_graphs}, {cfg.n_tasks})"
        )
    Y, cache = forward(batch, params, cfg, want_cache=True)
    loss = loss_value(Y, targets, weights)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")

    B = batch.n_graphs
    src, dst = batch.edge_src, batch.edge_dst
    scale = _edge_scale(src, batch.node_feat.shape[0])[:, None]
    d = cfg.d_atom
    grads: ParamDict = {}

    # d(loss)/d(Y): per task, 2 * w_p * residual / batch size
    dY = (2.0 / B) * weights[None, :] * (Y - targets)

    H = cache["H"]
    dH = np.zeros_like(H)
    for p, task in enumerate(cfg.tasks):
        dy = dY[:, p]
        grads[f"head_W_{task}"] = (H.T @ dy)[:, None]
        grads[f"head_b_{task}"] = np.array(dy.sum())
        dH += dy[:, None] * params[f"head_W_{task}"][:, 0][None, :]

    dA = dH * cache["SA"]  # softplus' = sigmoid
    grads["fc_W"] = cache["C"].T @ dA
    grads["fc_b"] = dA.sum(axis=0)
    dC = dA @ params["fc_W"].T

    counts = batch.node_counts.astype(float)
    dV = dC[batch.graph_index] / counts[batch.graph_index][:, None]

    for t in range(cfg.n_conv, 0, -1):
        Z, G, S, F = cache["layers"][t - 1]
        dmsg = dV[src] * scale
        dAf = dmsg * F * G * (1.0 - G)
        dAs = dmsg * G * S
        grads[f"Wf_{t}"] = Z.T @ dAf
        grads[f"bf_{t}"] = dAf.sum(axis=0)
        grads[f"Ws_{t}"] = Z.T @ dAs
        grads[f"bs_{t}"] = dAs.sum(axis=0)
        dZ = dAf @ params[f"Wf_{t}"].T + dAs @ params[f"Ws_{t}"].T
        dV_prev = dV.copy()
        np.add.at(dV_prev, src, dZ[:, :d])
        np.add.at(dV_prev, dst, dZ[:, d : 2 * d])
        dV = dV_prev

    grads["embed_W"] = batch.node_feat.T @ dV
    grads["embed_b"] = dV.sum(axis=0)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for tensor {name}")
    return loss, grads


def fd_gradients(
    batch: GraphBatch,
    params: ParamDict,
    cfg: ArchConfig,
    targets: np.ndarray,
    weights: np.ndarray,
    step: float = 1e-4,
) -> ParamDict:
    """Central finite-difference gradients; the oracle for the analytic ones."""
    out: ParamDict = {}
    for name, tensor in params.items():
        grad = np.zeros_like(np.atleast_1d(tensor.astype(float)))
        flat = tensor.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value(forward(batch, params, cfg), targets, weights)
            flat[i] = orig - step
            lo = loss_value(forward(batch, params, cfg), targets, weights)
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        out[name] = grad.reshape(tensor.shape)
    return out


def max_gradient_error(analytic: ParamDict, numeric: ParamDict, floor: float = 1e-6) -> float:
    """Worst relative disagreement, guarding tiny denominators with ``floor``."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
