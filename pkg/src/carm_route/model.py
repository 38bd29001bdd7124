"""Heavy-encoder light-decoder routing policy with swappable state embeddings.

Strategies
----------
``PRE``  query ``[h_last, C_t]`` attends over currently feasible nodes only.
``FGE``  same query, attends over every unvisited node.
``CARM`` the query is first modulated by the constraint vector,
         ``h_M = (h_C W_C + b_C) * (1 + C_t W_g + b_g) + (C_t W_b + b_b)``,
         attends over unvisited nodes, and ``h_M`` is added back to the
         attention output.

With ``idt_head`` the attention output additionally passes through the
identity-mapped feed-forward head ``FF(x) + x`` with
``x = h_A (+ h_M) + h_last + C_t W_idt``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .env import STRATEGIES, BatchEnv
from .instances import InstanceBatch, VrpInstance
from .tensor import Tensor

NODE_FEATURES = 9
DEPOT_FEATURES = 2
LIMIT_SCALE = 3.0


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 128
    heads: int = 8
    encoder_layers: int = 6
    ff_hidden: int = 512
    clip: float = 10.0
    strategy: str = "CARM"
    idt_head: bool = False
    dynamic_features: int = 4

    def __post_init__(self):
        if self.embedding_dim % self.heads:
            raise ValueError(f"embedding_dim {self.embedding_dim} is not divisible by heads {self.heads}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.clip <= 0:
            raise ValueError("tanh clip must be positive")

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelConfig":
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameters


def _shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, ff = config.embedding_dim, config.dynamic_features, config.ff_hidden
    s: dict[str, tuple[int, ...]] = {
        "enc.depot.W": (DEPOT_FEATURES, d),
        "enc.depot.b": (d,),
        "enc.node.W": (NODE_FEATURES, d),
        "enc.node.b": (d,),
    }
    for layer in range(config.encoder_layers):
        p = f"enc.{layer}."
        s.update({
            p + "Wq": (d, d), p + "Wk": (d, d), p + "Wv": (d, d), p + "Wo": (d, d), p + "bo": (d,),
            p + "norm1.g": (d,), p + "norm1.b": (d,),
            p + "ff1.W": (d, ff), p + "ff1.b": (ff,), p + "ff2.W": (ff, d), p + "ff2.b": (d,),
            p + "norm2.g": (d,), p + "norm2.b": (d,),
        })
    s.update({"dec.Wk": (d, d), "dec.Wv": (d, d), "dec.Wo": (d, d), "dec.bo": (d,)})
    if config.strategy == "CARM":
        s.update({
            "dec.Wc": (d + m, d), "dec.bc": (d,), "dec.Wq": (d, d),
            "dec.Wgamma": (m, d), "dec.bgamma": (d,), "dec.Wbeta": (m, d), "dec.bbeta": (d,),
        })
    else:
        s["dec.Wq"] = (d + m, d)
    if config.idt_head:
        s.update({"dec.Widt": (m, d), "dec.ff1.W": (d, ff), "dec.ff1.b": (ff,), "dec.ff2.W": (ff, d),
                  "dec.ff2.b": (d,)})
    return s


def _fan_in(name: str, shapes: Mapping[str, tuple[int, ...]]) -> int:
    shape = shapes[name]
    if len(shape) == 2:
        return shape[0]
    # a bias shares the bound of its weight matrix
    base = name[:-1] + "W" if name.endswith(".b") else name.replace(".b", ".W", 1)
    if base in shapes:
        return shapes[base][0]
    return shape[0]


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) everywhere; norms start at identity and the
    CARM scale/shift projections at zero so training starts unmodulated."""
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = _shapes(config)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith("norm1.g") or name.endswith("norm2.g"):
            data = np.ones(shape)
        elif ".norm" in name or name in ("dec.Wgamma", "dec.bgamma", "dec.Wbeta", "dec.bbeta"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = T.parameter(data, name=name)
    return params


def param_count(config: ModelConfig) -> tuple[int, int]:
    """(total parameters, difference against the PRE decoder of the same size)."""
    total = sum(int(np.prod(s)) for s in _shapes(config).values())
    base = sum(int(np.prod(s)) for s in _shapes(replace(config, strategy="PRE")).values())
    return total, total - base


def carm_delta_formula(d: int, m: int) -> int:
    return d * d + 2 * m * d + 3 * d


# ---------------------------------------------------------------------------
# encoder


def node_features(batch: InstanceBatch) -> tuple[np.ndarray, np.ndarray]:
    """Raw inputs: depot (x, y); customers (x, y, demand/C, e/l0, l/l0, s/l0,
    backhaul flag, open flag, limit/3) with inactive fields zero."""
    v = batch.variant
    B, n = batch.size, batch.n
    depot = batch.coords[:, :1, :]
    feats = np.zeros((B, n, NODE_FEATURES))
    feats[..., 0:2] = batch.coords[:, 1:, :]
    sign = np.where(batch.backhaul[:, 1:] & (v.protocol == "mvmoe"), -1.0, 1.0)
    feats[..., 2] = sign * batch.quantity[:, 1:] / batch.capacity[:, None]
    if v.time_windows:
        l0 = batch.horizon[:, None]
        feats[..., 3] = batch.early[:, 1:] / l0
        feats[..., 4] = batch.late[:, 1:] / l0
        feats[..., 5] = batch.service[:, 1:] / l0
    feats[..., 6] = batch.backhaul[:, 1:]
    feats[..., 7] = 1.0 if v.open_route else 0.0
    if v.duration_limit:
        feats[..., 8] = batch.limit[:, None] / LIMIT_SCALE
    return depot, feats


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, L, d) -> (B, h, L, dk)
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dk)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over pre-split heads (B, h, L, dk).

    ``keep`` is a boolean (B, Lq, Lk) mask broadcast over heads.
    """
    dk = q.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    weights = T.masked_softmax(scores, None if keep is None else keep[:, None, :, :])
    return T.matmul(weights, v)


def encoder_layer(h: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    q = _split_heads(h @ params[prefix + "Wq"], heads)
    k = _split_heads(h @ params[prefix + "Wk"], heads)
    v = _split_heads(h @ params[prefix + "Wv"], heads)
    mha = T.linear(_merge_heads(multi_head_attention(q, k, v)), params[prefix + "Wo"], params[prefix + "bo"])
    h = T.instance_norm(h + mha, params[prefix + "norm1.g"], params[prefix + "norm1.b"])
    ff = T.relu(T.linear(h, params[prefix + "ff1.W"], params[prefix + "ff1.b"]))
    ff = T.linear(ff, params[prefix + "ff2.W"], params[prefix + "ff2.b"])
    return T.instance_norm(h + ff, params[prefix + "norm2.g"], params[prefix + "norm2.b"])


def encode_batch(batch: InstanceBatch, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    depot, feats = node_features(batch)
    h = T.concat([
        T.linear(depot, params["enc.depot.W"], params["enc.depot.b"]),
        T.linear(feats, params["enc.node.W"], params["enc.node.b"]),
    ], axis=1)
    for layer in range(config.encoder_layers):
        h = encoder_layer(h, params, f"enc.{layer}.", config.heads)
    return h


def encode(instance: VrpInstance, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Node embeddings (n+1, d) of one instance."""
    h = encode_batch(InstanceBatch.from_instances([instance]), params, config)
    return h.reshape(h.shape[1:])


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderCache:
    nodes: Tensor  # (B, N, d) logit keys
    keys: Tensor  # (B, h, N, dk)
    values: Tensor  # (B, h, N, dk)


def build_cache(nodes: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> DecoderCache:
    return DecoderCache(
        nodes,
        _split_heads(nodes @ params["dec.Wk"], config.heads),
        _split_heads(nodes @ params["dec.Wv"], config.heads),
    )


def context_embedding(last: Tensor, features) -> Tensor:
    """``[h_last, C_t]`` along the last axis."""
    return T.concat([last, T.as_tensor(features)], axis=-1)


def carm_modulate(h_context: Tensor, features, params: Mapping[str, Tensor]) -> Tensor:
    c = T.as_tensor(features)
    projected = T.linear(h_context, params["dec.Wc"], params["dec.bc"])
    gamma = T.linear(c, params["dec.Wgamma"], params["dec.bgamma"])
    beta = T.linear(c, params["dec.Wbeta"], params["dec.bbeta"])
    return projected * (gamma + 1.0) + beta


def glimpse(query_input: Tensor, cache: DecoderCache, attn_keep: np.ndarray, params: Mapping[str, Tensor],
            config: ModelConfig) -> Tensor:
    """Multi-head attention of (B, P, .) queries over the cached nodes."""
    q = _split_heads(query_input @ params["dec.Wq"], config.heads)
    out = multi_head_attention(q, cache.keys, cache.values, attn_keep)
    return T.linear(_merge_heads(out), params["dec.Wo"], params["dec.bo"])


def state_embedding(query_input: Tensor, cache: DecoderCache, attn_keep: np.ndarray,
                    params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    attended = glimpse(query_input, cache, attn_keep, params, config)
    if config.strategy == "CARM":
        return query_input + attended
    return attended


def idt_state_embedding(attended: Tensor, last: Tensor, features, params: Mapping[str, Tensor],
                        modulated: Tensor | None = None) -> Tensor:
    """Identity-mapped head: ``x = h_A (+ h_M) + h_last + C_t W_idt``; ``FF(x) + x``."""
    x = attended + (last + T.as_tensor(features) @ params["dec.Widt"])
    if modulated is not None:
        x = x + modulated
    ff = T.relu(T.linear(x, params["dec.ff1.W"], params["dec.ff1.b"]))
    return T.linear(ff, params["dec.ff2.W"], params["dec.ff2.b"]) + x


def compatibility_logits(state_emb: Tensor, nodes: Tensor, clip: float) -> Tensor:
    """``clip * tanh(h . h_i / sqrt(d))`` for every node; (B, P, N)."""
    d = nodes.shape[-1]
    scores = T.matmul(state_emb, T.swapaxes(nodes, -1, -2)) * (1.0 / math.sqrt(d))
    return T.tanh(scores) * clip


def compatibility(state_emb: Tensor, nodes: Tensor, feasible_keep: np.ndarray, clip: float) -> Tensor:
    logits = compatibility_logits(state_emb, nodes, clip)
    return T.masked_softmax(logits, feasible_keep)


@dataclass
class StepOutput:
    probs: Tensor
    logits: Tensor
    state_emb: Tensor


def decoder_step(params: Mapping[str, Tensor], config: ModelConfig, cache: DecoderCache, current: np.ndarray,
                 features: np.ndarray, feasible_keep: np.ndarray, attn_keep: np.ndarray) -> StepOutput:
    """One pointer step for (B, P) rollouts given their env-derived inputs."""
    b = np.arange(current.shape[0])[:, None]
    last = T.take(cache.nodes, (b, current))
    h_context = context_embedding(last, features)
    modulated = None
    if config.strategy == "CARM":
        modulated = carm_modulate(h_context, features, params)
        query = modulated
    else:
        query = h_context
    attended = glimpse(query, cache, attn_keep, params, config)
    if config.idt_head:
        emb = idt_state_embedding(attended, last, features, params, modulated)
    elif modulated is not None:
        emb = modulated + attended
    else:
        emb = attended
    logits = compatibility_logits(emb, cache.nodes, config.clip)
    probs = T.masked_softmax(logits, feasible_keep)
    return StepOutput(probs, logits, emb)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Trajectory:
    tour: list[int]
    log_probs: list[float]
    cost: float
    start: int | None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))


@dataclass
class Rollout:
    tours: list[list[list[int]]]  # (B, P) nested lists of node sequences
    costs: np.ndarray  # (B, P)
    log_prob: Tensor  # (B, P) summed over model-chosen steps
    step_log_probs: np.ndarray  # (B, P, T)
    start_fallback: np.ndarray  # (B, P)
    active: np.ndarray  # (B, P, T) rollout still had customers left at that step
    state_embeddings: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    pick = (cdf <= u).sum(axis=-1)
    pick = np.minimum(pick, probs.shape[-1] - 1)
    # guard against landing on a zero-probability entry through rounding
    bad = np.take_along_axis(probs, pick[..., None], axis=-1)[..., 0] <= 0.0
    if bad.any():
        pick = np.where(bad, probs.argmax(axis=-1), pick)
    return pick


def rollout(params: Mapping[str, Tensor], config: ModelConfig, batch: InstanceBatch,
            starts: Sequence[int] | np.ndarray | None, mode: str = "greedy",
            rng: np.random.Generator | None = None, strategy: str | None = None,
            nodes: Tensor | None = None, record: bool = False,
            forced: np.ndarray | None = None) -> Rollout:
    """Decode every instance of ``batch`` from each start node.

    ``strategy`` overrides the attention mask only, which lets PRE and FGE
    share one set of weights. ``forced`` (B, P, T) replays given actions
    instead of choosing; -1 entries fall back to ``mode``.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    strategy = strategy or config.strategy
    if nodes is None:
        nodes = encode_batch(batch, params, config)
    cache = build_cache(nodes, params, config)
    n_roll = 1 if starts is None else np.asarray(starts).shape[-1]
    env = BatchEnv(batch, n_roll)
    env.reset(None if starts is None else np.asarray(starts))
    log_prob: Tensor | None = None
    step_lp = []
    active = []
    embeddings = []
    bi = np.arange(env.B)[:, None]
    pi = np.arange(env.P)[None, :]
    k = 0
    limit = 4 * (batch.n + 1) + 4
    while not env.done.all():
        feas = env.feasible()
        if not feas.any(axis=-1).all():
            raise T.NoFeasibleActionError(f"empty feasibility mask at step {env.t}")
        attn = env.attention_keep(strategy, feas)
        out = decoder_step(params, config, cache, env.current, env.features(config.dynamic_features), feas, attn)
        probs = out.probs.data
        if mode == "greedy":
            action = probs.argmax(axis=-1)
        else:
            action = _sample(probs, rng)
        if forced is not None and k < forced.shape[-1]:
            action = np.where(forced[..., k] >= 0, forced[..., k], action)
        lp = T.log(T.take(out.probs, (bi, pi, action)))
        log_prob = lp if log_prob is None else log_prob + lp
        step_lp.append(lp.data)
        active.append(~env.done)
        if record:
            embeddings.append(out.state_emb.data)
        env.step(action, check=forced is not None)
        k += 1
        if k > limit:
            raise RuntimeError("decoding did not terminate")
    costs = env.finish()
    if log_prob is None:
        log_prob = T.Tensor(np.zeros((env.B, env.P)))
    if step_lp:
        slp, act = np.stack(step_lp, axis=-1), np.stack(active, axis=-1)
    else:
        slp, act = np.zeros((env.B, env.P, 0)), np.zeros((env.B, env.P, 0), dtype=bool)
    return Rollout(env.tours(), costs, log_prob, slp, env.start_fallback, act, embeddings, env.actions)


def decode(instance: VrpInstance, params: Mapping[str, Tensor], config: ModelConfig, mode: str = "greedy",
           starts: Sequence[int] | None = None, rng: np.random.Generator | None = None,
           strategy: str | None = None) -> list[Trajectory]:
    batch = InstanceBatch.from_instances([instance])
    out = rollout(params, config, batch, None if starts is None else list(starts), mode, rng, strategy)
    trajs = []
    for p in range(out.costs.shape[1]):
        tour = out.tours[0][p]
        start = None if starts is None or out.start_fallback[0, p] else int(starts[p])
        lps = [float(x) for x in out.step_log_probs[0, p][out.active[0, p]]]
        trajs.append(Trajectory(tour, lps, float(out.costs[0, p]), start))
    return trajs
