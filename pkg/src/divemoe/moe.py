"""MoE reassembly: routers + pruned-FFN experts, gating, random-split baseline.

Expert i of every layer comes from pruned model i, so expert ids align with
cluster ids across the whole stack. The trunk (embeddings, attention, norms,
LM head) is taken verbatim from the first source model after verifying all
sources agree on it bit for bit.

Sparse gating selects per-token top-k experts; unselected experts are never
evaluated. With n=1, k=1 the layer reproduces the source FFN's op sequence
exactly, which the degenerate-equivalence tests rely on.
"""

from __future__ import annotations

import dataclasses
import re

import numpy as np

from . import tensor as T
from .errors import (
    CapacityError,
    ConsistencyError,
    DimensionError,
    ParameterError,
)
from .model import ModelConfig, attention_block, rope_tables
from .rng import CounterRng

_EXPERT_RE = re.compile(r"^layers\.0\.moe\.experts\.(\d+)\.gate$")


@dataclasses.dataclass
class GateOutput:
    weights: np.ndarray  # [n], zeros for unselected experts
    selected: list  # indices sorted by descending logit
    logits: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ParameterError("gate weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ParameterError("gate weights must sum to 1")


def _descending_order(z):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    return z, np.lexsort((np.arange(z.size), -z))


def sparse_gate(z, k) -> GateOutput:
    """Softmax over the k largest logits; other experts get exactly 0."""
    z, order = _descending_order(z)
    n = z.size
    if not (1 <= k <= n):
        raise ParameterError("top_k must lie in [1, %d], got %d" % (n, k))
    sel = order[:k]
    w = np.zeros(n, dtype=np.float64)
    e = np.exp(z[sel] - z[sel].max())
    w[sel] = e / e.sum()
    return GateOutput(weights=w, selected=[int(i) for i in sel], logits=z)


def dense_gate(z, t) -> GateOutput:
    """Temperature softmax over all experts; no truncation."""
    z, order = _descending_order(z)
    if t <= 0:
        raise ParameterError("temperature must be positive, got %r" % (t,))
    s = z / t
    e = np.exp(s - s.max())
    return GateOutput(weights=e / e.sum(), selected=[int(i) for i in order], logits=z)


def topk_rows(z, k):
    """Per-row top-k indices of [N, n] logits, ties to the lower index,
    columns ordered by descending logit."""
    return np.argsort(-z, axis=1, kind="stable")[:, :k].astype(np.int64)


class MoeModel:
    """Shared trunk plus per-layer routed experts."""

    def __init__(self, config: ModelConfig, params: dict, meta=None):
        self.config = config
        self.params = params
        self.meta = dict(meta or {})
        self.adapters = {}  # projection name -> LoraAdapter, managed by retrain
        self.cos, self.sin = rope_tables(config.max_seq_len, config.head_dim)
        experts = [int(m.group(1)) for m in filter(None, map(_EXPERT_RE.match, params))]
        if not experts:
            raise DimensionError("no experts found in parameter tree")
        self.n_experts = max(experts) + 1
        mode = self.meta.get("default_mode")
        self.default_mode = (mode[0], mode[1]) if mode else ("sparse", 1)

    def parameters(self) -> dict:
        return self.params

    def _get(self, name):
        return self.params[name]

    def expert_width(self, layer=0, expert=0):
        return self.params["layers.%d.moe.experts.%d.gate" % (layer, expert)].shape[0]

    def _proj(self, x, name, train, rng):
        """Projection with optional low-rank adapter delta."""
        y = T.linear(x, self.params[name])
        ad = self.adapters.get(name)
        if ad is not None:
            xi = x
            if train and ad.dropout > 0.0:
                if rng is None:
                    raise ParameterError("training forward with dropout needs an rng")
                xi = T.dropout(x, ad.dropout, rng.substream(name))
            delta = T.linear(
                T.linear(xi, self.params[name + ".lora_a"]), self.params[name + ".lora_b"]
            )
            y = T.add(y, T.scale(delta, ad.alpha / ad.rank))
        return y

    def expert_ffn(self, h, layer, expert, train=False, rng=None):
        pre = "layers.%d.moe.experts.%d." % (layer, expert)
        a = T.mul(
            T.swish(self._proj(h, pre + "gate", train, rng)),
            self._proj(h, pre + "up", train, rng),
        )
        y = self._proj(a, pre + "down", train, rng)
        return T.add_bias(y, self.params[pre + "bias"])

    def moe_layer(self, h, layer, mode, train=False, rng=None, capture=None):
        """Gated mixture output for pre-normalized h [N, d_model]."""
        n = self.n_experts
        z = T.linear(h, self.params["layers.%d.moe.router" % layer])
        kind = mode[0]
        if kind == "dense":
            t = float(mode[1])
            w = T.softmax_with_temperature(z, t)
            if capture is not None:
                capture.append(topk_rows(z.data, 1))
            out = None
            for e in range(n):
                oe = self.expert_ffn(h, layer, e, train, rng)
                term = T.scale_rows(oe, T.take_col(w, e))
                out = term if out is None else T.add(out, term)
            return out
        if kind == "sparse":
            k = int(mode[1])
            if not (1 <= k <= n):
                raise ParameterError("top_k must lie in [1, %d], got %d" % (n, k))
            rows = h.shape[0]
            sel = topk_rows(z.data, k)
            if capture is not None:
                capture.append(sel)
            mask = np.zeros((rows, n), dtype=np.uint8)
            mask[np.arange(rows)[:, None], sel] = 1
            w = T.masked_softmax(z, mask)
            out = None
            for e in range(n):
                idx = np.flatnonzero(mask[:, e]).astype(np.int64)
                if idx.size == 0:
                    continue  # compute contract: unselected experts never run
                he = T.take_rows(h, idx)
                oe = self.expert_ffn(he, layer, e, train, rng)
                we = T.take_rows(T.take_col(w, e), idx)
                term = T.scatter_rows(T.scale_rows(oe, we), idx, rows)
                out = term if out is None else T.add(out, term)
            return out
        raise ParameterError("unknown gating mode %r" % (kind,))

    def forward(self, ids, mode=None, train=False, dropout_rng=None, capture=None):
        """Logits [batch*seq, vocab]; mode defaults to the model's stored mode."""
        if mode is None:
            mode = self.default_mode
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError("token batch must be rank 2, got %s" % (ids.shape,))
        batch, seq = ids.shape
        if seq > self.config.max_seq_len:
            raise CapacityError("sequence length %d exceeds max_seq_len %d" % (seq, self.config.max_seq_len))
        x = T.embedding(self._get("embed.weight"), ids.reshape(-1))
        for li in range(self.config.n_layers):
            pre = "layers.%d." % li
            x = attention_block(self._get, pre, x, batch, seq, self.config, self.cos, self.sin)
            h = T.rms_norm(x, self._get(pre + "ffn_norm.g"), self.config.rms_eps)
            x = T.add(x, self.moe_layer(h, li, mode, train, dropout_rng, capture))
        h = T.rms_norm(x, self._get("final_norm.g"), self.config.rms_eps)
        return T.linear(h, self._get("lm_head.weight"))

    def logits(self, ids, mode=None):
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        with T.no_grad():
            out = self.forward(ids, mode)
        return out.data.reshape(ids.shape[0], ids.shape[1], self.config.vocab)

    def loss_on_batch(self, ids, mode=None, train=False, dropout_rng=None):
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.shape[1] < 2:
            raise ParameterError("need at least 2 tokens per row to form a prediction")
        logits = self.forward(ids[:, :-1], mode, train, dropout_rng)
        return T.cross_entropy_mean(logits, ids[:, 1:].reshape(-1))

    def selections(self, ids, k):
        """Per-layer [batch*seq, k] routed expert ids under sparse top-k."""
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        capture = []
        with T.no_grad():
            self.forward(ids, ("sparse", k), capture=capture)
        return capture


def _tensor_copy(name, arr):
    return T.Tensor(arr.copy(), requires_grad=True, name=name)


def _trunk_names(params):
    return [n for n in params if ".ffn." not in n and ".moe." not in n]


def _init_router(seed, layer, n, d_model):
    name = "layers.%d.moe.router" % layer
    data = CounterRng(seed).substream("router/layer%d" % layer).normal((n, d_model), 0.02)
    return T.Tensor(data, requires_grad=True, name=name)


def reconstruct_moe(pruned_models, router_seed, expert_sources=None) -> MoeModel:
    """Merge N pruned dense models into one MoE: expert i = pruned FFN i.

    All sources must share the trunk bitwise and have equal FFN widths.
    Routers are freshly initialized from the seeded RNG.
    """
    if not pruned_models:
        raise ParameterError("need at least one pruned model")
    first = pruned_models[0]
    cfg = first.config
    n = len(pruned_models)
    for m in pruned_models[1:]:
        if m.config != cfg:
            raise ConsistencyError("source models disagree on configuration")
        for name in _trunk_names(first.params):
            if first.params[name].data.tobytes() != m.params[name].data.tobytes():
                raise ConsistencyError("trunk parameter %s differs between source models" % name)
    widths = {m.ffn_width(li) for m in pruned_models for li in range(cfg.n_layers)}
    if len(widths) != 1:
        raise DimensionError("expert widths differ: %s" % sorted(widths))

    params = {}
    for name in _trunk_names(first.params):
        params[name] = _tensor_copy(name, first.params[name].data)
    for li in range(cfg.n_layers):
        params["layers.%d.moe.router" % li] = _init_router(router_seed, li, n, cfg.d_model)
        for e, m in enumerate(pruned_models):
            src = "layers.%d.ffn." % li
            dst = "layers.%d.moe.experts.%d." % (li, e)
            for part in ("gate", "up", "down"):
                params[dst + part] = _tensor_copy(dst + part, m.params[src + part].data)
            bias = m.params.get(src + "bias")
            bdata = bias.data.copy() if bias is not None else np.zeros(cfg.d_model, dtype=np.float32)
            params[dst + "bias"] = T.Tensor(bdata, requires_grad=True, name=dst + "bias")

    meta = {
        "experts_kept": [m.meta.get("kept_channels") for m in pruned_models],
        "expert_sources": list(expert_sources) if expert_sources else None,
        "router_seed": int(router_seed),
    }
    return MoeModel(cfg, params, meta=meta)


def random_split_baseline(model, n, expert_fraction, seed) -> MoeModel:
    """Experts from random equal-size channel subsets covering every channel.

    Subsets may overlap; no bias compensation is applied (B0 = 0). Routers
    are initialized exactly as in reconstruct_moe.
    """
    if n < 1:
        raise ParameterError("need at least one expert, got %d" % n)
    cfg = model.config
    rng = CounterRng(seed)
    params = {}
    for name in _trunk_names(model.params):
        params[name] = _tensor_copy(name, model.params[name].data)
    experts_kept = [[] for _ in range(n)]
    for li in range(cfg.n_layers):
        d_ff = model.ffn_width(li)
        size = int(np.floor(expert_fraction * d_ff + 0.5))
        if size < 1:
            raise ParameterError("expert_fraction %g keeps no channels of %d" % (expert_fraction, d_ff))
        if n * size < d_ff:
            raise ParameterError(
                "%d experts of %d channels cannot cover %d channels" % (n, size, d_ff)
            )
        sub = rng.substream("split/layer%d" % li)
        perm = sub.permutation(d_ff)
        subsets = [list(perm[j::n]) for j in range(n)]
        for j in range(n):
            need = size - len(subsets[j])
            if need > 0:
                pool = np.setdiff1d(np.arange(d_ff), np.asarray(subsets[j], dtype=np.int64))
                pick = sub.permutation(pool.size)[:need]
                subsets[j].extend(pool[pick].tolist())
            elif need < 0:
                raise ParameterError(
                    "%d experts of %d channels cannot hold a round-robin share of %d"
                    % (n, size, d_ff)
                )
        params["layers.%d.moe.router" % li] = _init_router(seed, li, n, cfg.d_model)
        src = "layers.%d.ffn." % li
        gate = model.params[src + "gate"].data
        up = model.params[src + "up"].data
        down = model.params[src + "down"].data
        for e in range(n):
            kept = np.sort(np.asarray(subsets[e], dtype=np.int64))
            experts_kept[e].append(kept.tolist())
            dst = "layers.%d.moe.experts.%d." % (li, e)
            params[dst + "gate"] = _tensor_copy(dst + "gate", np.ascontiguousarray(gate[kept]))
            params[dst + "up"] = _tensor_copy(dst + "up", np.ascontiguousarray(up[kept]))
            params[dst + "down"] = _tensor_copy(dst + "down", np.ascontiguousarray(down[:, kept]))
            params[dst + "bias"] = T.Tensor(
                np.zeros(cfg.d_model, dtype=np.float32), requires_grad=True, name=dst + "bias"
            )
    meta = {"baseline": "random-split", "experts_kept": experts_kept, "router_seed": int(seed)}
    return MoeModel(cfg, params, meta=meta)
