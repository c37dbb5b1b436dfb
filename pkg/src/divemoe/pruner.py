"""Fluctuation-based structured pruning of FFN intermediate channels.

A channel's importance is its activation variance times the squared L2 norm
of the down-projection column that consumes it. Dropped channels are folded
into an output bias through their mean activation, so any token whose dropped
activations sit exactly at the mean loses nothing.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .corpus import TokenBatch
from .errors import CapacityError, DimensionError, ParameterError, StatisticsError
from .model import DenseModel, attention_block


@dataclasses.dataclass
class FluctuationStats:
    channel_mean: list  # per layer, float64 [d_ff]
    channel_var: list  # per layer, float64 [d_ff], unbiased
    token_count: int

    def __post_init__(self):
        if self.token_count < 2:
            raise StatisticsError("variance needs at least 2 tokens, got %d" % self.token_count)
        for v in self.channel_var:
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise StatisticsError("channel variance must be finite and nonnegative")


@dataclasses.dataclass
class ChannelScores:
    per_layer: list  # float64 [d_ff] per layer

    def __post_init__(self):
        for s in self.per_layer:
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise StatisticsError("scores must be finite and nonnegative")


@dataclasses.dataclass
class PruneMask:
    masks: list  # per layer, bool [d_ff]; True = keep
    keep_count: int
    ratio: float


def _iter_batches(calibration):
    if isinstance(calibration, TokenBatch):
        return [calibration]
    return list(calibration)


def walk_ffn_activations(model: DenseModel, ids, consume, chunk_rows=None):
    """Forward ids [N, L] without gradients, feeding each layer's FFN
    intermediate activation [rows*L, d_ff] to consume(layer, array).

    Stops after the last FFN; the LM head is never evaluated.
    """
    cfg = model.config
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    n, seq = ids.shape
    if seq > cfg.max_seq_len:
        raise CapacityError("sequence length %d exceeds max_seq_len %d" % (seq, cfg.max_seq_len))
    if chunk_rows is None:
        chunk_rows = max(1, 4096 // seq)
    with T.no_grad():
        for lo in range(0, n, chunk_rows):
            part = ids[lo : lo + chunk_rows]
            batch = part.shape[0]
            x = T.embedding(model._get("embed.weight"), part.reshape(-1))
            for li in range(cfg.n_layers):
                pre = "layers.%d." % li
                x = attention_block(model._get, pre, x, batch, seq, cfg, model.cos, model.sin)
                h = T.rms_norm(x, model._get(pre + "ffn_norm.g"), cfg.rms_eps)
                a = T.mul(
                    T.swish(T.linear(h, model._get(pre + "ffn.gate"))),
                    T.linear(h, model._get(pre + "ffn.up")),
                )
                consume(li, a.data)
                y = T.linear(a, model._get(pre + "ffn.down"))
                bias = model.params.get(pre + "ffn.bias")
                if bias is not None:
                    y = T.add_bias(y, bias)
                x = T.add(x, y)


def collect_fluctuation_stats(model: DenseModel, calibration) -> FluctuationStats:
    """Streaming per-channel mean and unbiased variance of FFN activations.

    Accepts one TokenBatch or a list of them. Chunks are merged with the
    parallel mean/M2 update, accumulating in float64.
    """
    batches = _iter_batches(calibration)
    total = sum(b.tokens.size for b in batches)
    if total < 2:
        raise StatisticsError("calibration must contain at least 2 tokens, got %d" % total)

    n_layers = model.config.n_layers
    counts = [0] * n_layers
    means = [np.zeros(model.ffn_width(li), dtype=np.float64) for li in range(n_layers)]
    m2s = [np.zeros(model.ffn_width(li), dtype=np.float64) for li in range(n_layers)]

    def consume(li, a):
        bn = a.shape[0]
        bm = a.mean(axis=0, dtype=np.float64)
        bm2 = np.sum((a.astype(np.float64) - bm) ** 2, axis=0)
        n = counts[li]
        tot = n + bn
        delta = bm - means[li]
        means[li] += delta * (bn / tot)
        m2s[li] += bm2 + delta * delta * (n * bn / tot)
        counts[li] = tot

    for b in batches:
        walk_ffn_activations(model, b.tokens, consume)

    variances = [np.maximum(m2 / (counts[li] - 1), 0.0) for li, m2 in enumerate(m2s)]
    return FluctuationStats(channel_mean=means, channel_var=variances, token_count=counts[0])


def score_channels(stats: FluctuationStats, model: DenseModel) -> ChannelScores:
    """Importance per channel: variance times squared down-column norm."""
    if len(stats.channel_var) != model.config.n_layers:
        raise DimensionError(
            "stats cover %d layers, model has %d" % (len(stats.channel_var), model.config.n_layers)
        )
    per_layer = []
    for li, var in enumerate(stats.channel_var):
        down = model.params["layers.%d.ffn.down" % li].data
        if down.shape[1] != var.shape[0]:
            raise DimensionError(
                "layer %d: stats width %d != FFN width %d" % (li, var.shape[0], down.shape[1])
            )
        col_sq = np.sum(down.astype(np.float64) ** 2, axis=0)
        per_layer.append(var * col_sq)
    return ChannelScores(per_layer=per_layer)


def select_mask(scores: ChannelScores, ratio: float) -> PruneMask:
    """Keep the round((1-ratio)*d_ff) highest-scoring channels per layer.

    Half rounds up; ties go to the lower channel index.
    """
    if not (0.0 < ratio < 1.0):
        raise ParameterError("pruning ratio must lie in (0,1), got %r" % (ratio,))
    masks = []
    keep_count = None
    for s in scores.per_layer:
        d_ff = s.shape[0]
        kc = int(np.floor((1.0 - ratio) * d_ff + 0.5))
        if kc < 1:
            raise ParameterError("ratio %g keeps no channels of %d" % (ratio, d_ff))
        if keep_count is None:
            keep_count = kc
        elif kc != keep_count:
            raise DimensionError("keep_count differs across layers: %d vs %d" % (keep_count, kc))
        order = np.lexsort((np.arange(d_ff), -s))
        m = np.zeros(d_ff, dtype=bool)
        m[order[:kc]] = True
        masks.append(m)
    return PruneMask(masks=masks, keep_count=keep_count, ratio=ratio)


def apply_prune(model: DenseModel, mask: PruneMask, stats: FluctuationStats) -> DenseModel:
    """Compact kept channels and fold dropped means into an output bias.

    B0 = F_down ((1-M) * mean); non-FFN parameters are copied bit-identically.
    """
    cfg = model.config
    if len(mask.masks) != cfg.n_layers or len(stats.channel_mean) != cfg.n_layers:
        raise DimensionError("mask/stats layer count does not match the model")
    new_params = {}
    kept_per_layer = []
    for name, p in model.params.items():
        if ".ffn." not in name:
            new_params[name] = T.Tensor(p.data.copy(), requires_grad=True, name=name)
    for li in range(cfg.n_layers):
        m = mask.masks[li]
        width = model.ffn_width(li)
        if m.shape[0] != width:
            raise DimensionError("layer %d: mask width %d != FFN width %d" % (li, m.shape[0], width))
        pre = "layers.%d.ffn." % li
        kept = np.flatnonzero(m)
        kept_per_layer.append(kept.tolist())
        gate = model.params[pre + "gate"].data
        up = model.params[pre + "up"].data
        down = model.params[pre + "down"].data
        new_params[pre + "gate"] = T.Tensor(np.ascontiguousarray(gate[kept]), requires_grad=True, name=pre + "gate")
        new_params[pre + "up"] = T.Tensor(np.ascontiguousarray(up[kept]), requires_grad=True, name=pre + "up")
        new_params[pre + "down"] = T.Tensor(np.ascontiguousarray(down[:, kept]), requires_grad=True, name=pre + "down")
        dropped_mean = np.where(m, 0.0, stats.channel_mean[li])
        b0 = down.astype(np.float64) @ dropped_mean
        old_bias = model.params.get(pre + "bias")
        if old_bias is not None:
            b0 = b0 + old_bias.data.astype(np.float64)
        new_params[pre + "bias"] = T.Tensor(b0.astype(np.float32), requires_grad=True, name=pre + "bias")
    meta = dict(model.meta)
    meta["kept_channels"] = kept_per_layer
    meta["prune_ratio"] = mask.ratio
    return DenseModel(cfg, new_params, meta=meta)


def prune_model(model: DenseModel, calibration, ratio: float) -> DenseModel:
    """Stats -> scores -> mask -> compacted model, in one call."""
    stats = collect_fluctuation_stats(model, calibration)
    scores = score_channels(stats, model)
    mask = select_mask(scores, ratio)
    return apply_prune(model, mask, stats)


def export_prune_csv(stats: FluctuationStats, scores: ChannelScores, mask: PruneMask, path):
    """Per-channel report rows: layer,channel,mean,var,score,kept."""
    lines = ["layer,channel,mean,var,score,kept"]
    for li, m in enumerate(mask.masks):
        mean = stats.channel_mean[li]
        var = stats.channel_var[li]
        s = scores.per_layer[li]
        for j in range(m.shape[0]):
            lines.append(
                "%d,%d,%.9g,%.9g,%.9g,%d" % (li, j, mean[j], var[j], s[j], int(m[j]))
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
