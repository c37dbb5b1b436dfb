"""Small Llama-style decoder: dense model, trainer, perplexity evaluator.

Layout per layer: pre-norm attention with rotary positions, then a pre-norm
SwiGLU FFN, both with residual adds. All positionwise work runs on flattened
[batch*seq, d_model] tensors; only attention reshapes to per-head rank-3.
The attention/norm/residual blocks are shared with the MoE model (moe.py)
so a degenerate mixture reproduces this model's op sequence exactly.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import kernels, tensor as T
from .corpus import tokenize
from .errors import CapacityError, DimensionError, NumericError, ParameterError
from .optim import AdamW
from .rng import CounterRng


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 344
    vocab: int = 256
    max_seq_len: int = 256
    rms_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        for field in ("d_model", "n_layers", "n_heads", "d_ff", "vocab", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ParameterError("%s must be positive" % field)
        if self.d_model % self.n_heads != 0:
            raise ParameterError("d_model %d not divisible by n_heads %d" % (self.d_model, self.n_heads))
        if self.d_ff < 8:
            raise ParameterError("d_ff must be >= 8 so 75%% pruning keeps >= 2 channels, got %d" % self.d_ff)
        if self.rms_eps < 0 or self.init_std <= 0:
            raise ParameterError("rms_eps >= 0 and init_std > 0 required")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class EvalReport:
    perplexity: float
    token_count: int
    mean_nll: float

    def __post_init__(self):
        if not math.isfinite(self.mean_nll):
            raise NumericError("mean NLL is not finite")
        if abs(self.perplexity - math.exp(self.mean_nll)) > 1e-6 * max(1.0, self.perplexity):
            raise NumericError("perplexity != exp(mean NLL)")


def rope_tables(max_seq_len, head_dim, base=10000.0):
    """Float32 cos/sin tables [max_seq_len, head_dim/2], computed in float64."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(max_seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def init_dense_params(config: ModelConfig, seed: int) -> dict:
    """Canonical parameter tree; matrices Gaussian(0, init_std), norm gains 1.

    Each parameter draws from its own tagged substream, so adding or removing
    a parameter does not shift any other parameter's values.
    """
    rng = CounterRng(seed)
    std = config.init_std
    params = {}

    def mat(name, shape):
        params[name] = T.Tensor(rng.substream(name).normal(shape, std), requires_grad=True, name=name)

    def gain(name, dim):
        params[name] = T.Tensor(np.ones(dim, dtype=np.float32), requires_grad=True, name=name)

    mat("embed.weight", (config.vocab, config.d_model))
    for li in range(config.n_layers):
        pre = "layers.%d." % li
        gain(pre + "attn_norm.g", config.d_model)
        for w in ("wq", "wk", "wv", "wo"):
            mat(pre + "attn." + w, (config.d_model, config.d_model))
        gain(pre + "ffn_norm.g", config.d_model)
        mat(pre + "ffn.gate", (config.d_ff, config.d_model))
        mat(pre + "ffn.up", (config.d_ff, config.d_model))
        mat(pre + "ffn.down", (config.d_model, config.d_ff))
    gain("final_norm.g", config.d_model)
    mat("lm_head.weight", (config.vocab, config.d_model))
    return params


def attention_block(get, prefix, x, batch, seq, config, cos, sin):
    """Pre-norm causal MHA with rotary positions; returns x + attn_out.

    `get` maps parameter name -> Tensor; shared verbatim between the dense
    and MoE forward passes.
    """
    heads = config.n_heads
    dh = config.head_dim
    h = T.rms_norm(x, get(prefix + "attn_norm.g"), config.rms_eps)
    q = T.split_heads(T.linear(h, get(prefix + "attn.wq")), batch, heads)
    k = T.split_heads(T.linear(h, get(prefix + "attn.wk")), batch, heads)
    v = T.split_heads(T.linear(h, get(prefix + "attn.wv")), batch, heads)
    q = T.rope(q, cos[:seq], sin[:seq])
    k = T.rope(k, cos[:seq], sin[:seq])
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(dh))
    attn = T.causal_softmax(scores)
    ctx = T.merge_heads(T.matmul(attn, v), batch)
    return T.add(x, T.linear(ctx, get(prefix + "attn.wo")))


def ffn_from_params(h, gate, up, down, bias=None):
    """SwiGLU feed-forward: down(swish(gate h) * (up h)) [+ bias]."""
    a = T.mul(T.swish(T.linear(h, gate)), T.linear(h, up))
    y = T.linear(a, down)
    if bias is not None:
        y = T.add_bias(y, bias)
    return y


class DenseModel:
    """Dense decoder; may carry pruned (narrow) FFNs with compensation biases."""

    def __init__(self, config: ModelConfig, params: dict, meta=None):
        self.config = config
        self.params = params
        self.meta = dict(meta or {})
        self.cos, self.sin = rope_tables(config.max_seq_len, config.head_dim)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "DenseModel":
        return cls(config, init_dense_params(config, seed))

    # FFN params per layer = 3 * d_model * d_ff (uniform unpruned model)
    def ffn_param_count(self, layer=0):
        pre = "layers.%d.ffn." % layer
        return sum(self.params[pre + n].size for n in ("gate", "up", "down"))

    def parameters(self) -> dict:
        return self.params

    def ffn_width(self, layer) -> int:
        return self.params["layers.%d.ffn.gate" % layer].shape[0]

    def _get(self, name):
        return self.params[name]

    def ffn_forward(self, h, layer):
        """FFN of one layer on pre-normalized input h [N, d_model]."""
        pre = "layers.%d.ffn." % layer
        bias = self.params.get(pre + "bias")
        return ffn_from_params(h, self._get(pre + "gate"), self._get(pre + "up"), self._get(pre + "down"), bias)

    def forward(self, ids) -> T.Tensor:
        """Logits [batch*seq, vocab] for token ids [batch, seq]."""
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
            x = T.add(x, self.ffn_forward(h, li))
        h = T.rms_norm(x, self._get("final_norm.g"), self.config.rms_eps)
        return T.linear(h, self._get("lm_head.weight"))

    def logits(self, ids) -> np.ndarray:
        """[batch, seq, vocab] numpy logits without graph construction."""
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        with T.no_grad():
            out = self.forward(ids)
        return out.data.reshape(ids.shape[0], ids.shape[1], self.config.vocab)

    def loss_on_batch(self, ids) -> T.Tensor:
        """Mean next-token NLL: forward on ids[:, :-1], predict ids[:, 1:]."""
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if ids.shape[1] < 2:
            raise ParameterError("need at least 2 tokens per row to form a prediction")
        logits = self.forward(ids[:, :-1])
        return T.cross_entropy_mean(logits, ids[:, 1:].reshape(-1))


@dataclasses.dataclass(frozen=True)
class DenseTrainConfig:
    steps: int
    batch_size: int = 8
    seq_len: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.batch_size <= 0 or self.seq_len < 2:
            raise ParameterError("batch_size > 0 and seq_len >= 2 required")


def sample_train_batch(streams, rng: CounterRng, batch_size, seq_len):
    """One [batch, seq_len+1] window batch, rows drawn uniformly over streams."""
    m = len(streams)
    doms = rng.integers(0, m, (batch_size,))
    rows = np.empty((batch_size, seq_len + 1), dtype=np.int64)
    for i in range(batch_size):
        arr = streams[int(doms[i])]
        off = int(rng.integers(0, len(arr) - seq_len, (1,))[0])
        rows[i] = arr[off : off + seq_len + 1]
    return rows


def train_dense(model: DenseModel, specs, train_cfg: DenseTrainConfig, seed=0, ckpt_path=None):
    """Train on a uniform mixture of the specs' train streams.

    Returns the per-step loss trace. On a numeric failure the parameters are
    rolled back to the last completed step, that state is checkpointed (when
    a path is given), and the numeric error is re-raised.
    """
    trace = []
    if train_cfg.steps == 0:
        if ckpt_path is not None:
            _save(model, ckpt_path)
        return trace

    from .corpus import generate_domain_bytes

    streams = [
        tokenize(generate_domain_bytes(sp.domain, sp.seed, sp.train_bytes, "train")) for sp in specs
    ]
    for arr in streams:
        if len(arr) <= train_cfg.seq_len:
            raise ParameterError("train stream shorter than seq_len + 1")
    rng = CounterRng(seed).substream("dense-train-batches")
    opt = AdamW(
        model.parameters(),
        lr=train_cfg.lr,
        betas=train_cfg.betas,
        weight_decay=train_cfg.weight_decay,
    )
    snapshot = {k: p.data.copy() for k, p in model.parameters().items()}
    try:
        for _ in range(train_cfg.steps):
            ids = sample_train_batch(streams, rng, train_cfg.batch_size, train_cfg.seq_len)
            loss = model.loss_on_batch(ids)
            loss.backward()
            opt.step()
            trace.append(loss.item())
            for k, p in model.parameters().items():
                np.copyto(snapshot[k], p.data)
    except NumericError:
        for k, p in model.parameters().items():
            np.copyto(p.data, snapshot[k])
        if ckpt_path is not None:
            _save(model, ckpt_path)
        raise
    if ckpt_path is not None:
        _save(model, ckpt_path)
    return trace


def _save(model, path):
    from . import checkpoint  # deferred: checkpoint module depends on model

    checkpoint.save_checkpoint(model, path)


def eval_perplexity(model, stream: bytes, seq_len: int) -> EvalReport:
    """PPL over non-overlapping windows of seq_len bytes (remainder dropped).

    Within each window the first token is context only; the remaining
    seq_len - 1 tokens are predicted. Accepts any model exposing forward()
    over [batch, seq] ids (dense or MoE).
    """
    if not stream:
        raise ParameterError("eval stream is empty")
    if seq_len < 2:
        raise ParameterError("seq_len must be >= 2")
    arr = tokenize(stream)
    n_windows = len(arr) // seq_len
    if n_windows == 0:
        raise ParameterError("stream shorter than one window of %d bytes" % seq_len)
    windows = arr[: n_windows * seq_len].reshape(n_windows, seq_len)
    total_nll = 0.0
    count = 0
    chunk = 32
    with T.no_grad():
        for lo in range(0, n_windows, chunk):
            ids = windows[lo : lo + chunk]
            logits = model.forward(ids[:, :-1])
            targets = np.ascontiguousarray(ids[:, 1:].reshape(-1))
            _, total = kernels.cross_entropy_fwd(logits.data, targets)
            total_nll += float(total)
            count += targets.size
    mean_nll = total_nll / count
    return EvalReport(perplexity=math.exp(mean_nll), token_count=count, mean_nll=mean_nll)
