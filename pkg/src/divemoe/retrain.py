"""Two-stage MoE retraining with an explicit freeze ledger.

Stage 1 trains only the routers under soft (temperature) gating so every
expert receives signal. Stage 2 trains low-rank adapters on the expert
projections plus all norm gains (routers stay trainable by default, with a
flag to exclude them) under the sparse top-k gate used at inference.

Every run verifies afterwards that frozen parameters are bit-identical to
their pre-run state; a violation aborts with a consistency error.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .corpus import generate_domain_bytes, tokenize
from .errors import ConsistencyError, NumericError, ParameterError, StateError
from .model import sample_train_batch
from .moe import MoeModel
from .optim import AdamW, constant_lr, cosine_warmup_lr
from .rng import CounterRng


@dataclasses.dataclass
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    dropout: float

    @property
    def scale(self):
        return self.alpha / self.rank


@dataclasses.dataclass
class FreezeLedger:
    stage: str
    trainable: set
    frozen: set

    def verify_exhaustive(self, params):
        names = set(params)
        if self.trainable & self.frozen:
            raise ConsistencyError("ledger lists %s as both trainable and frozen" % (self.trainable & self.frozen))
        if self.trainable | self.frozen != names:
            missing = names - (self.trainable | self.frozen)
            extra = (self.trainable | self.frozen) - names
            raise ConsistencyError("ledger not exhaustive (missing %s, extra %s)" % (missing, extra))


@dataclasses.dataclass(frozen=True)
class TrainPlan:
    stage: str  # "dense_router" | "sparse_expert"
    tokens: int
    batch_size: int = 8
    seq_len: int = 64
    lr: float = 1e-4
    temperature: float = 1.0  # stage-1 gate temperature
    top_k: int = 1  # stage-2 gate width
    final_lr: float = 1e-5  # stage-2 cosine floor
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    include_routers: bool = True  # stage-2 only
    include_mha: bool = False  # stage-2 only
    val_every: int = 20

    def __post_init__(self):
        if self.stage not in ("dense_router", "sparse_expert"):
            raise ParameterError("unknown stage %r" % (self.stage,))
        if self.tokens < 0 or self.batch_size <= 0 or self.seq_len < 2:
            raise ParameterError("tokens >= 0, batch_size > 0, seq_len >= 2 required")
        if self.stage == "dense_router" and self.temperature <= 0:
            raise ParameterError("temperature must be positive in stage 1")

    @property
    def tokens_per_step(self):
        return self.batch_size * self.seq_len

    @property
    def steps(self):
        return -(-self.tokens // self.tokens_per_step) if self.tokens else 0


def lora_targets(moe: MoeModel):
    """All three projections of every expert at every layer."""
    names = []
    for li in range(moe.config.n_layers):
        for e in range(moe.n_experts):
            pre = "layers.%d.moe.experts.%d." % (li, e)
            names.extend((pre + "gate", pre + "up", pre + "down"))
    return names


def attach_lora(moe: MoeModel, rank=8, alpha=16.0, dropout=0.1, seed=0, targets=None) -> MoeModel:
    """Add (A, B) pairs with B = 0, so the forward is unchanged at attach time."""
    if rank < 1:
        raise ParameterError("LoRA rank must be >= 1, got %d" % rank)
    if not (0.0 <= dropout < 1.0):
        raise ParameterError("LoRA dropout must lie in [0, 1), got %r" % (dropout,))
    rng = CounterRng(seed)
    for name in targets if targets is not None else lora_targets(moe):
        if name not in moe.params:
            raise ParameterError("no such parameter to adapt: %s" % name)
        if name in moe.adapters:
            raise StateError("adapter already attached to %s" % name)
        w = moe.params[name]
        out_dim, in_dim = w.shape
        a = rng.substream(name + "/a").normal((rank, in_dim), 0.02)
        moe.params[name + ".lora_a"] = T.Tensor(a, requires_grad=True, name=name + ".lora_a")
        moe.params[name + ".lora_b"] = T.Tensor(
            np.zeros((out_dim, rank), dtype=np.float32), requires_grad=True, name=name + ".lora_b"
        )
        moe.adapters[name] = LoraAdapter(target=name, rank=rank, alpha=alpha, dropout=dropout)
    return moe


def merge_lora(moe: MoeModel) -> MoeModel:
    """Fold every adapter delta into its base weight and drop the adapters."""
    if not moe.adapters:
        raise StateError("no adapters attached; merge already done or never attached")
    for name, ad in sorted(moe.adapters.items()):
        a = moe.params.pop(name + ".lora_a").data.astype(np.float64)
        b = moe.params.pop(name + ".lora_b").data.astype(np.float64)
        w = moe.params[name]
        w.data = (w.data.astype(np.float64) + ad.scale * (b @ a)).astype(np.float32)
    moe.adapters = {}
    return moe


def stage1_ledger(moe: MoeModel) -> FreezeLedger:
    trainable = {n for n in moe.params if n.endswith(".moe.router")}
    return FreezeLedger("dense_router", trainable, set(moe.params) - trainable)


def stage2_ledger(moe: MoeModel, include_routers=True, include_mha=False) -> FreezeLedger:
    trainable = set()
    for n in moe.params:
        if n.endswith(".lora_a") or n.endswith(".lora_b"):
            trainable.add(n)
        elif n.endswith("norm.g"):
            trainable.add(n)
        elif include_routers and n.endswith(".moe.router"):
            trainable.add(n)
        elif include_mha and (".attn.w" in n):
            trainable.add(n)
    return FreezeLedger("sparse_expert", trainable, set(moe.params) - trainable)


def trainable_fraction(ledger: FreezeLedger, params) -> float:
    total = sum(p.size for p in params.values())
    live = sum(params[n].size for n in ledger.trainable)
    return live / total


def _gate_mode(plan: TrainPlan):
    if plan.stage == "dense_router":
        return ("dense", plan.temperature)
    return ("sparse", plan.top_k)


def _schedule(plan: TrainPlan, steps):
    if plan.stage == "dense_router":
        return constant_lr(plan.lr)
    return cosine_warmup_lr(plan.lr, plan.final_lr, steps, plan.warmup_ratio)


def _val_batch(specs, plan, seed):
    """One fixed batch from the eval splits, or None when no eval bytes exist."""
    streams = []
    for sp in specs:
        if sp.eval_bytes > plan.seq_len:
            streams.append(tokenize(generate_domain_bytes(sp.domain, sp.seed, sp.eval_bytes, "eval")))
    if not streams:
        return None
    rng = CounterRng(seed).substream("val-batch")
    return sample_train_batch(streams, rng, plan.batch_size, plan.seq_len)


def _run_stage(moe, specs, plan, ledger, seed, ckpt_path):
    ledger.verify_exhaustive(moe.params)
    frozen_before = {n: moe.params[n].data.tobytes() for n in ledger.frozen}
    steps = plan.steps
    trace = []
    if steps > 0:
        streams = [
            tokenize(generate_domain_bytes(sp.domain, sp.seed, sp.train_bytes, "train"))
            for sp in specs
        ]
        for arr in streams:
            if len(arr) <= plan.seq_len:
                raise ParameterError("train stream shorter than seq_len + 1")
        mode = _gate_mode(plan)
        rng = CounterRng(seed).substream("%s-batches" % plan.stage)
        drop_rng = CounterRng(seed).substream("%s-dropout" % plan.stage)
        val_ids = _val_batch(specs, plan, seed)
        lr_of = _schedule(plan, steps)
        opt = AdamW(
            {n: moe.params[n] for n in sorted(ledger.trainable)},
            lr=plan.lr,
            weight_decay=plan.weight_decay,
        )
        train_flag = plan.stage == "sparse_expert"
        snapshot = {n: moe.params[n].data.copy() for n in ledger.trainable}
        try:
            for step in range(1, steps + 1):
                ids = sample_train_batch(streams, rng, plan.batch_size, plan.seq_len)
                loss = moe.loss_on_batch(
                    ids, mode, train=train_flag, dropout_rng=drop_rng.substream("step%d" % step)
                )
                loss.backward()
                opt.step(lr=lr_of(step))
                for p in moe.params.values():
                    p.zero_grad()
                val = None
                if val_ids is not None and (step == 1 or step == steps or step % plan.val_every == 0):
                    with T.no_grad():
                        val = moe.loss_on_batch(val_ids, mode).item()
                trace.append(
                    {
                        "stage": plan.stage,
                        "step": step,
                        "tokens": step * plan.tokens_per_step,
                        "train_loss": loss.item(),
                        "val_loss": val,
                    }
                )
                for n in ledger.trainable:
                    np.copyto(snapshot[n], moe.params[n].data)
        except NumericError:
            for n in ledger.trainable:
                np.copyto(moe.params[n].data, snapshot[n])
            if ckpt_path is not None:
                _save(moe, ckpt_path)
            raise
    for n in ledger.frozen:
        if moe.params[n].data.tobytes() != frozen_before[n]:
            raise ConsistencyError("frozen parameter %s changed during %s" % (n, plan.stage))
    if ckpt_path is not None:
        _save(moe, ckpt_path)
    return trace


def stage1_train_routers(moe: MoeModel, specs, plan: TrainPlan, seed=0, ckpt_path=None):
    """Dense-gate router training; everything but the routers stays frozen."""
    if plan.stage != "dense_router":
        raise ParameterError("stage1 plan must have stage='dense_router'")
    return _run_stage(moe, specs, plan, stage1_ledger(moe), seed, ckpt_path)


def stage2_train_sparse(moe: MoeModel, specs, plan: TrainPlan, seed=0, ckpt_path=None):
    """Sparse top-k training of adapters + norm gains (+ routers by default)."""
    if plan.stage != "sparse_expert":
        raise ParameterError("stage2 plan must have stage='sparse_expert'")
    if plan.tokens > 0 and not moe.adapters:
        raise StateError("attach adapters before sparse training")
    ledger = stage2_ledger(moe, include_routers=plan.include_routers, include_mha=plan.include_mha)
    return _run_stage(moe, specs, plan, ledger, seed, ckpt_path)


def export_trace_csv(trace, path):
    """Rows: stage,step,tokens,train_loss,val_loss (blank when not measured)."""
    lines = ["stage,step,tokens,train_loss,val_loss"]
    for row in trace:
        val = "" if row["val_loss"] is None else "%.9g" % row["val_loss"]
        lines.append(
            "%s,%d,%d,%.9g,%s" % (row["stage"], row["step"], row["tokens"], row["train_loss"], val)
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _save(moe, path):
    from . import checkpoint  # deferred: checkpoint module depends on models

    checkpoint.save_checkpoint(moe, path)


def count_added_lora_params(moe: MoeModel) -> int:
    return sum(
        moe.params[n].size
        for n in moe.params
        if n.endswith(".lora_a") or n.endswith(".lora_b")
    )


def stage_loss_continuity(moe: MoeModel, ids) -> float:
    """|dense-gate(t=1) loss - sparse-gate(k=n) loss| on one batch.

    With zero-initialized adapters the two gates compute the same mixture, so
    this difference is pure float noise; callers assert it is < 1e-5.
    """
    with T.no_grad():
        a = moe.loss_on_batch(ids, ("dense", 1.0)).item()
        b = moe.loss_on_batch(ids, ("sparse", moe.n_experts)).item()
    return abs(a - b)

