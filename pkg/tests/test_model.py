"""Dense model tests: config contracts, causality, oracle agreement, training."""

import math

import numpy as np
import pytest

import battery
import oracles
from divemoe import tensor as T
from divemoe.corpus import CorpusSpec, generate_domain_bytes
from divemoe.errors import CapacityError, NumericError, ParameterError
from divemoe.model import (
    DenseModel,
    DenseTrainConfig,
    EvalReport,
    ModelConfig,
    eval_perplexity,
    rope_tables,
    train_dense,
)

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=12, vocab=23, max_seq_len=32)


def test_config_invariants():
    with pytest.raises(ParameterError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ParameterError):
        ModelConfig(d_ff=4)
    with pytest.raises(ParameterError):
        ModelConfig(n_layers=0)
    with pytest.raises(ParameterError):
        ModelConfig(rms_eps=-1e-6)
    assert ModelConfig().head_dim == 32


def test_ffn_param_count_formula():
    cfg = ModelConfig()
    model = DenseModel.init(cfg, seed=0)
    assert model.ffn_param_count(0) == 3 * cfg.d_model * cfg.d_ff


def test_init_loss_near_uniform():
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=24)
    model = DenseModel.init(cfg, seed=3)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 256, size=(4, 48))
    loss = model.loss_on_batch(ids).item()
    assert abs(loss - math.log(256)) < 0.5


def test_zero_head_gives_vocab_perplexity():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=8)
    model = DenseModel.init(cfg, seed=1)
    model.params["lm_head.weight"].data[:] = 0.0
    stream = generate_domain_bytes("prose", 5, 4096, "eval")
    report = eval_perplexity(model, stream, seq_len=64)
    assert abs(report.perplexity - 256.0) < 0.5
    assert report.token_count == (4096 // 64) * 63


def test_causality_exact():
    model = DenseModel.init(TINY, seed=7)
    rng = np.random.default_rng(11)
    a = rng.integers(0, TINY.vocab, size=(2, 10))
    b = a.copy()
    b[:, -1] = (b[:, -1] + 1) % TINY.vocab
    la = model.logits(a)
    lb = model.logits(b)
    assert np.array_equal(la[:, :-1, :], lb[:, :-1, :])
    assert not np.array_equal(la[:, -1, :], lb[:, -1, :])


def test_sequence_capacity():
    model = DenseModel.init(TINY, seed=0)
    ids = np.zeros((1, TINY.max_seq_len + 1), dtype=np.int64)
    with pytest.raises(CapacityError):
        model.forward(ids)


def test_logits_match_reference():
    model = DenseModel.init(TINY, seed=5)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, TINY.vocab, size=(2, 9))
    got = model.logits(ids)
    arrays = {k: p.data for k, p in model.parameters().items()}
    want = oracles.ref_dense_logits(arrays, TINY.to_dict(), ids)
    assert np.max(np.abs(got - want)) < 1e-3
    got_loss = model.loss_on_batch(ids).item()
    want_loss = oracles.ref_dense_loss(arrays, TINY.to_dict(), ids)
    assert abs(got_loss - want_loss) < 1e-4


def test_gradient_reaches_every_parameter():
    model = DenseModel.init(TINY, seed=9)
    rng = np.random.default_rng(3)
    ids = rng.integers(0, TINY.vocab, size=(2, 8))
    model.loss_on_batch(ids).backward()
    for name, p in model.parameters().items():
        assert p.grad is not None and np.any(p.grad != 0.0), name


def test_model_gradcheck_three_seeds():
    for seed in range(3):
        assert battery.check_model(seed) < 1e-3


def test_pruned_ffn_forward():
    model = DenseModel.init(TINY, seed=4)
    keep = np.array([0, 2, 5, 7], dtype=np.int64)
    pre = "layers.0.ffn."
    for n in ("gate", "up"):
        t = model.params[pre + n]
        model.params[pre + n] = T.Tensor(
            np.ascontiguousarray(t.data[keep]), requires_grad=True, name=t.name
        )
    down = model.params[pre + "down"]
    model.params[pre + "down"] = T.Tensor(
        np.ascontiguousarray(down.data[:, keep]), requires_grad=True, name=down.name
    )
    model.params[pre + "bias"] = T.Tensor(
        np.full(TINY.d_model, 0.01, dtype=np.float32), requires_grad=True, name=pre + "bias"
    )
    assert model.ffn_width(0) == 4 and model.ffn_width(1) == TINY.d_ff
    ids = np.random.default_rng(5).integers(0, TINY.vocab, size=(1, 6))
    out = model.logits(ids)
    assert np.all(np.isfinite(out))


def test_rope_tables():
    cos, sin = rope_tables(8, 6)
    assert cos.shape == (8, 3) and sin.shape == (8, 3)
    assert np.allclose(cos[0], 1.0) and np.allclose(sin[0], 0.0)
    assert cos.dtype == np.float32


def test_train_deterministic_and_improves():
    cfg = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=32)
    specs = [CorpusSpec("arith", seed=0, train_bytes=16384, eval_bytes=0, calibration_samples=4, sample_len=32)]
    tc = DenseTrainConfig(steps=120, batch_size=8, seq_len=32, lr=3e-3)

    m1 = DenseModel.init(cfg, seed=2)
    trace1 = train_dense(m1, specs, tc, seed=0)
    m2 = DenseModel.init(cfg, seed=2)
    trace2 = train_dense(m2, specs, tc, seed=0)

    assert trace1 == trace2
    for k in m1.parameters():
        assert np.array_equal(m1.parameters()[k].data, m2.parameters()[k].data)
    head = sum(trace1[:10]) / 10
    tail = sum(trace1[-10:]) / 10
    assert tail < head - 0.5


def test_train_zero_steps_noop():
    model = DenseModel.init(TINY, seed=1)
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    trace = train_dense(model, [CorpusSpec("prose", 0, 8192, 0, calibration_samples=4, sample_len=32)], DenseTrainConfig(steps=0))
    assert trace == []
    for k, p in model.parameters().items():
        assert np.array_equal(p.data, before[k])


def test_train_numeric_abort_rolls_back():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=8)
    model = DenseModel.init(cfg, seed=0)
    specs = [CorpusSpec("prose", 1, 8192, 0, calibration_samples=4, sample_len=32)]
    tc = DenseTrainConfig(steps=30, batch_size=4, seq_len=16, lr=1e12)
    with pytest.raises(NumericError):
        train_dense(model, specs, tc, seed=0)
    for name, p in model.parameters().items():
        assert np.all(np.isfinite(p.data)), name


def test_eval_perplexity_contracts():
    model = DenseModel.init(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=8), seed=0)
    with pytest.raises(ParameterError):
        eval_perplexity(model, b"", 32)
    with pytest.raises(ParameterError):
        eval_perplexity(model, b"ab", 1)
    stream = generate_domain_bytes("code", 3, 2048, "eval")
    rep = eval_perplexity(model, stream, 64)
    assert rep.perplexity == pytest.approx(math.exp(rep.mean_nll), rel=1e-9)
    assert rep.token_count == (2048 // 64) * 63


def test_eval_report_invariant():
    with pytest.raises(NumericError):
        EvalReport(perplexity=100.0, token_count=10, mean_nll=1.0)
    with pytest.raises(NumericError):
        EvalReport(perplexity=float("nan"), token_count=1, mean_nll=float("nan"))
