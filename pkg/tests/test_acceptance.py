"""Release gates: exact property suites plus directional desk-scale runs.

Tests 01-06, 11, 12 are deterministic property checks at pinned tolerances.
Tests 07-10 share one desk-scale session fixture: per seed it trains a
d_model=128, 4-layer dense model on six byte domains, mines the calibration
affinity matrix, and retrains three MoE arms under identical budgets
(affinity-clustered experts, random channel splits, mixed-calibration
experts). Expect roughly fifteen minutes for the fixture on one core.
"""

import time

import numpy as np
import pytest
import scipy.stats

import battery
from divemoe import tensor as T
from divemoe.affinity import (
    build_cluster_calibrations,
    build_ppl_matrix,
    hierarchical_cluster,
    normalize_ppl,
    pearson_corr,
)
from divemoe.analysis import routing_distribution
from divemoe.checkpoint import load_checkpoint, save_checkpoint
from divemoe.corpus import (
    DOMAINS,
    CorpusSpec,
    TokenBatch,
    generate_domain_bytes,
    mix_cluster_calibration,
)
from divemoe.errors import ParameterError
from divemoe.model import (
    DenseModel,
    DenseTrainConfig,
    ModelConfig,
    eval_perplexity,
    train_dense,
)
from divemoe.moe import dense_gate, random_split_baseline, reconstruct_moe, sparse_gate
from divemoe.pruner import (
    FluctuationStats,
    PruneMask,
    apply_prune,
    collect_fluctuation_stats,
    prune_model,
)
from divemoe.retrain import (
    TrainPlan,
    attach_lora,
    merge_lora,
    stage1_train_routers,
    stage2_train_sparse,
    stage1_ledger,
    stage2_ledger,
)

TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=12, vocab=256, max_seq_len=64)

DESK = ModelConfig(d_model=128, n_layers=4, n_heads=4, d_ff=344, vocab=256, max_seq_len=64)
DOMAIN_NAMES = sorted(DOMAINS)
SEEDS = (0, 1, 2)
PRUNE_RATIO = 0.75
N_EXPERTS = len(DOMAIN_NAMES)
TRAIN_BYTES = 1 << 19
EVAL_BYTES = 1 << 14
CALIB_SAMPLES = 64
SAMPLE_LEN = 64
DENSE_TRAIN = DenseTrainConfig(steps=1200, batch_size=8, seq_len=64, lr=1e-3)
STAGE1 = TrainPlan(stage="dense_router", tokens=131072, batch_size=8, seq_len=64,
                   lr=1e-4, temperature=0.05)
STAGE2 = TrainPlan(stage="sparse_expert", tokens=163840, batch_size=8, seq_len=64,
                   lr=1e-4, final_lr=1e-5, warmup_ratio=0.03, top_k=1)


def _specs(seed):
    return [
        CorpusSpec(domain=d, seed=seed, train_bytes=TRAIN_BYTES, eval_bytes=EVAL_BYTES,
                   calibration_samples=CALIB_SAMPLES, sample_len=SAMPLE_LEN)
        for d in DOMAIN_NAMES
    ]


def _sparse1(moe):
    moe.meta["default_mode"] = ("sparse", 1)
    moe.default_mode = ("sparse", 1)
    return moe


def _retrain_arm(moe, specs, seed, mixed):
    """Identical two-stage budget for every arm; returns held-out mixed PPL."""
    stage1_train_routers(moe, specs, STAGE1, seed=seed)
    moe = attach_lora(moe, rank=8, alpha=16.0, dropout=0.1, seed=seed)
    stage2_train_sparse(moe, specs, STAGE2, seed=seed)
    return eval_perplexity(moe, mixed, SAMPLE_LEN).perplexity


@pytest.fixture(scope="session")
def desk():
    out = {"diag_hits": [], "mining_seconds": 0.0, "match_ratio": None, "ppl": []}
    for seed in SEEDS:
        specs = _specs(seed)
        t0 = time.time()
        dense = DenseModel.init(DESK, seed=seed)
        train_dense(dense, specs, DENSE_TRAIN, seed=seed)
        matrix = build_ppl_matrix(dense, specs, PRUNE_RATIO)
        out["mining_seconds"] += time.time() - t0
        hits = sum(int(np.argmax(matrix.norm_ppl[:, j]) == j) for j in range(len(specs)))
        out["diag_hits"].append(hits)

        streams = [generate_domain_bytes(d, seed, EVAL_BYTES, "eval") for d in DOMAIN_NAMES]
        unit = min(len(s) for s in streams)
        mixed = b"".join(s[:unit] for s in streams)

        assign = hierarchical_cluster(matrix.norm_ppl, N_EXPERTS)
        calibs = build_cluster_calibrations(assign, specs, budget=CALIB_SAMPLES, seed=seed)
        dive = _sparse1(reconstruct_moe(
            [prune_model(dense, c, PRUNE_RATIO) for c in calibs], router_seed=seed))
        stage1_train_routers(dive, specs, STAGE1, seed=seed)
        if seed == SEEDS[0]:
            stats = routing_distribution(
                dive, dict(zip(DOMAIN_NAMES, streams)), k=1, seq_len=SAMPLE_LEN)
            out["match_ratio"] = {
                d: float(stats.ratios[d][i]) for i, d in enumerate(DOMAIN_NAMES)
            }
        dive = attach_lora(dive, rank=8, alpha=16.0, dropout=0.1, seed=seed)
        stage2_train_sparse(dive, specs, STAGE2, seed=seed)
        row = {"dive": eval_perplexity(dive, mixed, SAMPLE_LEN).perplexity}
        del dive

        rand = _sparse1(random_split_baseline(dense, N_EXPERTS, 1.0 - PRUNE_RATIO, seed))
        row["rand"] = _retrain_arm(rand, specs, seed, mixed)
        del rand

        nodam = _sparse1(reconstruct_moe(
            [prune_model(dense,
                         mix_cluster_calibration(specs, CALIB_SAMPLES, SAMPLE_LEN,
                                                 seed + 7919 * (e + 1)),
                         PRUNE_RATIO)
             for e in range(N_EXPERTS)], router_seed=seed))
        row["nodam"] = _retrain_arm(nodam, specs, seed, mixed)
        del nodam
        out["ppl"].append(row)
    return out


def test_01_gradients_all_ops_and_full_model():
    """Every op and the whole dense loss vs central differences, 20 seeds."""
    t0 = time.time()
    worst = 0.0
    for seed in range(20):
        worst = max(worst, max(battery.run_op_battery(seed).values()))
        worst = max(worst, battery.check_model(seed))
    elapsed = time.time() - t0
    assert worst < 1e-3, "max relative gradient error %.3e" % worst
    assert elapsed < 60.0, "gradient battery took %.1fs" % elapsed


def test_02_bias_compensation_identity():
    """Input whose dropped-channel activations equal the recorded means
    passes through the pruned FFN unchanged; 100 random layers and masks."""
    rng = np.random.default_rng(1002)
    for trial in range(100):
        d_model = 2 * int(rng.integers(2, 7))
        d_ff = int(rng.integers(8, 25))
        cfg = ModelConfig(d_model=d_model, n_layers=1, n_heads=1, d_ff=d_ff,
                          vocab=32, max_seq_len=8)
        model = DenseModel.init(cfg, seed=int(rng.integers(1 << 31)))
        h = rng.normal(0.0, 1.0, (1, d_model)).astype(np.float32)
        gate = model.params["layers.0.ffn.gate"].data
        up = model.params["layers.0.ffn.up"].data
        with T.no_grad():
            act = T.swish(T.Tensor(np.ascontiguousarray(h @ gate.T))).data * (h @ up.T)
        keep = rng.choice(d_ff, size=int(rng.integers(1, d_ff)), replace=False)
        mask = np.zeros(d_ff, dtype=bool)
        mask[keep] = True
        stats = FluctuationStats(
            channel_mean=[act[0].astype(np.float64)],
            channel_var=[np.abs(rng.normal(0.0, 1.0, d_ff))],
            token_count=7,
        )
        pruned = apply_prune(
            model,
            PruneMask(masks=[mask], keep_count=int(mask.sum()),
                      ratio=1.0 - mask.sum() / d_ff),
            stats,
        )
        with T.no_grad():
            dense_out = model.ffn_forward(T.Tensor(h), 0).data
            pruned_out = pruned.ffn_forward(T.Tensor(h), 0).data
        diff = float(np.max(np.abs(dense_out - pruned_out)))
        assert diff < 1e-5, "trial %d: |dense - pruned| = %.3e" % (trial, diff)


def test_03_degenerate_moe_equivalence():
    rng = np.random.default_rng(1003)
    dense = DenseModel.init(TINY, seed=4)
    calib = TokenBatch(tokens=rng.integers(0, 256, (8, 32)), tags=["x"] * 8)
    ids = rng.integers(0, 256, (3, 24))

    # keep-all mask: the only way to build an unpruned twin, since ratio
    # selection requires (0, 1)
    stats = collect_fluctuation_stats(dense, calib)
    all_keep = PruneMask(masks=[np.ones(TINY.d_ff, dtype=bool)] * TINY.n_layers,
                         keep_count=TINY.d_ff, ratio=0.0)
    unpruned = apply_prune(dense, all_keep, stats)
    moe = reconstruct_moe([unpruned] * 4, router_seed=5)
    with T.no_grad():
        got = moe.logits(ids, mode=("sparse", 4))
        want = dense.logits(ids)
    assert float(np.max(np.abs(got - want))) < 1e-4

    pruned = prune_model(dense, calib, 0.5)
    solo = reconstruct_moe([pruned], router_seed=6)
    with T.no_grad():
        got = solo.logits(ids, mode=("sparse", 1))
        want = pruned.logits(ids)
    assert np.array_equal(got, want), "single-expert top-1 must be bit-exact"


def test_04_gating_laws():
    rng = np.random.default_rng(1004)
    for trial in range(200):
        n = int(rng.integers(2, 9))
        z = rng.normal(0.0, 2.0, n)
        # a top-2 gap below ~t*log(1/tol) makes the t->0 limit claim vacuous
        while float(np.min(np.diff(np.sort(z)))) < 0.01:
            z = rng.normal(0.0, 2.0, n)
        for k in range(1, n + 1):
            g = sparse_gate(z, k)
            assert np.all(g.weights >= 0.0)
            assert abs(float(g.weights.sum()) - 1.0) <= 1e-6
            assert int(np.count_nonzero(g.weights)) == k
        sharp = dense_gate(z, 1e-4)
        top1 = sparse_gate(z, 1)
        assert float(np.max(np.abs(sharp.weights - top1.weights))) < 1e-3
        for gate in (lambda v: sparse_gate(v, max(1, n // 2)).weights,
                     lambda v: dense_gate(v, 0.7).weights):
            drift = float(np.max(np.abs(gate(z + 11.25) - gate(z))))
            assert drift <= 1e-6, "gate must ignore a logit shift"


def test_05_normalization_and_correlation_oracles():
    rng = np.random.default_rng(1005)
    for _ in range(50):
        raw = np.exp(rng.normal(1.0, 1.0, (int(rng.integers(2, 9)), int(rng.integers(2, 9)))))
        got = normalize_ppl(raw)
        want = np.empty_like(raw)
        for i in range(raw.shape[0]):
            for j in range(raw.shape[1]):
                want[i, j] = raw[:, j].min() / raw[i, j]
        assert float(np.max(np.abs(got - want) / np.abs(want))) < 1e-9
    for trial in range(1000):
        n = int(rng.integers(3, 40))
        a, b = rng.normal(0.0, 3.0, n), rng.normal(0.0, 3.0, n)
        got = pearson_corr(a, b)
        want = scipy.stats.pearsonr(a, b).statistic
        assert abs(got - want) < 1e-6, "pair %d: %r vs %r" % (trial, got, want)


def test_06_random_split_coverage_laws():
    dense = DenseModel.init(TINY, seed=0)
    want_size = int(np.floor(0.5 * TINY.d_ff + 0.5))
    for seed in range(100):
        moe = random_split_baseline(dense, 3, 0.5, seed)
        for li in range(TINY.n_layers):
            union = set()
            for e in range(3):
                kept = moe.meta["experts_kept"][e][li]
                assert len(kept) == want_size
                union.update(kept)
            assert union == set(range(TINY.d_ff)), "seed %d layer %d" % (seed, li)
    with pytest.raises(ParameterError):
        random_split_baseline(dense, 2, 0.25, 0)  # 2 x 3 cannot cover 12
    with pytest.raises(ParameterError):
        random_split_baseline(dense, 3, 0.01, 0)  # empty experts


def test_07_per_domain_pruning_diversity(desk):
    """Column argmax of the normalized-PPL matrix sits on the matching
    calibration domain for at least 80 percent of columns, 2 of 3 seeds."""
    need = int(np.ceil(0.8 * len(DOMAIN_NAMES)))
    good = sum(int(h >= need) for h in desk["diag_hits"])
    assert good >= 2, "diagonal hits per seed: %s" % desk["diag_hits"]
    assert desk["mining_seconds"] < 1800.0, "mining took %.0fs" % desk["mining_seconds"]


def test_08_router_specialization_after_stage1(desk):
    floor = 1.5 / N_EXPERTS
    ok = sum(int(r >= floor) for r in desk["match_ratio"].values())
    assert ok > len(DOMAIN_NAMES) // 2, "matching-expert ratios: %s" % desk["match_ratio"]


def test_09_affinity_experts_beat_random_split(desk):
    wins = sum(int(row["dive"] <= row["rand"]) for row in desk["ppl"])
    assert wins >= 2, "mixed-eval PPLs: %s" % desk["ppl"]


def test_10_removing_affinity_mining_does_not_help(desk):
    holds = sum(int(row["nodam"] >= row["dive"]) for row in desk["ppl"])
    assert holds >= 2, "mixed-eval PPLs: %s" % desk["ppl"]


def _tiny_moe(seed):
    rng = np.random.default_rng(seed)
    dense = DenseModel.init(TINY, seed=seed)
    calib = TokenBatch(tokens=rng.integers(0, 256, (8, 32)), tags=["x"] * 8)
    pruned = prune_model(dense, calib, 0.5)
    moe = reconstruct_moe([pruned, pruned], router_seed=seed + 7)
    # distinct experts, otherwise the router gradient is exactly zero
    noise = np.random.default_rng(seed + 99)
    for name, p in moe.parameters().items():
        if ".moe.experts." in name:
            p.data += noise.normal(0.0, 0.02, p.data.shape).astype(np.float32)
    return _sparse1(moe)


def test_11_freeze_ledger_and_lora_laws():
    specs = [CorpusSpec(domain="prose", seed=0, train_bytes=16384, eval_bytes=2048,
                        calibration_samples=4, sample_len=32),
             CorpusSpec(domain="arith", seed=0, train_bytes=16384, eval_bytes=2048,
                        calibration_samples=4, sample_len=32)]
    moe = _tiny_moe(0)
    ids = np.random.default_rng(5).integers(0, 256, (2, 16))

    plan1 = TrainPlan(stage="dense_router", tokens=1024, batch_size=4, seq_len=32,
                      lr=1e-3, temperature=0.05)
    frozen1 = {n: moe.params[n].data.tobytes() for n in stage1_ledger(moe).frozen}
    stage1_train_routers(moe, specs, plan1, seed=0)
    for name, blob in frozen1.items():
        assert moe.params[name].data.tobytes() == blob, name

    with T.no_grad():
        before = moe.logits(ids)
    moe = attach_lora(moe, rank=2, alpha=4.0, dropout=0.1, seed=0)
    with T.no_grad():
        assert np.array_equal(moe.logits(ids), before), "attach must be a no-op"

    plan2 = TrainPlan(stage="sparse_expert", tokens=2048, batch_size=4, seq_len=32,
                      lr=1e-3, top_k=1)
    frozen2 = {n: moe.params[n].data.tobytes() for n in stage2_ledger(moe).frozen}
    stage2_train_sparse(moe, specs, plan2, seed=0)
    for name, blob in frozen2.items():
        assert moe.params[name].data.tobytes() == blob, name

    with T.no_grad():
        adapted = moe.logits(ids)
    merged = merge_lora(moe)
    with T.no_grad():
        diff = float(np.max(np.abs(merged.logits(ids) - adapted)))
    assert diff < 1e-5, "merge drifted %.3e from the adapted forward" % diff


def test_12_determinism_and_canonical_persistence(tmp_path):
    specs = [CorpusSpec(domain="prose", seed=0, train_bytes=16384, eval_bytes=2048,
                        calibration_samples=4, sample_len=32),
             CorpusSpec(domain="arith", seed=0, train_bytes=16384, eval_bytes=2048,
                        calibration_samples=4, sample_len=32)]
    plan1 = TrainPlan(stage="dense_router", tokens=1024, batch_size=4, seq_len=32,
                      lr=1e-3, temperature=0.05)
    plan2 = TrainPlan(stage="sparse_expert", tokens=2048, batch_size=4, seq_len=32,
                      lr=1e-3, top_k=1)

    blobs = []
    for run in range(2):
        dense = DenseModel.init(TINY, seed=1)
        train_dense(dense, specs, DenseTrainConfig(steps=6, batch_size=4, seq_len=32), seed=1)
        moe = _tiny_moe(1)
        stage1_train_routers(moe, specs, plan1, seed=1)
        moe = attach_lora(moe, rank=2, alpha=4.0, dropout=0.1, seed=1)
        stage2_train_sparse(moe, specs, plan2, seed=1)
        dpath = tmp_path / ("dense%d.ckpt" % run)
        mpath = tmp_path / ("moe%d.ckpt" % run)
        save_checkpoint(dense, str(dpath))
        save_checkpoint(moe, str(mpath))
        blobs.append((dpath.read_bytes(), mpath.read_bytes()))
    assert blobs[0][0] == blobs[1][0], "dense runs diverged"
    assert blobs[0][1] == blobs[1][1], "MoE runs diverged"

    # canonical form: one save-load-save cycle reaches a byte fixed point
    reloaded = load_checkpoint(str(tmp_path / "moe0.ckpt"))
    again = tmp_path / "moe_again.ckpt"
    save_checkpoint(reloaded, str(again))
    assert again.read_bytes() == blobs[0][1]
