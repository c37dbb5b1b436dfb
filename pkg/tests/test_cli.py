"""CLI tests: a full tiny pipeline plus per-subcommand artifact contracts."""

import json
import os

import numpy as np
import pytest

from divemoe.checkpoint import load_checkpoint
from divemoe.cli import main
from divemoe.corpus import read_stream
from divemoe.model import eval_perplexity

CFG = {
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 12,
              "vocab": 256, "max_seq_len": 64},
    "domains": [
        {"name": "prose", "seed": 0, "train_bytes": 16384, "eval_bytes": 4096,
         "calibration_samples": 8, "sample_len": 32},
        {"name": "arith", "seed": 0, "train_bytes": 16384, "eval_bytes": 4096,
         "calibration_samples": 8, "sample_len": 32},
        {"name": "shuffle", "seed": 0, "train_bytes": 16384, "eval_bytes": 4096,
         "calibration_samples": 8, "sample_len": 32},
    ],
    "prune_ratio": 0.5,
    "n_experts": 2,
    "top_k": 1,
    "temperature": 0.05,
    "stage_budgets": {"dense_tokens": 512, "sparse_tokens": 1024,
                      "batch_size": 4, "seq_len": 32},
    "lora": {"rank": 2, "alpha": 4.0, "dropout": 0.1},
    "dense_train": {"steps": 5, "batch_size": 4, "seq_len": 32, "lr": 0.001},
    "eval_seq_len": 32,
    "seed": 0,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full tiny run; tests read its artifacts."""
    root = tmp_path_factory.mktemp("cli_run")
    out = str(root / "run")
    cfg_path = str(root / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump(dict(CFG, out_dir=out), fh)
    for argv in (
        ["gen-corpus", "--config", cfg_path],
        ["train-dense", "--config", cfg_path],
        ["affinity", "--config", cfg_path],
        ["cluster", "--config", cfg_path],
        ["reconstruct", "--config", cfg_path],
        ["train-routers", "--config", cfg_path],
        ["train-sparse", "--config", cfg_path],
    ):
        assert main(argv) == 0, "pipeline stage failed: %s" % argv[0]
    return {"out": out, "cfg": cfg_path}


def test_pipeline_artifacts_exist(pipeline):
    out = pipeline["out"]
    for name in ("corpus/manifest.json", "dense.ckpt", "dense_trace.csv",
                 "affinity.csv", "affinity_norm.csv", "clusters.csv",
                 "moe.init.ckpt", "moe.stage1.ckpt", "moe.stage1_trace.csv",
                 "moe.stage2.ckpt", "moe.stage2_trace.csv", "run_config.json"):
        assert os.path.exists(os.path.join(out, name)), name
    for cmd in ("gen-corpus", "train-dense", "affinity", "cluster",
                "reconstruct", "train-routers", "train-sparse"):
        mpath = os.path.join(out, "manifests", cmd + ".json")
        with open(mpath) as fh:
            doc = json.load(fh)
        assert doc["command"] == cmd
        assert "settings" in doc and "outputs" in doc


def test_reconstructed_moe_shape(pipeline):
    moe = load_checkpoint(os.path.join(pipeline["out"], "moe.init.ckpt"))
    assert moe.n_experts == 2
    assert moe.default_mode == ("sparse", 1)
    assert len(moe.meta["expert_sources"]) == 2
    stage2 = load_checkpoint(os.path.join(pipeline["out"], "moe.stage2.ckpt"))
    assert stage2.adapters, "stage-2 checkpoint should carry adapters"


def test_eval_matches_in_process(pipeline, capsys):
    out = pipeline["out"]
    dense_path = os.path.join(out, "dense.ckpt")
    assert main(["eval", "--config", pipeline["cfg"], "--model", dense_path,
                 "--eval-set", "prose"]) == 0
    printed = float(capsys.readouterr().out.strip())
    stream = read_stream(os.path.join(out, "corpus"), "prose", "eval")
    direct = eval_perplexity(load_checkpoint(dense_path), stream, 32).perplexity
    assert printed == direct


def test_train_dense_deterministic(pipeline, tmp_path):
    out2 = str(tmp_path / "run2")
    cfg2 = str(tmp_path / "cfg2.json")
    with open(cfg2, "w") as fh:
        json.dump(dict(CFG, out_dir=out2), fh)
    assert main(["gen-corpus", "--config", cfg2]) == 0
    assert main(["train-dense", "--config", cfg2]) == 0
    a = open(os.path.join(pipeline["out"], "dense.ckpt"), "rb").read()
    b = open(os.path.join(out2, "dense.ckpt"), "rb").read()
    assert a == b


def test_route_stats(pipeline):
    assert main(["route-stats", "--config", pipeline["cfg"]]) == 0
    ratios_path = os.path.join(pipeline["out"], "route_ratios.csv")
    with open(ratios_path) as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0] == "row,col,value"
    by_set = {}
    for line in lines[1:]:
        name, _, value = line.split(",")
        by_set.setdefault(name, 0.0)
        by_set[name] += float(value)
    assert set(by_set) == {"prose", "arith", "shuffle", "mixed"}
    for total in by_set.values():
        assert abs(total - 1.0) < 1e-6
    counts_path = os.path.join(pipeline["out"], "route_counts.csv")
    with open(counts_path) as fh:
        assert fh.readline().strip() == "eval_set,layer,expert,count"


def test_case_study(pipeline):
    assert main(["case-study", "--config", pipeline["cfg"], "--text", "12+34=46"]) == 0
    path = os.path.join(pipeline["out"], "case_study.csv")
    with open(path) as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0] == "position,token,char,expert,layer_votes"
    assert len(lines) == 9
    assert main(["case-study", "--config", pipeline["cfg"], "--domain", "arith",
                 "--bytes", "64"]) == 0


def test_compare(pipeline, capsys):
    out = pipeline["out"]
    assert main(["compare", "--config", pipeline["cfg"],
                 "--model", "dense=%s" % os.path.join(out, "dense.ckpt"),
                 "--model", "dive=%s" % os.path.join(out, "moe.stage2.ckpt")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("model")
    assert "dive" in table and "mixed" in table
    with open(os.path.join(out, "compare.csv")) as fh:
        assert fh.readline().strip() == "model,ffn_size,eval_set,ppl"


def test_baseline_split(pipeline):
    assert main(["baseline-split", "--config", pipeline["cfg"]]) == 0
    moe = load_checkpoint(os.path.join(pipeline["out"], "baseline.init.ckpt"))
    assert moe.n_experts == 2
    assert moe.meta["baseline"] == "random-split"


def test_ablations(pipeline):
    assert main(["ablate", "--config", pipeline["cfg"], "--no-dam", "--with-mha",
                 "--tokens", "256"]) == 0
    out = pipeline["out"]
    nodam = load_checkpoint(os.path.join(out, "nodam.stage2.ckpt"))
    assert nodam.meta["expert_sources"] == ["random0", "random1"]
    assert os.path.exists(os.path.join(out, "mha.stage2.ckpt"))
    assert main(["ablate", "--config", pipeline["cfg"]]) == 2  # needs a flag


def test_plot(pipeline):
    src = os.path.join(pipeline["out"], "affinity_norm.csv")
    dst = os.path.join(pipeline["out"], "affinity_norm.svg")
    assert main(["plot", src, "--outfile", dst]) == 0
    assert os.path.getsize(dst) > 0


def test_prune_subcommand(pipeline):
    assert main(["prune", "--config", pipeline["cfg"], "--domain", "arith"]) == 0
    out = pipeline["out"]
    pruned = load_checkpoint(os.path.join(out, "pruned", "arith.ckpt"))
    assert pruned.ffn_width(0) == 6
    with open(os.path.join(out, "pruned", "arith_scores.csv")) as fh:
        assert fh.readline().strip() == "layer,channel,mean,var,score,kept"
    assert main(["prune", "--config", pipeline["cfg"], "--domain", "nosuch"]) == 2


def test_flag_overrides(pipeline, tmp_path):
    out = str(tmp_path / "override")
    assert main(["gen-corpus", "--config", pipeline["cfg"], "--out", out]) == 0
    with open(os.path.join(out, "run_config.json")) as fh:
        assert json.load(fh)["out_dir"] == out
    assert main(["cluster", "--config", pipeline["cfg"], "--experts", "3"]) == 0
    with open(os.path.join(pipeline["out"], "clusters.csv")) as fh:
        labels = [int(line.split(",")[1]) for line in fh.read().strip().split("\n")[1:]]
    assert sorted(set(labels)) == [0, 1, 2]
    # restore the 2-cluster artifact other tests rely on
    assert main(["cluster", "--config", pipeline["cfg"]]) == 0


def test_usage_errors(pipeline, tmp_path):
    fresh = str(tmp_path / "fresh")
    assert main(["train-dense", "--config", pipeline["cfg"], "--out", fresh]) == 2
    assert main(["train-dense"]) == 2  # no config at all
    assert main(["train-dense", "--config", pipeline["cfg"], "--preset", "dive-1of8"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"domains": []}')
    assert main(["gen-corpus", "--config", str(bad_cfg)]) == 2


def test_numeric_failure_exit_code(pipeline, tmp_path):
    out = str(tmp_path / "blowup")
    cfg = dict(CFG, out_dir=out)
    cfg["dense_train"] = {"steps": 3, "batch_size": 4, "seq_len": 32, "lr": 1e30}
    cfg_path = str(tmp_path / "blowup.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    assert main(["gen-corpus", "--config", cfg_path]) == 0
    assert main(["train-dense", "--config", cfg_path]) == 3
    # rollback checkpoint still loads
    assert load_checkpoint(os.path.join(out, "dense.ckpt")) is not None


def test_threads_env_respected(pipeline, monkeypatch):
    monkeypatch.setenv("DIVE_THREADS", "1")
    assert main(["route-stats", "--config", pipeline["cfg"]]) == 0
    monkeypatch.setenv("DIVE_THREADS", "0")
    assert main(["route-stats", "--config", pipeline["cfg"]]) == 2


def test_corpus_mismatch_detected(pipeline, tmp_path):
    cfg = dict(CFG, out_dir=pipeline["out"])
    cfg["domains"] = [dict(d, train_bytes=8192) for d in cfg["domains"]]
    cfg_path = str(tmp_path / "drifted.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    assert main(["train-dense", "--config", cfg_path]) == 2
