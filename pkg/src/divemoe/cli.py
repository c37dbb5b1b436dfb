"""Command-line pipeline driver.

Each subcommand maps one workflow stage onto disk artifacts inside the run's
output directory; files are the only channel between stages, so any stage can
be re-run from its declared inputs alone. Every invocation writes a manifest
under <out>/manifests/ and a resolved copy of the run config.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import __version__
from .affinity import (
    ClusterAssignment,
    build_cluster_calibrations,
    build_ppl_matrix,
    export_affinity_csv,
    export_cluster_csv,
    hierarchical_cluster,
    read_affinity_csv,
    read_cluster_csv,
)
from .analysis import (
    compare_report,
    emit_heatmap_csv,
    export_attribution_csv,
    export_compare_csv,
    format_compare_table,
    read_heatmap_csv,
    routing_distribution,
    token_attribution,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import make_run_config, preset_config, save_run_config
from .corpus import (
    mix_cluster_calibration,
    read_corpus_manifest,
    read_stream,
    sample_calibration,
    write_corpus_dir,
)
from .errors import DiveError, FormatError, NumericError, ParameterError
from .model import DenseModel, DenseTrainConfig, eval_perplexity, train_dense
from .moe import random_split_baseline, reconstruct_moe
from .pruner import (
    apply_prune,
    collect_fluctuation_stats,
    export_prune_csv,
    prune_model,
    score_channels,
    select_mask,
)
from .retrain import (
    TrainPlan,
    attach_lora,
    export_trace_csv,
    merge_lora,
    stage1_train_routers,
    stage2_train_sparse,
)

PRESET_NAMES = ("dive-1of8", "dive-2of8")


# -- plumbing ----------------------------------------------------------------------


def _resolve_config(args):
    """Preset or config file, then flag overrides, then schema validation."""
    if args.preset and args.config:
        raise ParameterError("pass either --preset or --config, not both")
    if args.preset:
        data = preset_config(args.preset)
    elif args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except ValueError as e:
            raise FormatError("run config %s is not valid JSON: %s" % (args.config, e)) from e
    else:
        raise ParameterError("a run config is required: --config <path> or --preset <name>")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    if args.ratio is not None:
        data["prune_ratio"] = args.ratio
    if args.experts is not None:
        data["n_experts"] = args.experts
    if args.top_k is not None:
        data["top_k"] = args.top_k
    if args.temperature is not None:
        data["temperature"] = args.temperature
    return make_run_config(data)


def _prepare(args):
    cfg = _resolve_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_run_config(cfg, _p(cfg, "run_config.json"))
    return cfg


def _p(cfg, *parts):
    return os.path.join(cfg.out_dir, *parts)


def _require(path, producer):
    if not os.path.exists(path):
        raise ParameterError("missing input artifact %s; run `%s` first" % (path, producer))
    return path


def _manifest(cfg, command, inputs, outputs, extra=None):
    mdir = _p(cfg, "manifests")
    os.makedirs(mdir, exist_ok=True)
    doc = {
        "format": "divemoe-manifest/1",
        "package_version": __version__,
        "command": command,
        "inputs": sorted(str(x) for x in inputs),
        "outputs": sorted(str(x) for x in outputs),
        "settings": cfg.to_dict(),
    }
    if extra is not None:
        doc["result"] = extra
    with open(os.path.join(mdir, command + ".json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _specs_on_disk(cfg):
    """Config specs, cross-checked against the generated corpus manifest."""
    corpus_dir = _require(_p(cfg, "corpus"), "gen-corpus")
    disk = read_corpus_manifest(corpus_dir)
    want = cfg.corpus_specs()
    if [dataclasses.asdict(s) for s in disk] != [dataclasses.asdict(s) for s in want]:
        raise ParameterError(
            "corpus dir %s was generated from different settings; re-run gen-corpus" % corpus_dir
        )
    return want


def _eval_stream(cfg, specs, name):
    corpus_dir = _p(cfg, "corpus")
    if name == "mixed":
        streams = [read_stream(corpus_dir, s.domain, "eval") for s in specs]
        unit = cfg.eval_seq_len
        take = min(len(b) for b in streams) // unit * unit
        if take == 0:
            raise ParameterError("eval streams shorter than one window of %d bytes" % unit)
        return b"".join(b[:take] for b in streams)
    if name not in [s.domain for s in specs]:
        raise ParameterError("unknown eval set %r (have domains + 'mixed')" % name)
    return read_stream(corpus_dir, name, "eval")


def _eval_sets(cfg, specs):
    sets = {s.domain: _eval_stream(cfg, specs, s.domain) for s in specs}
    sets["mixed"] = _eval_stream(cfg, specs, "mixed")
    return sets


def _load_moe(path):
    model = load_checkpoint(path)
    if not hasattr(model, "n_experts"):
        raise ParameterError("%s holds a dense model where an MoE was expected" % path)
    return model


def _set_mode(moe, top_k):
    moe.meta["default_mode"] = ["sparse", int(top_k)]
    moe.default_mode = ("sparse", int(top_k))


# -- pipeline stages (shared by subcommands and ablations) ---------------------------


def _cluster_labels_for_specs(cfg, specs):
    names, labels = read_cluster_csv(_require(_p(cfg, "clusters.csv"), "cluster"))
    by_name = dict(zip(names, labels))
    missing = [s.domain for s in specs if s.domain not in by_name]
    if missing:
        raise ParameterError("clusters.csv lacks domains %s; re-run cluster" % missing)
    return [by_name[s.domain] for s in specs]


def _build_moe_init(cfg, specs, dense, no_dam=False):
    budget = max(s.calibration_samples for s in specs)
    if no_dam:
        # ablation: every expert calibrates on its own random mix of all domains
        sample_len = specs[0].sample_len
        calibs = [
            mix_cluster_calibration(specs, budget, sample_len, cfg.seed + 7919 * (e + 1))
            for e in range(cfg.n_experts)
        ]
        sources = ["random%d" % e for e in range(cfg.n_experts)]
    else:
        labels = _cluster_labels_for_specs(cfg, specs)
        if max(labels) + 1 != cfg.n_experts:
            raise ParameterError(
                "clusters.csv has %d clusters, config wants %d experts"
                % (max(labels) + 1, cfg.n_experts)
            )
        assignment = ClusterAssignment(n_clusters=cfg.n_experts, labels=labels, merges=[])
        calibs = build_cluster_calibrations(assignment, specs, budget, seed=cfg.seed)
        sources = [
            "+".join(specs[i].domain for i in assignment.members(c))
            for c in range(cfg.n_experts)
        ]
    experts = [prune_model(dense, calib, cfg.prune_ratio) for calib in calibs]
    moe = reconstruct_moe(experts, router_seed=cfg.seed, expert_sources=sources)
    _set_mode(moe, cfg.top_k)
    return moe


def _run_stage1(cfg, specs, moe, tokens, ckpt_path, trace_path):
    sb = cfg.stage_budgets
    plan = TrainPlan(
        "dense_router",
        tokens=sb["dense_tokens"] if tokens is None else tokens,
        batch_size=sb["batch_size"],
        seq_len=sb["seq_len"],
        lr=sb["dense_lr"],
        temperature=cfg.temperature,
    )
    trace = stage1_train_routers(moe, specs, plan, seed=cfg.seed, ckpt_path=ckpt_path)
    export_trace_csv(trace, trace_path)
    return trace


def _run_stage2(cfg, specs, moe, tokens, ckpt_path, trace_path, with_mha=False, merge=False):
    lora = cfg.lora
    attach_lora(
        moe, rank=lora["rank"], alpha=lora["alpha"], dropout=lora["dropout"], seed=cfg.seed
    )
    sb = cfg.stage_budgets
    plan = TrainPlan(
        "sparse_expert",
        tokens=sb["sparse_tokens"] if tokens is None else tokens,
        batch_size=sb["batch_size"],
        seq_len=sb["seq_len"],
        lr=sb["sparse_lr"],
        final_lr=sb["sparse_final_lr"],
        warmup_ratio=sb["warmup_ratio"],
        top_k=cfg.top_k,
        include_mha=with_mha,
    )
    trace = stage2_train_sparse(moe, specs, plan, seed=cfg.seed, ckpt_path=ckpt_path)
    if merge:
        merge_lora(moe)
        save_checkpoint(moe, ckpt_path)
    export_trace_csv(trace, trace_path)
    return trace


# -- subcommands -------------------------------------------------------------------


def cmd_gen_corpus(args):
    cfg = _prepare(args)
    corpus_dir = _p(cfg, "corpus")
    write_corpus_dir(cfg.corpus_specs(), corpus_dir)
    outputs = [os.path.join(corpus_dir, "manifest.json")] + [
        os.path.join(corpus_dir, "%s.%s.bin" % (s.domain, split))
        for s in cfg.corpus_specs()
        for split in ("train", "eval")
    ]
    _manifest(cfg, "gen-corpus", [], outputs)
    print("wrote %d domains to %s" % (len(cfg.domains), corpus_dir))
    return 0


def cmd_train_dense(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    model = DenseModel.init(cfg.model_config(), seed=cfg.seed)
    ckpt = _p(cfg, "dense.ckpt")
    trace = train_dense(model, specs, DenseTrainConfig(**cfg.dense_train), seed=cfg.seed,
                        ckpt_path=ckpt)
    trace_path = _p(cfg, "dense_trace.csv")
    with open(trace_path, "w") as fh:
        fh.write("step,train_loss\n")
        for i, loss in enumerate(trace):
            fh.write("%d,%.9g\n" % (i + 1, loss))
    _manifest(cfg, "train-dense", [_p(cfg, "corpus")], [ckpt, trace_path],
              extra={"final_loss": trace[-1] if trace else None, "steps": len(trace)})
    print("trained dense model for %d steps -> %s" % (len(trace), ckpt))
    return 0


def cmd_prune(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    spec = next((s for s in specs if s.domain == args.domain), None)
    if spec is None:
        raise ParameterError("--domain %r is not in the config's domain list" % args.domain)
    dense = load_checkpoint(_require(_p(cfg, "dense.ckpt"), "train-dense"))
    batch = sample_calibration(spec)
    stats = collect_fluctuation_stats(dense, batch)
    scores = score_channels(stats, dense)
    mask = select_mask(scores, cfg.prune_ratio)
    pruned = apply_prune(dense, mask, stats)
    pdir = _p(cfg, "pruned")
    os.makedirs(pdir, exist_ok=True)
    ckpt = os.path.join(pdir, "%s.ckpt" % spec.domain)
    scores_csv = os.path.join(pdir, "%s_scores.csv" % spec.domain)
    save_checkpoint(pruned, ckpt)
    export_prune_csv(stats, scores, mask, scores_csv)
    _manifest(cfg, "prune", [_p(cfg, "dense.ckpt")], [ckpt, scores_csv],
              extra={"domain": spec.domain, "keep": mask.keep_count})
    print("pruned on %s calibration (keep %d of %d) -> %s"
          % (spec.domain, mask.keep_count, cfg.model["d_ff"], ckpt))
    return 0


def cmd_affinity(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    dense = load_checkpoint(_require(_p(cfg, "dense.ckpt"), "train-dense"))
    matrix = build_ppl_matrix(dense, specs, cfg.prune_ratio, eval_seq_len=cfg.eval_seq_len)
    csv_path = _p(cfg, "affinity.csv")
    heat_path = _p(cfg, "affinity_norm.csv")
    export_affinity_csv(matrix, csv_path)
    emit_heatmap_csv(matrix, heat_path)
    _manifest(cfg, "affinity", [_p(cfg, "dense.ckpt")], [csv_path, heat_path])
    print("affinity matrix over %d domains -> %s" % (len(specs), csv_path))
    return 0


def cmd_cluster(args):
    cfg = _prepare(args)
    matrix = read_affinity_csv(_require(_p(cfg, "affinity.csv"), "affinity"))
    assignment = hierarchical_cluster(matrix.norm_ppl, cfg.n_experts)
    out_path = _p(cfg, "clusters.csv")
    export_cluster_csv(assignment, matrix.task_names, out_path)
    _manifest(cfg, "cluster", [_p(cfg, "affinity.csv")], [out_path],
              extra={"labels": dict(zip(matrix.task_names, assignment.labels))})
    print("grouped %d domains into %d clusters -> %s"
          % (len(matrix.task_names), cfg.n_experts, out_path))
    return 0


def cmd_reconstruct(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    dense = load_checkpoint(_require(_p(cfg, "dense.ckpt"), "train-dense"))
    moe = _build_moe_init(cfg, specs, dense, no_dam=False)
    out_path = _p(cfg, "moe.init.ckpt")
    save_checkpoint(moe, out_path)
    _manifest(cfg, "reconstruct", [_p(cfg, "dense.ckpt"), _p(cfg, "clusters.csv")], [out_path],
              extra={"expert_sources": moe.meta["expert_sources"]})
    print("reconstructed %d-expert MoE -> %s" % (moe.n_experts, out_path))
    return 0


def cmd_train_routers(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    in_path = args.model or _require(_p(cfg, "moe.init.ckpt"), "reconstruct")
    moe = _load_moe(in_path)
    out_path = args.out_model or _p(cfg, "moe.stage1.ckpt")
    trace_path = os.path.splitext(out_path)[0] + "_trace.csv"
    trace = _run_stage1(cfg, specs, moe, args.tokens, out_path, trace_path)
    _manifest(cfg, "train-routers", [in_path], [out_path, trace_path],
              extra={"steps": len(trace), "final_loss": trace[-1]["train_loss"] if trace else None})
    print("stage 1 done: %d router steps -> %s" % (len(trace), out_path))
    return 0


def cmd_train_sparse(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    in_path = args.model or _require(_p(cfg, "moe.stage1.ckpt"), "train-routers")
    moe = _load_moe(in_path)
    out_path = args.out_model or _p(cfg, "moe.stage2.ckpt")
    trace_path = os.path.splitext(out_path)[0] + "_trace.csv"
    trace = _run_stage2(cfg, specs, moe, args.tokens, out_path, trace_path,
                        with_mha=args.with_mha, merge=args.merge)
    _manifest(cfg, "train-sparse", [in_path], [out_path, trace_path],
              extra={"steps": len(trace), "with_mha": args.with_mha, "merged": args.merge})
    print("stage 2 done: %d sparse steps -> %s" % (len(trace), out_path))
    return 0


def cmd_eval(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    model = load_checkpoint(_require(args.model, "a training subcommand"))
    stream = _eval_stream(cfg, specs, args.eval_set)
    report = eval_perplexity(model, stream, cfg.eval_seq_len)
    _manifest(cfg, "eval", [args.model], [],
              extra={"eval_set": args.eval_set, "perplexity": report.perplexity,
                     "token_count": report.token_count})
    print("%.17g" % report.perplexity)
    return 0


def cmd_route_stats(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    in_path = args.model or _require(_p(cfg, "moe.stage2.ckpt"), "train-sparse")
    moe = _load_moe(in_path)
    stats = routing_distribution(moe, _eval_sets(cfg, specs), k=cfg.top_k,
                                 seq_len=cfg.eval_seq_len)
    ratios_path = _p(cfg, "route_ratios.csv")
    counts_path = _p(cfg, "route_counts.csv")
    emit_heatmap_csv(stats, ratios_path)
    with open(counts_path, "w") as fh:
        fh.write("eval_set,layer,expert,count\n")
        for name in stats.set_names:
            grid = stats.counts[name]
            for li in range(stats.n_layers):
                for e in range(stats.n_experts):
                    fh.write("%s,%d,%d,%d\n" % (name, li, e, grid[li, e]))
    _manifest(cfg, "route-stats", [in_path], [ratios_path, counts_path])
    for name in stats.set_names:
        pretty = " ".join("%.3f" % r for r in stats.ratios[name])
        print("%-10s %s" % (name, pretty))
    return 0


def cmd_case_study(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    in_path = args.model or _require(_p(cfg, "moe.stage2.ckpt"), "train-sparse")
    moe = _load_moe(in_path)
    if args.text is not None:
        text = args.text
        source = "--text"
    elif args.domain is not None:
        text = _eval_stream(cfg, specs, args.domain)[: args.bytes]
        source = args.domain
    else:
        raise ParameterError("case-study needs --text or --domain")
    attr = token_attribution(moe, text)
    out_path = _p(cfg, "case_study.csv")
    export_attribution_csv(attr, out_path)
    _manifest(cfg, "case-study", [in_path], [out_path],
              extra={"source": source, "tokens": len(attr)})
    print("attributed %d tokens -> %s" % (len(attr), out_path))
    return 0


def cmd_compare(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    pairs = []
    for entry in args.model:
        if "=" not in entry:
            raise ParameterError("--model expects name=path, got %r" % entry)
        name, path = entry.split("=", 1)
        pairs.append((name, load_checkpoint(_require(path, "a training subcommand"))))
    report = compare_report(pairs, _eval_sets(cfg, specs), seq_len=cfg.eval_seq_len)
    out_path = _p(cfg, "compare.csv")
    export_compare_csv(report, out_path)
    _manifest(cfg, "compare", [e.split("=", 1)[1] for e in args.model], [out_path])
    sys.stdout.write(format_compare_table(report))
    return 0


def cmd_baseline_split(args):
    cfg = _prepare(args)
    dense = load_checkpoint(_require(_p(cfg, "dense.ckpt"), "train-dense"))
    moe = random_split_baseline(dense, cfg.n_experts, 1.0 - cfg.prune_ratio, seed=cfg.seed)
    _set_mode(moe, cfg.top_k)
    out_path = _p(cfg, "baseline.init.ckpt")
    save_checkpoint(moe, out_path)
    _manifest(cfg, "baseline-split", [_p(cfg, "dense.ckpt")], [out_path])
    print("random-split baseline with %d experts -> %s" % (cfg.n_experts, out_path))
    return 0


def cmd_ablate(args):
    cfg = _prepare(args)
    specs = _specs_on_disk(cfg)
    if not (args.no_dam or args.with_mha):
        raise ParameterError("ablate needs --no-dam and/or --with-mha")
    inputs, outputs = [], []
    if args.no_dam:
        dense = load_checkpoint(_require(_p(cfg, "dense.ckpt"), "train-dense"))
        inputs.append(_p(cfg, "dense.ckpt"))
        moe = _build_moe_init(cfg, specs, dense, no_dam=True)
        init_path = _p(cfg, "nodam.init.ckpt")
        save_checkpoint(moe, init_path)
        s1_path = _p(cfg, "nodam.stage1.ckpt")
        _run_stage1(cfg, specs, moe, args.tokens, s1_path, _p(cfg, "nodam.stage1_trace.csv"))
        s2_path = _p(cfg, "nodam.stage2.ckpt")
        _run_stage2(cfg, specs, moe, args.tokens, s2_path, _p(cfg, "nodam.stage2_trace.csv"))
        outputs += [init_path, s1_path, s2_path]
        print("no-dam ablation -> %s" % s2_path)
    if args.with_mha:
        in_path = args.model or _require(_p(cfg, "moe.stage1.ckpt"), "train-routers")
        inputs.append(in_path)
        moe = _load_moe(in_path)
        out_path = _p(cfg, "mha.stage2.ckpt")
        _run_stage2(cfg, specs, moe, args.tokens, out_path,
                    _p(cfg, "mha.stage2_trace.csv"), with_mha=True)
        outputs.append(out_path)
        print("with-mha ablation -> %s" % out_path)
    _manifest(cfg, "ablate", inputs, outputs,
              extra={"no_dam": args.no_dam, "with_mha": args.with_mha})
    return 0


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, cols, values = read_heatmap_csv(args.infile)
    out_path = args.outfile or os.path.splitext(args.infile)[0] + ".png"
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(cols) + 2), max(3, 0.5 * len(rows) + 1.5)))
    im = ax.imshow(values, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=45, ha="right")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows)
    ax.set_title(os.path.basename(args.infile))
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    print("rendered %s" % out_path)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="divemoe",
        description="Rebuild a small dense transformer into a domain-expert MoE.",
    )
    parser.add_argument("--version", action="version", version="divemoe " + __version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run config JSON")
    common.add_argument("--preset", choices=PRESET_NAMES, help="built-in run config")
    common.add_argument("--seed", type=int, metavar="U64", help="override the global seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--ratio", type=float, metavar="F", help="override prune_ratio")
    common.add_argument("--experts", type=int, metavar="N", help="override n_experts")
    common.add_argument("--top-k", type=int, dest="top_k", metavar="K", help="override top_k")
    common.add_argument("--temperature", type=float, metavar="T", help="override temperature")
    common.add_argument("--tokens", type=int, metavar="N",
                        help="override the stage token budget")

    sub = parser.add_subparsers(dest="command", required=True, metavar="<command>")

    def add(name, fn, helptext, parents=(common,)):
        sp = sub.add_parser(name, help=helptext, parents=list(parents))
        sp.set_defaults(fn=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "materialize the domain corpus files")
    add("train-dense", cmd_train_dense, "train the dense base model")
    p = add("prune", cmd_prune, "prune the dense model on one domain's calibration")
    p.add_argument("--domain", required=True, help="calibration domain")
    add("affinity", cmd_affinity, "build the calibration x eval normalized-PPL matrix")
    add("cluster", cmd_cluster, "group domains by affinity-profile correlation")
    add("reconstruct", cmd_reconstruct, "assemble the MoE from per-cluster pruning")
    p = add("train-routers", cmd_train_routers, "stage 1: dense-gate router training")
    p.add_argument("--model", help="input MoE checkpoint (default: moe.init.ckpt)")
    p.add_argument("--out-model", help="output checkpoint path")
    p = add("train-sparse", cmd_train_sparse, "stage 2: sparse LoRA training")
    p.add_argument("--model", help="input MoE checkpoint (default: moe.stage1.ckpt)")
    p.add_argument("--out-model", help="output checkpoint path")
    p.add_argument("--with-mha", action="store_true", help="also train attention weights")
    p.add_argument("--merge", action="store_true", help="fold adapters into the weights")
    p = add("eval", cmd_eval, "perplexity of a checkpoint on one eval set")
    p.add_argument("--model", required=True, help="checkpoint to evaluate")
    p.add_argument("--eval-set", default="mixed", help="domain name or 'mixed'")
    p = add("route-stats", cmd_route_stats, "expert activation ratios per eval set")
    p.add_argument("--model", help="MoE checkpoint (default: moe.stage2.ckpt)")
    p = add("case-study", cmd_case_study, "per-token expert attribution")
    p.add_argument("--model", help="MoE checkpoint (default: moe.stage2.ckpt)")
    p.add_argument("--text", help="literal text to attribute")
    p.add_argument("--domain", help="attribute a sample of this domain's eval stream")
    p.add_argument("--bytes", type=int, default=256, help="sample size with --domain")
    p = add("compare", cmd_compare, "PPL table over several checkpoints")
    p.add_argument("--model", action="append", required=True, metavar="NAME=PATH",
                   help="repeatable; row name and checkpoint path")
    add("baseline-split", cmd_baseline_split, "random-split MoE baseline from the dense model")
    p = add("ablate", cmd_ablate, "run the --no-dam / --with-mha ablations")
    p.add_argument("--no-dam", action="store_true",
                   help="random calibration mixing instead of affinity clusters")
    p.add_argument("--with-mha", action="store_true",
                   help="stage 2 with attention weights trainable")
    p.add_argument("--model", help="stage-1 checkpoint for --with-mha")
    p = sub.add_parser("plot", help="render a heatmap CSV to PNG/SVG")
    p.set_defaults(fn=cmd_plot)
    p.add_argument("infile", help="heatmap CSV (row,col,value)")
    p.add_argument("--outfile", help="image path (default: CSV name with .png)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print("error: numeric failure: %s" % e, file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print("error: missing input: %s" % e, file=sys.stderr)
        return 2
    except (DiveError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
