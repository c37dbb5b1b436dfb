"""Run configuration: JSON schema, presets, and validation.

A run config is one JSON document that pins everything a pipeline run needs:
model shape, domain corpus registry, pruning ratio, expert/gating settings,
stage budgets, LoRA hyperparameters, output directory, and the global seed.
Identical configs must produce bitwise-identical artifacts.
"""

import dataclasses
import json

import jsonschema

from .corpus import DOMAINS, CorpusSpec
from .errors import FormatError, ParameterError
from .model import ModelConfig

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": [
        "model", "domains", "prune_ratio", "n_experts", "top_k",
        "temperature", "stage_budgets", "lora", "dense_train", "seed",
    ],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "d_ff": {"type": "integer", "minimum": 8},
                "vocab": {"type": "integer", "minimum": 2},
                "max_seq_len": {"type": "integer", "minimum": 2},
                "rms_eps": {"type": "number", "exclusiveMinimum": 0},
                "init_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "domains": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "seed"],
                "properties": {
                    "name": {"type": "string", "enum": sorted(DOMAINS)},
                    "seed": {"type": "integer", "minimum": 0},
                    "train_bytes": {"type": "integer", "minimum": 1},
                    "eval_bytes": {"type": "integer", "minimum": 1},
                    "calibration_samples": {"type": "integer", "minimum": 1},
                    "sample_len": {"type": "integer", "minimum": 2},
                },
            },
        },
        "prune_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_experts": {"type": "integer", "minimum": 1},
        "top_k": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "stage_budgets": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dense_tokens", "sparse_tokens"],
            "properties": {
                "dense_tokens": {"type": "integer", "minimum": 0},
                "sparse_tokens": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seq_len": {"type": "integer", "minimum": 2},
                "dense_lr": {"type": "number", "exclusiveMinimum": 0},
                "sparse_lr": {"type": "number", "exclusiveMinimum": 0},
                "sparse_final_lr": {"type": "number", "exclusiveMinimum": 0},
                "warmup_ratio": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "lora": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rank": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "dense_train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["steps"],
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "seq_len": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
            },
        },
        "eval_seq_len": {"type": "integer", "minimum": 2},
        "out_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_MODEL_DEFAULTS = dict(
    d_model=128, n_layers=4, n_heads=4, d_ff=344, vocab=256, max_seq_len=256
)
_DOMAIN_DEFAULTS = dict(
    train_bytes=1 << 20, eval_bytes=1 << 16, calibration_samples=64, sample_len=64
)
_STAGE_DEFAULTS = dict(
    batch_size=8, seq_len=64, dense_lr=1e-4, sparse_lr=1e-4, sparse_final_lr=1e-5,
    warmup_ratio=0.03,
)
_LORA_DEFAULTS = dict(rank=8, alpha=16.0, dropout=0.1)
_DENSE_TRAIN_DEFAULTS = dict(batch_size=8, seq_len=64, lr=1e-3, weight_decay=0.0)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated pipeline settings; the JSON document with defaults filled in."""

    model: dict
    domains: list
    prune_ratio: float
    n_experts: int
    top_k: int
    temperature: float
    stage_budgets: dict
    lora: dict
    dense_train: dict
    eval_seq_len: int
    out_dir: str
    seed: int

    def __post_init__(self):
        if self.top_k > self.n_experts:
            raise ParameterError(
                "top_k %d exceeds n_experts %d" % (self.top_k, self.n_experts)
            )
        names = [d["name"] for d in self.domains]
        if len(set(names)) != len(names):
            raise ParameterError("duplicate domain names in config: %s" % names)
        if self.n_experts > len(names):
            raise ParameterError(
                "%d experts cannot come from %d domains" % (self.n_experts, len(names))
            )
        seq = self.stage_budgets["seq_len"]
        if seq > self.model["max_seq_len"]:
            raise ParameterError("stage seq_len %d exceeds max_seq_len" % seq)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def corpus_specs(self) -> list:
        specs = []
        for d in self.domains:
            specs.append(
                CorpusSpec(
                    domain=d["name"],
                    seed=d["seed"],
                    train_bytes=d["train_bytes"],
                    eval_bytes=d["eval_bytes"],
                    calibration_samples=d["calibration_samples"],
                    sample_len=d["sample_len"],
                )
            )
        return specs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fill(data: dict) -> dict:
    out = dict(data)
    out["model"] = dict(_MODEL_DEFAULTS, **data.get("model", {}))
    out["domains"] = [dict(_DOMAIN_DEFAULTS, **d) for d in data["domains"]]
    out["stage_budgets"] = dict(_STAGE_DEFAULTS, **data["stage_budgets"])
    out["lora"] = dict(_LORA_DEFAULTS, **data.get("lora", {}))
    out["dense_train"] = dict(_DENSE_TRAIN_DEFAULTS, **data["dense_train"])
    out.setdefault("eval_seq_len", 64)
    out.setdefault("out_dir", "runs/out")
    return out


def make_run_config(data: dict) -> RunConfig:
    """Validate a raw JSON document against the schema and fill defaults."""
    try:
        jsonschema.validate(data, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise FormatError("run config rejected by schema: %s" % e.message) from e
    return RunConfig(**_fill(data))


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except ValueError as e:
        raise FormatError("run config %s is not valid JSON: %s" % (path, e)) from e
    return make_run_config(data)


def save_run_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _desk_domains():
    return [{"name": name, "seed": 0} for name in sorted(DOMAINS)]


def preset_config(name: str) -> dict:
    """Named experiment presets; gate settings follow the k-of-8 conventions."""
    base = {
        "model": {},
        "domains": _desk_domains(),
        "prune_ratio": 0.75,
        "n_experts": 6,
        "stage_budgets": {"dense_tokens": 65536, "sparse_tokens": 655360},
        "lora": {},
        "dense_train": {"steps": 2000},
        "seed": 0,
    }
    if name == "dive-1of8":
        return dict(base, top_k=1, temperature=0.05)
    if name == "dive-2of8":
        return dict(base, top_k=2, temperature=0.5)
    raise ParameterError("unknown preset %r (have: dive-1of8, dive-2of8)" % name)
