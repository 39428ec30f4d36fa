"""Run configuration: flat dotted-key JSON with defaults, file and CLI
precedence, snapshotting, and the ablation variant transforms.
"""

from __future__ import annotations

import json
import re

from .errors import ArgumentError, ConfigError

DEFAULTS = {
    # dataset
    "data.series_path": None,
    "data.text_path": None,
    "data.labels_path": None,
    "data.name": "dataset",
    "data.description": "",
    # temporal split and windowing
    "split.train_frac": 0.7,
    "split.val_frac": 0.1,
    "split.test_frac": 0.2,
    "split.lookback": 8,
    "split.horizons": [12],
    "split.label_len": 4,
    # numerical branch
    "model.d_ts": 32,
    "model.n_layers": 2,
    "model.n_heads": 4,
    "model.patch_len": None,
    "model.patch_stride": None,
    "model.dropout": 0.1,
    "model.pooling": "mean",
    "model.d_text": 32,
    "model.decompose_kernel": 25,
    "model.temperature": 1.0,
    "model.anchor": True,
    # text encoders
    "encoder.backend": "hash",
    "encoder.d_emb": 768,
    "encoder.model": "",
    # event branch
    "event.client": "oracle",
    "event.model": "",
    "event.retries": 2,
    "event.text_source": "exogenous",  # exogenous | random | statistics
    # retrieval guidance
    "retrieval.mode": "full",  # full | none | ts-only | summary-only
    "retrieval.rank": 1,
    # prediction fusion
    "fusion.strategy": "aff",  # aff | mlp | cross-attention
    "fusion.low_frac": 0.1,
    "fusion.high_frac": 0.7,
    "fusion.init": 0.5,
    # branch toggles
    "branch.use_alignment": True,
    "branch.use_decomposition": True,
    "branch.use_contrastive": True,
    "branch.use_event": True,
    # training protocol
    "train.stage1_epochs": 10,
    "train.stage2_epochs": 10,
    "train.stage3_epochs": 30,
    "train.stage1_lr": 1e-4,
    "train.stage2_lr": 1e-3,
    "train.stage3_lr_candidates": [5e-4, 1e-5],
    "train.batch_size": 32,
    "train.align_in_stage3": True,
    # evaluation
    "eval.denormalized": True,
    # run plumbing
    "run.seed": 0,
    "run.jobs": 1,
    "run.out": "runs/run",
    "run.cache_dir": None,
    "run.variant": "full",
}

# variant name -> dotted keys it changes (beyond run.variant itself)
VARIANTS = {
    "full": {},
    "ts-only": {"branch.use_alignment": False, "branch.use_event": False},
    "no-eta": {"branch.use_alignment": False},
    "no-hic": {"retrieval.mode": "none"},
    "no-event": {"branch.use_event": False},
    "retrieval:none": {"retrieval.mode": "none"},
    "retrieval:ts-only": {"retrieval.mode": "ts-only"},
    "retrieval:summary-only": {"retrieval.mode": "summary-only"},
    "eta:no-decomposition": {"branch.use_decomposition": False},
    "eta:no-ts-text-cl": {"branch.use_contrastive": False},
    "fusion:aff": {"fusion.strategy": "aff"},
    "fusion:mlp": {"fusion.strategy": "mlp"},
    "fusion:cross-attention": {"fusion.strategy": "cross-attention"},
    "text:exogenous": {"event.text_source": "exogenous"},
    "text:random": {"event.text_source": "random"},
    "text:statistics": {"event.text_source": "statistics"},
}
_RANK_RE = re.compile(r"^rank-(\d+)$")


def variant_names() -> list[str]:
    return sorted(VARIANTS) + ["rank-<r>"]


def resolve(config_file=None, overrides=None) -> dict:
    """Merge defaults < config file < explicit overrides into a flat dict."""
    cfg = dict(DEFAULTS)
    if config_file:
        with open(config_file, encoding="utf-8") as f:
            loaded = json.load(f)
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        if value is not None:
            cfg[key] = value
    return cfg


def apply_variant(cfg: dict, variant: str) -> dict:
    """Return a copy of cfg with exactly the variant's named keys changed."""
    out = dict(cfg)
    out["run.variant"] = variant
    m = _RANK_RE.match(variant)
    if m:
        out["retrieval.rank"] = int(m.group(1))
        return out
    if variant not in VARIANTS:
        raise ArgumentError(
            f"unknown variant '{variant}'; valid: {', '.join(variant_names())}"
        )
    out.update(VARIANTS[variant])
    return out


def config_diff(a: dict, b: dict, ignore=("run.variant", "run.out")) -> dict:
    """Keys whose values differ, as {key: (a_value, b_value)}."""
    diff = {}
    for key in sorted(set(a) | set(b)):
        if key in ignore:
            continue
        if a.get(key) != b.get(key):
            diff[key] = (a.get(key), b.get(key))
    return diff


def snapshot(cfg: dict, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def load_snapshot(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
