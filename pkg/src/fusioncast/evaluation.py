"""Metrics, horizon-averaged reports, event/non-event segment breakdowns,
spectral-band correlations, text perturbations, and the ablation runner.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import aff, config as config_mod
from .dataset import TextRecord
from .errors import ShapeError

BAND_FRACS = {"low": (0.0, 0.1), "high": (0.7, 1.0)}

VOCAB = (
    "amber basin cedar delta ember fjord gleam harbor inlet juniper keel lagoon "
    "meadow nectar orchid prairie quarry ridge summit thicket upland vale willow "
    "zephyr bramble cairn drift eddy frost grove heath isle knoll loch mesa"
).split()


def _check_shapes(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def pearson(a, b) -> float | None:
    """Textbook Pearson correlation; None when either side has no variance."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da**2).sum()) * float((db**2).sum()))
    if denom == 0.0:
        return None
    return float((da * db).sum() / denom)


def band_pearson(prediction, truth, band: str) -> float | None:
    """Correlation between band-filtered prediction and truth; the band names
    use the low/high analysis fractions."""
    if band not in BAND_FRACS:
        raise ShapeError(f"band must be one of {sorted(BAND_FRACS)}")
    lo, hi = BAND_FRACS[band]
    return pearson(
        aff.bandpass_filter(np.asarray(prediction, dtype=np.float64), lo, hi),
        aff.bandpass_filter(np.asarray(truth, dtype=np.float64), lo, hi),
    )


def _pooled_band_pearson(pred_rows: np.ndarray, truth_rows: np.ndarray, band: str):
    """Filter each horizon segment, pool, correlate."""
    lo, hi = BAND_FRACS[band]
    fp = np.stack([aff.bandpass_filter(row, lo, hi) for row in pred_rows])
    ft = np.stack([aff.bandpass_filter(row, lo, hi) for row in truth_rows])
    return pearson(fp, ft)


def segment_metrics(pred: np.ndarray, truth: np.ndarray, flags: np.ndarray) -> dict:
    """MSE/MAE over event-flagged elements, the rest, and overall.

    Empty segments are reported as absent (None), never as zero.
    """

    pred, truth = _check_shapes(pred, truth)
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != pred.shape:
        raise ShapeError(f"labels shape {flags.shape} != predictions {pred.shape}")

    def _part(mask):
        if not mask.any():
            return None
        return {
            "mse": float(np.mean((pred[mask] - truth[mask]) ** 2)),
            "mae": float(np.mean(np.abs(pred[mask] - truth[mask]))),
            "n": int(mask.sum()),
        }

    return {
        "event": _part(flags),
        "non_event": _part(~flags),
        "overall": _part(np.ones_like(flags, dtype=bool)),
    }


# --- horizon evaluation -----------------------------------------------------


@dataclass
class EvaluationReport:
    variant: str
    horizons: list = field(default_factory=list)  # per-horizon row dicts
    average: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return sum(row["n_windows"] for row in self.horizons)


def test_step_labels(data) -> np.ndarray | None:
    """Per-(window, step) event flags for the test split, or None when the
    dataset carries no ground-truth labels."""
    labels = data.splits["test"].event_labels
    if labels is None:
        return None
    L, H = data.split_cfg.lookback, data.horizon
    out = np.zeros((len(data.raw["test"]), H), dtype=bool)
    for i, w in enumerate(data.raw["test"]):
        out[i] = labels[w.window_id + L : w.window_id + L + H]
    return out


def evaluate_horizon(
    preds: dict,
    horizon: int,
    target_index: int,
    labels: np.ndarray | None,
    denormalized: bool = True,
    stats=None,
) -> dict:
    """Metrics for one horizon over every test window (no batch dropped)."""

    y_true = preds["y_true"]
    branch_all = {"ts": preds["y_ts"], "numerical": preds["y_num"], "final": preds["y_final"]}
    y_event = preds.get("y_event_target")
    if not denormalized and stats is not None:
        y_true = (y_true - stats.mean) / stats.std
        branch_all = {k: (v - stats.mean) / stats.std for k, v in branch_all.items()}
        if y_event is not None:
            y_event = (y_event - stats.mean[target_index]) / stats.std[target_index]

    row = {
        "horizon": horizon,
        "n_windows": y_true.shape[0],
        "mse": mse(branch_all["final"], y_true),
        "mae": mae(branch_all["final"], y_true),
        "branches": {},
        "segments": {},
        "band_pearson": {},
        "provenance": {},
    }
    target_truth = y_true[:, :, target_index]
    branch_target = {k: v[:, :, target_index] for k, v in branch_all.items()}
    if y_event is not None:
        branch_target["event"] = y_event

    for name, full in branch_all.items():
        row["branches"][name] = {"mse": mse(full, y_true), "mae": mae(full, y_true)}
    if y_event is not None:
        row["branches"]["event"] = {
            "mse": mse(y_event, target_truth),
            "mae": mae(y_event, target_truth),
        }

    if labels is not None:
        for name, tgt in branch_target.items():
            row["segments"][name] = segment_metrics(tgt, target_truth, labels)

    if horizon >= 3:
        for name, tgt in branch_target.items():
            row["band_pearson"][name] = {
                band: _pooled_band_pearson(tgt, target_truth, band) for band in BAND_FRACS
            }

    prov = preds.get("provenance")
    if prov:
        counts = {}
        for p in prov:
            counts[p] = counts.get(p, 0) + 1
        row["provenance"] = counts
    return row


def combine_horizons(rows: list, variant: str = "full") -> EvaluationReport:
    """Per-horizon rows plus the average row (plain mean across horizons)."""
    report = EvaluationReport(variant=variant, horizons=rows)
    if rows:
        avg = {
            "mse": float(np.mean([r["mse"] for r in rows])),
            "mae": float(np.mean([r["mae"] for r in rows])),
            "branches": {},
        }
        for name in rows[0]["branches"]:
            if all(name in r["branches"] for r in rows):
                avg["branches"][name] = {
                    "mse": float(np.mean([r["branches"][name]["mse"] for r in rows])),
                    "mae": float(np.mean([r["branches"][name]["mae"] for r in rows])),
                }
        report.average = avg
    return report


def write_predictions(preds: dict, path, target_index: int):
    y_true, y_ts = preds["y_true"], preds["y_ts"]
    y_num, y_final = preds["y_num"], preds["y_final"]
    y_event = preds.get("y_event_target")
    prov = preds.get("provenance")
    with open(path, "w", encoding="utf-8") as f:
        f.write("window_id,step,var,y_true,y_ts,y_num,y_final,y_event,provenance\n")
        for i, wid in enumerate(preds["window_ids"]):
            for h in range(y_true.shape[1]):
                for v in range(y_true.shape[2]):
                    ev = (
                        f"{y_event[i, h]:.6f}"
                        if y_event is not None and v == target_index
                        else ""
                    )
                    pv = prov[i] if prov and v == target_index else ""
                    f.write(
                        f"{wid},{h},{v},{y_true[i, h, v]:.6f},{y_ts[i, h, v]:.6f},"
                        f"{y_num[i, h, v]:.6f},{y_final[i, h, v]:.6f},{ev},{pv}\n"
                    )


def write_report(report: EvaluationReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "variant": report.variant,
        "horizons": report.horizons,
        "average": report.average,
        "sample_count": report.sample_count,
    }
    with open(os.path.join(out_dir, "evaluation.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)

    lines = ["horizon,branch,segment,mse,mae,n"]
    for row in report.horizons:
        h = row["horizon"]
        for name, m in row["branches"].items():
            lines.append(f"{h},{name},all,{m['mse']:.6f},{m['mae']:.6f},{row['n_windows']}")
        for name, seg in row["segments"].items():
            for seg_name, m in seg.items():
                if m is not None:
                    lines.append(
                        f"{h},{name},{seg_name},{m['mse']:.6f},{m['mae']:.6f},{m['n']}"
                    )
    if report.average:
        for name, m in report.average["branches"].items():
            lines.append(f"avg,{name},all,{m['mse']:.6f},{m['mae']:.6f},{report.sample_count}")
    with open(os.path.join(out_dir, "evaluation.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    txt = [f"variant: {report.variant}"]
    for row in report.horizons:
        txt.append(f"H={row['horizon']}  windows={row['n_windows']}")
        for name, m in row["branches"].items():
            txt.append(f"  {name:<10} mse={m['mse']:.6f}  mae={m['mae']:.6f}")
        if row["provenance"]:
            txt.append(f"  provenance: {row['provenance']}")
    if report.average:
        txt.append(
            f"average     mse={report.average['mse']:.6f}  mae={report.average['mae']:.6f}"
        )
    with open(os.path.join(out_dir, "evaluation.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(txt) + "\n")


# --- text perturbations and sources ----------------------------------------


def _ordered_unique_records(windows):
    seen = {}
    for w in sorted(windows, key=lambda w: w.window_id):
        for rec in w.texts:
            key = (str(rec.start), str(rec.end), rec.text)
            if key not in seen:
                seen[key] = rec
    return list(seen.items())  # [(key, record)] in first-appearance order


def _rebuild(windows, mapping):
    """Apply key -> record-or-None mapping to every window's text list."""
    out = []
    for w in windows:
        new_texts = []
        for rec in w.texts:
            key = (str(rec.start), str(rec.end), rec.text)
            repl = mapping.get(key, rec)
            if repl is not None:
                new_texts.append(repl)
        from dataclasses import replace

        out.append(replace(w, texts=new_texts))
    return out


def _noise_words(text: str, rate: float, rng) -> str:
    words = text.split()
    if not words:
        return text
    k = math.ceil(rate * len(words))
    k = min(k, len(words))
    positions = rng.choice(len(words), size=k, replace=False)
    for pos in positions:
        words[pos] = VOCAB[int(rng.integers(0, len(VOCAB)))]
    return " ".join(words)


def perturb_text(windows, mode: str, rate: float, seed: int):
    """Robustness perturbations over the distinct text records.

    mask-discrete removes a random ceil(rate * count) subset; mask-contiguous
    removes one contiguous run of that size; noise rewrites ceil(rate * words)
    words per surviving text. Deterministic under the seed.
    """

    if not 0.0 <= rate <= 1.0:
        raise ShapeError(f"rate must lie in [0, 1], got {rate}")
    if mode not in ("mask-discrete", "mask-contiguous", "noise"):
        raise ShapeError(f"unknown perturbation mode '{mode}'")
    items = _ordered_unique_records(windows)
    if not items or rate == 0.0:
        return list(windows)
    rng = np.random.default_rng(seed)
    mapping = {}
    if mode == "noise":
        for key, rec in items:
            mapping[key] = TextRecord(rec.start, rec.end, _noise_words(rec.text, rate, rng))
    else:
        k = min(math.ceil(rate * len(items)), len(items))
        if mode == "mask-discrete":
            removed = set(rng.choice(len(items), size=k, replace=False).tolist())
        else:
            start = int(rng.integers(0, len(items) - k + 1)) if k < len(items) else 0
            removed = set(range(start, start + k))
        for i, (key, _) in enumerate(items):
            if i in removed:
                mapping[key] = None
    return _rebuild(windows, mapping)


def apply_text_source(windows, mode: str, seed: int):
    """Swap the event branch's text source: exogenous (unchanged), random
    (seeded words, length-matched), or statistics (the endogenous text)."""

    if mode == "exogenous":
        return windows
    if mode == "random":
        items = _ordered_unique_records(windows)
        rng = np.random.default_rng(seed)
        mapping = {}
        for key, rec in items:
            n_words = max(len(rec.text.split()), 1)
            words = [VOCAB[int(rng.integers(0, len(VOCAB)))] for _ in range(n_words)]
            mapping[key] = TextRecord(rec.start, rec.end, " ".join(words))
        return _rebuild(windows, mapping)
    if mode == "statistics":
        from dataclasses import replace

        out = []
        for w in windows:
            rec = TextRecord(w.span[0], w.span[1], w.endo_text)
            out.append(replace(w, texts=[rec]))
        return out
    raise ShapeError(f"unknown text source '{mode}'")


def run_ablation(variant: str, base_cfg: dict, out_root=None) -> tuple[dict, EvaluationReport]:
    """Run the full pipeline with one named component toggled; everything else
    (seeds included) stays identical."""

    from .trainer import run_full

    cfg = config_mod.apply_variant(base_cfg, variant)
    if out_root is not None:
        safe = variant.replace(":", "_").replace("/", "_")
        cfg["run.out"] = os.path.join(out_root, safe)
    result = run_full(cfg)
    return cfg, result["report"]
