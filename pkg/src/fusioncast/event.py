"""Event-driven prediction pipeline: template generation, per-window
summarization, and reasoned numeric prediction, with strict JSON output
parsing, bounded retries, and a persistence fallback so every window ends up
with a usable horizon-length forecast.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .clients import cached_call
from .dataset import MultimodalWindow
from .errors import (
    ArgumentError,
    PredictionLengthError,
    PredictionParseError,
    PredictionValueError,
    SummaryError,
    TemplateError,
)

TEMPLATE_REQUIRED_KEYS = (
    "Possible Relationships",
    "Features for Prediction",
    "Trend Analysis for Prediction",
)
DEFAULT_RETRIES = 2  # retries per call, i.e. 3 attempts

PROVENANCE_PLAIN = "plain"
PROVENANCE_ICL = "icl-guided"
PROVENANCE_FALLBACK = "fallback"


def load_prompt(name: str) -> str:
    return resources.files("fusioncast.prompts").joinpath(f"{name}.txt").read_text("utf-8")


def render_prompt(text: str, **slots) -> str:
    """Substitute {slot} placeholders without disturbing literal braces."""
    out = text
    for key, value in slots.items():
        out = out.replace("{" + key + "}", str(value))
    return out


@dataclass
class Template:
    data: dict
    raw: str


@dataclass
class Summary:
    window_id: int
    data: dict
    raw: str
    text_free: bool

    def rendered(self) -> str:
        return json.dumps(self.data)


@dataclass
class ReasonedPrediction:
    window_id: int
    prediction: np.ndarray  # [H]
    reasoning: str
    provenance: str

    def to_record(self, summary: Summary) -> dict:
        return {
            "window_id": self.window_id,
            "summary": summary.data,
            "prediction": [float(v) for v in self.prediction],
            "reasoning": self.reasoning,
            "provenance": self.provenance,
        }


def extract_first_json(text: str) -> dict:
    """First parseable JSON object embedded anywhere in the text."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start >= 0:
        try:
            obj, _ = decoder.raw_decode(text[start:])
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
        start = text.find("{", start + 1)
    raise PredictionParseError("no JSON object found in response")


def parse_prediction(raw_text: str, horizon: int) -> tuple[np.ndarray, str]:
    """Extract (prediction vector, reasoning) from a reasoner response.

    Accepts "prediction"/"Prediction" keys and list-valued strings; rejects
    wrong lengths and non-finite entries.
    """

    obj = extract_first_json(raw_text)
    value = None
    for key in ("prediction", "Prediction"):
        if key in obj:
            value = obj[key]
            break
    if value is None:
        raise PredictionParseError("response JSON has no prediction key")
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise PredictionParseError(f"prediction string is not a JSON list: {exc}") from exc
    if not isinstance(value, list):
        raise PredictionParseError(f"prediction is not a list: {type(value).__name__}")
    try:
        vec = np.array([float(v) for v in value], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise PredictionValueError(f"prediction entries are not numeric: {exc}") from exc
    if len(vec) != horizon:
        raise PredictionLengthError(f"prediction length {len(vec)} != horizon {horizon}")
    if not np.isfinite(vec).all():
        raise PredictionValueError("prediction contains non-finite entries")
    reasoning = obj.get("Reasoning", obj.get("reasoning", ""))
    return vec, str(reasoning)


# --- prompt assembly --------------------------------------------------------


def render_target_series(window: MultimodalWindow, target_index: int) -> str:
    vals = window.x[:, target_index]
    return "[" + ", ".join(f"{v:.4f}" for v in vals) + "]"


def render_texts(window: MultimodalWindow) -> str:
    """Text records with step offsets relative to the look-back start."""
    if not window.texts:
        return "(no text records for this window)"
    lb_start, lb_end = window.span
    steps = max(window.x.shape[0] - 1, 1)
    freq = (lb_end - lb_start) / steps if lb_end > lb_start else None
    lines = []
    for rec in window.texts:
        if freq is not None:
            a = int(round((rec.start - lb_start) / freq))
            b = int(round((rec.end - lb_start) / freq))
        else:
            a = b = 0
        lines.append(f"- [from step {a} to step {b}] ({rec.start} to {rec.end}) {rec.text}")
    return "\n".join(lines)


def render_sample_pairs(windows, target_index: int, limit: int = 10) -> str:
    lines = []
    for w in windows[:limit]:
        text = "; ".join(w.raw_texts) if w.texts else "(no text)"
        lines.append(f"series={render_target_series(w, target_index)} text={text}")
    return "\n".join(lines)


# --- pipeline steps ---------------------------------------------------------


def generate_template(
    client,
    dataset_description: str,
    sample_pairs: str,
    retries: int = DEFAULT_RETRIES,
    cache_dir=None,
) -> Template:
    if not sample_pairs:
        raise ArgumentError("template generation needs at least one sample pair")
    prompt = render_prompt(
        load_prompt("template_generation"),
        sample_pairs=sample_pairs,
        dataset_description=dataset_description,
    )
    last_raw = None
    for attempt in range(retries + 1):
        raw = cached_call(client, prompt if attempt == 0 else f"{prompt}\n[attempt {attempt}]",
                          cache_dir)
        last_raw = raw
        try:
            data = extract_first_json(raw)
        except PredictionParseError:
            continue
        missing = [k for k in TEMPLATE_REQUIRED_KEYS if k not in data]
        if not missing:
            return Template(data=data, raw=raw)
    raise TemplateError(
        f"template generation failed after {retries + 1} attempts", last_raw=last_raw
    )


def summarize(
    client,
    template: Template,
    window: MultimodalWindow,
    target_index: int,
    dataset_name: str = "target",
    dataset_description: str = "",
    retries: int = DEFAULT_RETRIES,
    cache_dir=None,
) -> Summary:
    series_str = render_target_series(window, target_index)
    prompt = render_prompt(
        load_prompt("summarize"),
        start_time=window.span[0],
        end_time=window.span[1],
        dataset_name=dataset_name,
        dataset_description=dataset_description,
        template=json.dumps(template.data),
        time_series_str=series_str,
        texts_str=render_texts(window),
    )
    last_raw = None
    for attempt in range(retries + 1):
        raw = cached_call(client, prompt if attempt == 0 else f"{prompt}\n[attempt {attempt}]",
                          cache_dir)
        last_raw = raw
        try:
            data = extract_first_json(raw)
        except PredictionParseError:
            continue
        data["OT"] = series_str  # the reasoner reads the window numbers from here
        return Summary(window_id=window.window_id, data=data, raw=raw,
                       text_free=not window.texts)
    raise SummaryError(
        f"summarization failed for window {window.window_id} after {retries + 1} attempts",
        last_raw=last_raw,
    )


def reason(
    client,
    summary: Summary,
    x_target: np.ndarray,
    horizon: int,
    guidance: str | None = None,
    dataset_name: str = "target",
    retries: int = DEFAULT_RETRIES,
    cache_dir=None,
) -> ReasonedPrediction:
    """Reasoned numeric prediction; falls back to persistence when the client
    output stays unparseable through the retry budget."""

    if horizon < 1:
        raise ArgumentError("horizon must be at least 1")
    example = guidance if guidance is not None else load_prompt("fixed_example").strip()
    prompt = render_prompt(
        load_prompt("reason"),
        window_size=len(x_target),
        prediction_length=horizon,
        dataset_name=dataset_name,
        example=example,
        summary=summary.rendered(),
    )
    provenance = PROVENANCE_ICL if guidance is not None else PROVENANCE_PLAIN
    for attempt in range(retries + 1):
        try:
            raw = cached_call(client, prompt if attempt == 0 else f"{prompt}\n[attempt {attempt}]",
                              cache_dir)
        except Exception:
            continue
        try:
            vec, reasoning = parse_prediction(raw, horizon)
            return ReasonedPrediction(
                window_id=summary.window_id,
                prediction=vec,
                reasoning=reasoning,
                provenance=provenance,
            )
        except PredictionParseError:
            continue
    fallback = np.repeat(float(x_target[-1]), horizon)
    return ReasonedPrediction(
        window_id=summary.window_id,
        prediction=fallback,
        reasoning="persistence fallback: reasoner output unusable",
        provenance=PROVENANCE_FALLBACK,
    )


def precompute_window(
    client,
    template: Template,
    window: MultimodalWindow,
    target_index: int,
    horizon: int,
    guidance: str | None = None,
    dataset_name: str = "target",
    dataset_description: str = "",
    retries: int = DEFAULT_RETRIES,
    cache_dir=None,
) -> dict:
    """Summarize + reason for one window; returns the line-record dict."""
    summary = summarize(
        client, template, window, target_index,
        dataset_name=dataset_name, dataset_description=dataset_description,
        retries=retries, cache_dir=cache_dir,
    )
    pred = reason(
        client, summary, window.x[:, target_index], horizon,
        guidance=guidance, dataset_name=dataset_name, retries=retries, cache_dir=cache_dir,
    )
    return pred.to_record(summary)


def run_windows(fn, windows, jobs: int = 1, rate_limit_per_s=None, single_flight=False):
    """Apply fn to each window, optionally in parallel, returning results
    sorted by window_id so output files are deterministic."""

    if jobs <= 1 or single_flight or len(windows) <= 1:
        results = [fn(w) for w in windows]
    else:
        delay = 1.0 / rate_limit_per_s if rate_limit_per_s else 0.0
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = []
            for w in windows:
                futures.append(pool.submit(fn, w))
                if delay:
                    import time

                    time.sleep(delay)
            results = [f.result() for f in futures]
    return sorted(results, key=lambda r: r["window_id"])


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
