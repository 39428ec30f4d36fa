"""Error-informed knowledge base: corrections are distilled from training
windows whose predictions were compared against ground truth, stored with
summary embeddings, and retrieved by cosine similarity as in-context guidance
at inference time.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass

import numpy as np

from .clients import cached_call
from .encoders import SummaryEmbedding, embed_summary
from .errors import ArgumentError, CompatibilityError, IntegrityError, LeakageError
from .event import (
    DEFAULT_RETRIES,
    PredictionParseError,
    Summary,
    extract_first_json,
    load_prompt,
    render_prompt,
)

log = logging.getLogger(__name__)

KB_VERSION = 1


@dataclass
class Correction:
    window_id: int
    improved_reasoning: str
    key_insights: list[str]
    prediction_factors: str
    original_prediction: list[float]
    actual_values: list[float]

    def rendered(self) -> str:
        return json.dumps(
            {
                "Improved_Reasoning": self.improved_reasoning,
                "Key_Insights": self.key_insights,
                "Prediction_Factors": self.prediction_factors,
            }
        )


@dataclass
class KBEntry:
    window_id: int
    summary_text: str
    embedding: np.ndarray  # unit-norm float32 [d_emb]
    correction: Correction
    span_end: str  # ISO instant of the window's horizon end


@dataclass
class KnowledgeBase:
    entries: list[KBEntry]
    d_emb: int
    embedder: str
    split_boundary: str  # ISO instant; all entries end strictly before it

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclass
class RetrievalResult:
    window_id: int
    score: float
    correction: Correction


def _coerce_insights(value) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, list):
        return [str(v) for v in value]
    return [json.dumps(value)]


def correct(
    client,
    prediction,
    reasoning: str,
    actual,
    summary: Summary,
    dataset_name: str = "target",
    retries: int = DEFAULT_RETRIES,
    cache_dir=None,
) -> Correction | None:
    """Ask the reasoner to rewrite its reasoning given the actual outcome.

    Returns None (window skipped) when the response stays unparseable.
    """

    prediction = [float(v) for v in prediction]
    actual = [float(v) for v in actual]
    if len(prediction) != len(actual):
        raise ArgumentError(
            f"prediction length {len(prediction)} != actuals length {len(actual)}"
        )
    prompt = render_prompt(
        load_prompt("correct"),
        dataset_name=dataset_name,
        summary=summary.rendered(),
        original_prediction=json.dumps(prediction),
        actual_str=json.dumps(actual),
        original_reasoning=reasoning,
    )
    for attempt in range(retries + 1):
        try:
            raw = cached_call(client, prompt if attempt == 0 else f"{prompt}\n[attempt {attempt}]",
                              cache_dir)
        except Exception:
            continue
        try:
            data = extract_first_json(raw)
        except PredictionParseError:
            continue
        fields = {}
        for key in ("Improved_Reasoning", "Key_Insights", "Prediction_Factors"):
            value = data.get(key, data.get(key.lower()))
            if value is None:
                break
            fields[key] = value
        else:
            return Correction(
                window_id=summary.window_id,
                improved_reasoning=str(fields["Improved_Reasoning"]),
                key_insights=_coerce_insights(fields["Key_Insights"]),
                prediction_factors=str(fields["Prediction_Factors"]),
                original_prediction=prediction,
                actual_values=actual,
            )
    log.warning("correction unparseable for window %d; excluded from KB", summary.window_id)
    return None


def build_knowledge_base(
    windows,
    records: list[dict],
    corrections: dict,
    backend,
    split_boundary,
) -> KnowledgeBase:
    """Assemble the KB from training windows and their pipeline outputs.

    Every window must end strictly before the validation boundary; anything
    later is a hard leakage error.
    """

    import pandas as pd

    boundary = str(split_boundary)
    boundary_ts = pd.Timestamp(split_boundary)
    by_id = {w.window_id: w for w in windows}
    entries = []
    for rec in sorted(records, key=lambda r: r["window_id"]):
        wid = rec["window_id"]
        window = by_id.get(wid)
        if window is None:
            continue
        if pd.Timestamp(window.horizon_span[1]) >= boundary_ts:
            raise LeakageError(
                f"window {wid} ends {window.horizon_span[1]}, at or past the "
                f"validation boundary {boundary}"
            )
        correction = corrections.get(wid)
        if correction is None:
            continue
        summary_text = json.dumps(rec["summary"], sort_keys=True)
        emb = embed_summary(backend, summary_text)
        entries.append(
            KBEntry(
                window_id=wid,
                summary_text=summary_text,
                embedding=emb.vector,
                correction=correction,
                span_end=str(window.horizon_span[1]),
            )
        )
    return KnowledgeBase(
        entries=entries,
        d_emb=backend.d_emb,
        embedder=backend.name,
        split_boundary=boundary,
    )


def _scores(kb: KnowledgeBase, query: SummaryEmbedding) -> np.ndarray:
    q = np.asarray(query.vector, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ArgumentError("query embedding has zero norm")
    q = q / qn
    mat = np.stack([e.embedding.astype(np.float64) for e in kb.entries])
    norms = np.linalg.norm(mat, axis=1)
    norms[norms == 0] = 1.0
    return (mat / norms[:, None]) @ q


def _ranked_indices(kb: KnowledgeBase, query: SummaryEmbedding) -> tuple[np.ndarray, np.ndarray]:
    scores = _scores(kb, query)
    ids = np.array([e.window_id for e in kb.entries])
    order = np.lexsort((ids, -scores))  # descending score, ties to smaller window_id
    return order, scores


def retrieve(kb: KnowledgeBase, query: SummaryEmbedding, k: int = 1) -> list[RetrievalResult]:
    """Exact top-k by cosine similarity; empty list signals no guidance."""
    if kb.size == 0:
        return []
    if len(query.vector) != kb.d_emb:
        raise ArgumentError(f"query dim {len(query.vector)} != KB d_emb {kb.d_emb}")
    order, scores = _ranked_indices(kb, query)
    out = []
    for idx in order[: max(k, 0)]:
        e = kb.entries[idx]
        out.append(RetrievalResult(window_id=e.window_id, score=float(scores[idx]),
                                   correction=e.correction))
    return out


def rank_select(kb: KnowledgeBase, query: SummaryEmbedding, rank: int) -> RetrievalResult:
    """The rank-th most similar entry (1-based) under the same ordering."""
    if not 1 <= rank <= kb.size:
        raise ArgumentError(f"rank {rank} outside [1, {kb.size}]")
    order, scores = _ranked_indices(kb, query)
    idx = order[rank - 1]
    e = kb.entries[idx]
    return RetrievalResult(window_id=e.window_id, score=float(scores[idx]),
                           correction=e.correction)


def save_kb(kb: KnowledgeBase, path):
    header = {
        "version": KB_VERSION,
        "d_emb": kb.d_emb,
        "embedder": kb.embedder,
        "split_boundary_instant": kb.split_boundary,
        "count": kb.size,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for e in kb.entries:
            rec = {
                "window_id": e.window_id,
                "summary_text": e.summary_text,
                "embedding": base64.b64encode(
                    e.embedding.astype("<f4").tobytes()
                ).decode("ascii"),
                "improved_reasoning": e.correction.improved_reasoning,
                "key_insights": e.correction.key_insights,
                "prediction_factors": e.correction.prediction_factors,
                "original_prediction": e.correction.original_prediction,
                "actual_values": e.correction.actual_values,
                "span_end": e.span_end,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_kb(path, expected_embedder: str | None = None) -> KnowledgeBase:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise IntegrityError(f"{path}: empty knowledge-base file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != KB_VERSION:
        raise CompatibilityError(
            f"{path}: version {header.get('version')} != {KB_VERSION}"
        )
    if expected_embedder is not None and header.get("embedder") != expected_embedder:
        raise CompatibilityError(
            f"{path}: built with embedder '{header.get('embedder')}', "
            f"configured '{expected_embedder}'"
        )
    if len(lines) - 1 != header.get("count", -1):
        raise IntegrityError(
            f"{path}: header declares {header.get('count')} entries, found {len(lines) - 1}"
        )
    import pandas as pd

    boundary = header["split_boundary_instant"]
    boundary_ts = pd.Timestamp(boundary)
    entries = []
    for ln in lines[1:]:
        try:
            rec = json.loads(ln)
            emb = np.frombuffer(base64.b64decode(rec["embedding"]), dtype="<f4").copy()
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise IntegrityError(f"{path}: corrupt entry line: {exc}") from exc
        if len(emb) != header["d_emb"]:
            raise IntegrityError(
                f"{path}: entry embedding dim {len(emb)} != header d_emb {header['d_emb']}"
            )
        if pd.Timestamp(rec["span_end"]) >= boundary_ts:
            raise LeakageError(
                f"{path}: entry {rec['window_id']} ends {rec['span_end']}, at or past "
                f"the boundary {boundary}"
            )
        entries.append(
            KBEntry(
                window_id=rec["window_id"],
                summary_text=rec["summary_text"],
                embedding=emb,
                correction=Correction(
                    window_id=rec["window_id"],
                    improved_reasoning=rec["improved_reasoning"],
                    key_insights=list(rec["key_insights"]),
                    prediction_factors=rec["prediction_factors"],
                    original_prediction=list(rec["original_prediction"]),
                    actual_values=list(rec["actual_values"]),
                ),
                span_end=rec["span_end"],
            )
        )
    return KnowledgeBase(
        entries=entries,
        d_emb=header["d_emb"],
        embedder=header["embedder"],
        split_boundary=boundary,
    )


class SeriesIndex:
    """Look-back similarity index for the ts-only retrieval mode: cosine over
    flattened z-scored windows, returning the matched raw series."""

    def __init__(self, windows, raw_windows=None):
        self.window_ids = [w.window_id for w in windows]
        flat = np.stack([w.x.reshape(-1) for w in windows]).astype(np.float64)
        mean = flat.mean(axis=1, keepdims=True)
        std = flat.std(axis=1, keepdims=True)
        std[std == 0] = 1.0
        self.matrix = (flat - mean) / std
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self.matrix /= norms
        src = raw_windows if raw_windows is not None else windows
        self.raw_series = {w.window_id: w.x.copy() for w in src}

    def query(self, window) -> tuple[int, float, np.ndarray]:
        q = window.x.reshape(-1).astype(np.float64)
        q = (q - q.mean()) / (q.std() or 1.0)
        qn = np.linalg.norm(q)
        if qn:
            q = q / qn
        scores = self.matrix @ q
        ids = np.array(self.window_ids)
        order = np.lexsort((ids, -scores))
        best = order[0]
        wid = self.window_ids[best]
        return wid, float(scores[best]), self.raw_series[wid]
