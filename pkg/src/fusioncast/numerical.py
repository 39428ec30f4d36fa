"""Numerical prediction branch.

A channel-independent patch transformer encodes the look-back; learnable
per-variable queries pull trend/seasonal components out of the endogenous-text
token embeddings; cross-attention aligns the two modalities; a decomposed
symmetric InfoNCE loss ties them together; and a shared linear head maps
representations to horizon values.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import aff
from .errors import ArgumentError, CompatibilityError, ConfigError, ShapeError

CHECKPOINT_VERSION = 1


def decompose(x: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Trend = edge-padded centered moving average; seasonal = remainder.

    Exact reconstruction: trend + seasonal == x.
    """

    if kernel % 2 == 0:
        raise ArgumentError(f"moving-average kernel must be odd, got {kernel}")
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    L = arr.shape[0]
    if not 1 <= kernel <= L:
        raise ArgumentError(f"kernel {kernel} outside [1, L={L}]")
    if kernel == 1:
        trend = arr.copy()
    else:
        half = kernel // 2
        padded = np.pad(arr, ((half, half), (0, 0)), mode="edge")
        csum = np.cumsum(padded, axis=0)
        csum = np.vstack([np.zeros((1, arr.shape[1])), csum])
        trend = (csum[kernel:] - csum[:-kernel]) / kernel
    seasonal = arr - trend
    if squeeze:
        return trend[:, 0], seasonal[:, 0]
    return trend, seasonal


def clamp_kernel(kernel: int, lookback: int) -> int:
    """Largest odd value <= min(kernel, lookback)."""
    k = min(kernel, lookback)
    if k % 2 == 0:
        k -= 1
    return max(k, 1)


def default_patch_len(lookback: int) -> int:
    return max(2, lookback // 4)


def scaled_attention(query, key, value, key_mask=None):
    """softmax(Q K^T / sqrt(d)) V with an optional valid-key mask.

    Returns (output, attention weights); weight rows are convex combinations.
    """

    d = query.shape[-1]
    scores = query @ key.transpose(-1, -2) / math.sqrt(d)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    return attn @ value, attn


@dataclass
class ModelConfig:
    n_vars: int
    lookback: int
    horizon: int
    d_ts: int = 32
    n_layers: int = 2
    n_heads: int = 4
    patch_len: int | None = None
    patch_stride: int | None = None
    dropout: float = 0.1
    pooling: str = "mean"  # or "flatten"
    d_text: int = 32
    decompose_kernel: int = 25
    temperature: float = 1.0
    use_decomposition: bool = True  # False -> single-component alignment
    use_alignment: bool = True  # False -> plain numerical branch
    low_frac: float = 0.1
    high_frac: float = 0.7
    fusion_init: float = 0.5
    fusion_strategy: str = "aff"  # aff | mlp | cross-attention | none
    # Windows are centered on their last look-back value before encoding (and
    # the offset restored afterwards), so the encoder sees stationary
    # residuals even when the series level drifts.
    anchor: bool = True

    def __post_init__(self):
        if self.patch_len is None:
            self.patch_len = default_patch_len(self.lookback)
        if self.patch_stride is None:
            self.patch_stride = max(1, self.patch_len // 2)
        if self.patch_len > self.lookback:
            raise ConfigError(
                f"patch_len {self.patch_len} exceeds lookback {self.lookback}"
            )
        if self.patch_stride < 1 or self.n_layers < 1:
            raise ConfigError("patch_stride and n_layers must be at least 1")

    @property
    def components(self) -> tuple[str, ...]:
        return ("tr", "se") if self.use_decomposition else ("all",)

    @property
    def effective_kernel(self) -> int:
        return clamp_kernel(self.decompose_kernel, self.lookback)


class SeriesEncoder(nn.Module):
    """Channel-independent patch transformer; one d_ts vector per variable."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p, s, L = cfg.patch_len, cfg.patch_stride, cfg.lookback
        overhang = (L - p) % s
        self.pad = 0 if overhang == 0 else s - overhang
        self.n_patches = (L + self.pad - p) // s + 1
        self.patch_embed = nn.Linear(p, cfg.d_ts)
        self.pos_embed = nn.Parameter(torch.randn(self.n_patches, cfg.d_ts) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_ts,
            nhead=cfg.n_heads,
            dim_feedforward=2 * cfg.d_ts,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.n_layers)
        if cfg.pooling == "flatten":
            self.flatten_proj = nn.Linear(self.n_patches * cfg.d_ts, cfg.d_ts)
        elif cfg.pooling != "mean":
            raise ConfigError(f"unknown pooling '{cfg.pooling}'")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x [B, L, N] -> [B, N, d_ts]
        if x.shape[1] != self.cfg.lookback:
            raise ShapeError(f"expected {self.cfg.lookback} look-back rows, got {x.shape[1]}")
        B, L, N = x.shape
        flat = x.permute(0, 2, 1).reshape(B * N, L)
        if self.pad:
            flat = torch.cat([flat, flat[:, -1:].expand(-1, self.pad)], dim=1)
        patches = flat.unfold(1, self.cfg.patch_len, self.cfg.patch_stride)
        tokens = self.patch_embed(patches) + self.pos_embed
        encoded = self.encoder(tokens)
        if self.cfg.pooling == "mean":
            pooled = encoded.mean(dim=1)
        else:
            pooled = self.flatten_proj(encoded.reshape(B * N, -1))
        return pooled.reshape(B, N, self.cfg.d_ts)


class AlignmentModule(nn.Module):
    """Dual-query text component extraction plus cross-modal attention."""

    def __init__(self, n_vars: int, d_ts: int, d_text: int, components=("tr", "se")):
        super().__init__()
        self.components = tuple(components)
        self.queries = nn.ParameterDict(
            {c: nn.Parameter(torch.randn(n_vars, d_text) * 0.02) for c in self.components}
        )
        self.proj = nn.Linear(d_ts, d_text)
        self.proj_inv = nn.Linear(d_text, d_ts)

    def extract(self, tokens: torch.Tensor, token_mask=None) -> dict:
        """Per-component E = Attention(Q, tokens, tokens); rows live in the
        convex hull of the token embeddings."""
        out = {}
        for c in self.components:
            q = self.queries[c]
            if tokens.dim() == 3:  # batched [B, T, d_text]
                q = q.unsqueeze(0).expand(tokens.shape[0], -1, -1)
            e, _ = scaled_attention(q, tokens, tokens, key_mask=token_mask)
            out[c] = e
        return out

    def align(self, h_ts: torch.Tensor, extracted: dict) -> tuple[dict, dict]:
        """Z = Cross-Attention(Proj(H_ts), E, E); Z_tilde = Proj_inv(Z)."""
        q = self.proj(h_ts)
        z, z_inv = {}, {}
        for c, e in extracted.items():
            if e.shape[-1] != q.shape[-1]:
                raise ShapeError(
                    f"text component dim {e.shape[-1]} != projected query dim {q.shape[-1]}"
                )
            zc, _ = scaled_attention(q, e, e)
            z[c] = zc
            z_inv[c] = self.proj_inv(zc)
        return z, z_inv


def _batch_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pairwise cosine similarity matrix between rows of a and rows of b."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if bool((na < eps).any()) or bool((nb < eps).any()):
        warnings.warn("zero-norm representation in contrastive loss; cosine guarded by epsilon")
    return (a @ b.T) / (na.clamp_min(eps) * nb.T.clamp_min(eps))


def contrastive_loss(h_bars: dict, z_bars: dict, temperature: float = 1.0) -> torch.Tensor:
    """Symmetric InfoNCE over matched series/text component means.

    Per component: batch-mean of -log softmax in both directions, with in-batch
    negatives; the result is averaged over components. B=1 gives exactly 0.
    """

    if set(h_bars) != set(z_bars):
        raise ArgumentError(f"component mismatch: {sorted(h_bars)} vs {sorted(z_bars)}")
    total = None
    for c in h_bars:
        h, z = h_bars[c], z_bars[c]
        if h.shape != z.shape:
            raise ShapeError(f"component '{c}' shapes differ: {h.shape} vs {z.shape}")
        sim = _batch_cosine(h, z) / temperature
        labels = torch.arange(sim.shape[0], device=sim.device)
        loss_hz = torch.nn.functional.cross_entropy(sim, labels)
        loss_zh = torch.nn.functional.cross_entropy(sim.T, labels)
        comp = loss_hz + loss_zh
        total = comp if total is None else total + comp
    return total / len(h_bars)


class PredictionHead(nn.Module):
    """Shared per-variable linear map from d_ts to the horizon."""

    def __init__(self, d_ts: int, horizon: int):
        super().__init__()
        self.linear = nn.Linear(d_ts, horizon)

    def forward(self, rep: torch.Tensor) -> torch.Tensor:
        # rep [B, N, d_ts] -> [B, H, N]
        return self.linear(rep).transpose(1, 2)


class ForecastModel(nn.Module):
    """Full trainable model: encoder, alignment, head, and fusion weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SeriesEncoder(cfg)
        self.head = PredictionHead(cfg.d_ts, cfg.horizon)
        self.alignment = (
            AlignmentModule(cfg.n_vars, cfg.d_ts, cfg.d_text, cfg.components)
            if cfg.use_alignment
            else None
        )
        partition = aff.partition_bands(cfg.horizon, cfg.low_frac, cfg.high_frac)
        if cfg.fusion_strategy == "aff":
            self.fusion = aff.SpectralFusion(partition, init=cfg.fusion_init)
        elif cfg.fusion_strategy == "mlp":
            self.fusion = aff.MlpFusion(cfg.horizon)
        elif cfg.fusion_strategy == "cross-attention":
            self.fusion = aff.CrossAttentionFusion(cfg.horizon)
        elif cfg.fusion_strategy == "none":
            self.fusion = None
        else:
            raise ConfigError(f"unknown fusion strategy '{cfg.fusion_strategy}'")
        self.band_partition = partition

    # --- forward pieces -------------------------------------------------

    def encode_series(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def component_inputs(self, x: np.ndarray) -> dict:
        """Decomposed inputs for the contrastive pairing, as numpy arrays."""
        if not self.cfg.use_decomposition:
            return {"all": x}
        trend, seasonal = decompose(x, self.cfg.effective_kernel)
        return {"tr": trend, "se": seasonal}

    def predict_ts_only(self, h_ts: torch.Tensor) -> torch.Tensor:
        return self.head(h_ts)

    def predict_numeric(self, h_ts: torch.Tensor, z_inv: dict) -> torch.Tensor:
        """Equal-weight representation fusion followed by the shared head."""
        if not z_inv:
            return self.head(h_ts)
        text_rep = sum(z_inv.values())
        return self.head(0.5 * h_ts + 0.5 * text_rep)

    def forward_numeric(self, x: torch.Tensor, tokens=None, token_mask=None):
        """Numerical-branch prediction [B, H, N] plus intermediate tensors."""
        h_ts = self.encoder(x)
        if self.alignment is None or tokens is None:
            return self.head(h_ts), {"h_ts": h_ts}
        extracted = self.alignment.extract(tokens, token_mask)
        z, z_inv = self.alignment.align(h_ts, extracted)
        pred = self.predict_numeric(h_ts, z_inv)
        return pred, {"h_ts": h_ts, "extracted": extracted, "z": z, "z_inv": z_inv}

    def alignment_means(self, h_comp: dict, z_inv: dict) -> tuple[dict, dict]:
        """Variable-axis means feeding the contrastive loss."""
        h_bars = {c: h.mean(dim=1) for c, h in h_comp.items()}
        z_bars = {c: z.mean(dim=1) for c, z in z_inv.items()}
        return h_bars, z_bars

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# --- checkpoint serialization (deterministic JSON + base64 tensors) --------


def _tensor_to_record(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    return {
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def _record_to_array(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"])
    return np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()


def save_checkpoint(model: ForecastModel, path, seed: int = 0, extra: dict | None = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": seed,
        "parameter_count": model.parameter_count(),
        "extra": extra or {},
        "tensors": {name: _tensor_to_record(t) for name, t in model.state_dict().items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)


def load_checkpoint(path) -> tuple[ForecastModel, dict]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if "version" not in payload:
        raise CompatibilityError(f"{path}: checkpoint missing version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CompatibilityError(
            f"{path}: checkpoint version {payload['version']} != {CHECKPOINT_VERSION}"
        )
    cfg = ModelConfig(**payload["config"])
    model = ForecastModel(cfg)
    state = {
        name: torch.as_tensor(_record_to_array(rec)) for name, rec in payload["tensors"].items()
    }
    model.load_state_dict(state)
    return model, payload
