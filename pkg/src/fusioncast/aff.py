"""Adaptive frequency fusion.

Both branch predictions are decomposed into one-sided real spectra, the bins
are partitioned into low/mid/high bands, and six learnable weights (one per
branch x band) mix the band components before the inverse transform. The same
machinery provides the analysis band-pass filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError

BANDS = ("low", "mid", "high")
BRANCHES = ("num", "event")


@dataclass
class BandPartition:
    n_bins: int
    low_frac: float
    high_frac: float
    masks: dict  # band -> bool array [n_bins]

    def bins(self, band: str) -> np.ndarray:
        return np.flatnonzero(self.masks[band])


def partition_bands(horizon: int, low_frac: float = 0.1, high_frac: float = 0.7) -> BandPartition:
    """Split the ⌊H/2⌋+1 one-sided bins at ceil(frac * F) boundaries.

    Boundaries are repaired so that (for F >= 3) every band is non-empty and
    the low band always holds the DC bin; F == 2 leaves mid empty with its
    weights inert.
    """

    if horizon < 2:
        raise ArgumentError("horizon must be at least 2 for spectral fusion")
    if not (0.0 < low_frac < high_frac < 1.0):
        raise ArgumentError(f"need 0 < low_frac < high_frac < 1, got {low_frac}, {high_frac}")
    F = horizon // 2 + 1
    if F == 2:
        lo, hi = 1, 1
    else:
        lo = math.ceil(low_frac * F)
        hi = math.ceil(high_frac * F)
        # non-emptiness repair: keep DC in low, leave room for mid and high
        lo = max(1, min(lo, F - 2))
        hi = min(max(hi, lo + 1), F - 1)
    masks = {}
    idx = np.arange(F)
    masks["low"] = idx < lo
    masks["mid"] = (idx >= lo) & (idx < hi)
    masks["high"] = idx >= hi
    return BandPartition(n_bins=F, low_frac=low_frac, high_frac=high_frac, masks=masks)


@dataclass
class FusionWeights:
    values: dict  # (branch, band) -> float
    trainable: bool = True

    @classmethod
    def balanced(cls, init: float = 0.5) -> "FusionWeights":
        return cls(values={(br, b): init for br in BRANCHES for b in BANDS})

    def as_array(self) -> np.ndarray:
        return np.array([self.values[(br, b)] for br in BRANCHES for b in BANDS])

    @classmethod
    def from_array(cls, arr) -> "FusionWeights":
        arr = np.asarray(arr, dtype=np.float64).reshape(6)
        keys = [(br, b) for br in BRANCHES for b in BANDS]
        return cls(values={k: float(v) for k, v in zip(keys, arr)})


def _check_pred(pred: np.ndarray, name: str) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if not np.isfinite(pred).all():
        raise ArgumentError(f"{name} prediction contains non-finite values")
    return pred


def fuse(
    pred_num: np.ndarray,
    pred_event: np.ndarray,
    weights: FusionWeights,
    partition: BandPartition,
) -> np.ndarray:
    """Weighted per-band spectral mix of the two predictions, per variable.

    Linear in both predictions and in the weights.
    """

    squeeze = np.asarray(pred_num).ndim == 1
    pn = _check_pred(pred_num, "num")
    pe = _check_pred(pred_event, "event")
    if pn.shape != pe.shape:
        raise ArgumentError(f"prediction shapes differ: {pn.shape} vs {pe.shape}")
    H = pn.shape[0]
    if H // 2 + 1 != partition.n_bins:
        raise ArgumentError(
            f"partition has {partition.n_bins} bins but horizon {H} implies {H // 2 + 1}"
        )
    spectra = {"num": np.fft.rfft(pn, axis=0), "event": np.fft.rfft(pe, axis=0)}
    fused = np.zeros_like(spectra["num"])
    for br in BRANCHES:
        for b in BANDS:
            w = weights.values[(br, b)]
            fused += w * spectra[br] * partition.masks[b][:, None]
    out = np.fft.irfft(fused, n=H, axis=0)
    return out[:, 0] if squeeze else out


def bandpass_filter(series: np.ndarray, lo_frac: float, hi_frac: float) -> np.ndarray:
    """Keep one-sided bins in [ceil(lo_frac*F), ceil(hi_frac*F)), zero the rest.

    Splitting [0, 1] into touching fraction intervals therefore reconstructs
    the input exactly.
    """

    if not (0.0 <= lo_frac < hi_frac <= 1.0):
        raise ArgumentError(f"need 0 <= lo_frac < hi_frac <= 1, got {lo_frac}, {hi_frac}")
    arr = np.asarray(series, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    n = arr.shape[0]
    F = n // 2 + 1
    lo = math.ceil(lo_frac * F)
    hi = math.ceil(hi_frac * F)
    spec = np.fft.rfft(arr, axis=0)
    keep = np.zeros(F, dtype=bool)
    keep[lo:hi] = True
    out = np.fft.irfft(spec * keep[:, None], n=n, axis=0)
    return out[:, 0] if squeeze else out


def band_component(pred: np.ndarray, partition: BandPartition, band: str) -> np.ndarray:
    """Time-domain band component of a prediction under a partition mask."""
    squeeze = np.asarray(pred).ndim == 1
    arr = _check_pred(pred, band)
    spec = np.fft.rfft(arr, axis=0)
    out = np.fft.irfft(spec * partition.masks[band][:, None], n=arr.shape[0], axis=0)
    return out[:, 0] if squeeze else out


def fuse_weight_gradient(
    pred_num: np.ndarray,
    pred_event: np.ndarray,
    weights: FusionWeights,
    partition: BandPartition,
    target: np.ndarray,
) -> dict:
    """Analytic d MSE(fused, target) / d w for each (branch, band).

    Fusion is linear in w, so the gradient is 2/(H*N) <fused - target,
    band_component(branch prediction)>.
    """

    pn = _check_pred(pred_num, "num")
    pe = _check_pred(pred_event, "event")
    y = _check_pred(target, "target")
    fused = fuse(pn, pe, weights, partition)
    resid = fused - y
    scale = 2.0 / resid.size
    preds = {"num": pn, "event": pe}
    grads = {}
    for br in BRANCHES:
        for b in BANDS:
            comp = band_component(preds[br], partition, b)
            grads[(br, b)] = scale * float((resid * comp).sum())
    return grads


class SpectralFusion(torch.nn.Module):
    """Differentiable counterpart of :func:`fuse` for joint training.

    Weight layout follows FusionWeights.as_array(): num-low, num-mid,
    num-high, event-low, event-mid, event-high.
    """

    def __init__(self, partition: BandPartition, init: float = 0.5):
        super().__init__()
        self.register_buffer(
            "band_masks",
            torch.stack([torch.as_tensor(partition.masks[b], dtype=torch.bool) for b in BANDS]),
        )
        self.weights = torch.nn.Parameter(torch.full((6,), float(init)))
        self.horizon_bins = partition.n_bins

    def forward(self, pred_num: torch.Tensor, pred_event: torch.Tensor) -> torch.Tensor:
        # inputs [B, H, N] (or [H, N]); fft along the horizon axis
        batched = pred_num.dim() == 3
        if not batched:
            pred_num, pred_event = pred_num.unsqueeze(0), pred_event.unsqueeze(0)
        H = pred_num.shape[1]
        spec_num = torch.fft.rfft(pred_num, dim=1)
        spec_event = torch.fft.rfft(pred_event, dim=1)
        masks = self.band_masks.to(spec_num.real.dtype)  # [3, F]
        w_num = (self.weights[:3, None] * masks).sum(dim=0)  # [F]
        w_event = (self.weights[3:, None] * masks).sum(dim=0)
        fused = spec_num * w_num[None, :, None] + spec_event * w_event[None, :, None]
        out = torch.fft.irfft(fused, n=H, dim=1)
        return out if batched else out.squeeze(0)

    def to_fusion_weights(self) -> FusionWeights:
        return FusionWeights.from_array(self.weights.detach().cpu().numpy())

    def load_fusion_weights(self, weights: FusionWeights):
        with torch.no_grad():
            self.weights.copy_(torch.as_tensor(weights.as_array(), dtype=self.weights.dtype))


class MlpFusion(torch.nn.Module):
    """Fusion alternative: per-variable MLP over both horizon vectors."""

    def __init__(self, horizon: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(16, 2 * horizon)
        self.net = torch.nn.Sequential(
            torch.nn.Linear(2 * horizon, hidden),
            torch.nn.ReLU(),
            torch.nn.Linear(hidden, horizon),
        )

    def forward(self, pred_num: torch.Tensor, pred_event: torch.Tensor) -> torch.Tensor:
        batched = pred_num.dim() == 3
        if not batched:
            pred_num, pred_event = pred_num.unsqueeze(0), pred_event.unsqueeze(0)
        stacked = torch.cat([pred_num, pred_event], dim=1)  # [B, 2H, N]
        out = self.net(stacked.transpose(1, 2)).transpose(1, 2)
        return out if batched else out.squeeze(0)


class CrossAttentionFusion(torch.nn.Module):
    """Fusion alternative: the numerical prediction attends over both branch
    vectors (two tokens per variable)."""

    def __init__(self, horizon: int):
        super().__init__()
        self.wq = torch.nn.Linear(horizon, horizon)
        self.wk = torch.nn.Linear(horizon, horizon)
        self.wv = torch.nn.Linear(horizon, horizon)
        self.out = torch.nn.Linear(horizon, horizon)

    def forward(self, pred_num: torch.Tensor, pred_event: torch.Tensor) -> torch.Tensor:
        batched = pred_num.dim() == 3
        if not batched:
            pred_num, pred_event = pred_num.unsqueeze(0), pred_event.unsqueeze(0)
        H = pred_num.shape[1]
        num = pred_num.transpose(1, 2)  # [B, N, H]
        event = pred_event.transpose(1, 2)
        tokens = torch.stack([num, event], dim=2)  # [B, N, 2, H]
        q = self.wq(num).unsqueeze(2)  # [B, N, 1, H]
        k, v = self.wk(tokens), self.wv(tokens)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(H)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).squeeze(2)
        out = self.out(num + mixed).transpose(1, 2)
        return out if batched else out.squeeze(0)


def boundary_sweep(
    pred_num: np.ndarray,
    pred_event: np.ndarray,
    target: np.ndarray,
    weights: FusionWeights,
    low_grid=(0.1, 0.2, 0.3, 0.4),
    high_grid=(0.6, 0.7, 0.8, 0.9),
) -> list:
    """MSE of the fused prediction over a grid of band boundaries; rows of
    (low_frac, high_frac, mse) for heat-map style sensitivity analysis."""
    H = np.asarray(pred_num).shape[0]
    rows = []
    for lf in low_grid:
        for hf in high_grid:
            if not lf < hf:
                continue
            part = partition_bands(H, lf, hf)
            fused = fuse(pred_num, pred_event, weights, part)
            mse = float(np.mean((fused - np.asarray(target, dtype=np.float64)) ** 2))
            rows.append((lf, hf, mse))
    return rows
