"""Three-stage training protocol and run orchestration.

Stage 1 pretrains the series encoder and head on MSE; stage 2 trains the
alignment parameters on the contrastive loss with the encoder frozen; stage 3
fine-tunes everything (including fusion weights) on the composite objective,
trying each candidate learning rate and keeping the checkpoint with the lower
validation MSE of the fused prediction.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import aff, config as config_mod, dataset, encoders, event as event_mod, hic
from .clients import make_client
from .errors import DependencyError, ToolkitError
from .numerical import (
    ForecastModel,
    ModelConfig,
    contrastive_loss,
    decompose,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    stage3_epochs: int = 30
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-3
    stage3_lr_candidates: tuple = (5e-4, 1e-5)
    batch_size: int = 32
    seed: int = 0
    align_in_stage3: bool = True
    use_contrastive: bool = True

    @classmethod
    def from_flat(cls, cfg: dict) -> "TrainConfig":
        return cls(
            stage1_epochs=cfg["train.stage1_epochs"],
            stage2_epochs=cfg["train.stage2_epochs"],
            stage3_epochs=cfg["train.stage3_epochs"],
            stage1_lr=cfg["train.stage1_lr"],
            stage2_lr=cfg["train.stage2_lr"],
            stage3_lr_candidates=tuple(cfg["train.stage3_lr_candidates"]),
            batch_size=cfg["train.batch_size"],
            seed=cfg["run.seed"],
            align_in_stage3=cfg["train.align_in_stage3"],
            use_contrastive=cfg["branch.use_contrastive"],
        )


@dataclass
class TrainReport:
    stage1_losses: list = field(default_factory=list)
    stage2_losses: list = field(default_factory=list)
    stage3_curves: dict = field(default_factory=dict)  # lr -> {train: [], val: []}
    selected_lr: float | None = None
    checkpoint_path: str = ""
    wall_clock_s: float = 0.0


def total_loss(pred_ts, pred_final, target, align_loss):
    """MSE(ts) + align + MSE(final), unit weights."""
    mse = torch.nn.functional.mse_loss
    align = align_loss if torch.is_tensor(align_loss) else torch.tensor(float(align_loss))
    return mse(pred_ts, target) + align + mse(pred_final, target)


class SplitTensors:
    """Window tensors plus precomputed token embeddings for one split."""

    def __init__(self, norm_windows, model_cfg: ModelConfig, backend):
        self.windows = norm_windows
        self.x = torch.tensor(np.stack([w.x for w in norm_windows]), dtype=torch.float32)
        self.y = torch.tensor(np.stack([w.y for w in norm_windows]), dtype=torch.float32)
        self.anchor = self.x[:, -1:, :].clone()  # [n, 1, N]
        if model_cfg.anchor:
            self.x = self.x - self.anchor
            self.y = self.y - self.anchor
        self.anchored = model_cfg.anchor
        self.x_comp = {}
        self.tokens = None
        self.token_lens = None
        if model_cfg.use_alignment:
            mats = [
                encoders.encode_text(backend, w.endo_text).matrix for w in norm_windows
            ]
            self.token_lens = [m.shape[0] for m in mats]
            t_max = max(self.token_lens)
            d = mats[0].shape[1]
            padded = np.zeros((len(mats), t_max, d), dtype=np.float32)
            mask = np.zeros((len(mats), t_max), dtype=bool)
            for i, m in enumerate(mats):
                padded[i, : m.shape[0]] = m
                mask[i, : m.shape[0]] = True
            self.tokens = torch.tensor(padded)
            self.token_mask = torch.tensor(mask)
        self.event = None  # [n, H, N], normalized
        self.event_raw = None  # [n, H] target-scale event predictions
        self.provenance = None

    def __len__(self):
        return self.x.shape[0]


def build_split_tensors(norm_windows, model_cfg: ModelConfig, backend) -> SplitTensors:
    st = SplitTensors(norm_windows, model_cfg, backend)
    if model_cfg.use_alignment:
        comp_arrays = {c: [] for c in model_cfg.components}
        for i in range(len(norm_windows)):
            xi = st.x[i].numpy()  # anchored when the model anchors
            if model_cfg.use_decomposition:
                trend, seasonal = decompose(xi, model_cfg.effective_kernel)
                comp_arrays["tr"].append(trend)
                comp_arrays["se"].append(seasonal)
            else:
                comp_arrays["all"].append(xi)
        st.x_comp = {
            c: torch.tensor(np.stack(v), dtype=torch.float32) for c, v in comp_arrays.items()
        }
    return st


def attach_event_outputs(st: SplitTensors, records, stats, target_index):
    """Normalize raw event predictions into [n, H, N] with zeros off-target."""
    by_id = {r["window_id"]: r for r in records}
    missing = [w.window_id for w in st.windows if w.window_id not in by_id]
    if missing:
        raise ToolkitError(f"missing event outputs for window_ids {missing[:10]}"
                           + ("..." if len(missing) > 10 else ""))
    n, H, N = st.y.shape
    ev = np.zeros((n, H, N), dtype=np.float32)
    ev_raw = np.zeros((n, H), dtype=np.float64)
    prov = []
    mean_t, std_t = stats.mean[target_index], stats.std[target_index]
    anchor_t = st.anchor[:, 0, target_index].numpy()
    for i, w in enumerate(st.windows):
        rec = by_id[w.window_id]
        raw = np.asarray(rec["prediction"], dtype=np.float64)
        ev_raw[i] = raw
        z = (raw - mean_t) / std_t
        ev[i, :, target_index] = z - anchor_t[i] if st.anchored else z
        prov.append(rec["provenance"])
    st.event = torch.tensor(ev)
    st.event_raw = ev_raw
    st.provenance = prov


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.as_tensor(perm[i : i + batch_size], dtype=torch.long)


def _align_forward(model: ForecastModel, st: SplitTensors, idx):
    tokens = st.tokens[idx]
    mask = st.token_mask[idx]
    h_ts = model.encoder(st.x[idx])
    extracted = model.alignment.extract(tokens, mask)
    z, z_inv = model.alignment.align(h_ts, extracted)
    return h_ts, z_inv


def _contrastive_on_batch(model, st, idx, z_inv):
    h_comp = {c: model.encoder(st.x_comp[c][idx]) for c in model.cfg.components}
    h_bars, z_bars = model.alignment_means(h_comp, z_inv)
    return contrastive_loss(h_bars, z_bars, temperature=model.cfg.temperature)


def stage1_pretrain(model: ForecastModel, train: SplitTensors, cfg: TrainConfig) -> list:
    """Encoder + head on MSE, cosine-annealed learning rate."""
    if cfg.stage1_epochs <= 0:
        return []
    params = list(model.encoder.parameters()) + list(model.head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.stage1_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.stage1_epochs)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for _ in range(cfg.stage1_epochs):
        model.train()
        tot = cnt = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            pred = model.predict_ts_only(model.encoder(train.x[idx]))
            loss = torch.nn.functional.mse_loss(pred, train.y[idx])
            if not torch.isfinite(loss):
                raise ToolkitError("non-finite loss in stage 1; aborting")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            cnt += len(idx)
        sched.step()
        losses.append(tot / cnt)
    return losses


def stage2_align(model: ForecastModel, train: SplitTensors, cfg: TrainConfig) -> list:
    """Alignment parameters only, contrastive loss, encoder frozen."""
    if model.alignment is None or cfg.stage2_epochs <= 0 or not cfg.use_contrastive:
        return []
    opt = torch.optim.Adam(model.alignment.parameters(), lr=cfg.stage2_lr)
    rng = np.random.default_rng(cfg.seed + 2)
    losses = []
    for _ in range(cfg.stage2_epochs):
        model.train()
        tot = cnt = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            h_ts, z_inv = _align_forward(model, train, idx)
            loss = _contrastive_on_batch(model, train, idx, z_inv)
            if not torch.isfinite(loss):
                raise ToolkitError("non-finite loss in stage 2; aborting")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            cnt += len(idx)
        losses.append(tot / cnt)
    return losses


def _final_prediction(model: ForecastModel, st: SplitTensors, idx, use_event: bool):
    """(pred_ts, pred_num, pred_final, align_loss_tensor_or_None) on a batch."""
    if model.alignment is not None:
        h_ts, z_inv = _align_forward(model, st, idx)
        pred_num = model.predict_numeric(h_ts, z_inv)
    else:
        h_ts = model.encoder(st.x[idx])
        z_inv = None
        pred_num = model.predict_ts_only(h_ts)
    pred_ts = model.predict_ts_only(h_ts)
    if use_event and model.fusion is not None and st.event is not None:
        pred_final = model.fusion(pred_num, st.event[idx])
    else:
        pred_final = pred_num
    return h_ts, z_inv, pred_ts, pred_num, pred_final


def _val_mse(model: ForecastModel, val: SplitTensors, use_event: bool, batch_size: int) -> float:
    model.eval()
    tot = cnt = 0
    with torch.no_grad():
        for i in range(0, len(val), batch_size):
            idx = torch.arange(i, min(i + batch_size, len(val)))
            *_, pred_final = _final_prediction(model, val, idx, use_event)
            tot += torch.nn.functional.mse_loss(
                pred_final, val.y[idx], reduction="sum"
            ).item()
            cnt += val.y[idx].numel()
    return tot / max(cnt, 1)


def stage3_joint(
    model: ForecastModel,
    train: SplitTensors,
    val: SplitTensors,
    cfg: TrainConfig,
    use_event: bool,
) -> tuple[float, dict]:
    """Joint fine-tuning; runs every candidate learning rate from the same
    starting state and keeps the best-on-validation checkpoint."""

    if use_event and train.event is None:
        raise ToolkitError("stage 3 requires precomputed event outputs for training windows")
    start_state = {k: v.clone() for k, v in model.state_dict().items()}
    curves = {}
    best = None  # (val_mse, lr, state)
    for ci, lr in enumerate(cfg.stage3_lr_candidates):
        model.load_state_dict(start_state)
        torch.manual_seed(cfg.seed * 1000 + 31 * ci + 3)
        rng = np.random.default_rng(cfg.seed + 100 + ci)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        train_losses, val_losses = [], []
        cand_best = (_val_mse(model, val, use_event, cfg.batch_size),
                     {k: v.clone() for k, v in model.state_dict().items()})
        for _ in range(cfg.stage3_epochs):
            model.train()
            tot = cnt = 0
            for idx in _batches(len(train), cfg.batch_size, rng):
                h_ts, z_inv, pred_ts, pred_num, pred_final = _final_prediction(
                    model, train, idx, use_event
                )
                if (
                    model.alignment is not None
                    and cfg.use_contrastive
                    and cfg.align_in_stage3
                ):
                    align = _contrastive_on_batch(model, train, idx, z_inv)
                else:
                    align = torch.tensor(0.0)
                loss = total_loss(pred_ts, pred_final, train.y[idx], align)
                if not torch.isfinite(loss):
                    raise ToolkitError("non-finite loss in stage 3; aborting")
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot += loss.item() * len(idx)
                cnt += len(idx)
            train_losses.append(tot / cnt)
            v = _val_mse(model, val, use_event, cfg.batch_size)
            val_losses.append(v)
            if v < cand_best[0]:
                cand_best = (v, {k: t.clone() for k, t in model.state_dict().items()})
        curves[lr] = {"train": train_losses, "val": val_losses}
        if best is None or cand_best[0] < best[0]:
            best = (cand_best[0], lr, cand_best[1])
    model.load_state_dict(best[2])
    return best[1], curves


# --- full-run orchestration -------------------------------------------------


def _out_paths(cfg: dict) -> dict:
    out = cfg["run.out"]
    return {
        "out": out,
        "config": os.path.join(out, "config.json"),
        "prepared": os.path.join(out, "prepared"),
        "meta": os.path.join(out, "prepared", "meta.json"),
        "events": os.path.join(out, "events"),
        "kb": os.path.join(out, "kb"),
        "checkpoints": os.path.join(out, "checkpoints"),
        "predictions": os.path.join(out, "predictions"),
        "reports": os.path.join(out, "reports"),
        "cache": cfg["run.cache_dir"] or os.path.join(out, "cache"),
    }


def _load_series(cfg: dict) -> dataset.MultimodalSeries:
    if not cfg["data.series_path"] or not os.path.exists(cfg["data.series_path"]):
        raise DependencyError(
            f"dataset file {cfg['data.series_path']!r} not found; run 'synth' or point "
            "data.series_path at an existing CSV",
            producer="synth",
        )
    series = dataset.load_dataset(cfg["data.series_path"], cfg["data.text_path"])
    if cfg["data.labels_path"] and os.path.exists(cfg["data.labels_path"]):
        series.event_labels = dataset.load_event_labels(cfg["data.labels_path"], len(series))
    return series


def _split_cfg(cfg: dict, horizon: int) -> dataset.SplitConfig:
    return dataset.SplitConfig(
        train_frac=cfg["split.train_frac"],
        val_frac=cfg["split.val_frac"],
        test_frac=cfg["split.test_frac"],
        lookback=cfg["split.lookback"],
        horizon=horizon,
        label_len=cfg["split.label_len"],
    )


def _model_cfg(cfg: dict, n_vars: int, horizon: int) -> ModelConfig:
    fusion_strategy = cfg["fusion.strategy"] if cfg["branch.use_event"] else "none"
    return ModelConfig(
        n_vars=n_vars,
        lookback=cfg["split.lookback"],
        horizon=horizon,
        d_ts=cfg["model.d_ts"],
        n_layers=cfg["model.n_layers"],
        n_heads=cfg["model.n_heads"],
        patch_len=cfg["model.patch_len"],
        patch_stride=cfg["model.patch_stride"],
        dropout=cfg["model.dropout"],
        pooling=cfg["model.pooling"],
        d_text=cfg["model.d_text"],
        decompose_kernel=cfg["model.decompose_kernel"],
        temperature=cfg["model.temperature"],
        use_decomposition=cfg["branch.use_decomposition"],
        use_alignment=cfg["branch.use_alignment"],
        low_frac=cfg["fusion.low_frac"],
        high_frac=cfg["fusion.high_frac"],
        fusion_init=cfg["fusion.init"],
        fusion_strategy=fusion_strategy,
        anchor=cfg["model.anchor"],
    )


def _backend(cfg: dict):
    return encoders.make_backend(
        cfg["encoder.backend"],
        d_text=cfg["model.d_text"],
        d_emb=cfg["encoder.d_emb"],
        model=cfg["encoder.model"],
    )


class HorizonData:
    """Raw and normalized windows for one horizon across the three splits."""

    def __init__(self, series, cfg: dict, horizon: int, seed: int):
        from .evaluation import apply_text_source

        scfg = _split_cfg(cfg, horizon)
        self.split_cfg = scfg
        self.horizon = horizon
        self.splits = dict(zip(("train", "val", "test"), dataset.temporal_split(series, scfg)))
        self.stats = dataset.NormStats.fit(self.splits["train"].values)
        self.target_index = series.target_index
        self.boundary = self.splits["val"].timestamps[0]
        self.raw = {}
        self.norm = {}
        for name, split in self.splits.items():
            windows = dataset.attach_endogenous_text(dataset.make_windows(split, scfg))
            windows = apply_text_source(windows, cfg["event.text_source"], seed)
            self.raw[name] = windows
            self.norm[name] = dataset.normalize(windows, self.stats)


def _event_dir(paths, horizon: int) -> str:
    return os.path.join(paths["events"], f"H{horizon}")


def pipeline_template(cfg: dict, data: HorizonData, client, paths) -> event_mod.Template:
    """Dataset-level template from the first train windows; cached, so
    repeated calls cost nothing."""
    ev_dir = _event_dir(paths, data.horizon)
    os.makedirs(ev_dir, exist_ok=True)
    sample_pairs = event_mod.render_sample_pairs(data.raw["train"], data.target_index)
    template = event_mod.generate_template(
        client, cfg["data.description"], sample_pairs, cfg["event.retries"], paths["cache"]
    )
    with open(os.path.join(ev_dir, "template.json"), "w", encoding="utf-8") as f:
        json.dump(template.data, f, sort_keys=True)
    return template


def pipeline_train_events(cfg: dict, data: HorizonData, client, paths, jobs=1) -> list:
    """Plain (unguided) summaries and reasoned predictions for every training
    window; these feed both knowledge-base construction and stage 3."""

    template = pipeline_template(cfg, data, client, paths)
    t_idx, H = data.target_index, data.horizon

    def plain(w):
        return event_mod.precompute_window(
            client, template, w, t_idx, H, guidance=None,
            dataset_name=cfg["data.name"], dataset_description=cfg["data.description"],
            retries=cfg["event.retries"], cache_dir=paths["cache"],
        )

    records = event_mod.run_windows(
        plain, data.raw["train"], jobs,
        getattr(client, "rate_limit_per_s", None), getattr(client, "single_flight", False),
    )
    event_mod.write_records(records, os.path.join(_event_dir(paths, H), "train.jsonl"))
    return records


def pipeline_build_kb(cfg: dict, data: HorizonData, client, backend, paths) -> hic.KnowledgeBase:
    """Corrections for every training window, assembled into the KB file."""

    H, t_idx = data.horizon, data.target_index
    train_path = os.path.join(_event_dir(paths, H), "train.jsonl")
    if not os.path.exists(train_path):
        raise DependencyError(
            f"event outputs {train_path} missing", producer="precompute-events"
        )
    train_records = event_mod.read_records(train_path)
    corrections = {}
    by_id = {w.window_id: w for w in data.raw["train"]}
    for rec in train_records:
        w = by_id[rec["window_id"]]
        summary = event_mod.Summary(
            window_id=rec["window_id"], data=rec["summary"], raw="", text_free=not w.texts
        )
        corr = hic.correct(
            client, rec["prediction"], rec["reasoning"], w.y[:, t_idx], summary,
            dataset_name=cfg["data.name"], retries=cfg["event.retries"],
            cache_dir=paths["cache"],
        )
        if corr is not None:
            corrections[rec["window_id"]] = corr
    kb = hic.build_knowledge_base(
        data.raw["train"], train_records, corrections, backend, data.boundary
    )
    os.makedirs(paths["kb"], exist_ok=True)
    hic.save_kb(kb, os.path.join(paths["kb"], f"H{H}.jsonl"))
    return kb


def _load_kb_for(cfg: dict, backend, paths, horizon: int) -> hic.KnowledgeBase:
    kb_path = os.path.join(paths["kb"], f"H{horizon}.jsonl")
    if not os.path.exists(kb_path):
        raise DependencyError(f"knowledge base {kb_path} missing", producer="build-kb")
    return hic.load_kb(kb_path, expected_embedder=backend.name)


def pipeline_guided_events(
    cfg: dict, data: HorizonData, client, backend, paths, split: str, jobs=1
) -> list:
    """Retrieval-guided summaries and predictions for the val or test split."""

    H, t_idx = data.horizon, data.target_index
    template = pipeline_template(cfg, data, client, paths)
    mode = cfg["retrieval.mode"]
    rank = cfg["retrieval.rank"]
    kb = None
    if mode in ("full", "summary-only"):
        kb = _load_kb_for(cfg, backend, paths, H)
    series_index = (
        hic.SeriesIndex(data.norm["train"], data.raw["train"]) if mode == "ts-only" else None
    )
    summary_by_id = {e.window_id: e.summary_text for e in kb.entries} if kb else {}
    name, desc = cfg["data.name"], cfg["data.description"]
    retries, cache_dir = cfg["event.retries"], paths["cache"]

    def guided(pair):
        w, w_norm = pair
        summary = event_mod.summarize(
            client, template, w, t_idx, dataset_name=name, dataset_description=desc,
            retries=retries, cache_dir=cache_dir,
        )
        guidance = None
        if kb is not None and kb.size:
            q = encoders.embed_summary(backend, json.dumps(summary.data, sort_keys=True))
            r = hic.rank_select(kb, q, min(rank, kb.size))
            guidance = (
                r.correction.rendered() if mode == "full" else summary_by_id[r.window_id]
            )
        elif series_index is not None:
            wid, score, series_arr = series_index.query(w_norm)
            guidance = json.dumps(
                {
                    "Similar historical series": [
                        round(float(v), 4) for v in series_arr[:, t_idx]
                    ],
                    "similarity": round(score, 4),
                }
            )
        pred = event_mod.reason(
            client, summary, w.x[:, t_idx], H, guidance=guidance,
            dataset_name=name, retries=retries, cache_dir=cache_dir,
        )
        return pred.to_record(summary)

    pairs = list(zip(data.raw[split], data.norm[split]))
    records = event_mod.run_windows(
        guided, pairs, jobs,
        getattr(client, "rate_limit_per_s", None), getattr(client, "single_flight", False),
    )
    event_mod.write_records(records, os.path.join(_event_dir(paths, H), f"{split}.jsonl"))
    return records


def run_event_pipeline(cfg: dict, data: HorizonData, client, backend, paths, jobs=1):
    """Template, train events, corrections + KB, then guided val/test events."""
    pipeline_train_events(cfg, data, client, paths, jobs=jobs)
    kb = pipeline_build_kb(cfg, data, client, backend, paths)
    for split in ("val", "test"):
        pipeline_guided_events(cfg, data, client, backend, paths, split, jobs=jobs)
    return kb


def train_one_horizon(cfg: dict, data: HorizonData, backend, paths) -> TrainReport:
    """Stages 1-3 for one horizon configuration; writes stage checkpoints."""

    t0 = time.time()
    H = data.horizon
    tcfg = TrainConfig.from_flat(cfg)
    use_event = cfg["branch.use_event"]
    torch.manual_seed(tcfg.seed)
    model_cfg = _model_cfg(cfg, len(data.splits["train"].variable_names), H)
    model = ForecastModel(model_cfg)

    train_t = build_split_tensors(data.norm["train"], model_cfg, backend)
    val_t = build_split_tensors(data.norm["val"], model_cfg, backend)
    if use_event:
        ev_dir = os.path.join(paths["events"], f"H{H}")
        for split_name, st in (("train", train_t), ("val", val_t)):
            p = os.path.join(ev_dir, f"{split_name}.jsonl")
            if not os.path.exists(p):
                raise DependencyError(
                    f"event outputs {p} missing", producer="precompute-events"
                )
            attach_event_outputs(st, event_mod.read_records(p), data.stats, data.target_index)

    ck_dir = os.path.join(paths["checkpoints"], f"H{H}")
    os.makedirs(ck_dir, exist_ok=True)
    report = TrainReport()
    report.stage1_losses = stage1_pretrain(model, train_t, tcfg)
    save_checkpoint(model, os.path.join(ck_dir, "stage1.json"), seed=tcfg.seed)
    report.stage2_losses = stage2_align(model, train_t, tcfg)
    save_checkpoint(model, os.path.join(ck_dir, "stage2.json"), seed=tcfg.seed)
    selected, curves = stage3_joint(model, train_t, val_t, tcfg, use_event)
    report.selected_lr = selected
    report.stage3_curves = curves
    final_path = os.path.join(ck_dir, "final.json")
    save_checkpoint(model, final_path, seed=tcfg.seed, extra={"selected_lr": selected})
    report.checkpoint_path = final_path
    report.wall_clock_s = time.time() - t0

    os.makedirs(paths["reports"], exist_ok=True)
    curve_path = os.path.join(paths["reports"], f"curves_H{H}.csv")
    with open(curve_path, "w", encoding="utf-8") as f:
        f.write("stage,lr,epoch,train_loss,val_loss\n")
        for e, v in enumerate(report.stage1_losses):
            f.write(f"1,{tcfg.stage1_lr},{e},{v},\n")
        for e, v in enumerate(report.stage2_losses):
            f.write(f"2,{tcfg.stage2_lr},{e},{v},\n")
        for lr, cur in curves.items():
            for e, (tv, vv) in enumerate(zip(cur["train"], cur["val"])):
                f.write(f"3,{lr},{e},{tv},{vv}\n")
    return report


def predict_test(cfg: dict, data: HorizonData, model: ForecastModel, paths) -> dict:
    """Denormalized per-branch predictions over every test window."""

    H = data.horizon
    use_event = cfg["branch.use_event"]
    backend = _backend(cfg)
    test_t = build_split_tensors(data.norm["test"], model.cfg, backend)
    if use_event:
        p = os.path.join(paths["events"], f"H{H}", "test.jsonl")
        if not os.path.exists(p):
            raise DependencyError(f"event outputs {p} missing", producer="precompute-events")
        attach_event_outputs(test_t, event_mod.read_records(p), data.stats, data.target_index)

    model.eval()
    preds_num, preds_ts, preds_final = [], [], []
    bs = cfg["train.batch_size"]
    with torch.no_grad():
        for i in range(0, len(test_t), bs):
            idx = torch.arange(i, min(i + bs, len(test_t)))
            _, _, pred_ts, pred_num, pred_final = _final_prediction(
                model, test_t, idx, use_event
            )
            preds_ts.append(pred_ts.numpy())
            preds_num.append(pred_num.numpy())
            preds_final.append(pred_final.numpy())
    anchor = test_t.anchor.numpy() if test_t.anchored else 0.0

    def _restore(chunks):
        return dataset.denormalize(np.concatenate(chunks) + anchor, data.stats)

    y_true = np.stack([w.y for w in data.raw["test"]])
    out = {
        "y_true": y_true,
        "y_ts": _restore(preds_ts),
        "y_num": _restore(preds_num),
        "y_final": _restore(preds_final),
        "y_event_target": test_t.event_raw,  # raw target-scale, None without event branch
        "provenance": test_t.provenance,
        "window_ids": [w.window_id for w in data.raw["test"]],
    }
    return out


def finalize_cfg(cfg: dict) -> dict:
    """Default the dataset paths into the run directory when unset."""
    cfg = dict(cfg)
    base = os.path.join(cfg["run.out"], "dataset")
    if not cfg["data.series_path"]:
        cfg["data.series_path"] = os.path.join(base, "series.csv")
        cfg["data.text_path"] = os.path.join(base, "text.csv")
        cfg["data.labels_path"] = os.path.join(base, "labels.csv")
    return cfg


def run_prepare(cfg: dict) -> dict:
    """Validate the dataset, compute split boundaries, window counts, and
    normalization statistics; written to prepared/meta.json."""

    paths = _out_paths(cfg)
    series = _load_series(cfg)
    meta = {"n_rows": len(series), "variables": series.variable_names,
            "target_index": series.target_index, "horizons": {}}
    for H in cfg["split.horizons"]:
        scfg = _split_cfg(cfg, H)
        train_s, val_s, test_s = dataset.temporal_split(series, scfg)
        stats = dataset.NormStats.fit(train_s.values)
        meta["horizons"][str(H)] = {
            "boundary_val": str(val_s.timestamps[0]),
            "boundary_test": str(test_s.timestamps[0]),
            "rows": {"train": len(train_s), "val": len(val_s), "test": len(test_s)},
            "windows": {
                name: len(s) - scfg.lookback - H + 1
                for name, s in (("train", train_s), ("val", val_s), ("test", test_s))
            },
            "stats": {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        }
    os.makedirs(paths["prepared"], exist_ok=True)
    with open(paths["meta"], "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def require_prepared(cfg: dict) -> dict:
    paths = _out_paths(cfg)
    if not os.path.exists(paths["meta"]):
        raise DependencyError(
            f"prepared metadata {paths['meta']} missing", producer="prepare"
        )
    with open(paths["meta"], encoding="utf-8") as f:
        return json.load(f)


def require_checkpoint(cfg: dict, horizon: int) -> str:
    paths = _out_paths(cfg)
    p = os.path.join(paths["checkpoints"], f"H{horizon}", "final.json")
    if not os.path.exists(p):
        raise DependencyError(f"checkpoint {p} missing", producer="train")
    return p


def ensure_guided_events(cfg, data, client, backend, paths, split, jobs=1):
    p = os.path.join(_event_dir(paths, data.horizon), f"{split}.jsonl")
    if not os.path.exists(p):
        pipeline_guided_events(cfg, data, client, backend, paths, split, jobs=jobs)


def evaluate_run(cfg: dict, jobs: int = 1) -> dict:
    """Score the trained checkpoints on the test split and write reports."""

    from . import evaluation

    paths = _out_paths(cfg)
    torch.set_num_threads(1)
    series = _load_series(cfg)
    backend = _backend(cfg)
    client = make_client(cfg["event.client"], cache_dir=paths["cache"], model=cfg["event.model"])
    rows = []
    for H in cfg["split.horizons"]:
        ck = require_checkpoint(cfg, H)
        data = HorizonData(series, cfg, H, cfg["run.seed"])
        if cfg["branch.use_event"]:
            ensure_guided_events(cfg, data, client, backend, paths, "test", jobs=jobs)
        model, _ = load_checkpoint(ck)
        preds = predict_test(cfg, data, model, paths)
        os.makedirs(paths["predictions"], exist_ok=True)
        evaluation.write_predictions(
            preds, os.path.join(paths["predictions"], f"H{H}.csv"), data.target_index
        )
        labels = evaluation.test_step_labels(data)
        rows.append(
            evaluation.evaluate_horizon(
                preds, H, data.target_index, labels,
                denormalized=cfg["eval.denormalized"], stats=data.stats,
            )
        )
    report = evaluation.combine_horizons(rows, variant=cfg["run.variant"])
    os.makedirs(paths["reports"], exist_ok=True)
    evaluation.write_report(report, paths["reports"])
    return {"report": report, "paths": paths}


def run_full(cfg: dict, jobs: int | None = None) -> dict:
    """load -> split -> windows -> texts -> event pipeline -> KB -> stages 1-3
    -> evaluation, with every artifact under the run directory."""

    from . import evaluation

    t0 = time.time()
    paths = _out_paths(cfg)
    os.makedirs(paths["out"], exist_ok=True)
    os.makedirs(paths["cache"], exist_ok=True)
    config_mod.snapshot(cfg, paths["config"])
    torch.set_num_threads(1)
    jobs = jobs or cfg["run.jobs"]

    series = _load_series(cfg)
    backend = _backend(cfg)
    client = make_client(cfg["event.client"], cache_dir=paths["cache"], model=cfg["event.model"])

    horizon_results = []
    train_reports = {}
    for H in cfg["split.horizons"]:
        data = HorizonData(series, cfg, H, cfg["run.seed"])
        if cfg["branch.use_event"]:
            run_event_pipeline(cfg, data, client, backend, paths, jobs=jobs)
        train_reports[H] = train_one_horizon(cfg, data, backend, paths)
        model, _ = load_checkpoint(train_reports[H].checkpoint_path)
        preds = predict_test(cfg, data, model, paths)
        os.makedirs(paths["predictions"], exist_ok=True)
        evaluation.write_predictions(preds, os.path.join(paths["predictions"], f"H{H}.csv"),
                                     data.target_index)
        labels = evaluation.test_step_labels(data)
        horizon_results.append(
            evaluation.evaluate_horizon(preds, H, data.target_index, labels,
                                        denormalized=cfg["eval.denormalized"],
                                        stats=data.stats)
        )

    report = evaluation.combine_horizons(horizon_results, variant=cfg["run.variant"])
    os.makedirs(paths["reports"], exist_ok=True)
    evaluation.write_report(report, paths["reports"])
    with open(os.path.join(paths["out"], "train_report.json"), "w", encoding="utf-8") as f:
        json.dump(
            {
                str(h): {
                    "stage1_losses": r.stage1_losses,
                    "stage2_losses": r.stage2_losses,
                    "stage3_curves": {str(k): v for k, v in r.stage3_curves.items()},
                    "selected_lr": r.selected_lr,
                    "checkpoint": r.checkpoint_path,
                    "wall_clock_s": r.wall_clock_s,
                }
                for h, r in train_reports.items()
            },
            f,
            indent=2,
            sort_keys=True,
        )
    log.info("run complete in %.1fs: %s", time.time() - t0, paths["out"])
    return {"report": report, "paths": paths, "train_reports": train_reports}
