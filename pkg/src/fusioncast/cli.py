"""Command-line surface: synth / prepare / precompute-events / build-kb /
train / predict / evaluate / analyze / ablate, all driven by one flat JSON
config with flag > file > default precedence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import aff, config as config_mod, dataset, trainer
from .clients import make_client
from .errors import DependencyError, ToolkitError


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--seed", type=int, help="run seed (run.seed)")
    p.add_argument("--jobs", type=int, help="parallelism bound (run.jobs)")
    p.add_argument("--variant", help="ablation variant name (run.variant)")
    p.add_argument("--horizon", type=int, help="single forecast horizon override")
    p.add_argument("--client", choices=["replay", "oracle", "http"], help="chat client kind")
    p.add_argument("--cache-dir", help="response cache directory (run.cache_dir)")
    p.add_argument("--out", help="run directory (run.out)")
    p.add_argument("--series", help="series CSV path (data.series_path)")
    p.add_argument("--text", help="text CSV path (data.text_path)")
    p.add_argument("--labels", help="event labels CSV path (data.labels_path)")


def _resolve(args) -> dict:
    overrides = {
        "run.seed": args.seed,
        "run.jobs": args.jobs,
        "run.variant": args.variant,
        "run.cache_dir": args.cache_dir,
        "run.out": args.out,
        "event.client": args.client,
        "data.series_path": args.series,
        "data.text_path": args.text,
        "data.labels_path": args.labels,
    }
    if args.horizon is not None:
        overrides["split.horizons"] = [args.horizon]
    cfg = config_mod.resolve(args.config, overrides)
    if cfg["run.variant"] != "full":
        cfg = config_mod.apply_variant(cfg, cfg["run.variant"])
    return trainer.finalize_cfg(cfg)


def _snapshot(cfg):
    os.makedirs(cfg["run.out"], exist_ok=True)
    config_mod.snapshot(cfg, os.path.join(cfg["run.out"], "config.json"))


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    _snapshot(cfg)
    series = dataset.synthesize_event_dataset(
        n_points=args.n_points,
        event_rate=args.event_rate,
        shift_magnitude=args.shift,
        noise_std=args.noise_std,
        seed=cfg["run.seed"],
        period=args.period,
        amplitude=args.amplitude,
        announce_lead=args.lead,
    )
    base = os.path.dirname(cfg["data.series_path"])
    os.makedirs(base, exist_ok=True)
    dataset.write_dataset(
        series, cfg["data.series_path"], cfg["data.text_path"], cfg["data.labels_path"]
    )
    print(f"synthesized {len(series)} rows, {len(series.texts)} text records "
          f"-> {cfg['data.series_path']}")
    return 0


def cmd_prepare(args) -> int:
    cfg = _resolve(args)
    _snapshot(cfg)
    meta = trainer.run_prepare(cfg)
    for h, info in meta["horizons"].items():
        print(f"H={h}: windows {info['windows']}")
    return 0


def _pipeline_context(cfg):
    paths = trainer._out_paths(cfg)
    series = trainer._load_series(cfg)
    backend = trainer._backend(cfg)
    client = make_client(cfg["event.client"], cache_dir=paths["cache"], model=cfg["event.model"])
    return paths, series, backend, client


def cmd_precompute_events(args) -> int:
    cfg = _resolve(args)
    _snapshot(cfg)
    trainer.require_prepared(cfg)
    paths, series, backend, client = _pipeline_context(cfg)
    for H in cfg["split.horizons"]:
        data = trainer.HorizonData(series, cfg, H, cfg["run.seed"])
        records = trainer.pipeline_train_events(cfg, data, client, paths, jobs=cfg["run.jobs"])
        print(f"H={H}: {len(records)} training event records")
    return 0


def cmd_build_kb(args) -> int:
    cfg = _resolve(args)
    _snapshot(cfg)
    paths, series, backend, client = _pipeline_context(cfg)
    for H in cfg["split.horizons"]:
        data = trainer.HorizonData(series, cfg, H, cfg["run.seed"])
        kb = trainer.pipeline_build_kb(cfg, data, client, backend, paths)
        print(f"H={H}: knowledge base with {kb.size} entries")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _snapshot(cfg)
    import torch

    torch.set_num_threads(1)
    paths, series, backend, client = _pipeline_context(cfg)
    for H in cfg["split.horizons"]:
        data = trainer.HorizonData(series, cfg, H, cfg["run.seed"])
        if cfg["branch.use_event"]:
            trainer.ensure_guided_events(cfg, data, client, backend, paths, "val",
                                         jobs=cfg["run.jobs"])
        report = trainer.train_one_horizon(cfg, data, backend, paths)
        print(f"H={H}: trained, selected lr={report.selected_lr}, "
              f"checkpoint={report.checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve(args)
    import torch

    torch.set_num_threads(1)
    from . import evaluation
    from .numerical import load_checkpoint

    paths, series, backend, client = _pipeline_context(cfg)
    for H in cfg["split.horizons"]:
        ck = trainer.require_checkpoint(cfg, H)
        data = trainer.HorizonData(series, cfg, H, cfg["run.seed"])
        if cfg["branch.use_event"]:
            trainer.ensure_guided_events(cfg, data, client, backend, paths, "test",
                                         jobs=cfg["run.jobs"])
        model, _ = load_checkpoint(ck)
        preds = trainer.predict_test(cfg, data, model, paths)
        os.makedirs(paths["predictions"], exist_ok=True)
        out_csv = os.path.join(paths["predictions"], f"H{H}.csv")
        evaluation.write_predictions(preds, out_csv, data.target_index)
        print(f"H={H}: wrote {out_csv}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    result = trainer.evaluate_run(cfg, jobs=cfg["run.jobs"])
    report = result["report"]
    for row in report.horizons:
        print(f"H={row['horizon']}: mse={row['mse']:.6f} mae={row['mae']:.6f} "
              f"windows={row['n_windows']}")
    if report.average:
        print(f"avg: mse={report.average['mse']:.6f} mae={report.average['mae']:.6f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    import pandas as pd

    from .numerical import load_checkpoint

    paths = trainer._out_paths(cfg)
    an_dir = os.path.join(paths["out"], "analysis")
    os.makedirs(an_dir, exist_ok=True)
    for H in cfg["split.horizons"]:
        pred_path = os.path.join(paths["predictions"], f"H{H}.csv")
        if not os.path.exists(pred_path):
            raise DependencyError(f"predictions {pred_path} missing", producer="predict")
        df = pd.read_csv(pred_path)
        tgt = df[df["var"] == df["var"].max()]  # target is the last variable (OT)
        n_windows = tgt["window_id"].nunique()
        mats = {}
        for col in ("y_true", "y_final", "y_num", "y_event"):
            pivot = tgt.pivot_table(index="window_id", columns="step", values=col)
            mats[col] = pivot.to_numpy(dtype=float)

        partition = aff.partition_bands(H, cfg["fusion.low_frac"], cfg["fusion.high_frac"])
        band_of = np.empty(partition.n_bins, dtype=object)
        for b in aff.BANDS:
            band_of[partition.masks[b]] = b
        spec_mag = np.abs(np.fft.rfft(mats["y_final"], axis=1)).mean(axis=0)
        with open(os.path.join(an_dir, f"bands_H{H}.csv"), "w", encoding="utf-8") as f:
            f.write("bin,band,magnitude\n")
            for k in range(partition.n_bins):
                f.write(f"{k},{band_of[k]},{spec_mag[k]:.6f}\n")

        for band, (lo, hi) in (("low", (0.0, cfg["fusion.low_frac"])),
                               ("band", (cfg["fusion.low_frac"], cfg["fusion.high_frac"])),
                               ("high", (cfg["fusion.high_frac"], 1.0))):
            with open(os.path.join(an_dir, f"filtered_{band}_H{H}.csv"), "w",
                      encoding="utf-8") as f:
                f.write("window_id,step,y_true,y_final,y_num,y_event\n")
                wids = sorted(tgt["window_id"].unique())
                filt = {k: np.stack([aff.bandpass_filter(row, lo, hi) for row in m])
                        for k, m in mats.items() if not np.isnan(m).any()}
                for i, wid in enumerate(wids):
                    for h in range(H):
                        cells = [
                            f"{filt[k][i, h]:.6f}" if k in filt else ""
                            for k in ("y_true", "y_final", "y_num", "y_event")
                        ]
                        f.write(f"{wid},{h}," + ",".join(cells) + "\n")

        if not np.isnan(mats["y_event"]).any():
            ck = trainer.require_checkpoint(cfg, H)
            model, _ = load_checkpoint(ck)
            weights = (
                model.fusion.to_fusion_weights()
                if hasattr(model.fusion, "to_fusion_weights")
                else aff.FusionWeights.balanced(cfg["fusion.init"])
            )
            rows = []
            for lf in (0.1, 0.2, 0.3, 0.4):
                for hf in (0.5, 0.6, 0.7, 0.8, 0.9):
                    if lf >= hf:
                        continue
                    part = aff.partition_bands(H, lf, hf)
                    errs = [
                        np.mean(
                            (aff.fuse(mats["y_num"][i], mats["y_event"][i], weights, part)
                             - mats["y_true"][i]) ** 2
                        )
                        for i in range(n_windows)
                    ]
                    rows.append((lf, hf, float(np.mean(errs))))
            with open(os.path.join(an_dir, f"boundary_sweep_H{H}.csv"), "w",
                      encoding="utf-8") as f:
                f.write("low_frac,high_frac,mse\n")
                for lf, hf, v in rows:
                    f.write(f"{lf},{hf},{v:.6f}\n")

        if args.plots:
            _emit_plots(an_dir, paths, H, mats, cfg)
        print(f"H={H}: analysis written to {an_dir}")
    return 0


def _emit_plots(an_dir, paths, H, mats, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = min(8, mats["y_true"].shape[0])
    fig, axes = plt.subplots(2, 2, figsize=(11, 7))
    specs = [("original", None), ("low", (0.0, cfg["fusion.low_frac"])),
             ("high", (cfg["fusion.high_frac"], 1.0)),
             ("band", (cfg["fusion.low_frac"], cfg["fusion.high_frac"]))]
    for ax, (name, fr) in zip(axes.ravel(), specs):
        for key, style in (("y_true", "-"), ("y_num", "--"), ("y_event", ":")):
            m = mats[key][:k]
            if np.isnan(m).any():
                continue
            rows = m if fr is None else np.stack(
                [aff.bandpass_filter(r, fr[0], fr[1]) for r in m]
            )
            ax.plot(rows.reshape(-1), style, label=key, linewidth=1)
        ax.set_title(f"{name} (H={H})")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(an_dir, f"filtered_overlays_H{H}.png"), dpi=120)
    plt.close(fig)

    curve_path = os.path.join(paths["reports"], f"curves_H{H}.csv")
    if os.path.exists(curve_path):
        import pandas as pd

        df = pd.read_csv(curve_path)
        fig, ax = plt.subplots(figsize=(7, 4))
        for (stage, lr), grp in df.groupby(["stage", "lr"]):
            ax.plot(grp["epoch"], grp["train_loss"], label=f"stage{stage} lr={lr}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(os.path.join(an_dir, f"loss_curves_H{H}.png"), dpi=120)
        plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    from . import evaluation

    names = (
        [v.strip() for v in args.variants.split(",")]
        if args.variants
        else sorted(config_mod.VARIANTS) + ["rank-10"]
    )
    out_root = os.path.join(cfg["run.out"], "variants")
    rows = []
    for variant in names:
        vcfg, report = evaluation.run_ablation(variant, cfg, out_root=out_root)
        avg = report.average
        rows.append((variant, avg.get("mse"), avg.get("mae")))
        print(f"{variant}: mse={avg.get('mse'):.6f} mae={avg.get('mae'):.6f}")
    with open(os.path.join(cfg["run.out"], "ablation_summary.csv"), "w",
              encoding="utf-8") as f:
        f.write("variant,mse,mae\n")
        for v, m1, m2 in rows:
            f.write(f"{v},{m1:.6f},{m2:.6f}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusioncast",
        description="Dual-branch multimodal time-series forecasting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic event-labeled dataset")
    _common_flags(p)
    p.add_argument("--n-points", type=int, default=2000)
    p.add_argument("--event-rate", type=float, default=0.05)
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--noise-std", type=float, default=0.4)
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--lead", type=int, default=4)
    p.set_defaults(fn=cmd_synth)

    for name, fn, help_text in (
        ("prepare", cmd_prepare, "validate dataset, compute splits and stats"),
        ("precompute-events", cmd_precompute_events, "run the event pipeline on train windows"),
        ("build-kb", cmd_build_kb, "correct training predictions and build the knowledge base"),
        ("train", cmd_train, "run the three training stages"),
        ("predict", cmd_predict, "write test-split predictions"),
        ("evaluate", cmd_evaluate, "score the test split and write reports"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("analyze", help="emit band magnitudes, filtered series, boundary sweep")
    _common_flags(p)
    p.add_argument("--plots", action="store_true", help="also write PNG figures")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("ablate", help="run ablation variants")
    _common_flags(p)
    p.add_argument("--variants", help="comma-separated variant names (default: all)")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ToolkitError as exc:
        hint = ""
        if isinstance(exc, DependencyError) and exc.producer:
            hint = f" (run '{exc.producer}' first)"
        print(f"ERROR {exc.category}: {exc}{hint}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
