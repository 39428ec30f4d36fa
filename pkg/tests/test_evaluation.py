import numpy as np
import pandas as pd
import pytest

from fusioncast import config, evaluation
from fusioncast.dataset import MultimodalWindow, TextRecord
from fusioncast.errors import ArgumentError, ShapeError


class TestMetrics:
    def test_identical(self):
        x = np.arange(10.0)
        assert evaluation.mse(x, x) == 0.0
        assert evaluation.mae(x, x) == 0.0

    def test_hand_values(self):
        assert evaluation.mse([1.0, 3.0], [2.0, 5.0]) == 2.5
        assert evaluation.mae([1.0, 3.0], [2.0, 5.0]) == 1.5

    def test_constant_offset(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        for c in (0.5, -2.0):
            assert abs(evaluation.mse(x + c, x) - c * c) < 1e-12
            assert abs(evaluation.mae(x + c, x) - abs(c)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            evaluation.mse(np.ones(3), np.ones(4))


class TestSegmentMetrics:
    def test_all_zero_labels(self):
        pred = np.ones((2, 3))
        truth = np.zeros((2, 3))
        flags = np.zeros((2, 3), dtype=bool)
        seg = evaluation.segment_metrics(pred, truth, flags)
        assert seg["event"] is None
        assert seg["non_event"] == seg["overall"]

    def test_hand_built_four_points(self):
        pred = np.array([[1.0, 2.0, 3.0, 4.0]])
        truth = np.array([[1.0, 0.0, 3.0, 0.0]])
        flags = np.array([[False, True, False, True]])
        seg = evaluation.segment_metrics(pred, truth, flags)
        assert seg["event"]["mse"] == (4.0 + 16.0) / 2
        assert seg["event"]["mae"] == 3.0
        assert seg["non_event"]["mse"] == 0.0
        assert seg["event"]["n"] == 2

    def test_overall_equals_plain_metrics(self):
        rng = np.random.default_rng(1)
        pred, truth = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        flags = rng.random((4, 6)) < 0.5
        seg = evaluation.segment_metrics(pred, truth, flags)
        assert abs(seg["overall"]["mse"] - evaluation.mse(pred, truth)) < 1e-12
        assert abs(seg["overall"]["mae"] - evaluation.mae(pred, truth)) < 1e-12


class TestBandPearson:
    def test_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=24)
        assert abs(evaluation.band_pearson(x, x, "low") - 1.0) < 1e-9

    def test_negation(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=24)
        x = x - x.mean()
        assert abs(evaluation.band_pearson(-x, x, "high") + 1.0) < 1e-9

    def test_matches_textbook_formula(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=30), rng.normal(size=30)
        ours = evaluation.pearson(a, b)
        expected = np.corrcoef(a, b)[0, 1]
        assert abs(ours - expected) < 1e-9

    def test_zero_variance_absent(self):
        assert evaluation.pearson(np.ones(5), np.arange(5.0)) is None


def fake_preds(n=6, horizon=6, n_vars=1, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, horizon, n_vars))
    return {
        "y_true": y,
        "y_ts": y + 0.5,
        "y_num": y + 0.3,
        "y_final": y + 0.1,
        "y_event_target": y[:, :, 0] + 0.2,
        "provenance": ["icl-guided"] * (n - 1) + ["fallback"],
        "window_ids": list(range(n)),
    }


class TestReports:
    def test_average_is_mean_of_horizons(self):
        rows = [
            evaluation.evaluate_horizon(fake_preds(seed=s, horizon=h), h, 0, None)
            for s, h in ((0, 6), (1, 8), (2, 12))
        ]
        report = evaluation.combine_horizons(rows)
        for key in ("mse", "mae"):
            manual = np.mean([r[key] for r in rows])
            assert abs(report.average[key] - manual) < 1e-9

    def test_sample_count_no_drop_last(self):
        rows = [evaluation.evaluate_horizon(fake_preds(n=7), 6, 0, None)]
        report = evaluation.combine_horizons(rows)
        assert report.sample_count == 7

    def test_segments_and_provenance_present(self):
        labels = np.zeros((6, 6), dtype=bool)
        labels[0, 0] = True
        row = evaluation.evaluate_horizon(fake_preds(), 6, 0, labels)
        assert row["segments"]["final"]["event"]["n"] == 1
        assert row["provenance"] == {"icl-guided": 5, "fallback": 1}
        assert set(row["branches"]) == {"ts", "numerical", "final", "event"}

    def test_write_report_files(self, tmp_path):
        rows = [evaluation.evaluate_horizon(fake_preds(), 6, 0, None)]
        report = evaluation.combine_horizons(rows, variant="full")
        evaluation.write_report(report, tmp_path)
        for name in ("evaluation.json", "evaluation.csv", "evaluation.txt"):
            assert (tmp_path / name).exists()

    def test_normalized_scale_option(self):
        class Stats:
            mean = np.array([5.0])
            std = np.array([2.0])

        preds = fake_preds()
        raw = evaluation.evaluate_horizon(preds, 6, 0, None, denormalized=True)
        normed = evaluation.evaluate_horizon(preds, 6, 0, None, denormalized=False,
                                             stats=Stats())
        assert abs(raw["mse"] / 4.0 - normed["mse"]) < 1e-9


def text_windows(n_windows=5, n_texts=10):
    dates = pd.date_range("2000-01-01", periods=n_windows + n_texts + 20, freq="D")
    texts = [
        TextRecord(dates[i], dates[i + 1], f"record {i} with several words inside")
        for i in range(n_texts)
    ]
    windows = []
    for i in range(n_windows):
        lb_start, lb_end = dates[0], dates[n_texts + 2]
        windows.append(
            MultimodalWindow(
                x=np.zeros((4, 1)), y=np.zeros((2, 1)),
                texts=list(texts), endo_text=f"stats for window {i}",
                window_id=i, span=(lb_start, lb_end),
                horizon_span=(dates[n_texts + 3], dates[n_texts + 4]),
            )
        )
    return windows


class TestPerturbText:
    def count_unique(self, windows):
        seen = set()
        for w in windows:
            for rec in w.texts:
                seen.add((str(rec.start), str(rec.end), rec.text))
        return len(seen)

    def test_rate_zero_unchanged(self):
        windows = text_windows()
        out = evaluation.perturb_text(windows, "mask-discrete", 0.0, seed=0)
        assert [w.raw_texts for w in out] == [w.raw_texts for w in windows]

    def test_rate_one_removes_all(self):
        out = evaluation.perturb_text(text_windows(), "mask-discrete", 1.0, seed=0)
        assert all(not w.texts for w in out)

    def test_exact_removal_count(self):
        windows = text_windows(n_windows=3, n_texts=100)
        out = evaluation.perturb_text(windows, "mask-discrete", 0.1, seed=1)
        assert self.count_unique(out) == 90

    def test_contiguous_run(self):
        windows = text_windows(n_windows=1, n_texts=20)
        out = evaluation.perturb_text(windows, "mask-contiguous", 0.25, seed=2)
        kept_ids = [int(r.text.split()[1]) for r in out[0].texts]
        removed = sorted(set(range(20)) - set(kept_ids))
        assert len(removed) == 5
        assert removed == list(range(removed[0], removed[0] + 5))

    def test_noise_preserves_counts_and_changes_words(self):
        windows = text_windows(n_windows=1, n_texts=6)
        out = evaluation.perturb_text(windows, "noise", 0.4, seed=3)
        for before, after in zip(windows[0].texts, out[0].texts):
            assert len(before.text.split()) == len(after.text.split())
        assert any(
            b.text != a.text for b, a in zip(windows[0].texts, out[0].texts)
        )

    def test_deterministic(self):
        a = evaluation.perturb_text(text_windows(), "mask-discrete", 0.3, seed=7)
        b = evaluation.perturb_text(text_windows(), "mask-discrete", 0.3, seed=7)
        assert [w.raw_texts for w in a] == [w.raw_texts for w in b]

    def test_invalid_args(self):
        with pytest.raises(ShapeError):
            evaluation.perturb_text(text_windows(), "mask-discrete", 1.5, seed=0)
        with pytest.raises(ShapeError):
            evaluation.perturb_text(text_windows(), "bogus", 0.5, seed=0)


class TestApplyTextSource:
    def test_exogenous_unchanged(self):
        windows = text_windows()
        assert evaluation.apply_text_source(windows, "exogenous", 0) is windows

    def test_random_matches_length_distribution(self):
        windows = text_windows()
        out = evaluation.apply_text_source(windows, "random", seed=5)
        for before, after in zip(windows[0].texts, out[0].texts):
            assert len(before.text.split()) == len(after.text.split())
            assert before.text != after.text
            assert all(word in evaluation.VOCAB for word in after.text.split())

    def test_statistics_uses_endogenous_text(self):
        windows = text_windows()
        out = evaluation.apply_text_source(windows, "statistics", seed=5)
        for w_in, w_out in zip(windows, out):
            assert len(w_out.texts) == 1
            assert w_out.texts[0].text == w_in.endo_text

    def test_random_deterministic(self):
        a = evaluation.apply_text_source(text_windows(), "random", seed=9)
        b = evaluation.apply_text_source(text_windows(), "random", seed=9)
        assert [w.raw_texts for w in a] == [w.raw_texts for w in b]


class TestVariantConfig:
    def test_all_variants_change_only_named_keys(self):
        base = config.resolve()
        for name, expected in config.VARIANTS.items():
            varied = config.apply_variant(base, name)
            diff = config.config_diff(base, varied)
            effective = {k: v for k, v in expected.items() if base[k] != v}
            assert set(diff) == set(effective), name
            for key, (_, new) in diff.items():
                assert new == effective[key]

    def test_rank_variant(self):
        base = config.resolve()
        varied = config.apply_variant(base, "rank-10")
        diff = config.config_diff(base, varied)
        assert set(diff) == {"retrieval.rank"}
        assert varied["retrieval.rank"] == 10

    def test_unknown_variant_lists_valid_names(self):
        with pytest.raises(ArgumentError, match="ts-only"):
            config.apply_variant(config.resolve(), "bogus-variant")

    def test_precedence_flag_over_file_over_default(self, tmp_path):
        import json

        cfgfile = tmp_path / "c.json"
        cfgfile.write_text(json.dumps({"run.seed": 5, "train.batch_size": 16}))
        cfg = config.resolve(cfgfile, {"run.seed": 9})
        assert cfg["run.seed"] == 9  # flag wins
        assert cfg["train.batch_size"] == 16  # file wins over default
        assert cfg["train.stage1_epochs"] == 10  # default
