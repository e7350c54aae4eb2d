import unittest

import numpy as np
import pandas as pd

from src.models.run_record import MetricRecord, RunRecord
from src.services.detection_service import (
    DetectorConfig, detect_grok, detect_onset, first_crossing, fit_power_law, lead_time,
    load_fixture_table, lr_mean_fit, lr_mean_table, run_points, summarize_run, summarize_table,
    threshold_crossings,
)
from src.utils.error_handler import AnalysisPreconditionError, ConfigValidationError


class TestGrokDetection(unittest.TestCase):
    """グロッキング検出のテスト"""

    def test_sustained_crossing(self):
        """閾値以上が3回続いた最初の評価"""
        steps = [100, 200, 300, 400, 500, 600, 700]
        acc = [0.5, 0.99, 0.97, 0.98, 0.99, 0.985, 0.2]
        self.assertEqual(detect_grok(steps, acc), 400)

    def test_transient_spike_is_ignored(self):
        """一瞬だけ超えてもグロッキングではない"""
        self.assertIsNone(detect_grok([1, 2, 3, 4], [0.99, 0.99, 0.5, 0.99]))

    def test_custom_threshold(self):
        """閾値と持続回数は設定できる"""
        config = DetectorConfig(threshold=0.9, n_sustained=1)
        self.assertEqual(detect_grok([10, 20], [0.5, 0.91], config), 20)

    def test_threshold_monotonicity(self):
        """閾値を上げても検出ステップが早まることはない"""
        rng = np.random.default_rng(11)
        steps = list(range(0, 3000, 100))
        thresholds = [0.5, 0.8, 0.9, 0.95, 0.98, 0.99]
        for _ in range(50):
            acc = np.clip(np.linspace(0.2, 1.0, len(steps)) + rng.normal(0, 0.08, len(steps)),
                          0.0, 1.0).tolist()
            previous = steps[0]
            for threshold in thresholds:
                found = detect_grok(steps, acc, DetectorConfig(threshold=threshold))
                if found is None:
                    previous = None
                    continue
                self.assertIsNotNone(previous, threshold)
                self.assertGreaterEqual(found, previous)
                previous = found


class TestOnsetDetection(unittest.TestCase):
    """オンセット検出のテスト"""

    def test_relative_threshold(self):
        """ベースラインの10倍を超えた最初のステップ"""
        steps = [0, 100, 200, 300, 400]
        medians = [3.0, 4.0, 5.0, 30.0, 50.0]
        self.assertEqual(detect_onset(steps, medians), 400)

    def test_absolute_floor(self):
        """ベースラインが小さいときは絶対下限が効く"""
        steps = [0, 100, 200, 300, 400]
        medians = [0.1, 0.1, 0.1, 5.0, 25.0]
        self.assertEqual(detect_onset(steps, medians), 400)

    def test_missing_values_are_skipped(self):
        """欠損値は判定に使わない"""
        medians = [1.0, 1.0, 1.0, None, 21.0]
        self.assertEqual(detect_onset([0, 1, 2, 3, 4], medians), 4)

    def test_short_series(self):
        """測定数がベースライン窓未満なら前提エラー"""
        with self.assertRaises(AnalysisPreconditionError):
            detect_onset([0, 1], [1.0, 2.0])

    def test_scale_invariance_above_floor(self):
        """下限より十分大きい系列では全体を定数倍してもオンセットは同じ"""
        rng = np.random.default_rng(4)
        steps = list(range(0, 2000, 100))
        for _ in range(20):
            medians = np.exp(rng.normal(np.log(8.0), 0.3, len(steps)))
            medians[rng.integers(8, len(steps)):] *= 30.0
            expected = detect_onset(steps, medians.tolist())
            self.assertIsNotNone(expected)
            for scale in (1.5, 7.0, 1000.0):
                self.assertEqual(detect_onset(steps, (medians * scale).tolist()), expected)

    def test_floor_dominates_small_values(self):
        """ベースラインが小さいと倍率によらず下限を超えた最初のステップ"""
        steps = [0, 100, 200, 300, 400, 500]
        medians = [0.01, 0.02, 0.015, 1.5, 19.0, 20.5]
        for multiplier in (10.0, 100.0, 1000.0):
            config = DetectorConfig(onset_multiplier=multiplier)
            self.assertEqual(detect_onset(steps, medians, config), 500)
        scaled = [m * 0.5 for m in medians]
        self.assertIsNone(detect_onset(steps, scaled))


class TestLeadTime(unittest.TestCase):
    """先行時間のテスト"""

    def test_reference_values(self):
        """先行割合の参照値"""
        lead = lead_time(115000, 3000)
        self.assertEqual(lead.delta, 112000)
        self.assertAlmostEqual(round(lead.percent, 1), 97.4)
        self.assertAlmostEqual(round(lead_time(2900, 200).percent, 1), 93.1)

    def test_negative_lead_is_invalid(self):
        """オンセットがグロッキングより後なら無効"""
        lead = lead_time(1000, 1500)
        self.assertEqual(lead.delta, -500)
        self.assertFalse(lead.valid)


class TestPowerLawFit(unittest.TestCase):
    """べき乗則フィットのテスト"""

    def test_exact_power_law(self):
        """厳密なべき乗則は係数を復元し R² = 1"""
        t = np.array([1e3, 3e3, 1e4, 3e4, 1e5])
        fit = fit_power_law(list(zip(t, 0.5 * t ** 1.2)))
        self.assertAlmostEqual(fit.alpha, 1.2, places=8)
        self.assertAlmostEqual(fit.C, 0.5, places=6)
        self.assertAlmostEqual(fit.r_squared, 1.0, places=8)
        self.assertAlmostEqual(fit.predict(2e4), 0.5 * 2e4 ** 1.2, delta=1e-3)

    def test_nls_matches_on_exact_data(self):
        """元スケールの非線形フィットも同じ係数"""
        t = np.array([1e3, 3e3, 1e4, 3e4, 1e5])
        fit = fit_power_law(list(zip(t, 2.0 * t ** 0.9)), method="nls")
        self.assertEqual(fit.method, "nls")
        self.assertAlmostEqual(fit.alpha, 0.9, places=4)

    def test_insufficient_points(self):
        """有効点が3未満ならフィットしない"""
        fit = fit_power_law([(1000.0, 500.0), (2000.0, 0.0), (3000.0, 1000.0)])
        self.assertFalse(fit.fitted)
        self.assertEqual(fit.n_points, 2)
        self.assertIn("insufficient_points", fit.flags)
        self.assertIsNone(fit.predict(100.0))

    def test_unknown_method(self):
        """未知の手法は拒否"""
        with self.assertRaises(ConfigValidationError):
            fit_power_law([(1.0, 1.0), (2.0, 3.0), (4.0, 5.0)], method="huber")


class TestFixtureFits(unittest.TestCase):
    """同梱ラン表に対するフィットのテスト"""

    def test_scan_per_run(self):
        """SCAN: 有効11点、α ≈ 1.18"""
        table = summarize_table(load_fixture_table("scan"))
        fit = fit_power_law(run_points(table))
        self.assertEqual(fit.n_points, 11)
        self.assertAlmostEqual(fit.alpha, 1.1799, delta=0.01)
        self.assertAlmostEqual(fit.r_squared, 0.9899, delta=0.005)

    def test_dyck_per_run(self):
        """Dyck: 全15点、α ≈ 1.13"""
        table = summarize_table(load_fixture_table("dyck"))
        fit = fit_power_law(run_points(table))
        self.assertEqual(fit.n_points, 15)
        self.assertAlmostEqual(fit.alpha, 1.1316, delta=0.01)
        self.assertAlmostEqual(fit.r_squared, 0.9083, delta=0.005)

    def test_learning_rate_means(self):
        """学習率平均のフィット"""
        scan = lr_mean_fit(load_fixture_table("scan"))
        self.assertEqual(scan.domain, "lr_means")
        self.assertEqual(scan.n_points, 5)
        self.assertAlmostEqual(scan.alpha, 1.1317, delta=0.01)
        self.assertAlmostEqual(scan.r_squared, 0.9951, delta=0.005)
        dyck = lr_mean_fit(load_fixture_table("dyck"))
        self.assertEqual(dyck.n_points, 6)
        self.assertAlmostEqual(dyck.alpha, 1.0829, delta=0.01)
        self.assertAlmostEqual(dyck.r_squared, 0.9840, delta=0.005)

    def test_lr_mean_table(self):
        """平均はグロッキングとオンセットが揃ったランのみ"""
        table = lr_mean_table(load_fixture_table("scan"))
        row = table[table["lr"] == 1e-3].iloc[0]
        self.assertEqual(row["n_seeds"], 1)
        self.assertEqual(row["mean_grok"], 1700)

    def test_summarize_table_flags(self):
        """欠損と負の先行時間に印を付ける"""
        df = pd.DataFrame({"lr": [1e-3] * 3, "seed": [1, 2, 3],
                           "grok_step": [None, 2000, 1000], "onset_step": [100, None, 1500],
                           "flags": ["", "", ""]})
        flags = summarize_table(df)["flags"].tolist()
        self.assertEqual(flags, ["no_grok", "no_onset", "invalid_lead"])

    def test_unknown_fixture(self):
        """未知のフィクスチャ名"""
        with self.assertRaises(ConfigValidationError):
            load_fixture_table("modular")


class TestRunSummary(unittest.TestCase):
    """メトリクス系列からの要約のテスト"""

    def test_summarize_run(self):
        """グロッキング・オンセット・先行時間が決まる"""
        metrics = []
        for i, step in enumerate(range(0, 1200, 100)):
            test_acc = 0.99 if step >= 900 else 0.3
            median = 1.0 if step < 500 else 40.0
            metrics.append(MetricRecord(step=step, train_acc=1.0, test_acc=test_acc,
                                        train_loss=0.01, defect_median=median))
        record = RunRecord(run_id="r", config_hash="h", seed=0, lr=1e-3, metrics=metrics)
        summarize_run(record)
        self.assertEqual(record.grok_step, 900)
        self.assertEqual(record.onset_step, 500)
        self.assertEqual(record.lead.delta, 400)

    def test_instability_counts(self):
        """閾値の往復回数と最初の到達"""
        values = [0.5, 0.99, 0.5, 0.99, 0.99]
        self.assertEqual(threshold_crossings(values), 3)
        self.assertEqual(first_crossing([0, 1, 2, 3, 4], values), 1)
        self.assertIsNone(first_crossing([0, 1], [0.1, 0.2]))
        self.assertEqual(threshold_crossings([1.0] * 5), 0)


if __name__ == '__main__':
    unittest.main()
