import unittest

import numpy as np
import pandas as pd

from src.models.measurements import BasisKind, Phase, PhaseSample, phase_of
from src.models.run_record import MetricRecord, RunRecord
from src.services.integrability_service import (
    assign_phases, build_basis, phase_ratios, ratio_table,
)
from src.utils.error_handler import AnalysisPreconditionError


def make_record(points, grok_step=None, onset_step=None):
    metrics = [MetricRecord(step=s, train_acc=tr, test_acc=te, train_loss=0.1)
               for s, tr, te in points]
    return RunRecord(run_id="dyck_lr1e-03_s42", config_hash="h", seed=42, lr=1e-3,
                     metrics=metrics, grok_step=grok_step, onset_step=onset_step)


class TestBuildBasis(unittest.TestCase):
    """行列座標の基底作成のテスト"""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_weight_svd_is_orthonormal(self):
        """W(t) の特異方向は正規直交"""
        result = build_basis(BasisKind.WEIGHT_SVD, 3, weight=self.rng.standard_normal((5, 4)))
        self.assertEqual(result.basis.shape, (20, 3))
        self.assertFalse(result.truncated)
        np.testing.assert_allclose(result.basis.T @ result.basis, np.eye(3), atol=1e-10)

    def test_rank_deficient_matrix_is_truncated(self):
        """ランクが足りなければ列を減らす"""
        rank_one = np.outer(self.rng.standard_normal(4), self.rng.standard_normal(3))
        result = build_basis(BasisKind.GRAD_SVD, 5, grad_accum=rank_one)
        self.assertEqual(result.rank, 1)
        self.assertTrue(result.truncated)
        self.assertEqual(result.requested_rank, 5)

    def test_delta_basis_uses_displacement(self):
        """W(t) − W(0) がゼロなら空の基底"""
        w = self.rng.standard_normal((3, 3))
        self.assertEqual(build_basis(BasisKind.DELTA_W_SVD, 2, weight=w, initial=w).rank, 0)
        moved = build_basis(BasisKind.DELTA_W_SVD, 2, weight=w + np.eye(3), initial=w)
        self.assertEqual(moved.rank, 2)

    def test_missing_source(self):
        """必要な行列が無ければ前提エラー、k < 1 は拒否"""
        with self.assertRaises(AnalysisPreconditionError):
            build_basis(BasisKind.DELTA_W_SVD, 2, weight=np.ones((2, 2)))
        with self.assertRaises(ValueError):
            build_basis(BasisKind.WEIGHT_SVD, 0, weight=np.ones((2, 2)))


class TestAssignPhases(unittest.TestCase):
    """フェーズ割り当てのテスト"""

    def test_phase_ranges(self):
        """early → memorization → pre_grok → post_grok"""
        record = make_record([
            (0, 0.1, 0.1), (100, 0.6, 0.1), (200, 1.0, 0.2), (300, 1.0, 0.3),
            (400, 1.0, 0.4), (500, 1.0, 0.5), (600, 1.0, 0.7), (700, 1.0, 0.9),
            (800, 1.0, 0.99), (900, 1.0, 1.0),
        ], grok_step=800, onset_step=500)
        phases = assign_phases(record)
        self.assertEqual([(p.phase, p.start, p.end) for p in phases], [
            (Phase.EARLY, 0, 200),
            (Phase.MEMORIZATION, 200, 500),
            (Phase.PRE_GROK, 500, 800),
            (Phase.POST_GROK, 800, 901),
        ])
        self.assertEqual(phase_of(650, phases), Phase.PRE_GROK)
        self.assertEqual(phase_of(900, phases), Phase.POST_GROK)
        self.assertIsNone(phase_of(1000, phases))

    def test_no_grok(self):
        """グロッキングしなければ pre/post は現れない"""
        record = make_record([(0, 0.2, 0.1), (100, 1.0, 0.1), (200, 1.0, 0.2)])
        kinds = {p.phase for p in assign_phases(record)}
        self.assertEqual(kinds, {Phase.EARLY, Phase.MEMORIZATION})

    def test_empty_record(self):
        """メトリクスが無ければ空"""
        self.assertEqual(assign_phases(make_record([])), [])


class TestPhaseRatios(unittest.TestCase):
    """フェーズ × 基底の比率表のテスト"""

    def test_table_covers_every_cell(self):
        """全フェーズ × 全基底の行があり、空のセルは欠損"""
        rng = np.random.default_rng(2)
        basis = np.linalg.qr(rng.standard_normal((30, 2)))[0]
        samples = [
            PhaseSample(phase=Phase.PRE_GROK, kind=BasisKind.WEIGHT_SVD,
                        delta=basis @ rng.standard_normal(2), basis=basis),
            PhaseSample(phase=Phase.PRE_GROK, kind=BasisKind.WEIGHT_SVD,
                        delta=basis @ rng.standard_normal(2), basis=basis),
        ]
        df = phase_ratios(samples, n_rand=10, seed=0)
        self.assertEqual(len(df), len(Phase) * len(BasisKind))
        cell = df[(df["phase"] == "pre_grok") & (df["basis"] == "weight_svd")].iloc[0]
        self.assertEqual(cell["n_samples"], 2)
        self.assertGreater(cell["ratio"], 1.0)
        empty = df[(df["phase"] == "early") & (df["basis"] == "grad_svd")].iloc[0]
        self.assertEqual(empty["n_samples"], 0)
        self.assertTrue(pd.isna(empty["ratio"]))
        self.assertEqual(ratio_table(df).shape, (len(Phase), len(BasisKind)))


if __name__ == '__main__':
    unittest.main()
