import tempfile
import unittest

import numpy as np

from src.repositories.snapshot_archive import SnapshotArchive
from src.services.trajectory_service import (
    detect_turnover, eigenspectrum, execution_basis, expanding_pc1, final_pc1,
    null_displacements, null_model_from_rows, pc1_percent_of, pca, random_walk_null,
    record_snapshot, spectral_split, trajectory_matrix,
)
from src.utils.error_handler import (
    AnalysisPreconditionError, SnapshotStorageError, UnknownMatrixError,
)


class TestSnapshotArchive(unittest.TestCase):
    """スナップショットアーカイブのテスト"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.archive = SnapshotArchive(self.temp_dir.name, "run", interval=100)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_record_and_read_back(self):
        """書き込んだ値を float32 で読み戻せる"""
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        self.archive.record(0, {"a": a, "b": np.ones(4, dtype=np.float32)})
        self.archive.record(100, {"a": a + 1, "b": np.zeros(4, dtype=np.float32)})
        self.assertEqual(self.archive.steps(), [0, 100])
        self.assertEqual(self.archive.matrix_names(), ["a", "b"])
        np.testing.assert_array_equal(self.archive.read(100)["a"], a + 1)
        steps, rows = self.archive.read_matrix("a")
        self.assertEqual(steps, [0, 100])
        self.assertEqual(rows.shape, (2, 6))

    def test_reopen_from_manifest(self):
        """マニフェストから再度開ける"""
        self.archive.record(0, {"a": np.ones((2, 2))})
        reopened = SnapshotArchive(self.temp_dir.name, "run")
        self.assertEqual(reopened.steps(), [0])
        self.assertEqual(reopened.interval, 100)
        self.assertEqual(reopened.matrix_shape("a"), (2, 2))

    def test_rejects_non_increasing_step_and_missing_matrix(self):
        """ステップの逆行や行列の欠落はエラー"""
        self.archive.record(100, {"a": np.ones(2), "b": np.ones(2)})
        with self.assertRaises(SnapshotStorageError):
            self.archive.record(100, {"a": np.ones(2), "b": np.ones(2)})
        with self.assertRaises(SnapshotStorageError):
            self.archive.record(200, {"a": np.ones(2)})
        with self.assertRaises(UnknownMatrixError):
            self.archive.read_matrix("c")

    def test_truncate_after(self):
        """指定ステップより後を削除"""
        for step in (0, 100, 200):
            self.archive.record(step, {"a": np.full(2, step)})
        self.archive.truncate_after(100)
        self.assertEqual(self.archive.steps(), [0, 100])
        self.assertEqual(SnapshotArchive(self.temp_dir.name, "run").steps(), [0, 100])
        self.archive.record(200, {"a": np.zeros(2)})
        self.assertEqual(self.archive.nearest_step(250), 200)

    def test_missing_archive(self):
        """アーカイブが無ければ空または前提エラー"""
        empty = SnapshotArchive(self.temp_dir.name, "run", name="grad_accum")
        self.assertEqual(empty.steps(), [])
        with self.assertRaises(SnapshotStorageError):
            empty.matrix_names()


class TestTrajectoryPca(unittest.TestCase):
    """軌跡 PCA と帰無モデルのテスト"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.archive = SnapshotArchive(self.temp_dir.name, "run")
        rng = np.random.default_rng(0)
        self.w0 = rng.standard_normal((4, 5))
        direction = rng.standard_normal((4, 5))
        self.walk = np.cumsum(rng.standard_normal((8, 4, 5)), axis=0)
        for i in range(8):
            self.archive.record(i * 100, {
                "layer0.attn.W_Q": self.w0 + i * direction,
                "layer0.mlp.W_up": self.w0 + self.walk[i],
            })

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_straight_line_is_one_dimensional(self):
        """直線的な軌跡は PC1% がほぼ 100"""
        _, rows = self.archive.read_matrix("layer0.attn.W_Q")
        self.assertAlmostEqual(pc1_percent_of(rows), 100.0, places=3)
        self.assertLess(pc1_percent_of(self.walk.reshape(8, -1)), 100.0)

    def test_static_trajectory_has_no_pc1(self):
        """変位がゼロなら PC1 は定義されない"""
        self.assertIsNone(pc1_percent_of(np.ones((4, 6))))

    def test_expanding_window(self):
        """拡張窓は3スナップショット目から"""
        results = expanding_pc1(self.archive, "layer0.mlp.W_up", k=2)
        self.assertEqual(len(results), 6)
        self.assertEqual(results[0].window_end_step, 200)
        self.assertEqual(results[-1].basis.shape, (20, 2))
        for result in results:
            self.assertAlmostEqual(float(result.explained_ratios.sum()), 1.0, places=6)

    def test_too_few_snapshots(self):
        """スナップショットが足りなければ前提エラー"""
        short = SnapshotArchive(self.temp_dir.name, "run", name="short")
        short.record(0, {"w": np.ones(3)})
        short.record(1, {"w": np.zeros(3)})
        with self.assertRaises(AnalysisPreconditionError):
            expanding_pc1(short, "w")

    def test_null_model_z_score(self):
        """直線的な軌跡はランダムウォークより PC1 が高い"""
        _, rows = self.archive.read_matrix("layer0.attn.W_Q")
        result = null_model_from_rows(rows, 10, np.random.default_rng(1))
        self.assertEqual(result.n_null, 10)
        self.assertGreater(result.observed_pc1, result.null_mean)
        self.assertGreater(result.z_score, 0.0)

    def test_trajectory_matrix_is_centered_displacement(self):
        """軌跡行列は初期値からの変位を列中心化したもの"""
        x = trajectory_matrix(self.archive, "layer0.attn.W_Q", through_step=300)
        self.assertEqual(x.shape, (4, 20))
        np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-9)
        with self.assertRaises(AnalysisPreconditionError):
            trajectory_matrix(self.archive, "layer0.attn.W_Q", through_step=0)

    def test_random_walk_null_is_seeded(self):
        """同じシードなら同じ帰無分布"""
        first = random_walk_null(self.archive, "layer0.attn.W_Q", n_null=5, seed=3)
        second = random_walk_null(self.archive, "layer0.attn.W_Q", n_null=5, seed=3)
        self.assertEqual(first.null_values, second.null_values)
        self.assertGreater(first.observed_pc1, max(first.null_values))

    def test_pca_is_rotation_invariant(self):
        """列空間を直交変換しても寄与率は変わらず、基底は同じ変換で移る"""
        x = trajectory_matrix(self.archive, "layer0.mlp.W_up")
        q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((20, 20)))
        plain, rotated = pca(x, k=3), pca(x @ q, k=3)
        np.testing.assert_allclose(rotated.explained_ratios, plain.explained_ratios,
                                   rtol=1e-9, atol=1e-12)
        alignment = np.abs(np.sum((q @ rotated.basis) * plain.basis, axis=0))
        np.testing.assert_allclose(alignment, 1.0, atol=1e-8)

    def test_null_displacements_keep_step_norms(self):
        """帰無変位は各ステップのノルムを保ち、方向だけが変わる"""
        _, rows = self.archive.read_matrix("layer0.mlp.W_up")
        steps = np.diff(np.asarray(rows, dtype=np.float64), axis=0)
        norms = np.linalg.norm(steps, axis=1)
        null = null_displacements(norms, steps.shape[1], np.random.default_rng(2))
        self.assertEqual(null.shape, steps.shape)
        np.testing.assert_allclose(np.linalg.norm(null, axis=1), norms, rtol=1e-12)
        cosines = np.sum(null * steps, axis=1) / norms ** 2
        self.assertTrue(np.all(np.abs(cosines) < 0.999))

        walk = np.vstack([np.zeros(steps.shape[1]), np.cumsum(null, axis=0)])
        np.testing.assert_allclose(np.linalg.norm(np.diff(walk, axis=0), axis=1), norms,
                                   rtol=1e-9)

    def test_expanding_window_ends_at_full_trajectory(self):
        """拡張窓の最後の結果は全軌跡の一括 PCA と一致"""
        results = expanding_pc1(self.archive, "layer0.mlp.W_up", k=3)
        whole = pca(trajectory_matrix(self.archive, "layer0.mlp.W_up"), k=3,
                    window_end_step=700)
        self.assertEqual(results[-1].window_end_step, whole.window_end_step)
        np.testing.assert_allclose(results[-1].explained_ratios, whole.explained_ratios,
                                   rtol=1e-9, atol=1e-12)
        self.assertAlmostEqual(final_pc1(self.archive, "layer0.mlp.W_up"),
                               results[-1].pc1_percent, places=9)
        alignment = np.abs(np.sum(results[-1].basis * whole.basis, axis=0))
        np.testing.assert_allclose(alignment, 1.0, atol=1e-8)

    def test_record_snapshot_selects_matrices(self):
        """指定した行列だけを記録する"""
        archive = SnapshotArchive(self.temp_dir.name, "run", name="subset")
        params = {"a": np.ones((2, 2)), "b": np.zeros(3)}
        record_snapshot(params, 0, archive, ["a"])
        self.assertEqual(archive.matrix_names(), ["a"])

    def test_execution_basis_is_orthonormal(self):
        """実行多様体の基底は正規直交"""
        basis = execution_basis(self.archive, "layer0.mlp.W_up", k=3)
        self.assertEqual(basis.shape, (20, 3))
        np.testing.assert_allclose(basis.T @ basis, np.eye(3), atol=1e-8)

    def test_spectral_split_and_eigenspectrum(self):
        """群ごとの集計と上位成分"""
        split = spectral_split(self.archive)
        self.assertEqual(list(split["group"]), ["attention", "mlp"])
        self.assertGreater(split.loc[0, "pc1_percent"], split.loc[1, "pc1_percent"])
        spectrum = eigenspectrum(self.archive, top=3)
        self.assertEqual(len(spectrum), 6)
        mlp = spectrum[spectrum["matrix"] == "layer0.mlp.W_up"]
        self.assertEqual(list(mlp["component"]), [1, 2, 3])


class TestTurnover(unittest.TestCase):
    """PC1% 転換点のテスト"""

    def test_turnover_after_peak(self):
        """ピーク後に下がり続ければ転換点"""
        steps = [100, 200, 300, 400, 500, 600, 700]
        values = [50.0, 60.0, 80.0, 90.0, 85.0, 70.0, 60.0]
        result = detect_turnover(steps, values, grok_step=1000)
        self.assertEqual(result.peak_step, 400)
        self.assertEqual(result.turnover_step, 500)
        self.assertEqual(result.lead_vs_grok, 500)

    def test_no_turnover(self):
        """単調増加なら転換点なし、欠損は無視"""
        result = detect_turnover([1, 2, 3, 4], [10.0, None, 30.0, 40.0])
        self.assertEqual(result.peak_step, 4)
        self.assertIsNone(result.turnover_step)
        self.assertIsNone(detect_turnover([1], [None]).peak_step)

    def test_dip_that_recovers_is_ignored(self):
        """一時的な低下の後にピークを超えれば転換点ではない"""
        result = detect_turnover([1, 2, 3, 4], [50.0, 40.0, 60.0, 61.0])
        self.assertIsNone(result.turnover_step)


if __name__ == '__main__':
    unittest.main()
