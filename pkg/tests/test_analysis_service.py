import tempfile
import unittest

from src.repositories.local_run_repository import LocalRunRepository
from src.services.analysis_service import AnalysisService, archive_view
from src.services.training_service import TrainingService
from src.utils.error_handler import AnalysisPreconditionError
from tests.test_training_service import tiny_config


class TestAnalysisService(unittest.TestCase):
    """保存済みランの解析のテスト"""

    @classmethod
    def setUpClass(cls):
        cls.temp_dir = tempfile.TemporaryDirectory()
        cls.repository = LocalRunRepository(cls.temp_dir.name)
        config = tiny_config(cls.temp_dir.name, n_null=3, n_rand=2, basis_k=2)
        cls.record = TrainingService(cls.repository).train_run(config, 7)

    @classmethod
    def tearDownClass(cls):
        cls.temp_dir.cleanup()

    def test_writes_all_tables(self):
        """全行列の解析表が揃う"""
        written = AnalysisService(self.repository).analyze(self.record.run_id)
        for name in ("turnover", "null_model", "spectral_split", "eigenspectrum",
                     "phase_ratios", "invariance"):
            self.assertIn(name, written)
            self.assertTrue(written[name].exists(), name)

        null_model = self.repository.load_table(self.record.run_id, "null_model")
        self.assertEqual(len(null_model), 6)
        self.assertTrue((null_model["n_null"] == 3).all())

        invariance = self.repository.load_table(self.record.run_id, "invariance")
        self.assertEqual(len(invariance), 5 * 6)
        rho = invariance["rho"].dropna()
        self.assertTrue(((rho >= 0.0) & (rho <= 1.0 + 1e-9)).all())

        pc1 = self.repository.load_table(self.record.run_id, "pc1_layer0.attn.W_Q")
        self.assertEqual(pc1["step"].tolist(), [20, 30, 40])

    def test_matrix_subset(self):
        """対象行列を絞ると表もその行列だけになる"""
        written = AnalysisService(self.repository).analyze(
            self.record.run_id, matrices=["layer0.attn.W_Q"])
        self.assertIn("pc1_layer0.attn.W_Q", written)
        self.assertNotIn("pc1_layer0.mlp.W_up", written)
        turnover = self.repository.load_table(self.record.run_id, "turnover")
        self.assertEqual(turnover["matrix"].tolist(), ["layer0.attn.W_Q"])

    def test_archive_view_matches_deltas(self):
        """ビューの次元は保持された δ の長さと一致"""
        view = archive_view(self.repository.archive(self.record.run_id))
        deltas = self.repository.load_deltas(self.record.run_id)
        self.assertEqual(sorted(deltas), [0, 10, 20, 30, 40])
        for delta in deltas.values():
            self.assertEqual(delta.shape[-1], view.size)

    def test_missing_run(self):
        """記録の無いランは前提条件エラー"""
        with self.assertRaises(AnalysisPreconditionError):
            AnalysisService(self.repository).analyze("dyck_lr1e-03_s1")


if __name__ == '__main__':
    unittest.main()
