import os
import tempfile
import unittest

from src.models.experiment_config import (
    Condition, ExperimentConfig, InterventionSpec, Task, default_max_steps,
)
from src.utils.config_loader import ConfigLoader
from src.utils.error_handler import ConfigValidationError, ErrorHandler
from src.utils.helpers import format_lr


class TestExperimentConfig(unittest.TestCase):
    """実験設定のテスト"""

    def test_run_id(self):
        """ラン識別子はタスク・学習率・シード（介入は条件と強度）"""
        config = ExperimentConfig()
        self.assertEqual(config.run_id(42), "dyck_lr1e-03_s42")
        kicked = config.replace(task=Task.SCAN, lr=3e-4, condition=Condition.KICK_1A)
        self.assertEqual(kicked.run_id(7), "scan_lr3e-04_s7_kick_1a_0.01")
        self.assertEqual(config.replace(weight_decay=0.1).run_id(1), "dyck_lr1e-03_s1_wd0.1")

    def test_run_id_separates_nearby_learning_rates(self):
        """近い学習率のグリッドでもラン識別子が衝突しない"""
        grid = [1e-3, 1.2e-3, 1.5e-3, 1.25e-3, 3e-4, 3.3e-4, 1e-3 + 1e-12]
        ids = [ExperimentConfig(lr=lr).run_id(0) for lr in grid]
        self.assertEqual(len(set(ids)), len(grid))
        self.assertEqual(ids[1], "dyck_lr1.2e-03_s0")
        self.assertEqual(format_lr(1.25e-3), "1.25e-03")
        for lr in grid:
            self.assertEqual(float(format_lr(lr)), lr)

    def test_flat_round_trip(self):
        """フラットな文字列表現から同じ設定に戻る"""
        config = ExperimentConfig(task=Task.SCAN, lr=3e-4, seeds=[1, 2], max_steps=500,
                                  condition=Condition.PENALTY_1B, strength=0.25,
                                  basis_run="scan_lr3e-04_s1", early_stop=False)
        self.assertEqual(ExperimentConfig.from_flat(config.to_flat()), config)

    def test_from_flat_coerces_strings(self):
        """INI と同じ書式の値を型変換する"""
        config = ExperimentConfig.from_flat({
            "task": "SCAN", "lr": "1e-4", "max_steps": "2e4", "seeds": "1, 2,3",
            "early_stop": "no", "d_model": "", "strength": "none",
        })
        self.assertEqual(config.task, Task.SCAN)
        self.assertEqual(config.max_steps, 20000)
        self.assertEqual(config.seeds, [1, 2, 3])
        self.assertFalse(config.early_stop)
        self.assertIsNone(config.d_model)
        self.assertIsNone(config.strength)

    def test_unknown_and_invalid_values(self):
        """未知のキーや変換できない値は設定エラー"""
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_flat({"learning_rate": "1e-3"})
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_flat({"condition": "dropout"})
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_flat({"early_stop": "maybe"})
        with self.assertRaises(ConfigValidationError):
            ExperimentConfig.from_flat({"probe_k": "2.5"})

    def test_hash_ignores_runtime_keys(self):
        """出力先や並列数はハッシュに影響しない"""
        config = ExperimentConfig()
        same = config.replace(output_dir="elsewhere", workers=4, max_steps=123)
        self.assertEqual(config.config_hash(42), same.config_hash(42))
        self.assertNotEqual(config.config_hash(42), config.config_hash(43))
        self.assertNotEqual(config.config_hash(42), config.replace(lr=2e-3).config_hash(42))

    def test_validation(self):
        """間隔の整合や強度の範囲を検証"""
        ExperimentConfig().validate()
        bad = [
            {"snapshot_interval": 150},
            {"probe_interval": 250},
            {"eval_interval": 0},
            {"lr": 0.0},
            {"seeds": []},
            {"probe_eta": -1e-3},
            {"grad_accum_decay": 0.0},
            {"condition": Condition.PROJECT_1B},
            {"condition": Condition.PENALTY_1B, "strength": 2.0, "basis_run": "x"},
        ]
        for changes in bad:
            with self.subTest(changes=changes):
                with self.assertRaises(ConfigValidationError):
                    ExperimentConfig(**changes).validate()

    def test_resolved_defaults(self):
        """タスクと学習率に応じた既定値"""
        dyck = ExperimentConfig()
        self.assertEqual(dyck.resolved_batch_size, 50)
        self.assertEqual(dyck.resolved_probe_interval, 100)
        self.assertEqual(dyck.replace(lr=1e-4).resolved_probe_interval, 500)
        self.assertEqual(dyck.model_dims(), (128, 2, 4, 256))
        self.assertEqual(ExperimentConfig(task=Task.SCAN).model_dims(), (256, 3, 4, 512))
        self.assertEqual(default_max_steps(Task.DYCK, 1e-2), 20000)
        self.assertEqual(default_max_steps(Task.DYCK, 3e-5), 300000)
        self.assertEqual(default_max_steps(Task.SCAN, 1e-1), 20000)
        self.assertLess(default_max_steps(Task.SCAN, 1e-4), default_max_steps(Task.SCAN, 1e-5))

    def test_intervention_spec(self):
        """強度0の介入は非アクティブ"""
        self.assertFalse(InterventionSpec(condition=Condition.KICK_1A, strength=0.0).is_active)
        self.assertTrue(InterventionSpec(condition=Condition.NOISE_1A).is_active)
        self.assertFalse(InterventionSpec().is_active)
        self.assertTrue(Condition.PENALTY_1B.needs_basis)
        self.assertFalse(Condition.KICK_1A.needs_basis)


class TestConfigLoader(unittest.TestCase):
    """設定ファイル読み込みのテスト"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.loader = ConfigLoader()
        self.previous = self.loader.config_path

    def tearDown(self):
        self.loader.reload(str(self.previous))
        self.temp_dir.cleanup()

    def test_reads_experiment_section(self):
        """[experiment] セクションを ExperimentConfig に渡せる"""
        path = os.path.join(self.temp_dir.name, "test.ini")
        with open(path, "w", encoding="utf-8") as f:
            f.write("[experiment]\ntask = scan\nlr = 3e-4\n\n[logging]\nlog_level = DEBUG\n")
        self.loader.reload(path)
        config = ExperimentConfig.from_flat(self.loader.get_section("experiment"))
        self.assertEqual(config.task, Task.SCAN)
        self.assertEqual(config.lr, 3e-4)
        self.assertEqual(self.loader.log_level(), 10)
        self.assertEqual(self.loader.get("paths", "output_dir"), "runs")

    def test_missing_file_uses_defaults(self):
        """ファイルが無ければ既定値"""
        self.loader.reload(os.path.join(self.temp_dir.name, "missing.ini"))
        self.assertEqual(self.loader.get_section("experiment"), {})
        self.assertEqual(self.loader.getint("paths", "nothing", 5), 5)

    def test_logging_options_are_typed(self):
        """[logging] の数値・真偽値は型変換し、不正値は既定値"""
        path = os.path.join(self.temp_dir.name, "logging.ini")
        with open(path, "w", encoding="utf-8") as f:
            f.write("[logging]\nmax_bytes = 2048\nbackup_count = many\nconsole = no\n")
        self.loader.reload(path)
        self.assertEqual(self.loader.getint("logging", "max_bytes", 1), 2048)
        self.assertEqual(self.loader.getint("logging", "backup_count", 5), 5)
        self.assertFalse(self.loader.getboolean("logging", "console", True))

        self.loader.reload(os.path.join(self.temp_dir.name, "missing.ini"))
        self.assertEqual(self.loader.getint("logging", "backup_count"), 5)
        self.assertTrue(self.loader.getboolean("logging", "console"))


class TestExitCodes(unittest.TestCase):
    """終了コードのテスト"""

    def test_exit_codes(self):
        """設定エラー1、実行失敗2"""
        self.assertEqual(ErrorHandler.exit_code_for(ConfigValidationError("x")), 1)
        self.assertEqual(ErrorHandler.exit_code_for(RuntimeError("x")), 2)


if __name__ == '__main__':
    unittest.main()
