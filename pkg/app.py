import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from src.models.experiment_config import Condition, ExperimentConfig
from src.repositories.local_run_repository import LocalRunRepository
from src.services.analysis_service import AnalysisService
from src.services.detection_service import load_fixture_table, summarize_run
from src.services.export_service import ExportService
from src.services.sweep_service import RUN_COLUMNS, SweepService, fit_table, write_sweep
from src.services.training_service import TrainingService, detector_config
from src.utils.config_loader import config as app_config
from src.utils.error_handler import (
    AnalysisPreconditionError, ConfigValidationError, ErrorHandler,
)
from src.utils.helpers import parse_float_list
from src.utils.logger import setup_logger

OUTPUT_ENV = "GROK_MONITOR_OUTPUT"

logger = logging.getLogger("grok_monitor.cli")


class CliArgumentParser(argparse.ArgumentParser):
    """引数の誤りを SystemExit(2) ではなく設定エラー（終了コード1）として送出するパーサー"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigValidationError(f"{self.prog}: {message}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """ExperimentConfig の全キーを同名のフラグとして追加（値は文字列のまま受け取る）"""
    group = parser.add_argument_group("実験設定（config.ini の [experiment] を上書き）")
    for f in dataclasses.fields(ExperimentConfig):
        group.add_argument(f"--{f.name}", default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    """コマンドライン引数のパーサーを作成"""
    common = CliArgumentParser(add_help=False)
    common.add_argument("--config", default="config.ini", help="設定ファイル (INI)")
    add_config_flags(common)

    parser = CliArgumentParser(prog="grok-monitor",
                               description="グロッキングの交換子欠損モニタリングツール")
    sub = parser.add_subparsers(dest="verb", required=True)

    train = sub.add_parser("train", parents=[common], help="1ランを学習")
    train.add_argument("--seed", type=int, default=None, help="シード（既定は seeds の先頭）")

    sub.add_parser("sweep", parents=[common], help="学習率 × シードのスイープ")

    analyze = sub.add_parser("analyze", parents=[common], help="保存済みランの軌跡・可積分性解析")
    analyze.add_argument("--run_id", required=True, action="append", help="対象ラン（複数可）")
    analyze.add_argument("--matrices", default=None, help="対象行列（カンマ区切り）")

    fit = sub.add_parser("fit", parents=[common], help="検出器とスケーリングフィット")
    source = fit.add_mutually_exclusive_group(required=True)
    source.add_argument("--fixture", choices=["scan", "dyck"], help="同梱のラン表")
    source.add_argument("--table", help="ラン表 CSV（lr, seed, grok_step, onset_step）")
    source.add_argument("--run_ids", help="保存済みラン（カンマ区切り、'all' で全て）")
    fit.add_argument("--method", choices=["ols", "nls"], default="ols")

    intervene = sub.add_parser("intervene", parents=[common], help="介入の用量反応スイープ")
    intervene.add_argument("--conditions", default=None,
                           help="条件（カンマ区切り、既定は4条件全て）")
    intervene.add_argument("--strengths", default=None,
                           help="強度（カンマ区切り、既定は条件ごとのグリッド）")

    export = sub.add_parser("export", parents=[common], help="プロット用データの書き出し")
    export.add_argument("--run_ids", default=None, help="対象ラン（カンマ区切り、既定は全て）")
    export.add_argument("--out", default=None, help="出力ディレクトリ（既定は <output_dir>/plotdata）")
    export.add_argument("--fixture", choices=["scan", "dyck"], default=None)
    export.add_argument("--table", default=None, help="スケーリング図用のラン表 CSV")
    export.add_argument("--dose_table", default=None, help="用量反応表 CSV")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """
    既定値 < 設定ファイル < コマンドラインフラグ の順に設定を決める

    --output_dir が無ければ環境変数 GROK_MONITOR_OUTPUT が [paths] より優先される。
    """
    app_config.reload(args.config)
    flat: Dict[str, str] = {
        "output_dir": app_config.get("paths", "output_dir", "runs"),
        "scan_path": app_config.get("paths", "scan_path", "data/scan/tasks.txt"),
    }
    flat.update(app_config.get_section("experiment"))
    if os.environ.get(OUTPUT_ENV):
        flat["output_dir"] = os.environ[OUTPUT_ENV]
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            flat[key] = value
    config = ExperimentConfig.from_flat(flat)
    config.validate()
    return config


def _split(text: Optional[str]) -> List[str]:
    return [item.strip() for item in str(text or "").split(",") if item.strip()]


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    seed = args.seed if args.seed is not None else config.seeds[0]
    record = TrainingService(LocalRunRepository(config.output_dir)).train_run(config, seed)
    print(pd.DataFrame([record.summary_row()]).to_string(index=False))
    return 0


def cmd_sweep(args: argparse.Namespace, config: ExperimentConfig) -> int:
    result = SweepService(LocalRunRepository(config.output_dir)).sweep(config)
    print(result.table.to_string(index=False))
    print(f"per-run: α={result.fit.alpha} R²={result.fit.r_squared} flags={result.fit.flags}")
    print(f"lr-mean: α={result.lr_fit.alpha} R²={result.lr_fit.r_squared} flags={result.lr_fit.flags}")
    return 0


def cmd_analyze(args: argparse.Namespace, config: ExperimentConfig) -> int:
    service = AnalysisService(LocalRunRepository(config.output_dir))
    matrices = _split(args.matrices) or None
    for run_id in args.run_id:
        written = service.analyze(run_id, matrices)
        print(f"{run_id}: {', '.join(sorted(written))}")
    return 0


def table_from_runs(repository: LocalRunRepository, run_ids: Sequence[str],
                    config: ExperimentConfig) -> pd.DataFrame:
    """保存済みメトリクスに検出器を適用し直したラン表"""
    rows = []
    for run_id in run_ids:
        record = repository.load_record(run_id)
        if record is None:
            raise AnalysisPreconditionError(f"ラン {run_id} の記録が見つかりません")
        rows.append(summarize_run(record, detector_config(config)).summary_row())
    return pd.DataFrame(rows, columns=RUN_COLUMNS)


def load_run_table(args: argparse.Namespace, config: ExperimentConfig) -> Optional[pd.DataFrame]:
    if getattr(args, "fixture", None):
        return load_fixture_table(args.fixture)
    if getattr(args, "table", None):
        if not Path(args.table).exists():
            raise AnalysisPreconditionError(f"ラン表が見つかりません: {args.table}")
        return pd.read_csv(args.table)
    return None


def cmd_fit(args: argparse.Namespace, config: ExperimentConfig) -> int:
    repository = LocalRunRepository(config.output_dir)
    table = load_run_table(args, config)
    name = args.fixture or "table"
    if table is None:
        run_ids = repository.list_runs() if args.run_ids == "all" else _split(args.run_ids)
        table = table_from_runs(repository, run_ids, config)
        name = "runs"
    result = fit_table(table, method=args.method)
    path = write_sweep(result, repository.root / "fits", f"{name}_{args.method}")
    print(result.table.to_string(index=False))
    print(result.lr_means.to_string(index=False))
    print(f"per-run: α={result.fit.alpha} R²={result.fit.r_squared} n={result.fit.n_points} "
          f"flags={result.fit.flags}")
    print(f"lr-mean: α={result.lr_fit.alpha} R²={result.lr_fit.r_squared} "
          f"n={result.lr_fit.n_points} flags={result.lr_fit.flags}")
    print(f"保存先: {path}")
    return 0


def cmd_intervene(args: argparse.Namespace, config: ExperimentConfig) -> int:
    conditions = [Condition(c) for c in _split(args.conditions)] or None
    grid = SweepService.default_grid(conditions)
    if args.strengths:
        strengths = parse_float_list(args.strengths)
        grid = [(c, s) for c in (conditions or [c for c, _ in grid]) for s in strengths]
        grid = list(dict.fromkeys(grid))
    df = SweepService(LocalRunRepository(config.output_dir)).dose_response(config, grid)
    print(df.to_string(index=False))
    return 0


def cmd_export(args: argparse.Namespace, config: ExperimentConfig) -> int:
    repository = LocalRunRepository(config.output_dir)
    table = load_run_table(args, config)
    result = fit_table(table) if table is not None else None
    dose = pd.read_csv(args.dose_table) if args.dose_table else None
    written = ExportService(repository).export(
        args.out or str(repository.root / "plotdata"),
        run_ids=_split(args.run_ids) or None,
        run_table=None if result is None else result.table,
        fit=None if result is None else result.fit,
        dose_table=dose,
        threshold=config.grok_threshold,
    )
    for path in written:
        print(path)
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "fit": cmd_fit,
    "intervene": cmd_intervene,
    "export": cmd_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI のエントリポイント

    Returns:
        int: 終了コード（0 成功, 1 設定エラー, 2 実行失敗, 3 解析の前提条件エラー）
    """
    try:
        args = build_parser().parse_args(argv)
    except ConfigValidationError as e:
        print(f"エラー: {ErrorHandler.format_error(e)}", file=sys.stderr)
        return ErrorHandler.exit_code_for(e)
    try:
        config = resolve_config(args)
        setup_logger("", level=app_config.log_level(),
                     log_dir=app_config.get("logging", "log_dir", "logs"),
                     max_bytes=app_config.getint("logging", "max_bytes", 10 * 1024 * 1024),
                     backup_count=app_config.getint("logging", "backup_count", 5),
                     console=app_config.getboolean("logging", "console", True))
        logger.info(f"{args.verb} を開始します (task={config.task.value}, "
                    f"output={config.output_dir})")
        return COMMANDS[args.verb](args, config)
    except Exception as e:
        ErrorHandler.log_error_details(e, context=args.verb)
        print(f"エラー: {ErrorHandler.format_error(e)}", file=sys.stderr)
        return ErrorHandler.exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
