import functools
import logging
import logging.handlers
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
RUN_LOG_FORMAT = '%(asctime)s %(levelname)-7s %(name)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(name: str = "grok_monitor", level: int = logging.INFO,
                 log_dir: str = "logs", max_bytes: int = 10 * 1024 * 1024,
                 backup_count: int = 5, console: bool = True) -> logging.Logger:
    """
    ロガーを設定

    コンソール（stderr）とローテーション付きのファイル logs/grok_monitor.log に出力する。
    ランごとのログは run_log で別途追加する。

    Args:
        name: ロガー名（"" ならルートロガー）
        level: ログレベル
        log_dir: ログファイルの出力ディレクトリ
        max_bytes: ローテーションするファイルサイズ
        backup_count: 残す世代数
        console: コンソールにも出力するか

    Returns:
        logging.Logger: 設定済みロガー
    """
    logger = logging.getLogger(name)

    # 既に設定済みの場合はレベルだけ更新する
    if logger.handlers:
        logger.setLevel(level)
        return logger

    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    file_handler = logging.handlers.RotatingFileHandler(
        log_path / "grok_monitor.log",
        maxBytes=max_bytes,
        backupCount=backup_count,
        encoding='utf-8'
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    return logger


@contextmanager
def run_log(path: Union[str, Path], logger_name: str = "") -> Iterator[logging.Handler]:
    """
    ランの間だけ、そのランのディレクトリのログファイルへ追記するハンドラーを付ける

    再開したランは同じファイルに追記される。

    Args:
        path: ログファイル（例 runs/<run_id>/train.log）
        logger_name: ハンドラーを付けるロガー（既定はルート）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode='a', encoding='utf-8')
    handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT, datefmt=DATE_FORMAT))
    target = logging.getLogger(logger_name)
    target.addHandler(handler)
    try:
        yield handler
    finally:
        target.removeHandler(handler)
        handler.close()


def log_performance(func):
    """
    関数の実行時間をログに記録するデコレータ

    Args:
        func: 対象関数

    Returns:
        実行時間ログ付きの関数
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger("grok_monitor.performance")
        started = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            logger.error(f"{func.__qualname__} 失敗 ({time.perf_counter() - started:.2f}秒): "
                         f"{type(e).__name__}: {e}")
            raise
        logger.info(f"{func.__qualname__} 完了 ({time.perf_counter() - started:.2f}秒)")
        return result

    return wrapper


def log_run_activity(run_id: str, action: str, step: Optional[int] = None,
                     success: bool = True, error: Optional[str] = None) -> None:
    """
    学習ランの活動をログに記録

    Args:
        run_id: ラン識別子
        action: 実行されたアクション
        step: 対象ステップ（任意）
        success: 成功フラグ
        error: エラーメッセージ（任意）
    """
    logger = logging.getLogger("grok_monitor.activity")

    status = "成功" if success else "失敗"
    step_info = f" step:{step}" if step is not None else ""
    error_info = f" エラー:{error}" if error else ""

    message = f"[{run_id}] {action} - {status}{step_info}{error_info}"

    if success:
        logger.info(message)
    else:
        logger.error(message)
