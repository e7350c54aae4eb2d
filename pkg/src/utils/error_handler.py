import functools
import logging
import traceback
from datetime import datetime
from typing import Callable, Optional, Sequence


class GrokMonitorError(Exception):
    """ツールキット共通の基底例外"""
    exit_code = 2


class ConfigValidationError(GrokMonitorError):
    """設定値の検証エラー"""
    exit_code = 1


class ShapeMismatchError(GrokMonitorError, ValueError):
    """プリミティブ演算の形状不一致"""

    def __init__(self, primitive: str, *shapes: Sequence[int]):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        shape_text = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: 形状が一致しません {shape_text}")


class NonScalarLossError(GrokMonitorError, ValueError):
    """スカラーでない損失に対する逆伝播"""


class SequenceTooLongError(GrokMonitorError, ValueError):
    """設定された最大系列長を超える入力"""


class DatasetFormatError(GrokMonitorError):
    """データファイルの書式エラー"""

    def __init__(self, path: str, line_no: int, line: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: 不正な行です: {line!r}")


class DatasetNotFoundError(GrokMonitorError, FileNotFoundError):
    """データファイルが存在しない"""


class NonFiniteError(GrokMonitorError, FloatingPointError):
    """損失または勾配に非有限値が現れた"""

    def __init__(self, what: str, step: Optional[int] = None, last_good_step: Optional[int] = None):
        self.step = step
        self.last_good_step = last_good_step
        super().__init__(f"{what} が非有限値です (step={step}, last_good_step={last_good_step})")


class SnapshotStorageError(GrokMonitorError, OSError):
    """スナップショットの保存・読み込みに失敗"""

    def __init__(self, run_id: str, step: int, reason: str):
        self.run_id = run_id
        self.step = step
        super().__init__(f"[{run_id}] step {step} のスナップショット処理に失敗: {reason}")


class UnknownMatrixError(GrokMonitorError, KeyError):
    """マニフェストに存在しない行列名"""


class MissingBasisError(GrokMonitorError):
    """介入対象の行列に基底が存在しない"""


class AnalysisPreconditionError(GrokMonitorError):
    """解析の前提条件を満たさない"""
    exit_code = 3


class ErrorHandler:
    """エラーハンドリング用ユーティリティクラス"""

    @staticmethod
    def handle_run_error(func: Callable) -> Callable:
        """
        個々の学習ランのエラーを隔離するデコレータ

        スイープ中の1ランの失敗で全体を止めないため、例外をログに記録して
        None を返す。

        Args:
            func: ラップする関数

        Returns:
            Callable: エラーハンドリング付き関数
        """
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except Exception as e:
                logging.getLogger("grok_monitor.error").error(
                    f"ランエラー in {func.__name__}: {ErrorHandler.format_error(e)}"
                )
                ErrorHandler.log_error_details(e, context=func.__name__)
                return None
        return wrapper

    @staticmethod
    def format_error(error: Exception) -> str:
        """
        例外を1行のメッセージに変換

        Args:
            error: エラーオブジェクト

        Returns:
            str: フォーマットされたエラーメッセージ
        """
        if isinstance(error, GrokMonitorError):
            return str(error)
        if isinstance(error, MemoryError):
            return "メモリが不足しています。バッチサイズやスナップショット対象を減らしてください。"
        if isinstance(error, OSError):
            return f"ファイル操作に失敗しました ({error})"
        return f"予期しないエラーが発生しました ({type(error).__name__}: {error})"

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        """
        例外をCLIの終了コードに変換

        Args:
            error: エラーオブジェクト

        Returns:
            int: 1=設定エラー, 2=実行失敗, 3=解析の前提条件エラー
        """
        if isinstance(error, GrokMonitorError):
            return error.exit_code
        return 2

    @staticmethod
    def log_error_details(error: Exception, context: str = "") -> None:
        """
        エラーの詳細情報をログに記録

        Args:
            error: エラーオブジェクト
            context: エラーのコンテキスト
        """
        logger = logging.getLogger("grok_monitor.error")

        error_details = {
            'timestamp': datetime.now().isoformat(),
            'type': type(error).__name__,
            'message': str(error),
            'context': context,
            'traceback': traceback.format_exc()
        }

        logger.error(f"エラー詳細: {error_details}")


# ショートハンドエイリアス
handle_run_error = ErrorHandler.handle_run_error
log_error_details = ErrorHandler.log_error_details
