import hashlib
import json
from typing import Any, List, Sequence

import numpy as np
import pandas as pd


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """マスターシードと名前から独立した乱数ストリームを生成

    同じ (seed, name) からは常に同じストリームが得られるため、ストリームの
    状態をチェックポイントに保存する必要がない。

    Args:
        seed: マスターシード
        name: ストリーム名（例: "init", "probe:1200"）

    Returns:
        np.random.Generator: 乱数ジェネレータ
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def stable_hash(payload: Any) -> str:
    """JSON化できる値の安定したハッシュ値を計算

    Args:
        payload: ハッシュ対象

    Returns:
        str: SHA-256 の16進文字列（先頭16文字）
    """
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """後方移動平均

    Args:
        values: 系列
        window: 窓幅（評価回数単位）

    Returns:
        np.ndarray: 平滑化された系列
    """
    if window < 1:
        raise ValueError(f"window は1以上である必要があります: {window}")
    series = pd.Series(np.asarray(values, dtype=np.float64))
    return series.rolling(window=window, min_periods=1).mean().to_numpy()


def steps_to_window(window_steps: int, eval_interval: int) -> int:
    """ステップ単位の窓幅を評価回数単位に変換"""
    return max(1, int(round(window_steps / max(eval_interval, 1))))


def format_lr(lr: float) -> str:
    """学習率をラン識別子向けの短い文字列に変換

    仮数部は元の値に戻せる最短の桁数にするため、近い学習率どうしが衝突しない。

    Args:
        lr: 学習率

    Returns:
        str: 例 1e-03 -> "1e-03", 1.2e-03 -> "1.2e-03"
    """
    for digits in range(17):
        text = f"{lr:.{digits}e}"
        if float(text) == lr:
            return text
    return repr(lr)


def parse_float_list(text: str) -> List[float]:
    """カンマ区切りの浮動小数点リストを解析"""
    return [float(item) for item in str(text).split(",") if item.strip()]
