import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, stats

from src.models.run_record import LeadTime, RunRecord, ScalingFit
from src.utils.error_handler import AnalysisPreconditionError, ConfigValidationError

logger = logging.getLogger(__name__)

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "fixtures"
FIXTURES = {"scan": "scan_runs.csv", "dyck": "dyck_runs.csv"}
MIN_FIT_POINTS = 3


@dataclass
class DetectorConfig:
    """グロッキング・オンセット検出の設定"""
    threshold: float = 0.98
    n_sustained: int = 3
    onset_multiplier: float = 10.0
    onset_floor: float = 20.0
    baseline_window: int = 3

    def validate(self) -> None:
        for name in ("threshold", "n_sustained", "onset_multiplier", "onset_floor",
                     "baseline_window"):
            if getattr(self, name) <= 0:
                raise ConfigValidationError(f"{name} は正である必要があります")


def detect_grok(steps: Sequence[int], accuracy: Sequence[float],
                config: Optional[DetectorConfig] = None) -> Optional[int]:
    """
    閾値以上が n_sustained 回連続する最初の評価のステップ

    Args:
        steps: 評価ステップ（昇順）
        accuracy: テスト精度
        config: 検出設定

    Returns:
        Optional[int]: グロッキングステップ（無ければ None）
    """
    config = config or DetectorConfig()
    run = 0
    for i, value in enumerate(accuracy):
        run = run + 1 if value is not None and value >= config.threshold else 0
        if run >= config.n_sustained:
            return int(steps[i - config.n_sustained + 1])
    return None


def onset_baseline(values: Sequence[float], config: Optional[DetectorConfig] = None,
                   run_id: str = "") -> float:
    """最初の baseline_window 個の中央値の中央値"""
    config = config or DetectorConfig()
    if len(values) < config.baseline_window:
        raise AnalysisPreconditionError(
            f"[{run_id}] オンセット検出には {config.baseline_window} 個以上の測定が必要です"
        )
    baseline = float(np.median(np.asarray(values[:config.baseline_window], dtype=np.float64)))
    if not np.isfinite(baseline):
        raise AnalysisPreconditionError(f"[{run_id}] 欠損のベースラインが有限ではありません")
    return baseline


def detect_onset(steps: Sequence[int], medians: Sequence[float],
                 config: Optional[DetectorConfig] = None, run_id: str = "") -> Optional[int]:
    """
    欠損中央値が max(倍率×ベースライン, 絶対下限) を超える最初のステップ

    Raises:
        AnalysisPreconditionError: 測定数不足またはベースラインが非有限
    """
    config = config or DetectorConfig()
    baseline = onset_baseline(medians, config, run_id)
    threshold = max(config.onset_multiplier * baseline, config.onset_floor)
    for step, value in zip(steps, medians):
        if value is not None and np.isfinite(value) and value > threshold:
            return int(step)
    return None


def lead_time(grok_step: int, onset_step: int) -> LeadTime:
    """
    先行時間と先行割合

    Returns:
        LeadTime: Δt と Δt/t_grok（Δt < 0 なら valid=False）
    """
    delta = int(grok_step - onset_step)
    fraction = delta / grok_step if grok_step else 0.0
    return LeadTime(delta=delta, fraction=fraction, valid=delta >= 0)


def fit_power_law(points: Sequence[Tuple[float, float]], method: str = "ols",
                  domain: str = "per_run") -> ScalingFit:
    """
    Δt = C · t_grok^α のフィット

    ols は (log t_grok, log Δt) の最小二乗、nls は元スケールの非線形最小二乗
    （scipy.optimize.curve_fit、初期値は ols）。R² はどちらも対数空間で報告する。

    Args:
        points: (t_grok, Δt) の列
        method: "ols" または "nls"
        domain: "per_run" または "lr_means"

    Returns:
        ScalingFit: 有効点が3未満なら係数は None で flags に insufficient_points
    """
    flags: List[str] = []
    valid = []
    for t, dt in points:
        if t is None or dt is None or not (t > 0 and dt > 0):
            flags.append(f"excluded_nonpositive:{t},{dt}")
            continue
        valid.append((float(t), float(dt)))
    if len(valid) < MIN_FIT_POINTS:
        flags.append("insufficient_points")
        return ScalingFit(C=None, alpha=None, r_squared=None, se_alpha=None,
                          n_points=len(valid), domain=domain, method=method, flags=flags,
                          points=[list(p) for p in valid])

    t = np.array([p[0] for p in valid])
    dt = np.array([p[1] for p in valid])
    log_t, log_dt = np.log(t), np.log(dt)
    ols = stats.linregress(log_t, log_dt)
    C, alpha, se_alpha = float(np.exp(ols.intercept)), float(ols.slope), float(ols.stderr)

    if method == "nls":
        popt, pcov = optimize.curve_fit(lambda x, c, a: c * np.power(x, a), t, dt,
                                        p0=(C, alpha), maxfev=20000)
        C, alpha = float(popt[0]), float(popt[1])
        se_alpha = float(np.sqrt(np.diag(pcov))[1])
    elif method != "ols":
        raise ConfigValidationError(f"未知のフィット手法です: {method}")

    predicted = np.log(C) + alpha * log_t
    ss_res = float(np.sum((log_dt - predicted) ** 2))
    ss_tot = float(np.sum((log_dt - log_dt.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(C=C, alpha=alpha, r_squared=float(min(max(r_squared, 0.0), 1.0)),
                      se_alpha=se_alpha, n_points=len(valid), domain=domain, method=method,
                      flags=flags, points=[list(p) for p in valid])


def valid_rows(df: pd.DataFrame) -> pd.DataFrame:
    """グロッキングとオンセットが揃い、先行時間が非負の行"""
    mask = df["grok_step"].notna() & df["onset_step"].notna()
    out = df[mask].copy()
    out["lead"] = out["grok_step"] - out["onset_step"]
    return out[out["lead"] >= 0]


def run_points(df: pd.DataFrame) -> List[Tuple[float, float]]:
    rows = valid_rows(df)
    return list(zip(rows["grok_step"].astype(float), rows["lead"].astype(float)))


def lr_mean_table(df: pd.DataFrame) -> pd.DataFrame:
    """
    学習率ごとの平均（有効なランのみ）

    Returns:
        pd.DataFrame: lr, mean_grok, mean_lead, mean_lead_fraction, n_seeds
    """
    rows = valid_rows(df)
    rows["fraction"] = 100.0 * rows["lead"] / rows["grok_step"]
    grouped = rows.groupby("lr").agg(
        mean_grok=("grok_step", "mean"),
        mean_lead=("lead", "mean"),
        mean_lead_fraction=("fraction", "mean"),
        n_seeds=("seed", "count"),
    )
    return grouped.reset_index()


def lr_mean_fit(df: pd.DataFrame, method: str = "ols") -> ScalingFit:
    """学習率平均の (grok, lead) に対するべき乗則フィット"""
    table = lr_mean_table(df)
    dropped = sorted(set(df["lr"]) - set(table["lr"]))
    fit = fit_power_law(list(zip(table["mean_grok"], table["mean_lead"])), method=method,
                        domain="lr_means")
    fit.flags += [f"dropped_lr:{lr:g}" for lr in dropped]
    return fit


def load_fixture_table(name: str) -> pd.DataFrame:
    """
    同梱のラン表（lr, seed, grok_step, onset_step, lead, lead_fraction, flags）

    Args:
        name: "scan" または "dyck"

    Returns:
        pd.DataFrame: ラン表
    """
    if name not in FIXTURES:
        raise ConfigValidationError(f"未知のフィクスチャです: {name} (候補: {', '.join(FIXTURES)})")
    df = pd.read_csv(FIXTURE_DIR / FIXTURES[name])
    df["flags"] = df["flags"].fillna("")
    return df


def summarize_table(df: pd.DataFrame) -> pd.DataFrame:
    """lead と lead_fraction を grok/onset から再計算したラン表"""
    out = df.copy()
    leads, fractions, flags = [], [], []
    for grok, onset, flag in zip(out["grok_step"], out["onset_step"], out.get("flags", [""] * len(out))):
        row_flags = [f for f in str(flag or "").split(";") if f]
        if pd.isna(grok) or pd.isna(onset):
            leads.append(None)
            fractions.append(None)
            if pd.isna(grok) and "no_grok" not in row_flags:
                row_flags.append("no_grok")
            elif pd.isna(onset) and "no_onset" not in row_flags:
                row_flags.append("no_onset")
        else:
            lead = lead_time(int(grok), int(onset))
            leads.append(lead.delta)
            fractions.append(round(lead.percent, 1))
            if not lead.valid:
                row_flags.append("invalid_lead")
        flags.append(";".join(row_flags))
    out["lead"] = leads
    out["lead_fraction"] = fractions
    out["flags"] = flags
    return out


def summarize_run(record: RunRecord, config: Optional[DetectorConfig] = None) -> RunRecord:
    """メトリクス系列から検出器を適用して記録を更新"""
    config = config or DetectorConfig()
    record.grok_step = detect_grok(record.steps, record.test_acc, config)
    probe_steps, medians = record.probe_series()
    record.onset_step = None
    if len(medians) >= config.baseline_window:
        record.onset_step = detect_onset(probe_steps, medians, config, record.run_id)
    record.lead = None
    if record.grok_step is not None and record.onset_step is not None:
        record.lead = lead_time(record.grok_step, record.onset_step)
    return record


def threshold_crossings(values: Sequence[float], threshold: float = 0.98) -> int:
    """閾値をまたいだ回数（上下どちらの向きも数える）"""
    above = np.asarray(values, dtype=np.float64) >= threshold
    return int(np.count_nonzero(above[1:] != above[:-1]))


def first_crossing(steps: Sequence[int], values: Sequence[float], threshold: float = 0.98
                   ) -> Optional[int]:
    """最初に閾値以上になったステップ（持続性は問わない）"""
    for step, value in zip(steps, values):
        if value >= threshold:
            return int(step)
    return None
