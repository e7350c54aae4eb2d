import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Union, get_args, get_origin, get_type_hints

from src.utils.error_handler import ConfigValidationError
from src.utils.helpers import format_lr, stable_hash


class Task(Enum):
    """学習タスク"""
    DYCK = "dyck"
    SCAN = "scan"

    @property
    def display_name(self) -> str:
        mapping = {
            self.DYCK: "Dyck-1 深さ予測",
            self.SCAN: "SCAN コマンド→行動",
        }
        return mapping[self]


class Architecture(Enum):
    """モデル構成"""
    CAUSAL = "causal"
    ENC_DEC = "enc_dec"


class Condition(Enum):
    """介入条件"""
    BASELINE = "baseline"
    KICK_1A = "kick_1a"
    NOISE_1A = "noise_1a"
    PROJECT_1B = "project_1b"
    PENALTY_1B = "penalty_1b"

    @property
    def default_strength(self) -> float:
        mapping = {
            self.BASELINE: 0.0,
            self.KICK_1A: 1e-2,
            self.NOISE_1A: 1.0,
            self.PROJECT_1B: 1.0,
            self.PENALTY_1B: 0.5,
        }
        return mapping[self]

    @property
    def dose_grid(self) -> List[float]:
        """用量反応スイープの既定強度"""
        mapping = {
            self.BASELINE: [0.0],
            self.KICK_1A: [0.0, 1e-3, 1e-2, 1e-1],
            self.NOISE_1A: [0.0, 0.5, 1.0, 2.0],
            self.PROJECT_1B: [0.0, 1.0],
            self.PENALTY_1B: [0.0, 0.25, 0.5, 0.75, 1.0],
        }
        return mapping[self]

    @property
    def needs_basis(self) -> bool:
        """学習済み部分空間の基底を必要とするか"""
        return self in (self.PROJECT_1B, self.PENALTY_1B)


# タスクごとのモデル既定値（d_model, n_layers, n_heads, d_ff）
MODEL_DEFAULTS = {
    Task.DYCK: (128, 2, 4, 256),
    Task.SCAN: (256, 3, 4, 512),
}

# 学習率ごとの最大ステップ数の端点 (lr, steps)
STEP_BUDGETS = {
    Task.DYCK: ((1e-2, 20000), (3e-5, 300000)),
    Task.SCAN: ((1e-3, 20000), (1e-5, 200000)),
}


def default_max_steps(task: Task, lr: float) -> int:
    """
    学習率に応じた最大ステップ数（両端点の間を対数線形補間）

    Args:
        task: タスク
        lr: 学習率

    Returns:
        int: 最大ステップ数（100 の倍数）
    """
    (lr_hi, steps_lo), (lr_lo, steps_hi) = STEP_BUDGETS[task]
    lr = min(max(lr, lr_lo), lr_hi)
    ratio = (math.log10(lr_hi) - math.log10(lr)) / (math.log10(lr_hi) - math.log10(lr_lo))
    steps = 10 ** (math.log10(steps_lo) + ratio * (math.log10(steps_hi) - math.log10(steps_lo)))
    return int(round(steps / 100.0)) * 100


@dataclass
class ModelConfig:
    """トランスフォーマー構成"""
    architecture: Architecture
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    input_vocab: int
    output_vocab: int
    max_input_len: int
    max_output_len: int

    def validate(self) -> None:
        """設定値を検証"""
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "input_vocab",
                     "output_vocab", "max_input_len", "max_output_len"):
            if getattr(self, name) <= 0:
                raise ConfigValidationError(f"{name} は正である必要があります: {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigValidationError(
                f"d_model ({self.d_model}) は n_heads ({self.n_heads}) で割り切れる必要があります"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class InterventionSpec:
    """介入条件の指定"""
    condition: Condition = Condition.BASELINE
    strength: Optional[float] = None
    trigger_step: Optional[int] = None
    period: int = 10
    basis_run: str = ""
    basis_rank: int = 5

    @property
    def effective_strength(self) -> float:
        return self.condition.default_strength if self.strength is None else self.strength

    @property
    def is_active(self) -> bool:
        """学習経路を変える介入か（強度0はベースラインと同一）"""
        return self.condition != Condition.BASELINE and self.effective_strength > 0

    def validate(self) -> None:
        if self.effective_strength < 0:
            raise ConfigValidationError(f"strength は0以上である必要があります: {self.strength}")
        if self.condition == Condition.PENALTY_1B and self.effective_strength > 1:
            raise ConfigValidationError("penalty_1b の strength は [0, 1] の範囲です")
        if self.period < 1:
            raise ConfigValidationError(f"period は1以上である必要があります: {self.period}")
        if self.basis_rank < 1:
            raise ConfigValidationError(f"basis_rank は1以上である必要があります: {self.basis_rank}")
        if self.condition.needs_basis and self.is_active and not self.basis_run:
            raise ConfigValidationError(f"{self.condition.value} には basis_run の指定が必要です")


@dataclass
class ExperimentConfig:
    """実験設定（config.ini の [experiment] セクションと CLI フラグに対応するフラットなキー）"""
    task: Task = Task.DYCK
    lr: float = 1e-3
    weight_decay: float = 1.0
    max_steps: Optional[int] = None
    seeds: List[int] = field(default_factory=lambda: [42, 137, 2024])
    lr_grid: List[float] = field(default_factory=lambda: [3e-5, 1e-4, 5e-4, 1e-3, 3e-3, 1e-2])

    # モデル（None はタスク既定値）
    d_model: Optional[int] = None
    n_layers: Optional[int] = None
    n_heads: Optional[int] = None
    d_ff: Optional[int] = None

    # データ
    batch_size: Optional[int] = None
    n_train: Optional[int] = None
    n_test: int = 5000
    seq_len: int = 24
    max_depth: int = 12
    data_seed: int = 0
    scan_path: str = "data/scan/tasks.txt"
    scan_generate: bool = True
    max_command_len: Optional[int] = 8
    max_action_len: Optional[int] = 13
    test_eval_limit: Optional[int] = None

    # 最適化
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 1.0

    # スケジュール
    eval_interval: int = 100
    probe_interval: Optional[int] = None
    snapshot_interval: int = 200
    checkpoint_interval: int = 1000
    snapshot_matrices: List[str] = field(default_factory=list)

    # 交換子プローブ
    probe_eta: float = 1e-3
    probe_k: int = 5
    probe_batch_size: Optional[int] = None
    delta_retain_count: int = 2
    grad_accum_decay: float = 1.0  # 1.0 は単純な累積和、1未満は指数減衰付きの和

    # 検出器
    grok_threshold: float = 0.98
    n_sustained: int = 3
    onset_multiplier: float = 10.0
    onset_floor: float = 20.0
    baseline_window: int = 3
    early_stop: bool = True
    early_stop_margin: int = 2000

    # 解析
    n_null: int = 20
    n_rand: int = 5
    basis_k: int = 5

    # 介入
    condition: Condition = Condition.BASELINE
    strength: Optional[float] = None
    trigger_step: Optional[int] = None
    noise_period: int = 10
    basis_run: str = ""
    basis_rank: int = 5

    # 実行
    output_dir: str = "runs"
    workers: int = 1
    resume: bool = True

    # ハッシュと実行識別子に含めない実行時キー
    RUNTIME_KEYS = ("output_dir", "workers", "resume", "seeds", "lr_grid",
                    "max_steps", "checkpoint_interval")

    @property
    def resolved_max_steps(self) -> int:
        return self.max_steps if self.max_steps is not None else default_max_steps(self.task, self.lr)

    @property
    def resolved_probe_interval(self) -> int:
        if self.probe_interval is not None:
            return self.probe_interval
        return 100 if self.lr >= 5e-4 else 500

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 50 if self.task == Task.DYCK else 128

    @property
    def resolved_n_train(self) -> int:
        if self.n_train is not None:
            return self.n_train
        return 50 if self.task == Task.DYCK else 2048

    @property
    def resolved_probe_batch_size(self) -> int:
        if self.probe_batch_size is not None:
            return self.probe_batch_size
        return 16 if self.task == Task.DYCK else 64

    @property
    def intervention(self) -> InterventionSpec:
        return InterventionSpec(condition=self.condition, strength=self.strength,
                                trigger_step=self.trigger_step, period=self.noise_period,
                                basis_run=self.basis_run, basis_rank=self.basis_rank)

    def model_dims(self):
        """(d_model, n_layers, n_heads, d_ff) をタスク既定値で補完して返す"""
        defaults = MODEL_DEFAULTS[self.task]
        values = (self.d_model, self.n_layers, self.n_heads, self.d_ff)
        return tuple(v if v is not None else d for v, d in zip(values, defaults))

    def validate(self) -> None:
        """設定値を検証"""
        if self.resolved_max_steps <= 0:
            raise ConfigValidationError(f"max_steps は正である必要があります: {self.max_steps}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigValidationError("lr は正、weight_decay は0以上である必要があります")
        for name in ("eval_interval", "snapshot_interval", "checkpoint_interval",
                     "probe_k", "n_sustained", "baseline_window", "workers"):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f"{name} は1以上である必要があります")
        if not 0.0 < self.grad_accum_decay <= 1.0:
            raise ConfigValidationError(
                f"grad_accum_decay は (0, 1] の範囲です: {self.grad_accum_decay}")
        if self.probe_eta <= 0:
            raise ConfigValidationError(f"probe_eta は正である必要があります: {self.probe_eta}")
        for name, interval in (("probe_interval", self.resolved_probe_interval),
                               ("snapshot_interval", self.snapshot_interval)):
            if interval < 1 or interval % self.eval_interval:
                raise ConfigValidationError(
                    f"{name} ({interval}) は eval_interval ({self.eval_interval}) の倍数である必要があります"
                )
        if not self.seeds:
            raise ConfigValidationError("seeds が空です")
        self.intervention.validate()

    def run_id(self, seed: int) -> str:
        """
        ラン識別子

        Args:
            seed: シード

        Returns:
            str: 例 "dyck_lr1e-03_s42", "dyck_lr1e-03_s42_kick_1a_0.01"
        """
        parts = [self.task.value, f"lr{format_lr(self.lr)}", f"s{seed}"]
        if self.weight_decay != 1.0:
            parts.append(f"wd{self.weight_decay:g}")
        if self.condition != Condition.BASELINE:
            parts.append(f"{self.condition.value}_{self.intervention.effective_strength:g}")
        return "_".join(parts)

    def config_hash(self, seed: int) -> str:
        """学習に影響するキーとシードの安定ハッシュ"""
        payload = {k: v for k, v in self.to_flat().items() if k not in self.RUNTIME_KEYS}
        payload["seed"] = seed
        return stable_hash(payload)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> Dict[str, str]:
        """フラットな文字列辞書に変換（config.ini と同じ書式）"""
        out = {}
        for f in dataclasses.fields(self):
            out[f.name] = _format_value(getattr(self, f.name))
        return out

    @classmethod
    def from_flat(cls, mapping: Mapping[str, Any], base: Optional["ExperimentConfig"] = None
                  ) -> "ExperimentConfig":
        """
        フラットなキー・値の辞書から設定を作成

        Args:
            mapping: キー→値（文字列または変換済みの値）
            base: 上書き元の設定（None なら既定値）

        Returns:
            ExperimentConfig: 設定

        Raises:
            ConfigValidationError: 未知のキーや不正な値
        """
        hints = get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigValidationError(f"未知の設定キーです: {key}")
            if raw is None:
                continue
            try:
                changes[key] = _coerce(raw, hints[key])
            except (TypeError, ValueError) as e:
                raise ConfigValidationError(f"設定値が不正です: {key}={raw!r} ({e})")
        return dataclasses.replace(base or cls(), **changes)


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: Any, hint: Any) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        inner = [a for a in get_args(hint) if a is not type(None)][0]
        if isinstance(raw, str) and raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, inner)
    if origin in (list, List):
        (inner,) = get_args(hint)
        if isinstance(raw, (list, tuple)):
            return [_coerce(v, inner) for v in raw]
        return [_coerce(v.strip(), inner) for v in str(raw).split(",") if v.strip()]
    if isinstance(hint, type) and issubclass(hint, Enum):
        return raw if isinstance(raw, hint) else hint(str(raw).strip().lower())
    if hint is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"真偽値ではありません: {raw}")
    if hint is int:
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"整数ではありません: {raw}")
        return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
    if hint is float:
        return float(raw)
    return str(raw)
