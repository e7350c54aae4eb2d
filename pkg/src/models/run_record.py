from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional


class RunStatus(Enum):
    """ランの状態"""
    RUNNING = "running"
    COMPLETED = "completed"
    EARLY_STOPPED = "early_stopped"
    FAILED = "failed"


# メトリクスストリームのフィールド順（固定）
METRIC_FIELDS = (
    "step", "train_acc", "test_acc", "train_loss",
    "defect_median", "defect_q25", "defect_q75",
)


@dataclass
class MetricRecord:
    """評価ステップ1回分の記録"""
    step: int
    train_acc: float
    test_acc: float
    train_loss: float
    defect_median: Optional[float] = None
    defect_q25: Optional[float] = None
    defect_q75: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in METRIC_FIELDS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricRecord":
        return cls(**{name: data.get(name) for name in METRIC_FIELDS})


@dataclass
class LeadTime:
    """先行時間 Δt = t_grok − t_onset"""
    delta: int
    fraction: float
    valid: bool = True

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction


@dataclass
class ScalingFit:
    """べき乗則 Δt = C · t_grok^α のフィット結果"""
    C: Optional[float]
    alpha: Optional[float]
    r_squared: Optional[float]
    se_alpha: Optional[float]
    n_points: int
    domain: str = "per_run"
    method: str = "ols"
    flags: List[str] = field(default_factory=list)
    points: List[List[float]] = field(default_factory=list)

    @property
    def fitted(self) -> bool:
        return self.alpha is not None

    def predict(self, t_grok: float) -> Optional[float]:
        if not self.fitted:
            return None
        return self.C * t_grok ** self.alpha

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunRecord:
    """1ランの記録（メトリクス系列と検出結果）"""
    run_id: str
    config_hash: str
    seed: int
    lr: float
    metrics: List[MetricRecord] = field(default_factory=list)
    grok_step: Optional[int] = None
    onset_step: Optional[int] = None
    lead: Optional[LeadTime] = None
    status: RunStatus = RunStatus.RUNNING
    final_step: int = 0
    last_good_step: Optional[int] = None
    wall_clock: float = 0.0
    rng_provenance: Dict[str, str] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def steps(self) -> List[int]:
        return [m.step for m in self.metrics]

    @property
    def train_acc(self) -> List[float]:
        return [m.train_acc for m in self.metrics]

    @property
    def test_acc(self) -> List[float]:
        return [m.test_acc for m in self.metrics]

    def probe_series(self):
        """プローブ値のある (step, median) の組"""
        pairs = [(m.step, m.defect_median) for m in self.metrics if m.defect_median is not None]
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def summary_row(self) -> Dict[str, Any]:
        """ラン表の1行（lr, seed, grok_step, onset_step, lead, lead_fraction, flags）"""
        return {
            "run_id": self.run_id,
            "lr": self.lr,
            "seed": self.seed,
            "grok_step": self.grok_step,
            "onset_step": self.onset_step,
            "lead": self.lead.delta if self.lead else None,
            "lead_fraction": round(self.lead.percent, 1) if self.lead else None,
            "status": self.status.value,
            "flags": ";".join(self.flags),
        }

    def to_dict(self) -> Dict[str, Any]:
        """メトリクス本体を除いた JSON 化可能な辞書"""
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "lr": self.lr,
            "grok_step": self.grok_step,
            "onset_step": self.onset_step,
            "lead": asdict(self.lead) if self.lead else None,
            "status": self.status.value,
            "final_step": self.final_step,
            "last_good_step": self.last_good_step,
            "wall_clock": self.wall_clock,
            "rng_provenance": self.rng_provenance,
            "flags": self.flags,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], metrics: Optional[List[MetricRecord]] = None
                  ) -> "RunRecord":
        lead = data.get("lead")
        return cls(
            run_id=data["run_id"],
            config_hash=data.get("config_hash", ""),
            seed=data.get("seed", 0),
            lr=data.get("lr", 0.0),
            metrics=metrics or [],
            grok_step=data.get("grok_step"),
            onset_step=data.get("onset_step"),
            lead=LeadTime(**lead) if lead else None,
            status=RunStatus(data.get("status", "running")),
            final_step=data.get("final_step", 0),
            last_good_step=data.get("last_good_step"),
            wall_clock=data.get("wall_clock", 0.0),
            rng_provenance=data.get("rng_provenance", {}),
            flags=list(data.get("flags", [])),
            error=data.get("error"),
        )
