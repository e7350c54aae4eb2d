import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.interfaces.run_repository import IRunRepository
from src.interfaces.snapshot_store import ISnapshotStore
from src.models.experiment_config import ExperimentConfig
from src.models.measurements import BasisKind, PhaseSample, phase_of
from src.models.run_record import RunRecord
from src.networks.layers import matrix_group
from src.services.integrability_service import assign_phases, build_basis, phase_ratios
from src.services.probe_service import invariance_series
from src.services.trajectory_service import (
    analyze_pc1, eigenspectrum, execution_bases, null_model_from_rows, spectral_split,
)
from src.tensorcore import ParamView
from src.utils.error_handler import AnalysisPreconditionError
from src.utils.helpers import rng_stream
from src.utils.logger import log_performance, log_run_activity

logger = logging.getLogger(__name__)


def archive_view(archive: ISnapshotStore) -> ParamView:
    """アーカイブの行列順に並んだビュー（保持された δ の座標と一致する）"""
    steps = archive.steps()
    if not steps:
        raise AnalysisPreconditionError("スナップショットがありません")
    first = archive.read(steps[0])
    return ParamView({name: first[name].shape for name in archive.matrix_names()})


def phase_samples(record: RunRecord, deltas: Dict[int, np.ndarray], view: ParamView,
                  names: List[str], snapshots: ISnapshotStore,
                  grad_archive: Optional[ISnapshotStore], k: int = 5) -> List[PhaseSample]:
    """
    保持された δ ごとに、フェーズと3種類の基底を組にした標本を作る

    各保持ステップ t について、行列ブロック δ_W と W(t)、W(t) − W(0)、累積勾配の
    上位 k 特異方向の基底を対応させる。累積勾配アーカイブが無ければ grad_svd は省く。
    """
    phases = assign_phases(record)
    snap_steps = snapshots.steps()
    grad_steps = set(grad_archive.steps()) if grad_archive is not None else set()
    initial = snapshots.read(snap_steps[0])
    samples: List[PhaseSample] = []
    for step in sorted(deltas):
        phase = phase_of(step, phases)
        if phase is None or step not in snap_steps:
            continue
        weights = snapshots.read(step)
        accum = grad_archive.read(step) if step in grad_steps else {}
        for name in names:
            sources = {
                BasisKind.WEIGHT_SVD: {"weight": weights[name]},
                BasisKind.DELTA_W_SVD: {"weight": weights[name], "initial": initial[name]},
            }
            if name in accum:
                sources[BasisKind.GRAD_SVD] = {"grad_accum": accum[name]}
            for kind, matrices in sources.items():
                basis = build_basis(kind, k, **matrices).basis
                if basis.shape[1] == 0:
                    continue
                for delta in np.atleast_2d(deltas[step]):
                    samples.append(PhaseSample(phase=phase, kind=kind,
                                               delta=view.block(delta, name), basis=basis,
                                               matrix=name, step=step))
    return samples


class AnalysisService:
    """保存済みランの軌跡・帰無モデル・可積分性解析"""

    def __init__(self, repository: IRunRepository):
        """初期化

        Args:
            repository: ラン成果物の保存先
        """
        self.repository = repository

    def _load(self, run_id: str):
        flat = self.repository.load_config(run_id)
        record = self.repository.load_record(run_id)
        if flat is None or record is None:
            raise AnalysisPreconditionError(f"ラン {run_id} の記録が見つかりません")
        return ExperimentConfig.from_flat(flat), record

    @log_performance
    def analyze(self, run_id: str, matrices: Optional[List[str]] = None) -> Dict[str, Path]:
        """
        1ランの解析表を書き出す

        pc1_<matrix>.csv, turnover.csv, null_model.csv, spectral_split.csv,
        eigenspectrum.csv, phase_ratios.csv, invariance.csv をランディレクトリに保存する。

        Args:
            run_id: ラン識別子
            matrices: 対象行列（None ならアーカイブの全行列）

        Returns:
            Dict[str, Path]: 表名→保存先

        Raises:
            AnalysisPreconditionError: 記録やスナップショットが足りない
        """
        config, record = self._load(run_id)
        snapshots = self.repository.archive(run_id, "snapshots")
        grad_archive = self.repository.archive(run_id, "grad_accum")
        if not snapshots.steps():
            raise AnalysisPreconditionError(f"[{run_id}] スナップショットが記録されていません")
        names = list(matrices) if matrices else snapshots.matrix_names()
        if not names:
            raise AnalysisPreconditionError(f"[{run_id}] スナップショット対象の行列がありません")
        seed = record.seed
        written: Dict[str, Path] = {}
        save = self.repository.save_table

        turnover_rows = []
        for name, result in analyze_pc1(snapshots, names, record.grok_step,
                                        k=config.basis_k).items():
            written[f"pc1_{name}"] = save(run_id, f"pc1_{name}", result["frame"])
            turnover_rows.append({"matrix": name, **asdict(result["turnover"])})
        written["turnover"] = save(run_id, "turnover", pd.DataFrame(turnover_rows))

        null_rows = []
        for name in names:
            _, rows = snapshots.read_matrix(name)
            result = null_model_from_rows(rows, config.n_null, rng_stream(seed, f"null:{name}"))
            null_rows.append({"matrix": name, "group": matrix_group(name),
                              "observed_pc1": result.observed_pc1, "null_mean": result.null_mean,
                              "null_std": result.null_std, "z_score": result.z_score,
                              "n_null": result.n_null})
        written["null_model"] = save(run_id, "null_model", pd.DataFrame(null_rows))
        written["spectral_split"] = save(run_id, "spectral_split",
                                         spectral_split(snapshots, names))
        written["eigenspectrum"] = save(run_id, "eigenspectrum",
                                        eigenspectrum(snapshots, top=5, matrices=names))

        deltas = self.repository.load_deltas(run_id)
        view = archive_view(snapshots)
        if deltas:
            samples = phase_samples(record, deltas, view, names, snapshots,
                                    grad_archive if grad_archive.steps() else None,
                                    k=config.basis_k)
            written["phase_ratios"] = save(run_id, "phase_ratios",
                                           phase_ratios(samples, config.n_rand, seed))
            bases = execution_bases(snapshots, names, k=config.basis_k)
            rows = invariance_series(deltas, view, bases, config.n_rand, seed)
            written["invariance"] = save(run_id, "invariance", pd.DataFrame(rows))
        else:
            logger.warning(f"[{run_id}] 保持された交換子ベクトルが無いため可積分性解析を省きます")
        log_run_activity(run_id, f"解析 ({len(written)} 表)")
        return written
