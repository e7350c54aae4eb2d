import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.interfaces.run_repository import IRunRepository
from src.interfaces.snapshot_store import ISnapshotStore
from src.interfaces.task_model import ITaskModel, TaskDataset
from src.models.experiment_config import Condition, ExperimentConfig
from src.models.run_record import MetricRecord, RunRecord, RunStatus
from src.networks.factory import create_network, default_snapshot_matrices, model_config_for
from src.networks.layers import matrix_group
from src.optim import OptState, adamw_step, clip_global
from src.services.dataset_service import batch_for_step, prepare_task
from src.services.detection_service import DetectorConfig, detect_grok, summarize_run
from src.services.intervention_service import InterventionHooks, apply_kick, apply_noise
from src.services.probe_service import DefectProbeConfig, ProbeService
from src.services.trajectory_service import execution_basis, record_snapshot
from src.tensorcore import NamedParams, ParamView
from src.utils.error_handler import (
    AnalysisPreconditionError, ConfigValidationError, NonFiniteError,
)
from src.utils.helpers import rng_stream
from src.utils.logger import log_performance, log_run_activity, run_log

logger = logging.getLogger(__name__)

RUN_LOG_NAME = "train.log"

RNG_STREAMS = {
    "init": "init",
    "data": "data:<epoch>",
    "probe": "probe:<step>",
    "noise": "noise:<step>",
    "kick": "kick:<step>",
}


def detector_config(config: ExperimentConfig) -> DetectorConfig:
    return DetectorConfig(threshold=config.grok_threshold, n_sustained=config.n_sustained,
                          onset_multiplier=config.onset_multiplier,
                          onset_floor=config.onset_floor,
                          baseline_window=config.baseline_window)


def probe_config(config: ExperimentConfig) -> DefectProbeConfig:
    return DefectProbeConfig(eta=config.probe_eta, k_meas=config.probe_k,
                             batch_size=config.resolved_probe_batch_size,
                             interval=config.resolved_probe_interval)


def dataset_loss(model: ITaskModel, params: NamedParams, dataset: TaskDataset) -> float:
    """データセット全体の損失（チャンクの例数で重み付けした平均）"""
    chunk = getattr(model, "eval_chunk", 512)
    total, count = 0.0, 0
    for start in range(0, len(dataset), chunk):
        indices = np.arange(start, min(start + chunk, len(dataset)))
        total += model.loss(params, dataset.batch(indices)) * len(indices)
        count += len(indices)
    return total / count


def load_execution_bases(repository: IRunRepository, run_id: str, k: int
                         ) -> Dict[str, np.ndarray]:
    """
    ベースラインランの注意行列ごとの実行多様体基底

    Raises:
        AnalysisPreconditionError: ベースラインのスナップショットが無い
    """
    archive = repository.archive(run_id)
    if not archive.steps():
        raise AnalysisPreconditionError(f"[{run_id}] ベースラインのスナップショットがありません")
    names = [n for n in archive.matrix_names() if matrix_group(n) == "attention"]
    if not names:
        raise AnalysisPreconditionError(f"[{run_id}] 注意行列のスナップショットがありません")
    return {name: execution_basis(archive, name, k) for name in names}


@dataclass
class TrainState:
    """学習ループの可変状態"""
    params: NamedParams
    opt: OptState
    grad_accum: Dict[str, np.ndarray]
    step: int = 0
    kick_applied: bool = False
    grok_step: Optional[int] = None
    metrics: List[MetricRecord] = field(default_factory=list)


@dataclass
class RunContext:
    """1ランの間変わらない協調オブジェクト"""
    config: ExperimentConfig
    seed: int
    run_id: str
    config_hash: str
    model: ITaskModel
    view: ParamView
    snapshot_view: ParamView
    prober: ProbeService
    hooks: InterventionHooks
    train: TaskDataset
    eval_test: TaskDataset
    detector: DetectorConfig
    snapshots: Optional[ISnapshotStore] = None
    grad_archive: Optional[ISnapshotStore] = None


class TrainingService:
    """1ランの学習ループ（評価・プローブ・スナップショット・チェックポイント）"""

    def __init__(self, repository: IRunRepository):
        """初期化

        Args:
            repository: ラン成果物の保存先
        """
        self.repository = repository

    def _resolve_trigger(self, config: ExperimentConfig) -> ExperimentConfig:
        """キックの発火ステップ（未指定ならベースラインランのオンセット）"""
        spec = config.intervention
        if spec.condition != Condition.KICK_1A or not spec.is_active or spec.trigger_step is not None:
            return config
        if not spec.basis_run:
            raise ConfigValidationError("kick_1a には trigger_step か basis_run の指定が必要です")
        baseline = self.repository.load_record(spec.basis_run)
        if baseline is None or baseline.onset_step is None:
            raise AnalysisPreconditionError(
                f"ベースライン {spec.basis_run} にオンセットが記録されていません"
            )
        logger.info(f"キック発火ステップをベースラインのオンセット {baseline.onset_step} にします")
        return config.replace(trigger_step=baseline.onset_step)

    def _hooks(self, config: ExperimentConfig) -> InterventionHooks:
        spec = config.intervention
        bases = None
        if spec.condition.needs_basis and spec.is_active:
            bases = load_execution_bases(self.repository, spec.basis_run, spec.basis_rank)
        return InterventionHooks(spec, bases)

    @staticmethod
    def _fresh_state(config: ExperimentConfig, params: NamedParams,
                     snapshot_names: List[str]) -> TrainState:
        opt = OptState.create(params, lr=config.lr, weight_decay=config.weight_decay,
                              beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                              clip_norm=config.clip_norm)
        accum = {name: np.zeros(params[name].shape, dtype=np.float64) for name in snapshot_names}
        return TrainState(params=params, opt=opt, grad_accum=accum)

    def _checkpoint(self, ctx: RunContext, state: TrainState) -> None:
        arrays: Dict[str, np.ndarray] = {}
        for name, value in state.params.items():
            arrays[f"param/{name}"] = value
            arrays[f"m/{name}"] = state.opt.m[name]
            arrays[f"v/{name}"] = state.opt.v[name]
        for name, value in state.grad_accum.items():
            arrays[f"accum/{name}"] = value
        meta = {"step": state.step, "opt_step": state.opt.step,
                "config_hash": ctx.config_hash, "kick_applied": state.kick_applied}
        self.repository.save_checkpoint(ctx.run_id, arrays, meta)
        log_run_activity(ctx.run_id, "チェックポイント保存", step=state.step)

    def _restore(self, run_id: str, config_hash: str, fresh: TrainState) -> Optional[TrainState]:
        """
        チェックポイントから状態を復元し、それより後の記録を切り詰める

        Returns:
            Optional[TrainState]: 復元した状態（無いかハッシュ不一致なら None）
        """
        checkpoint = self.repository.load_checkpoint(run_id)
        if checkpoint is None:
            return None
        meta, arrays = checkpoint["meta"], checkpoint["arrays"]
        if meta.get("config_hash") != config_hash:
            logger.warning(f"[{run_id}] 設定ハッシュが一致しないため最初から学習します")
            return None

        def pick(prefix: str, names) -> Dict[str, np.ndarray]:
            return {name: arrays[f"{prefix}/{name}"] for name in names}

        names = fresh.params.names()
        opt = OptState(m=pick("m", names), v=pick("v", names), step=int(meta["opt_step"]),
                       lr=fresh.opt.lr, beta1=fresh.opt.beta1, beta2=fresh.opt.beta2,
                       weight_decay=fresh.opt.weight_decay, eps=fresh.opt.eps,
                       clip_norm=fresh.opt.clip_norm)
        step = int(meta["step"])
        self.repository.truncate_metrics(run_id, step)
        self.repository.truncate_deltas(run_id, step)
        return TrainState(params=NamedParams(pick("param", names)), opt=opt,
                          grad_accum=pick("accum", fresh.grad_accum), step=step,
                          kick_applied=bool(meta.get("kick_applied", False)),
                          metrics=self.repository.load_metrics(run_id))

    def _scheduled(self, ctx: RunContext, state: TrainState) -> None:
        """ステップ t（t 回更新後）の評価・プローブ・スナップショット・キック・チェックポイント"""
        config, step = ctx.config, state.step
        if step % config.eval_interval == 0:
            measurement = None
            if step % config.resolved_probe_interval == 0:
                retain = config.delta_retain_count if step % config.snapshot_interval == 0 else 0
                measurement = ctx.prober.probe(state.params, ctx.train,
                                               rng_stream(ctx.seed, f"probe:{step}"), step,
                                               retain=retain)
                if measurement.deltas:
                    kept = [ctx.snapshot_view.flatten(ctx.view.unflatten(d, dtype=np.float64))
                            for d in measurement.deltas]
                    self.repository.save_delta(ctx.run_id, step, np.stack(kept))
            metric = MetricRecord(
                step=step,
                train_acc=ctx.model.evaluate_accuracy(state.params, ctx.train),
                test_acc=ctx.model.evaluate_accuracy(state.params, ctx.eval_test),
                train_loss=dataset_loss(ctx.model, state.params, ctx.train),
                defect_median=None if measurement is None else measurement.median,
                defect_q25=None if measurement is None else measurement.q25,
                defect_q75=None if measurement is None else measurement.q75,
            )
            state.metrics.append(metric)
            self.repository.append_metric(ctx.run_id, metric)
            logger.debug(f"[{ctx.run_id}] step {step}: train={metric.train_acc:.3f} "
                         f"test={metric.test_acc:.3f} loss={metric.train_loss:.4f} "
                         f"D={metric.defect_median}")
            if state.grok_step is None:
                state.grok_step = detect_grok([m.step for m in state.metrics],
                                              [m.test_acc for m in state.metrics], ctx.detector)
                if state.grok_step is not None:
                    log_run_activity(ctx.run_id, "グロッキング検出", step=state.grok_step)

        if step % config.snapshot_interval == 0:
            record_snapshot(state.params, step, ctx.snapshots, ctx.snapshot_view.names)
            ctx.grad_archive.record(step, state.grad_accum)

        if ctx.hooks.wants_kick(step):
            measurement = ctx.prober.probe(state.params, ctx.train,
                                           rng_stream(ctx.seed, f"kick:{step}"), step,
                                           retain=config.probe_k)
            theta, applied = apply_kick(ctx.view.flatten(state.params), measurement.deltas,
                                        ctx.hooks.spec.effective_strength)
            if applied:
                state.params = ctx.view.unflatten(theta)
                log_run_activity(ctx.run_id, "キック適用", step=step)
            ctx.hooks.kick_applied = state.kick_applied = True

        if step > 0 and step % config.checkpoint_interval == 0:
            self._checkpoint(ctx, state)

    def _update(self, ctx: RunContext, state: TrainState) -> None:
        """t 番目の更新: 勾配 → 累積勾配 → 介入フック → クリップ → AdamW → 雑音"""
        config, step = ctx.config, state.step
        batch = batch_for_step(ctx.train, config.resolved_batch_size, ctx.seed, step)
        loss, grads = ctx.model.loss_and_grads(state.params, batch)
        if not np.isfinite(loss):
            raise NonFiniteError("損失", step=step, last_good_step=step - 1)
        decay = config.grad_accum_decay
        for name in state.grad_accum:
            if decay < 1.0:
                state.grad_accum[name] *= decay
            state.grad_accum[name] += grads[name]

        hooked = ctx.hooks.gradient_hook(grads)
        clipped, _ = clip_global(hooked, config.clip_norm, step=step)
        state.params, state.opt = adamw_step(state.params, clipped, state.opt)

        spec = ctx.hooks.spec
        if ctx.hooks.wants_noise() and (step + 1) % spec.period == 0:
            theta, raw = apply_noise(ctx.view.flatten(state.params), ctx.view.flatten(grads),
                                     step, spec.period, config.lr, spec.effective_strength,
                                     rng_stream(ctx.seed, f"noise:{step}"))
            state.params = ctx.view.unflatten(theta)
        state.step = step + 1

    def _context(self, config: ExperimentConfig, seed: int) -> Tuple[RunContext, TrainState]:
        train, test = prepare_task(config)
        model_config = model_config_for(config, train, test)
        model = create_network(model_config)
        params = model.init_params(seed)
        view = ParamView.of(params)
        snapshot_names = list(config.snapshot_matrices) or default_snapshot_matrices(model_config)
        run_id = config.run_id(seed)
        ctx = RunContext(
            config=config, seed=seed, run_id=run_id, config_hash=config.config_hash(seed),
            model=model, view=view, snapshot_view=view.subset(snapshot_names),
            prober=ProbeService(model, view, probe_config(config)), hooks=self._hooks(config),
            train=train,
            eval_test=test.head(config.test_eval_limit) if config.test_eval_limit else test,
            detector=detector_config(config),
        )
        return ctx, self._fresh_state(config, params, snapshot_names)

    @log_performance
    def train_run(self, config: ExperimentConfig, seed: int) -> RunRecord:
        """
        1ランを学習して記録を返す

        各ステップ t では、まず t 回更新後の状態に対して評価・プローブ・
        スナップショット・キック・チェックポイントを行い、その後 t 番目の
        更新を行う。チェックポイントのステップ c から再開すると c 番目の更新から
        続けるため、中断なしの場合と同じメトリクス列になる。
        完了済みで設定ハッシュが一致するランは学習せず保存済みの記録を返す。

        Args:
            config: 実験設定
            seed: マスターシード

        Returns:
            RunRecord: 検出結果付きの記録

        Raises:
            NonFiniteError: 損失または勾配が非有限（最後の健全なステップを記録して中断）
        """
        config.validate()
        config = self._resolve_trigger(config)
        run_id = config.run_id(seed)
        config_hash = config.config_hash(seed)
        repo = self.repository

        existing = repo.load_record(run_id) if config.resume else None
        if existing is not None and existing.config_hash == config_hash and \
                existing.status in (RunStatus.COMPLETED, RunStatus.EARLY_STOPPED):
            log_run_activity(run_id, "完了済みのためスキップ", step=existing.final_step)
            return existing

        ctx, fresh = self._context(config, seed)
        state = self._restore(run_id, config_hash, fresh) if config.resume else None
        resume_step = None if state is None else state.step
        if state is None:
            repo.clear_run(run_id)
            state = fresh
        repo.save_config(run_id, config.to_flat())
        ctx.snapshots = repo.archive(run_id, "snapshots", config.snapshot_interval)
        ctx.grad_archive = repo.archive(run_id, "grad_accum", config.snapshot_interval)
        if resume_step is not None:
            ctx.snapshots.truncate_after(resume_step)
            ctx.grad_archive.truncate_after(resume_step)
            state.grok_step = detect_grok([m.step for m in state.metrics],
                                          [m.test_acc for m in state.metrics], ctx.detector)
        ctx.hooks.kick_applied = state.kick_applied

        record = RunRecord(run_id=run_id, config_hash=config_hash, seed=seed, lr=config.lr,
                           rng_provenance={k: f"rng_stream({seed}, '{v}')"
                                           for k, v in RNG_STREAMS.items()})
        with run_log(repo.run_dir(run_id) / RUN_LOG_NAME):
            log_run_activity(run_id, "学習開始" if resume_step is None else "チェックポイントから再開",
                             step=resume_step)
            started = time.time()
            status = self._loop(ctx, state, record, resume_step, started)
            return self._finish(ctx, state, record, status, started)

    def _loop(self, ctx: RunContext, state: TrainState, record: RunRecord,
              resume_step: Optional[int], started: float) -> RunStatus:
        """最大ステップか早期終了まで評価と更新を繰り返す"""
        config, run_id = ctx.config, ctx.run_id
        max_steps = config.resolved_max_steps
        try:
            while True:
                if state.step != resume_step:
                    self._scheduled(ctx, state)
                if state.step >= max_steps:
                    return RunStatus.COMPLETED
                if config.early_stop and state.grok_step is not None and \
                        state.step >= state.grok_step + config.early_stop_margin:
                    log_run_activity(run_id, "早期終了", step=state.step)
                    return RunStatus.EARLY_STOPPED
                self._update(ctx, state)
        except NonFiniteError as e:
            record.status = RunStatus.FAILED
            record.final_step = state.step
            record.last_good_step = e.last_good_step
            record.error = str(e)
            record.metrics = state.metrics
            record.wall_clock = time.time() - started
            self.repository.save_record(run_id, record)
            log_run_activity(run_id, "学習", step=state.step, success=False, error=str(e))
            raise

    def _finish(self, ctx: RunContext, state: TrainState, record: RunRecord,
                status: RunStatus, started: float) -> RunRecord:
        """最終チェックポイントと検出結果・フラグ付きの記録を保存"""
        self._checkpoint(ctx, state)
        record.metrics = state.metrics
        record.status = status
        record.final_step = state.step
        record.last_good_step = state.step
        record.wall_clock = time.time() - started
        summarize_run(record, ctx.detector)
        if record.grok_step is None:
            record.flags.append("no_grok")
        if record.onset_step is None:
            record.flags.append("no_onset")
        if record.lead is not None and not record.lead.valid:
            record.flags.append("invalid_lead")
        spec = ctx.hooks.spec
        if spec.condition == Condition.KICK_1A and spec.is_active and not ctx.hooks.kick_applied:
            record.flags.append("kick_not_reached")
        self.repository.save_record(ctx.run_id, record)
        log_run_activity(ctx.run_id, f"学習終了 ({status.value}, grok={record.grok_step}, "
                                     f"onset={record.onset_step})", step=state.step)
        return record
