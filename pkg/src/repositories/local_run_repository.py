import json
import os
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.interfaces.run_repository import IRunRepository
from src.models.run_record import MetricRecord, RunRecord
from src.repositories.snapshot_archive import SnapshotArchive


class LocalRunRepository(IRunRepository):
    """ローカルファイルシステムでのラン成果物の永続化実装

    <output_dir>/<run_id>/ 以下に
    config.json, metrics.jsonl, run.json, summary.csv, checkpoint.npz / checkpoint.json,
    snapshots/, grad_accum/, deltas/step_XXXXXXXX.npy, 解析結果の CSV を置く。
    """

    def __init__(self, output_dir: str = "runs"):
        """初期化

        Args:
            output_dir: 出力ルートディレクトリ
        """
        self._root = Path(output_dir)
        self._root.mkdir(parents=True, exist_ok=True)

    @property
    def root(self) -> Path:
        return self._root

    def run_dir(self, run_id: str) -> Path:
        path = self._root / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def has_run(self, run_id: str) -> bool:
        return (self._root / run_id).is_dir()

    def archive(self, run_id: str, name: str = "snapshots",
                interval: Optional[int] = None) -> SnapshotArchive:
        """ランのスナップショットアーカイブ"""
        return SnapshotArchive(str(self.run_dir(run_id)), run_id, name, interval)

    @staticmethod
    def _write_json(path: Path, data: Any) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2, default=str)
        os.replace(tmp, path)

    @staticmethod
    def _read_json(path: Path) -> Optional[Any]:
        if not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError):
            return None

    def save_config(self, run_id: str, flat_config: Dict[str, str]) -> None:
        self._write_json(self.run_dir(run_id) / "config.json", flat_config)

    def load_config(self, run_id: str) -> Optional[Dict[str, str]]:
        return self._read_json(self._root / run_id / "config.json")

    def append_metric(self, run_id: str, record: MetricRecord) -> None:
        line = json.dumps(record.to_dict(), ensure_ascii=False)
        with open(self.run_dir(run_id) / "metrics.jsonl", "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def load_metrics(self, run_id: str) -> List[MetricRecord]:
        path = self._root / run_id / "metrics.jsonl"
        if not path.exists():
            return []
        records = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(MetricRecord.from_dict(json.loads(line)))
        return records

    def truncate_metrics(self, run_id: str, through_step: int) -> None:
        path = self._root / run_id / "metrics.jsonl"
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as f:
            kept = [line for line in f if line.strip() and json.loads(line)["step"] <= through_step]
        tmp = path.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            f.writelines(kept)
        os.replace(tmp, path)

    def save_record(self, run_id: str, record: RunRecord) -> None:
        run_dir = self.run_dir(run_id)
        self._write_json(run_dir / "run.json", record.to_dict())
        pd.DataFrame([record.summary_row()]).to_csv(run_dir / "summary.csv", index=False)

    def load_record(self, run_id: str) -> Optional[RunRecord]:
        data = self._read_json(self._root / run_id / "run.json")
        if data is None:
            return None
        return RunRecord.from_dict(data, self.load_metrics(run_id))

    def save_checkpoint(self, run_id: str, arrays: Dict[str, np.ndarray],
                        meta: Dict[str, Any]) -> None:
        run_dir = self.run_dir(run_id)
        tmp = run_dir / "checkpoint.tmp.npz"
        np.savez(tmp, **arrays)
        os.replace(tmp, run_dir / "checkpoint.npz")
        self._write_json(run_dir / "checkpoint.json", meta)

    def load_checkpoint(self, run_id: str) -> Optional[Dict[str, Any]]:
        run_dir = self._root / run_id
        meta = self._read_json(run_dir / "checkpoint.json")
        if meta is None or not (run_dir / "checkpoint.npz").exists():
            return None
        with np.load(run_dir / "checkpoint.npz") as data:
            arrays = {key: data[key] for key in data.files}
        return {"arrays": arrays, "meta": meta}

    def _delta_dir(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "deltas"

    def save_delta(self, run_id: str, step: int, deltas: np.ndarray) -> None:
        path = self._delta_dir(run_id)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / f"step_{step:08d}.npy", np.asarray(deltas, dtype=np.float32))

    def load_deltas(self, run_id: str) -> Dict[int, np.ndarray]:
        path = self._root / run_id / "deltas"
        if not path.exists():
            return {}
        return {int(p.stem.split("_")[1]): np.load(p) for p in sorted(path.glob("step_*.npy"))}

    def truncate_deltas(self, run_id: str, through_step: int) -> None:
        for step in self.load_deltas(run_id):
            if step > through_step:
                (self._delta_dir(run_id) / f"step_{step:08d}.npy").unlink(missing_ok=True)

    def save_table(self, run_id: str, name: str, df: pd.DataFrame) -> Path:
        path = self.run_dir(run_id) / f"{name}.csv"
        df.to_csv(path, index=False)
        return path

    def load_table(self, run_id: str, name: str) -> Optional[pd.DataFrame]:
        path = self._root / run_id / f"{name}.csv"
        return pd.read_csv(path) if path.exists() else None

    def list_runs(self) -> List[str]:
        return sorted(p.name for p in self._root.iterdir()
                      if p.is_dir() and (p / "config.json").exists())

    def clear_run(self, run_id: str) -> None:
        path = self._root / run_id
        if path.exists():
            shutil.rmtree(path)
