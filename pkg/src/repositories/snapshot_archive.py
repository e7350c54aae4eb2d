import json
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.interfaces.snapshot_store import ISnapshotStore
from src.utils.error_handler import SnapshotStorageError, UnknownMatrixError

# ディスク上の配列型（32bit リトルエンディアン）
DISK_DTYPE = np.dtype("<f4")


class SnapshotArchive(ISnapshotStore):
    """マニフェスト + ステップごとのバイナリファイルによるスナップショット保存

    <root>/<name>/manifest.json に行列表（名前・形状・オフセット）と記録済み
    ステップを、<root>/<name>/step_XXXXXXXX.bin にマニフェスト順で連結した
    平坦な配列を保存する。
    """

    def __init__(self, root: str, run_id: str, name: str = "snapshots",
                 interval: Optional[int] = None):
        """初期化

        Args:
            root: ランディレクトリ
            run_id: ラン識別子（エラー表示用）
            name: アーカイブ名（"snapshots" や "grad_accum"）
            interval: 記録間隔（マニフェストに記録）
        """
        self._dir = Path(root) / name
        self._run_id = run_id
        self._interval = interval
        self._manifest: Optional[Dict] = None
        manifest_path = self._dir / "manifest.json"
        if manifest_path.exists():
            with open(manifest_path, "r", encoding="utf-8") as f:
                self._manifest = json.load(f)

    @property
    def path(self) -> Path:
        return self._dir

    @property
    def run_id(self) -> str:
        return self._run_id

    @property
    def interval(self) -> Optional[int]:
        if self._manifest is not None:
            return self._manifest.get("interval")
        return self._interval

    def exists(self) -> bool:
        return self._manifest is not None

    def _step_path(self, step: int) -> Path:
        return self._dir / f"step_{step:08d}.bin"

    def _write_manifest(self, step: int) -> None:
        tmp = self._dir / "manifest.json.tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(self._manifest, f, ensure_ascii=False, indent=2)
            os.replace(tmp, self._dir / "manifest.json")
        except OSError as e:
            raise SnapshotStorageError(self._run_id, step, str(e))

    def _create_manifest(self, arrays: Mapping[str, np.ndarray]) -> None:
        matrices = []
        offset = 0
        for name, value in arrays.items():
            size = int(np.asarray(value).size)
            matrices.append({"name": name, "shape": list(np.shape(value)),
                             "offset": offset, "size": size})
            offset += size
        self._manifest = {
            "run_id": self._run_id,
            "interval": self._interval,
            "dtype": DISK_DTYPE.str,
            "matrices": matrices,
            "steps": [],
        }

    def _matrix_entry(self, name: str) -> Dict:
        for entry in self._require_manifest()["matrices"]:
            if entry["name"] == name:
                return entry
        raise UnknownMatrixError(f"[{self._run_id}] マニフェストに存在しない行列です: {name}")

    def _require_manifest(self) -> Dict:
        if self._manifest is None:
            raise SnapshotStorageError(self._run_id, -1, "アーカイブが存在しません")
        return self._manifest

    def record(self, step: int, arrays: Mapping[str, np.ndarray]) -> None:
        """
        スナップショットを追記

        Raises:
            SnapshotStorageError: ステップが増加していない、行列が欠けている、書き込み失敗
        """
        try:
            self._dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise SnapshotStorageError(self._run_id, step, str(e))
        if self._manifest is None:
            self._create_manifest(arrays)
        manifest = self._manifest
        if manifest["steps"] and step <= manifest["steps"][-1]:
            raise SnapshotStorageError(
                self._run_id, step, f"ステップは直前の記録 {manifest['steps'][-1]} より大きい必要があります"
            )

        chunks = []
        for entry in manifest["matrices"]:
            if entry["name"] not in arrays:
                raise SnapshotStorageError(self._run_id, step, f"行列 {entry['name']} がありません")
            value = np.asarray(arrays[entry["name"]])
            if list(value.shape) != entry["shape"]:
                raise SnapshotStorageError(
                    self._run_id, step, f"{entry['name']} の形状 {value.shape} がマニフェストと異なります"
                )
            chunks.append(value.astype(DISK_DTYPE).reshape(-1))

        try:
            np.concatenate(chunks).tofile(self._step_path(step))
        except OSError as e:
            raise SnapshotStorageError(self._run_id, step, str(e))
        manifest["steps"].append(int(step))
        self._write_manifest(step)

    def _read_flat(self, step: int) -> np.ndarray:
        if step not in self._require_manifest()["steps"]:
            raise SnapshotStorageError(self._run_id, step, "記録されていないステップです")
        try:
            return np.fromfile(self._step_path(step), dtype=DISK_DTYPE)
        except OSError as e:
            raise SnapshotStorageError(self._run_id, step, str(e))

    def read(self, step: int) -> Dict[str, np.ndarray]:
        flat = self._read_flat(step)
        out = {}
        for entry in self._require_manifest()["matrices"]:
            chunk = flat[entry["offset"]:entry["offset"] + entry["size"]]
            out[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float32)
        return out

    def read_matrix(self, name: str, through_step: Optional[int] = None
                    ) -> Tuple[List[int], np.ndarray]:
        entry = self._matrix_entry(name)
        steps = [s for s in self.steps() if through_step is None or s <= through_step]
        rows = np.empty((len(steps), entry["size"]), dtype=np.float32)
        for i, step in enumerate(steps):
            flat = self._read_flat(step)
            rows[i] = flat[entry["offset"]:entry["offset"] + entry["size"]]
        return steps, rows

    def steps(self) -> List[int]:
        if self._manifest is None:
            return []
        return list(self._manifest["steps"])

    def matrix_names(self) -> List[str]:
        return [entry["name"] for entry in self._require_manifest()["matrices"]]

    def matrix_shape(self, name: str) -> Tuple[int, ...]:
        return tuple(self._matrix_entry(name)["shape"])

    def nearest_step(self, step: int) -> Optional[int]:
        """指定ステップ以下で最も新しい記録ステップ"""
        candidates = [s for s in self.steps() if s <= step]
        return candidates[-1] if candidates else None

    def truncate_after(self, step: int) -> None:
        """指定ステップより後の記録を削除（再開用）"""
        if self._manifest is None:
            return
        keep: Sequence[int] = [s for s in self._manifest["steps"] if s <= step]
        for s in self._manifest["steps"]:
            if s > step:
                self._step_path(s).unlink(missing_ok=True)
        self._manifest["steps"] = list(keep)
        self._write_manifest(step)
