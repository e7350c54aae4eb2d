from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from src.tensorcore.tensor import Tensor, default_dtype
from src.utils.error_handler import ShapeMismatchError, UnknownMatrixError


def matrix_role(name: str) -> str:
    """
    パラメータ名から行列の役割を取得

    Args:
        name: 例 "layer1.attn.W_Q"

    Returns:
        str: 例 "W_Q"
    """
    return name.rsplit(".", 1)[-1]


class NamedParams:
    """名前付きパラメータの順序付きコレクション

    名前集合は構築時に固定され、反復順は構築順で安定している。
    """

    def __init__(self, arrays: "Mapping[str, np.ndarray]"):
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.asarray(value)) for name, value in arrays.items()
        )

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise UnknownMatrixError(f"未知のパラメータ名です: {name}")

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> List[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self._arrays.items()}

    @property
    def num_parameters(self) -> int:
        return int(sum(value.size for value in self._arrays.values()))

    def copy(self) -> "NamedParams":
        return NamedParams({name: value.copy() for name, value in self._arrays.items()})

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "NamedParams":
        """各パラメータに関数を適用した新しいコレクションを返す"""
        return NamedParams({name: fn(name, value) for name, value in self._arrays.items()})

    def astype(self, dtype) -> "NamedParams":
        return self.map(lambda _, value: value.astype(dtype))

    def to_leaves(self) -> Dict[str, Tensor]:
        """勾配を追跡する葉テンソルに変換（現在の計算精度で）"""
        dtype = default_dtype()
        return {name: Tensor(value.astype(dtype, copy=True), requires_grad=True)
                for name, value in self._arrays.items()}

    def to_constants(self) -> Dict[str, Tensor]:
        """勾配を追跡しない定数テンソルに変換（評価・推論用）"""
        dtype = default_dtype()
        return {name: Tensor(value.astype(dtype, copy=False))
                for name, value in self._arrays.items()}

    def bit_equal(self, other: "NamedParams") -> bool:
        """全パラメータがビット単位で一致するか"""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays.values(), other._arrays.values())
        )


class ParamView:
    """全パラメータを1本の座標ベクトルとして扱うための安定したインデックス表"""

    def __init__(self, shapes: "Mapping[str, Tuple[int, ...]]"):
        self._shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict(
            (name, tuple(shape)) for name, shape in shapes.items()
        )
        self._slices: Dict[str, slice] = {}
        offset = 0
        for name, shape in self._shapes.items():
            size = int(np.prod(shape)) if shape else 1
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self._size = offset

    @classmethod
    def of(cls, params: NamedParams) -> "ParamView":
        return cls(params.shapes())

    @property
    def size(self) -> int:
        """総座標数 P"""
        return self._size

    @property
    def names(self) -> List[str]:
        return list(self._shapes)

    def shape_of(self, name: str) -> Tuple[int, ...]:
        if name not in self._shapes:
            raise UnknownMatrixError(f"未知のパラメータ名です: {name}")
        return self._shapes[name]

    def slice_of(self, name: str) -> slice:
        if name not in self._slices:
            raise UnknownMatrixError(f"未知のパラメータ名です: {name}")
        return self._slices[name]

    def flatten(self, arrays: "Mapping[str, np.ndarray]", dtype=np.float64) -> np.ndarray:
        """
        名前付き配列を座標ベクトルに平坦化

        Args:
            arrays: NamedParams または勾配辞書
            dtype: 出力ベクトルの型

        Returns:
            np.ndarray: 長さ P のベクトル
        """
        out = np.empty(self._size, dtype=dtype)
        for name, shape in self._shapes.items():
            value = np.asarray(arrays[name])
            if value.shape != shape:
                raise ShapeMismatchError("flatten", shape, value.shape)
            out[self._slices[name]] = value.reshape(-1)
        return out

    def unflatten(self, vector: np.ndarray, dtype=np.float32) -> NamedParams:
        """座標ベクトルを名前付きパラメータに戻す"""
        if vector.shape != (self._size,):
            raise ShapeMismatchError("unflatten", (self._size,), vector.shape)
        return NamedParams({
            name: vector[self._slices[name]].reshape(shape).astype(dtype)
            for name, shape in self._shapes.items()
        })

    def block(self, vector: np.ndarray, name: str) -> np.ndarray:
        """ベクトルのうち指定行列の座標だけを取り出す（平坦なまま）"""
        return vector[self.slice_of(name)]

    def embed(self, name: str, basis: np.ndarray) -> np.ndarray:
        """
        行列内の基底を全座標空間に埋め込む

        Args:
            name: 行列名
            basis: (行列要素数, K)

        Returns:
            np.ndarray: (P, K)
        """
        sl = self.slice_of(name)
        if basis.ndim != 2 or basis.shape[0] != sl.stop - sl.start:
            raise ShapeMismatchError("embed", (sl.stop - sl.start,), basis.shape)
        out = np.zeros((self._size, basis.shape[1]), dtype=basis.dtype)
        out[sl] = basis
        return out

    def subset(self, names: Optional[List[str]]) -> "ParamView":
        """指定行列だけからなる部分ビュー"""
        if names is None:
            return self
        return ParamView({name: self.shape_of(name) for name in names})
