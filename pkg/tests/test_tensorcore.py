import unittest

import numpy as np
import pytest

from src.models.task_data import DyckDataset, dyck_depths
from src.networks.factory import create_network, dyck_model_config
from src.tensorcore import ComputationTape, ParamView, Tensor, backward, ops, recording
from src.tensorcore import default_dtype, shadow_precision
from src.tensorcore.gradcheck import check_primitive, numerical_grad, relative_error
from src.utils.error_handler import NonScalarLossError, ShapeMismatchError

TOLERANCE = 1e-3


class TestPrimitiveGradients(unittest.TestCase):
    """各プリミティブの勾配チェックのテスト"""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def normal(self, *shape):
        return self.rng.standard_normal(shape)

    def test_matmul(self):
        """バッチ付き行列積"""
        error = check_primitive(lambda t: ops.matmul(t[0], t[1]),
                                [self.normal(2, 3, 4), self.normal(4, 5)])
        self.assertLess(error, TOLERANCE)

    def test_add_sub_mul_with_broadcast(self):
        """ブロードキャストを伴う加減乗算"""
        a, b = self.normal(3, 4), self.normal(4)
        self.assertLess(check_primitive(lambda t: ops.add(t[0], t[1]), [a, b]), TOLERANCE)
        self.assertLess(check_primitive(lambda t: ops.sub(t[0], t[1]), [a, b]), TOLERANCE)
        self.assertLess(check_primitive(lambda t: ops.mul(t[0], t[1]), [a, b]), TOLERANCE)

    def test_scale_and_gelu(self):
        """スカラー倍と GELU"""
        x = self.normal(4, 5)
        self.assertLess(check_primitive(lambda t: ops.scale(t[0], 0.37), [x]), TOLERANCE)
        self.assertLess(check_primitive(lambda t: ops.gelu(t[0]), [x]), TOLERANCE)

    def test_softmax_with_mask(self):
        """マスク付きソフトマックス"""
        mask = np.tril(np.ones((4, 4), dtype=bool))
        error = check_primitive(lambda t: ops.softmax(t[0], mask), [self.normal(2, 4, 4)])
        self.assertLess(error, TOLERANCE)

    def test_layer_norm(self):
        """レイヤー正規化（入力・ゲイン・バイアス）"""
        error = check_primitive(lambda t: ops.layer_norm(t[0], t[1], t[2]),
                                [self.normal(3, 6), 1.0 + 0.1 * self.normal(6), self.normal(6)])
        self.assertLess(error, TOLERANCE)

    def test_embedding_with_repeated_ids(self):
        """重複インデックスの勾配が加算される"""
        ids = np.array([[0, 2, 2], [1, 0, 2]])
        error = check_primitive(lambda t: ops.embedding(t[0], ids), [self.normal(4, 3)])
        self.assertLess(error, TOLERANCE)

    def test_cross_entropy_with_ignore_index(self):
        """無視インデックス付きクロスエントロピー"""
        targets = np.array([[1, 0, -100], [2, -100, 1]])
        error = check_primitive(lambda t: ops.cross_entropy(t[0], targets),
                                [self.normal(2, 3, 4)])
        self.assertLess(error, TOLERANCE)

    def test_reshape_and_transpose(self):
        """形状変更と軸の入れ替え"""
        x = self.normal(2, 3, 4)
        self.assertLess(check_primitive(lambda t: ops.reshape(t[0], (6, 4)), [x]), TOLERANCE)
        self.assertLess(check_primitive(lambda t: ops.transpose(t[0], (0, 2, 1)), [x]),
                        TOLERANCE)


N_RANDOM_CASES = 100


class TestRandomizedGradients(unittest.TestCase):
    """ランダムな形状と値での勾配チェック（プリミティブごとに100例、64bit）"""

    def check_cases(self, make_case):
        for case in range(N_RANDOM_CASES):
            rng = np.random.default_rng(1000 + case)
            build, inputs = make_case(rng)
            with self.subTest(case=case, shapes=[np.shape(x) for x in inputs]):
                self.assertLess(check_primitive(build, inputs, h=1e-5, seed=case), TOLERANCE)

    @staticmethod
    def dims(rng, n, low=1, high=5):
        return tuple(int(d) for d in rng.integers(low, high + 1, size=n))

    def test_matmul(self):
        def case(rng):
            b, m, k, n = self.dims(rng, 4)
            batched = rng.random() < 0.5
            a = rng.standard_normal((b, m, k) if batched else (m, k))
            return (lambda t: ops.matmul(t[0], t[1])), [a, rng.standard_normal((k, n))]
        self.check_cases(case)

    def test_elementwise_with_broadcast(self):
        binary = [ops.add, ops.sub, ops.mul]

        def case(rng):
            rows, cols = self.dims(rng, 2)
            op = binary[int(rng.integers(len(binary)))]
            other = (cols,) if rng.random() < 0.5 else (rows, cols)
            return (lambda t: op(t[0], t[1])), [rng.standard_normal((rows, cols)),
                                               rng.standard_normal(other)]
        self.check_cases(case)

    def test_scale(self):
        def case(rng):
            factor = float(rng.uniform(-3.0, 3.0))
            return (lambda t: ops.scale(t[0], factor)), [rng.standard_normal(self.dims(rng, 2))]
        self.check_cases(case)

    def test_gelu(self):
        def case(rng):
            return (lambda t: ops.gelu(t[0])), [2.0 * rng.standard_normal(self.dims(rng, 2))]
        self.check_cases(case)

    def test_softmax_with_mask(self):
        def case(rng):
            b, n = self.dims(rng, 2, high=4)
            mask = (rng.random((n, n)) < 0.6) | np.eye(n, dtype=bool)
            return (lambda t: ops.softmax(t[0], mask)), [rng.standard_normal((b, n, n))]
        self.check_cases(case)

    def test_layer_norm(self):
        def case(rng):
            rows, width = self.dims(rng, 2, low=3, high=7)
            return (lambda t: ops.layer_norm(t[0], t[1], t[2])), [
                rng.standard_normal((rows, width)),
                1.0 + 0.1 * rng.standard_normal(width), rng.standard_normal(width)]
        self.check_cases(case)

    def test_embedding(self):
        def case(rng):
            vocab, d, b, n = self.dims(rng, 4)
            ids = rng.integers(0, vocab, size=(b, n))
            return (lambda t: ops.embedding(t[0], ids)), [rng.standard_normal((vocab, d))]
        self.check_cases(case)

    def test_cross_entropy(self):
        def case(rng):
            b, n = self.dims(rng, 2)
            classes = int(rng.integers(2, 6))
            targets = rng.integers(0, classes, size=(b, n))
            targets[rng.random((b, n)) < 0.25] = -100
            return (lambda t: ops.cross_entropy(t[0], targets)), [
                rng.standard_normal((b, n, classes))]
        self.check_cases(case)

    def test_reshape_and_transpose(self):
        def case(rng):
            shape = self.dims(rng, 3)
            if rng.random() < 0.5:
                return (lambda t: ops.reshape(t[0], (shape[0] * shape[1], shape[2]))), [
                    rng.standard_normal(shape)]
            axes = tuple(int(a) for a in rng.permutation(3))
            return (lambda t: ops.transpose(t[0], axes)), [rng.standard_normal(shape)]
        self.check_cases(case)


class TestTapeSemantics(unittest.TestCase):
    """テープと逆伝播の振る舞いのテスト"""

    def test_non_scalar_loss_rejected(self):
        """スカラーでない損失の逆伝播はエラー"""
        tape = ComputationTape()
        with recording(tape):
            x = Tensor(np.ones((2, 2)), requires_grad=True)
            y = ops.scale(x, 2.0)
        with self.assertRaises(NonScalarLossError):
            backward(tape, y)

    def test_shape_mismatch(self):
        """形状の合わない行列積と加算"""
        a = Tensor(np.ones((2, 3)))
        with self.assertRaises(ShapeMismatchError):
            ops.matmul(a, Tensor(np.ones((4, 2))))
        with self.assertRaises(ShapeMismatchError):
            ops.add(a, Tensor(np.ones((4,))))

    def test_gradients_accumulate_over_reuse(self):
        """同じテンソルを2回使うと勾配が合算される"""
        tape = ComputationTape()
        with recording(tape):
            x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
            loss = ops.total(ops.mul(x, x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-6)

    def test_all_ignored_cross_entropy(self):
        """有効位置が無ければ損失と勾配はゼロ"""
        tape = ComputationTape()
        with recording(tape):
            logits = Tensor(np.ones((1, 3, 4)), requires_grad=True)
            loss = ops.cross_entropy(logits, np.full((1, 3), -100))
        backward(tape, loss)
        self.assertEqual(loss.item(), 0.0)
        self.assertFalse(np.any(logits.grad))

    def test_shadow_precision_switches_dtype(self):
        """シャドウモード中のみ64bit"""
        self.assertEqual(default_dtype(), np.float32)
        with shadow_precision(np.float64):
            self.assertEqual(Tensor([1.0]).values.dtype, np.float64)
        self.assertEqual(Tensor([1.0]).values.dtype, np.float32)

    def test_relative_error(self):
        """相対誤差の定義"""
        self.assertEqual(relative_error(np.ones(3), np.ones(3)), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([-1.0])), 1.0)
        grad = numerical_grad(lambda v: float(np.sum(v ** 2)), np.array([1.0, -2.0]))
        np.testing.assert_allclose(grad, [2.0, -4.0], rtol=1e-6)


class TestModelGradient(unittest.TestCase):
    """小さなモデル全体の勾配チェックのテスト"""

    def test_causal_transformer_gradient(self):
        """解析勾配と中心差分が一致する"""
        config = dyck_model_config(d_model=8, n_layers=1, n_heads=2, d_ff=16, n_classes=4,
                                   max_len=6)
        model = create_network(config)
        sequences = ["(())()", "()(())"]
        batch = DyckDataset(sequences, [dyck_depths(s) for s in sequences], 4).batch([0, 1])

        with shadow_precision(np.float64):
            params = model.init_params(3).astype(np.float64)
            view = ParamView.of(params)
            _, grads = model.loss_and_grads(params, batch)
            flat = view.flatten(params)
            analytic = view.flatten(grads)
            coords = np.random.default_rng(1).choice(view.size, size=40, replace=False)

            def loss_at(vector: np.ndarray) -> float:
                return model.loss(view.unflatten(vector, dtype=np.float64), batch)

            numeric = numerical_grad(loss_at, flat, h=1e-5, indices=coords)
        self.assertLess(relative_error(analytic[coords], numeric), TOLERANCE)


@pytest.mark.unit
class TestParamView(unittest.TestCase):
    """平坦化ビューのテスト"""

    def test_flatten_unflatten_and_block(self):
        """ブロック取り出しと埋め込みの座標が一致する"""
        view = ParamView({"a": (2, 3), "b": (4,)})
        vector = np.arange(view.size, dtype=np.float64)
        self.assertEqual(view.size, 10)
        np.testing.assert_array_equal(view.block(vector, "a"), np.arange(6))
        restored = view.unflatten(vector, dtype=np.float64)
        np.testing.assert_array_equal(restored["b"], [6, 7, 8, 9])


if __name__ == '__main__':
    unittest.main()
