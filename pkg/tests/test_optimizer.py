import unittest

import numpy as np

from src.optim.adamw import OptState, adamw_step, clip_global, decays, global_norm
from src.tensorcore import NamedParams
from src.utils.error_handler import NonFiniteError


class TestClipping(unittest.TestCase):
    """大域ノルムクリッピングのテスト"""

    def setUp(self):
        self.grads = {"w": np.full((2, 2), 3.0, dtype=np.float32),
                      "b": np.full(2, 4.0, dtype=np.float32)}

    def test_norm(self):
        """全勾配を連結したノルム"""
        self.assertAlmostEqual(global_norm(self.grads), np.sqrt(4 * 9 + 2 * 16), places=5)

    def test_clip_scales_to_max_norm(self):
        """上限を超えれば上限ノルムに縮める"""
        clipped, before = clip_global(self.grads, 1.0)
        self.assertGreater(before, 1.0)
        self.assertAlmostEqual(global_norm(clipped), 1.0, places=5)
        np.testing.assert_allclose(clipped["w"] / clipped["b"][0], self.grads["w"] / 4.0,
                                   rtol=1e-6)

    def test_clip_is_idempotent(self):
        """クリップ済みの勾配を再クリップしても変わらない"""
        once, _ = clip_global(self.grads, 1.0)
        twice, _ = clip_global(once, 1.0)
        for name in once:
            np.testing.assert_array_equal(once[name], twice[name])

    def test_small_gradients_untouched(self):
        """上限以下ならそのまま"""
        small = {"w": np.full((2, 2), 0.1, dtype=np.float32)}
        clipped, _ = clip_global(small, 1.0)
        np.testing.assert_array_equal(clipped["w"], small["w"])

    def test_non_finite_raises(self):
        """非有限値はエラー"""
        with self.assertRaises(NonFiniteError):
            clip_global({"w": np.array([np.nan, 1.0])}, 1.0, step=7)


class TestAdamW(unittest.TestCase):
    """AdamW 更新のテスト"""

    def setUp(self):
        self.params = NamedParams({"layer0.attn.W_Q": np.ones((2, 2), dtype=np.float32),
                                   "layer0.ln1.gain": np.ones(2, dtype=np.float32)})
        self.state = OptState.create(self.params, lr=0.1, weight_decay=1.0)

    def test_decay_targets(self):
        """2次元以上のみ減衰対象"""
        self.assertTrue(decays("tok_embed", np.zeros((3, 2))))
        self.assertFalse(decays("layer0.ln1.bias", np.zeros(2)))

    def test_first_step(self):
        """初回は m̂/√v̂ = sign(g)、減衰は行列のみ"""
        grads = {name: np.full(value.shape, 0.5, dtype=np.float32)
                 for name, value in self.params.items()}
        new_params, new_state = adamw_step(self.params, grads, self.state)
        np.testing.assert_allclose(new_params["layer0.attn.W_Q"], 0.8, rtol=1e-5)
        np.testing.assert_allclose(new_params["layer0.ln1.gain"], 0.9, rtol=1e-5)
        self.assertEqual(new_state.step, 1)
        self.assertEqual(new_params["layer0.attn.W_Q"].dtype, np.float32)

    def test_zero_gradient_only_decays(self):
        """勾配ゼロでも行列は減衰し、ベクトルは動かない"""
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        new_params, _ = adamw_step(self.params, grads, self.state)
        np.testing.assert_allclose(new_params["layer0.attn.W_Q"], 0.9, rtol=1e-6)
        np.testing.assert_array_equal(new_params["layer0.ln1.gain"], 1.0)

    def test_inputs_are_not_modified(self):
        """入力のパラメータと状態は変更しない"""
        before = self.params.copy()
        grads = {name: np.ones_like(value) for name, value in self.params.items()}
        adamw_step(self.params, grads, self.state)
        self.assertTrue(self.params.bit_equal(before))
        self.assertEqual(self.state.step, 0)
        self.assertFalse(np.any(self.state.m["layer0.attn.W_Q"]))

    def test_deterministic(self):
        """同じ入力からビット単位で同じ結果"""
        grads = {name: np.random.default_rng(0).standard_normal(value.shape).astype(np.float32)
                 for name, value in self.params.items()}
        a, _ = adamw_step(self.params, grads, self.state)
        b, _ = adamw_step(self.params, grads, self.state)
        self.assertTrue(a.bit_equal(b))


if __name__ == '__main__':
    unittest.main()
