#!/usr/bin/env python3
"""
自动微分测试：算子梯度与数值梯度对比、Tape 语义、Adam 更新
"""

import os
import sys

import numpy as np
import pytest

# 添加项目路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis.autodiff import (
    AdamState,
    GruParams,
    Tape,
    Tensor,
    affine,
    apply_step,
    backward,
    concat,
    conv1d,
    conv_output_length,
    diagonal,
    flip,
    gather,
    gru_cell,
    log_softmax_rows,
    mean_all,
    mul,
    numeric_gradient,
    optimizer_step,
    sigmoid,
    stack,
    sum_all,
    tanh,
    transpose,
)
from models.errors import ContractError, DimensionError, InputTooShortError, NumericError, TrainingDivergedError


class TestGradients:
    """反向传播结果与中心差分对比（float64）"""

    def _tensor(self, shape, seed=0, name=None):
        rng = np.random.default_rng(seed)
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    def _check(self, build, tensors, rtol=1e-5, atol=1e-7):
        for t in tensors:
            t.grad = None
        with Tape() as tape:
            loss = build()
        backward(tape, loss)
        for t in tensors:
            expected = numeric_gradient(lambda: build().item(), t)
            np.testing.assert_allclose(t.grad, expected, rtol=rtol, atol=atol)

    def test_elementwise_chain(self):
        a = self._tensor((3, 4), 1)
        b = self._tensor((3, 4), 2)
        self._check(lambda: sum_all(mul(sigmoid(a), tanh(b)) + a), [a, b])

    def test_affine_with_bias(self):
        x = self._tensor((5, 3), 3)
        w = self._tensor((3, 2), 4)
        bias = self._tensor((2,), 5)
        self._check(lambda: sum_all(tanh(affine(x, w, bias))), [x, w, bias])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (5, 3)])
    def test_conv1d(self, stride, padding):
        x = self._tensor((2, 3, 17), 6)
        k = self._tensor((4, 3, 4), 7)
        bias = self._tensor((4,), 8)
        self._check(lambda: sum_all(tanh(conv1d(x, k, stride, padding, bias))), [x, k, bias])

    def test_conv1d_matches_direct_sum(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 2, 10))
        k = rng.standard_normal((3, 2, 3))
        out = conv1d(Tensor(x), Tensor(k), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        lout = conv_output_length(10, 3, 2, 1)
        expected = np.zeros((1, 3, lout))
        for o in range(3):
            for t in range(lout):
                expected[0, o, t] = np.sum(xp[0, :, 2 * t:2 * t + 3] * k[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_log_softmax_and_gather(self):
        x = self._tensor((4, 5), 10)
        rows = np.arange(4)
        cols = np.array([0, 3, 1, 4])
        self._check(lambda: mean_all(gather(log_softmax_rows(x), rows, cols)), [x])

    def test_shape_ops(self):
        a = self._tensor((2, 3), 11)
        b = self._tensor((2, 3), 12)
        self._check(lambda: sum_all(mul(flip(concat([a, b], axis=1), 1),
                                        transpose(transpose(concat([b, a], axis=1))))), [a, b])
        self._check(lambda: sum_all(diagonal(affine(a, transpose(b)))), [a, b])
        self._check(lambda: sum_all(tanh(stack([a, b], axis=0))), [a, b])

    def test_gru_cell(self):
        rng = np.random.default_rng(13)
        params = GruParams.init(3, 4, rng, np.float64)
        x = self._tensor((2, 3), 14)
        h = self._tensor((2, 4), 15)
        self._check(lambda: sum_all(gru_cell(x, h, params)), [x, h, params.w_ih, params.w_hh, params.b_ih])


class TestTapeSemantics:
    """Tape 记录与契约检查"""

    def test_no_recording_without_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = sigmoid(a)
        assert out.is_leaf

    def test_constants_not_recorded(self):
        with Tape() as tape:
            sigmoid(Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_gradients_accumulate_for_shared_leaf(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(a + a)
        backward(tape, loss)
        np.testing.assert_allclose(a.grad, [2.0, 2.0])

    def test_second_backward_doubles_gradients(self):
        a = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(tanh(a))
        backward(tape, loss)
        first = a.grad.copy()
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, 2 * first)

    def test_non_scalar_loss_rejected(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = tanh(a)
        with pytest.raises(ContractError):
            backward(tape, out)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_conv_too_short(self):
        with pytest.raises(InputTooShortError):
            conv1d(Tensor(np.ones((1, 1, 3))), Tensor(np.ones((1, 1, 10))), stride=5, padding=0)

    def test_log_softmax_nan(self):
        with pytest.raises(NumericError):
            log_softmax_rows(Tensor(np.array([[0.0, np.nan]])))


class TestAdam:
    """Adam 更新"""

    def test_first_step_moves_by_lr(self):
        params = [np.array([1.0, -2.0])]
        grads = [np.array([0.5, -3.0])]
        updated, state = optimizer_step(params, grads, AdamState.for_params(params), lr=0.1)
        # 第一步的偏差修正后更新量为 lr * sign(g)
        np.testing.assert_allclose(updated[0], [0.9, -1.9], atol=1e-6)
        assert state.step == 1

    def test_pure_function(self):
        params = [np.array([1.0])]
        state = AdamState.for_params(params)
        optimizer_step(params, [np.array([1.0])], state, lr=0.1)
        assert params[0][0] == 1.0
        assert state.step == 0

    def test_non_finite_gradient(self):
        params = [np.array([1.0])]
        with pytest.raises(TrainingDivergedError):
            optimizer_step(params, [np.array([np.inf])], AdamState.for_params(params), lr=0.1)

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        target = Tensor(np.array([1.0, 2.0]))
        state = AdamState.for_params([w.data])
        for _ in range(500):
            w.zero_grad()
            with Tape() as tape:
                diff = w - target
                loss = sum_all(mul(diff, diff))
            backward(tape, loss)
            state = apply_step([w], state, lr=0.05)
        np.testing.assert_allclose(w.data, [1.0, 2.0], atol=1e-2)

    def test_quadratic_bowl(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState.for_params([w.data])
        for _ in range(200):
            w.zero_grad()
            with Tape() as tape:
                loss = sum_all(mul(w, w))
            backward(tape, loss)
            state = apply_step([w], state, lr=0.1)
        assert abs(w.data[0]) < 1e-3


class TestInit:
    """参数初始化范围"""

    def test_gru_bounds_follow_fan_in(self):
        params = GruParams.init(100, 4, np.random.default_rng(0))
        assert np.max(np.abs(params.w_ih.data)) <= 0.1
        assert np.max(np.abs(params.w_ih.data)) > 0.09
        assert np.max(np.abs(params.w_hh.data)) <= 0.5
        assert np.max(np.abs(params.w_hh.data)) > 0.4
        np.testing.assert_array_equal(params.b_ih.data, 0.0)
