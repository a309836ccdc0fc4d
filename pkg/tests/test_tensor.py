import math

import numpy as np
import pytest

from engine import functional as F
from engine.errors import (ContractError, EmptyObjectiveError, NumericDomainError, ShapeError,
                           TokenIndexError)
from engine.gradcheck import grad_check
from engine.tensor import Tape, Tensor, backward, no_grad


class TestTensor:
    def test_zero_size_dimension_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_reshape_keeps_data_length(self):
        x = Tensor(np.arange(6.0))
        y = x.reshape(2, 3)
        assert y.shape == (2, 3)
        assert y.size == x.size
        assert x.shape == (6,)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(F.scale(x, 2.0))

    def test_gradients_accumulate_until_reset(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(F.sum(F.scale(x, 3.0)))
        backward(F.sum(F.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.reset_grad()
        assert x.grad is None

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = F.scale(x, 2.0)
        assert not y.requires_grad

    def test_operators_dispatch(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 4.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 8.0])
        np.testing.assert_array_equal((a * 2).data, [2.0, 4.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0])
        np.testing.assert_array_equal((b - a).data, [2.0, 2.0])


class TestTape:
    def test_inputs_precede_nodes(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        h = F.mul(x, x)
        loss = F.sum(F.add(h, F.scale(h, 2.0)))
        tape = Tape.record(loss)
        position = {id(node): i for i, node in enumerate(tape.nodes)}
        for i, node in enumerate(tape.nodes):
            for parent in node.inputs:
                if parent._node is not None:
                    assert position[id(parent._node)] < i
        assert len(tape.nodes) == len({id(n) for n in tape.nodes})

    def test_shared_subexpression_gradient(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        backward(F.sum(F.add(F.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-12)

    def test_backward_of_weighted_sum_is_exact(self, rng):
        c = rng.normal(size=(3, 4))
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(F.sum(F.mul(x, Tensor(c))))
        np.testing.assert_array_equal(x.grad, c)


class TestMatmul:
    def test_identity(self):
        out = F.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector_row(self):
        out = F.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    @pytest.mark.parametrize("m,k,n", [(3, 4, 2), (16, 16, 16), (1, 7, 5)])
    def test_triple_loop_oracle(self, rng, m, k, n):
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        expected = [[sum(a[i, p] * b[p, j] for p in range(k)) for j in range(n)] for i in range(m)]
        np.testing.assert_allclose(F.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_identities(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(F.add(x, 0).data, x.data)
        np.testing.assert_array_equal(F.mul(x, 1).data, x.data)

    def test_scale(self):
        np.testing.assert_array_equal(F.scale(Tensor([1.0, 2.0, 3.0]), 2.5).data, [2.5, 5.0, 7.5])

    def test_only_scalar_broadcasting(self):
        with pytest.raises(ShapeError):
            F.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_zero_d_tensor_acts_as_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        s = Tensor(3.0, requires_grad=True)
        backward(F.sum(F.mul(x, s)))
        assert float(s.grad) == 4.0
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))


class TestSoftmax:
    def test_constant_slice_is_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor([7.0] * 4)).data, [0.25] * 4, atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(F.softmax(Tensor(x + 100)).data, F.softmax(Tensor(x)).data,
                                   atol=1e-12)

    def test_closed_form(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75],
                                   atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        probs = F.softmax(Tensor(rng.normal(size=(6, 8)) * 5)).data
        assert np.all((probs > 0) & (probs < 1))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_positions_get_zero(self):
        mask = np.tril(np.ones((3, 3), dtype=bool))
        probs = F.softmax(Tensor(np.zeros((3, 3))), mask=mask).data
        np.testing.assert_allclose(probs[1], [0.5, 0.5, 0.0])

    def test_nan_rejected(self):
        with pytest.raises(NumericDomainError):
            F.softmax(Tensor([0.0, np.nan]))


class TestNormalization:
    def test_layer_norm_standardizes(self, rng):
        x = rng.normal(size=(4, 10)) * 3 + 1
        out = F.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10))).data
        var = x.var(axis=-1)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), var / (var + F.NORM_EPSILON), atol=1e-10)

    def test_rms_norm_constant(self):
        out = F.rms_norm(Tensor([2.0, 2.0, 2.0]), Tensor(np.ones(3))).data
        np.testing.assert_allclose(out, [1.0, 1.0, 1.0], atol=1e-6)

    def test_rms_norm_hand_computed(self):
        out = F.rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2))).data
        denom = math.sqrt(12.5 + F.NORM_EPSILON)
        np.testing.assert_allclose(out, [3 / denom, 4 / denom], atol=1e-12)


class TestActivations:
    def test_fixed_points(self):
        assert F.silu(Tensor([0.0])).data[0] == 0.0
        assert F.gelu(Tensor([0.0])).data[0] == 0.0

    def test_silu_one(self):
        assert F.silu(Tensor([1.0])).data[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)


class TestEmbedding:
    def test_direct_gather(self):
        table = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(F.embedding_lookup(table, [0]).data, [[1.0, 2.0]])

    def test_repeated_ids_accumulate(self):
        table = Tensor(np.zeros((4, 2)), requires_grad=True)
        backward(F.sum(F.embedding_lookup(table, [1, 1, 2, 1])))
        np.testing.assert_array_equal(table.grad[:, 0], [0.0, 3.0, 1.0, 0.0])

    def test_out_of_range_id(self):
        with pytest.raises(TokenIndexError, match="9"):
            F.embedding_lookup(Tensor(np.zeros((4, 2))), [9])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = F.cross_entropy(Tensor(np.zeros((3, 260))), [0, 17, 259])
        assert loss.item() == pytest.approx(math.log(260), abs=1e-12)

    def test_confident_target(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1000.0
        assert F.cross_entropy(Tensor(logits), [2]).item() < 1e-6

    def test_hand_computed(self):
        loss = F.cross_entropy(Tensor([[0.0, math.log(3)]]), [0])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_mask_selects_positions(self):
        logits = Tensor([[0.0, math.log(3)], [50.0, -50.0]])
        loss = F.cross_entropy(logits, [0, 1], mask=[True, False])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_all_masked(self):
        with pytest.raises(EmptyObjectiveError):
            F.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], mask=[False, False])


class TestGradCheck:
    def test_linear_function(self, rng):
        assert grad_check(F.sum, Tensor(rng.normal(size=(3, 3)))) < 1e-9

    def test_square(self, rng):
        assert grad_check(lambda x: F.sum(F.mul(x, x)), Tensor(rng.normal(size=(4,)))) < 1e-7

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_ops(self, seed):
        r = np.random.default_rng(seed)
        rows, cols = int(r.integers(1, 9)), int(r.integers(2, 9))
        w = Tensor(r.normal(size=(cols, cols)))
        gain = Tensor(r.normal(size=(cols,)))
        targets = [int(t) for t in r.integers(0, cols, size=rows)]

        def f(x):
            h = F.gelu(F.layer_norm(F.matmul(x, w), gain))
            h = F.silu(F.rms_norm(F.add(h, x), gain))
            return F.cross_entropy(F.softmax(h), targets)

        assert grad_check(f, Tensor(r.normal(size=(rows, cols)))) < 1e-4
