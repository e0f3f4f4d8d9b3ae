import numpy as np

from ean import tensor as tensor_ops
from ean.tensor import (Graph, GraphError, Parameter, ShapeError, Tensor, backward, concat, count_macs,
                        current_graph, finite_diff_grad, log_softmax, matmul, no_grad, precision, reshape, softmax,
                        split)
from . import NumericTest


class TestTensor(NumericTest):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(11)

    def test_tensor_is_read_only(self):
        t = Tensor(np.ones((2, 3)))
        with self.assertRaises(ValueError):
            t.data[0, 0] = 2.0

    def test_default_element_kind(self):
        self.assertEqual(Tensor([1.0]).element_kind, 'f32')
        with precision('float64'):
            self.assertEqual(Tensor([1.0]).element_kind, 'f64')
        self.assertEqual(Tensor([1.0]).element_kind, 'f32')
        with self.assertRaises(ValueError):
            with precision('int32'):
                pass

    def test_mixed_kinds_rejected(self):
        a = Tensor(np.ones(3), dtype='float32')
        b = Tensor(np.ones(3), dtype='float64')
        with self.assertRaises(GraphError):
            a + b

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with self.assertRaises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))
        with self.assertRaises(ShapeError):
            split(Tensor(np.ones((5, 2))), 2)

    def test_parameter_assign(self):
        p = Parameter(np.zeros((2, 2)))
        p.assign(np.ones((2, 2)))
        self.assertTrue(np.array_equal(p.data, np.ones((2, 2))))
        with self.assertRaises(ShapeError):
            p.assign(np.ones(3))

    def test_broadcast_gradient(self):
        with precision('float64'):
            a = Parameter(self.rng.normal(size=(3, 4)))
            b = Parameter(self.rng.normal(size=(4,)))
            with Graph():
                grads = backward(((a * b) + b).sum())
            self.assertAllClose(grads[a], np.broadcast_to(b.data, (3, 4)))
            self.assertAllClose(grads[b], a.data.sum(axis=0) + 3.0)

    def test_reused_tensor_accumulates(self):
        with precision('float64'):
            a = Parameter(np.array([2.0, 3.0]))
            with Graph():
                grads = backward((a * a + a).sum())
            self.assertAllClose(grads[a], 2 * a.data + 1)

    def test_backward_requires_scalar(self):
        a = Parameter(np.ones(3))
        with Graph():
            with self.assertRaises(GraphError):
                backward(a * 2.0)

    def test_released_graph(self):
        a = Parameter(np.ones(3))
        with Graph():
            loss = (a * 2.0).sum()
            backward(loss)
            with self.assertRaises(GraphError):
                backward(loss)

    def test_retain_graph(self):
        a = Parameter(np.ones(3))
        with Graph():
            loss = (a * 2.0).sum()
            first = backward(loss, retain_graph=True)
            second = backward(loss)
        self.assertTrue(np.array_equal(first[a], second[a]))
        self.assertAllClose(a.grad, np.full(3, 4.0))

    def test_no_grad_records_nothing(self):
        a = Parameter(np.ones(3))
        with Graph() as graph:
            with no_grad():
                out = (a * 2.0).sum()
            self.assertEqual(0, len(graph))
            self.assertIsNone(out.node)

    def test_softmax(self):
        x = Tensor(self.rng.normal(size=(4, 7)) * 30)
        probs = softmax(x, axis=-1).data
        self.assertAllClose(probs.sum(axis=-1), np.ones(4), rtol=1e-6)
        self.assertAllClose(np.exp(log_softmax(x).data), probs, rtol=1e-5)

    def test_softmax_limits(self):
        probs = softmax(Tensor([1000.0, 0.0])).data
        self.assertFalse(np.any(np.isnan(probs)))
        self.assertAllClose(probs, [1.0, 0.0], rtol=0, atol=1e-9)
        self.assertAllClose(log_softmax(Tensor([1000.0, 0.0])).data, [0.0, -1000.0])
        self.assertAllClose(softmax(Tensor(np.zeros(4))).data, np.full(4, 0.25), rtol=0, atol=1e-9)

    def test_softmax_against_float64(self):
        logits = self.rng.normal(size=9) * 5
        expected = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
        self.assertAllClose(softmax(Tensor(logits)).data, expected, rtol=0, atol=1e-6)

    def test_matmul_against_loops(self):
        a = self.rng.normal(size=(2, 3, 4))
        b = self.rng.normal(size=(4, 5))
        expected = np.zeros((2, 3, 5))
        for n in range(2):
            for i in range(3):
                for j in range(5):
                    for k in range(4):
                        expected[n, i, j] += a[n, i, k] * b[k, j]
        with precision('float64'):
            self.assertAllClose(matmul(Tensor(a), Tensor(b)), expected, rtol=1e-12)

    def test_outside_graph_records_nothing(self):
        a = Parameter(np.ones(3))
        loss = (a * 2.0).sum()
        self.assertIsNone(current_graph())
        self.assertIsNone(loss.node)
        with self.assertRaises(GraphError):
            backward(loss)

    def test_backward_walks_the_loss_graph(self):
        with precision('float64'):
            a = Parameter(np.array([1.0, 2.0]))
        with Graph():
            loss = (a * 3.0).sum()
            with Graph() as inner:
                (a * 5.0 + a).sum()
                grads = backward(loss)
                self.assertEqual(3, len(inner))
        self.assertAllClose(grads[a], [3.0, 3.0])

    def test_composite_against_finite_differences(self):
        with precision('float64'):
            w = Tensor(self.rng.normal(size=(5, 3)))
            x = Tensor(self.rng.normal(size=(2, 4, 5)), requires_grad=True)

            def f(t):
                h = matmul(t, w)
                parts = split(h, 3, axis=2)
                return (softmax(concat([parts[2], parts[0]], axis=2), axis=1) * h[:, :, :2]).mean()

            with Graph():
                analytic = backward(f(x))[x]
            numeric = finite_diff_grad(f, x, eps=1e-6)
            self.assertLess(self.relative_error(analytic, numeric), 1e-6)

    def test_matmul_macs(self):
        with count_macs() as counter:
            with no_grad():
                matmul(Tensor(np.ones((3, 2, 4))), Tensor(np.ones((4, 5))))
                Tensor(np.ones(3)) * 2.0
        self.assertEqual(3 * 2 * 4 * 5, counter.macs)


def elementwise_ops(c: Tensor, d: Tensor) -> dict:
    """ Single differentiable operations on a [3, 4, 6] input; `c` matches it, `d` is [6, 5]. """
    return {
        'add': lambda x: tensor_ops.add(x, c[0]),
        'sub': lambda x: tensor_ops.sub(c, x),
        'mul': lambda x: tensor_ops.mul(x, c),
        'div': lambda x: tensor_ops.div(c, x) + tensor_ops.div(x, c[:, :1]),
        'neg': tensor_ops.neg,
        'power': lambda x: tensor_ops.power(x, 2.5),
        'relu': tensor_ops.relu,
        'exp': tensor_ops.exp,
        'log': tensor_ops.log,
        'sqrt': tensor_ops.sqrt,
        'sum': lambda x: tensor_ops.sum(x, axis=1),
        'mean': lambda x: tensor_ops.mean(x, axis=(0, 2), keepdims=True),
        'reshape': lambda x: tensor_ops.reshape(x, (6, 12)),
        'transpose': lambda x: tensor_ops.transpose(x, (2, 0, 1)),
        'concat': lambda x: tensor_ops.concat([x, c, x], axis=1),
        'split': lambda x: tensor_ops.split(x, 3, axis=2)[1],
        'getitem': lambda x: tensor_ops.getitem(x, (slice(1, None), slice(None, None, 2))),
        'getitem_advanced': lambda x: tensor_ops.getitem(x, (np.array([0, 2, 0]), slice(None), np.array([1, 5, 1]))),
        'matmul': lambda x: tensor_ops.matmul(x, d),
        'softmax': lambda x: tensor_ops.softmax(x, axis=-1),
        'log_softmax': lambda x: tensor_ops.log_softmax(x, axis=1)
    }


POSITIVE_DOMAIN = ('div', 'power', 'log', 'sqrt')


class TestOperationGradients(NumericTest):
    SEEDS = range(20)

    def test_every_operation_against_finite_differences(self):
        with precision('float64'):
            for seed in self.SEEDS:
                rng = np.random.default_rng(seed)
                c = Tensor(0.5 + np.abs(rng.normal(size=(3, 4, 6))))
                d = Tensor(rng.normal(size=(6, 5)))
                sample = rng.normal(size=(3, 4, 6))
                for name, op in elementwise_ops(c, d).items():
                    if name in POSITIVE_DOMAIN:
                        values = 0.5 + np.abs(sample)
                    else:
                        # Keep clear of the relu kink.
                        values = np.sign(sample) * (0.1 + np.abs(sample))
                    x = Tensor(values, requires_grad=True)
                    with no_grad():
                        weights = Tensor(rng.normal(size=op(x).shape))

                    def f(t):
                        return (op(t) * weights).sum()

                    with Graph():
                        analytic = backward(f(x))[x]
                    numeric = finite_diff_grad(f, x, eps=1e-6)
                    self.assertEqual(x.shape, analytic.shape, name)
                    error = self.relative_error(analytic, numeric)
                    self.assertLess(error, 1e-6, "Gradient mismatch for '{}' (seed {}): {}".format(name, seed, error))
