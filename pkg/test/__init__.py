# (c) Copyright [2017] Hewlett Packard Enterprise Development LP
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import typing
from unittest import TestCase

import numpy as np
import pandas as pd

from ean.tensor import Graph, Parameter, Tensor, backward, no_grad


class NumericTest(TestCase):
    """ A base class with numeric helpers shared by all test cases. """
    LAYER_COLUMNS = {'name': 0, 'out_shape': 1, 'flops': 2, 'num_params': 3}

    def assertAllClose(self, actual, expected, rtol: float = 1e-5, atol: float = 1e-8, msg: str = '') -> None:
        actual = actual.data if isinstance(actual, Tensor) else actual
        expected = expected.data if isinstance(expected, Tensor) else expected
        np.testing.assert_allclose(np.asarray(actual), np.asarray(expected), rtol=rtol, atol=atol, err_msg=msg)

    @staticmethod
    def relative_error(actual, expected) -> float:
        actual = np.asarray(actual.data if isinstance(actual, Tensor) else actual, dtype=np.float64)
        expected = np.asarray(expected.data if isinstance(expected, Tensor) else expected, dtype=np.float64)
        scale = max(np.linalg.norm(expected), np.linalg.norm(actual), 1e-12)
        return float(np.linalg.norm(actual - expected) / scale)

    def check_gradients(self, loss_fn: typing.Callable[[], Tensor], params: typing.Mapping[str, Parameter],
                        samples: int = 8, eps: float = 1e-4, tolerance: float = 1e-3, seed: int = 0) -> None:
        """ Compares reverse-mode gradients of a scalar `loss_fn()` with central differences.

        Only `samples` randomly chosen entries of every parameter are perturbed. Run in float64.
        """
        for param in params.values():
            param.zero_grad()
        with Graph():
            grads = backward(loss_fn())
        rng = np.random.default_rng(seed)
        for name, param in params.items():
            self.assertIn(param, grads, "No gradient reached '{}'".format(name))
            analytic = grads[param]
            base = np.array(param.data)
            flat = rng.choice(base.size, size=min(samples, base.size), replace=False)
            numeric, expected = [], []
            with no_grad():
                for index in (np.unravel_index(i, base.shape) for i in flat):
                    plus, minus = base.copy(), base.copy()
                    plus[index] += eps
                    minus[index] -= eps
                    param.assign(plus)
                    f_plus = loss_fn().item()
                    param.assign(minus)
                    f_minus = loss_fn().item()
                    numeric.append((f_plus - f_minus) / (2 * eps))
                    expected.append(analytic[index])
            param.assign(base)
            error = self.relative_error(expected, numeric)
            self.assertLess(error, tolerance, "Gradient mismatch for '{}': relative error {}".format(name, error))

    def check_layers(self, actual_layers: pd.DataFrame, expected_layers: typing.List[typing.List]) -> None:
        """ Verifies the first rows of a profiler table against [name, out_shape, flops, num_params] lists. """
        for i, expected in enumerate(expected_layers):
            actual = actual_layers.iloc[i]
            for column, index in NumericTest.LAYER_COLUMNS.items():
                self.assertEqual(expected[index], actual[column],
                                 "Failed to match parameter '{}' for layer '{}'".format(column, actual['name']))
