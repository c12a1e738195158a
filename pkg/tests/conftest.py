import numpy as np
import pytest

from glossattn import numerics as nx
from glossattn.numerics import Tensor


def check_grads(fn, arrays, step=1e-5):
    """Relative error of ``backward`` vs central differences for each input.

    ``fn`` maps Tensors to a scalar Tensor.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    errors = []
    for i, leaf in enumerate(leaves):
        def scalar(x, i=i):
            args = [Tensor(x) if j == i else Tensor(leaves[j].data) for j in range(len(leaves))]
            with nx.no_grad():
                return fn(*args).item()

        numeric = nx.finite_diff_grad(scalar, leaves[i].data, step)
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(numeric)
        errors.append(nx.relative_error(analytic, numeric))
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
