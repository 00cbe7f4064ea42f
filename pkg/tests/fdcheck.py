"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from smoothcert.tensor import Tensor, mul, no_grad, sum_

H = 1e-5


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return out
    return sum_(mul(out, Tensor(weights)))


def max_rel_error(fn, arrays, seed: int = 0, h: float = H) -> float:
    """Largest |analytic - FD| / max(1, |analytic|) over every input element.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are contracted with a
    fixed random weighting so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape) if probe.data.size > 1 else None

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    _scalarize(fn(*ts), weights).backward()

    def value(vals):
        with no_grad():
            return _scalarize(fn(*[Tensor(v) for v in vals]), weights).item()

    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            plus, minus = [x.copy() for x in arrays], [x.copy() for x in arrays]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            fd = (value(plus) - value(minus)) / (2 * h)
            an = analytic.reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(1.0, abs(an)))
    return worst
