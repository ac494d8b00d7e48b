"""Central finite-difference gradient checker shared by the test modules."""

import numpy as np

from tsqat.autodiff import Tensor


# central differences with h=1e-5 carry ~1e-11 of roundoff; gradients that are
# exactly zero (e.g. the key bias under softmax shift invariance) are compared
# against this floor instead of against their own noise, which caps the
# absolute error accepted on them at 1e-10
NOISE_FLOOR = 1e-6


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), NOISE_FLOOR)
    return float(np.abs(a - b).max(initial=0) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, tensors: list[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over ``tensors`` of backward vs finite differences.

    ``build`` returns a scalar Tensor computed from the current data of ``tensors``.
    """
    for t in tensors:
        t.grad = None
    out = build()
    out.backward()
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, h)
        an = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(an, num))
    return worst
