"""Shared test utilities: finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from mlim.autodiff import Tensor


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                 h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def fd_check(build: Callable[[Dict[str, Tensor]], Tensor],
             inputs: Dict[str, np.ndarray],
             tol: float = 1e-3, h: float = 1e-5) -> None:
    """Compare backprop gradients of a scalar-valued graph against central
    finite differences, for every entry of every input array.

    build() receives fresh leaf Tensors and must return a scalar Tensor.
    """
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    out = build(leaves)
    assert out.data.size == 1, "fd_check needs a scalar objective"
    out.backward()

    for name, arr in inputs.items():
        def f(x: np.ndarray, _name: str = name) -> float:
            probe = {k: Tensor(v.copy()) for k, v in inputs.items()}
            probe[_name] = Tensor(x.copy())
            return float(build(probe).data)

        num = numeric_grad(f, arr.copy(), h=h)
        ana = leaves[name].grad
        assert ana is not None, f"no gradient reached input {name!r}"
        err = rel_err(ana, num)
        assert err < tol, f"{name}: rel err {err:.3e} >= {tol:g}"
