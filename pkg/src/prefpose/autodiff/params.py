"""Named parameter sets, initialisation, Adam and finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import ShapeError, Tensor, add, backward, matmul


class ParameterSet:
    """Mapping ``name -> Tensor`` iterated in lexicographic name order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def names(self) -> list[str]:
        return sorted(self._t)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._t[name]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: Tensor(t.data.copy()) for n, t in self.items()})

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._t):
            raise KeyError(f"parameter names differ: {sorted(set(arrays) ^ set(self._t))}")
        for n, arr in arrays.items():
            if arr.shape != self._t[n].shape:
                raise ShapeError(f"{n}: shape {arr.shape} vs {self._t[n].shape}")
            self._t[n].data = np.array(arr, dtype=np.float64, copy=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._t.values()))


def init_linear(params: ParameterSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """Weights and bias uniform in +-sqrt(1/fan_in)."""
    bound = np.sqrt(1.0 / fan_in)
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def init_layernorm(params: ParameterSet, name: str, dim: int) -> None:
    params.add(f"{name}.g", np.ones(dim))
    params.add(f"{name}.b", np.zeros(dim))


def linear(params: ParameterSet, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> "AdamState":
        st = cls(**hyper)
        for n, t in params.items():
            st.m[n] = np.zeros_like(t.data)
            st.v[n] = np.zeros_like(t.data)
        return st


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState) -> ParameterSet:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    missing = set(params.names()) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)}")
    for n, t in params.items():
        g = grads[n]
        if g.shape != t.shape or state.m[n].shape != t.shape:
            raise ShapeError(f"adam_step: {n} param {t.shape}, grad {g.shape}, moment {state.m[n].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for n, t in params.items():
        g = grads[n]
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_err: float
    n_checked: int
    n_kinks: int
    n_zero: int = 0  # coordinates skipped because f is not smooth within +-h


def gradient_check_report(
    closure: Callable[[], Tensor],
    params: ParameterSet,
    h: float = 1e-5,
    n_coords: int = 64,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-2,
) -> GradcheckReport:
    """Compare backprop with central differences on sampled coordinates.

    Up to ``n_coords`` coordinates per tensor are checked with relative error
    ``|a - n| / max(1e-8, |a| + |n|)``. A coordinate whose two one-sided
    differences disagree by more than ``kink_tol`` of their size straddles a
    relu kink or a clip boundary; it is counted and skipped. When both the
    analytic and numeric values are below the resolution of the difference
    quotient (a few ulps of the loss over ``2h``) the coordinate has a zero
    gradient, e.g. a bias feeding a shift-invariant softmax; it counts as
    agreeing and is tallied in ``n_zero``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = backward(closure(), params.items())
    f0 = closure().item()
    worst = 0.0
    checked = kinks = zeros = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False) if k < flat.size else np.arange(flat.size)
        g = grads[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = closure().item()
            flat[c] = orig - h
            fm = closure().item()
            flat[c] = orig
            fwd, bwd = fp - f0, f0 - fm
            if abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd)) + 1e-12:
                kinks += 1
                continue
            num = (fp - fm) / (2.0 * h)
            ana = g[c]
            res = 32.0 * np.finfo(np.float64).eps * max(abs(fp), abs(fm), abs(f0)) / (2.0 * h)
            if abs(ana) <= res and abs(num) <= res:
                zeros += 1
                checked += 1
                continue
            worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
            checked += 1
    return GradcheckReport(float(worst), checked, kinks, zeros)


def gradient_check(closure, params, h=1e-5, n_coords=64, rng=None) -> float:
    """Max relative error of :func:`gradient_check_report`."""
    return gradient_check_report(closure, params, h=h, n_coords=n_coords, rng=rng).max_rel_err
