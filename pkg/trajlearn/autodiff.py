"""
Forward-mode differentiation over small parameter vectors and the Adam optimizer.

A ``Dual`` is an array of dual scalars: ``value`` has any shape ``S`` (real or
complex) and ``tangent`` has shape ``(P,) + S`` with one leading slot per free
parameter. Arithmetic, matrix products, indexing and the elementary functions
below propagate tangents by the chain rule, so the same 2x2 superoperator code
runs on plain arrays and on dual arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, complex, int]


class DomainError(ValueError):
    """Raised when an elementary function is evaluated outside its domain."""


def _lift(tangent: np.ndarray, ndim: int) -> np.ndarray:
    # right-align the value axes of a tangent against a result of rank ``ndim``
    missing = ndim - (tangent.ndim - 1)
    if missing > 0:
        tangent = tangent.reshape(tangent.shape[:1] + (1,) * missing + tangent.shape[1:])
    return tangent


def _axis(axis: int) -> int:
    return axis + 1 if axis >= 0 else axis


class Dual:
    """Array of dual numbers with a leading tangent axis."""

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value: ArrayLike, tangent: ArrayLike):
        self.value = np.asarray(value)
        tangent = np.asarray(tangent)
        if tangent.ndim == 0:
            raise ValueError("tangent needs a leading parameter axis")
        self.tangent = _lift(tangent, self.value.ndim)

    @property
    def width(self) -> int:
        return self.tangent.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def full_tangent(self) -> np.ndarray:
        return np.broadcast_to(self.tangent, (self.width,) + self.value.shape)

    def __repr__(self) -> str:
        return f"Dual(value={self.value!r}, width={self.width})"

    # ---------- arithmetic ----------
    def __add__(self, other: Any) -> "Dual":
        if isinstance(other, Dual):
            value = self.value + other.value
            nd = value.ndim
            return Dual(value, _lift(self.tangent, nd) + _lift(other.tangent, nd))
        return Dual(self.value + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Dual":
        if isinstance(other, Dual):
            value = self.value - other.value
            nd = value.ndim
            return Dual(value, _lift(self.tangent, nd) - _lift(other.tangent, nd))
        return Dual(self.value - other, self.tangent)

    def __rsub__(self, other: Any) -> "Dual":
        return Dual(other - self.value, -self.tangent)

    def __neg__(self) -> "Dual":
        return Dual(-self.value, -self.tangent)

    def __mul__(self, other: Any) -> "Dual":
        if isinstance(other, Dual):
            value = self.value * other.value
            nd = value.ndim
            tangent = _lift(self.tangent, nd) * other.value + self.value * _lift(
                other.tangent, nd
            )
            return Dual(value, tangent)
        other = np.asarray(other)
        value = self.value * other
        return Dual(value, _lift(self.tangent, value.ndim) * other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Dual":
        if isinstance(other, Dual):
            if np.any(other.value == 0):
                raise DomainError("Dual division by zero")
            value = self.value / other.value
            nd = value.ndim
            tangent = (
                _lift(self.tangent, nd) - value * _lift(other.tangent, nd)
            ) / other.value
            return Dual(value, tangent)
        other = np.asarray(other)
        if np.any(other == 0):
            raise DomainError("Dual division by zero")
        value = self.value / other
        return Dual(value, _lift(self.tangent, value.ndim) / other)

    def __rtruediv__(self, other: Any) -> "Dual":
        if np.any(self.value == 0):
            raise DomainError("Dual division by zero")
        value = np.asarray(other) / self.value
        return Dual(value, -_lift(self.tangent, value.ndim) * (value / self.value))

    def __pow__(self, power: Union[int, float]) -> "Dual":
        if not isinstance(power, (int, float)):
            raise TypeError("power must be numeric")
        if power < 1 and np.any(self.value == 0):
            raise DomainError(f"power {power} is not differentiable at zero")
        return Dual(self.value**power, self.tangent * (power * self.value ** (power - 1)))

    def __matmul__(self, other: Any) -> "Dual":
        if isinstance(other, Dual):
            value = self.value @ other.value
            nd = value.ndim
            tangent = _lift(self.tangent, nd) @ other.value + self.value @ _lift(
                other.tangent, nd
            )
            return Dual(value, tangent)
        other = np.asarray(other)
        value = self.value @ other
        return Dual(value, _lift(self.tangent, value.ndim) @ other)

    def __rmatmul__(self, other: Any) -> "Dual":
        other = np.asarray(other)
        value = other @ self.value
        return Dual(value, other @ _lift(self.tangent, value.ndim))

    # ---------- structure ----------
    def __getitem__(self, key: Any) -> "Dual":
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.value[key], self.full_tangent()[(slice(None),) + key])

    def conj(self) -> "Dual":
        return Dual(self.value.conj(), self.tangent.conj())

    @property
    def real(self) -> "Dual":
        return Dual(self.value.real, self.tangent.real)

    @property
    def imag(self) -> "Dual":
        return Dual(self.value.imag, self.tangent.imag)

    def swapaxes(self, axis1: int, axis2: int) -> "Dual":
        return Dual(
            self.value.swapaxes(axis1, axis2),
            self.full_tangent().swapaxes(_axis(axis1), _axis(axis2)),
        )

    def sum(self, axis: Union[int, None] = None) -> "Dual":
        if axis is None:
            return Dual(self.value.sum(), self.full_tangent().reshape(self.width, -1).sum(axis=1))
        return Dual(self.value.sum(axis=axis), self.full_tangent().sum(axis=_axis(axis)))

    def mean(self, axis: Union[int, None] = None) -> "Dual":
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) / count


def primal(x: Any) -> np.ndarray:
    """Plain value of a dual or ordinary array."""
    return x.value if isinstance(x, Dual) else np.asarray(x)


def variables(theta: np.ndarray) -> Dual:
    """Seed a parameter vector with the identity tangent."""
    theta = np.asarray(theta, dtype=float)
    return Dual(theta, np.eye(theta.size))


# ---------- elementary functions ----------
def exp(x: Any) -> Any:
    if isinstance(x, Dual):
        e = np.exp(x.value)
        return Dual(e, x.tangent * e)
    return np.exp(x)


def log(x: Any) -> Any:
    if np.any(primal(x) <= 0):
        raise DomainError("log domain error: input must be > 0")
    if isinstance(x, Dual):
        return Dual(np.log(x.value), x.tangent / x.value)
    return np.log(x)


def sqrt(x: Any) -> Any:
    """Square root; zero entries carry a zero tangent."""
    if np.any(primal(x) < 0):
        raise DomainError("sqrt domain error: input must be >= 0")
    if isinstance(x, Dual):
        root = np.sqrt(x.value)
        safe = np.where(root > 0, root, 1.0)
        return Dual(root, np.where(root > 0, x.tangent * (0.5 / safe), 0.0))
    return np.sqrt(x)


def tanh(x: Any) -> Any:
    if isinstance(x, Dual):
        t = np.tanh(x.value)
        return Dual(t, x.tangent * (1.0 - t * t))
    return np.tanh(x)


def logistic(x: Any) -> Any:
    if isinstance(x, Dual):
        s = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
        return Dual(s, x.tangent * (s * (1.0 - s)))
    return 0.5 * (np.tanh(0.5 * np.asarray(x)) + 1.0)


def softplus(x: Any) -> Any:
    if isinstance(x, Dual):
        return Dual(np.logaddexp(0.0, x.value), x.tangent * logistic(x.value))
    return np.logaddexp(0.0, x)


def relu(x: Any) -> Any:
    if isinstance(x, Dual):
        return Dual(np.maximum(x.value, 0.0), np.where(x.value > 0, x.tangent, 0.0))
    return np.maximum(x, 0.0)


def logit(p: ArrayLike) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("logit domain error: input must lie in (0, 1)")
    return np.log(p) - np.log1p(-p)


def softplus_inverse(y: ArrayLike) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("softplus inverse needs a positive input")
    return y + np.log(-np.expm1(-y))


def where(mask: ArrayLike, a: Any, b: Any) -> Any:
    """Select entries from ``a`` where ``mask`` holds, else from ``b``."""
    mask = np.asarray(mask)
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(mask, a, b)
    value = np.where(mask, primal(a), primal(b))
    width = a.width if isinstance(a, Dual) else b.width
    nd = value.ndim
    ta = _lift(a.tangent, nd) if isinstance(a, Dual) else np.zeros((width,) + (1,) * nd)
    tb = _lift(b.tangent, nd) if isinstance(b, Dual) else np.zeros((width,) + (1,) * nd)
    return Dual(value, np.where(mask, ta, tb))


def stack(items: Sequence[Any], axis: int = -1) -> Any:
    """``np.stack`` that accepts dual entries."""
    duals = [x for x in items if isinstance(x, Dual)]
    if not duals:
        return np.stack([np.asarray(x) for x in items], axis=axis)
    width = duals[0].width
    values = np.broadcast_arrays(*[primal(x) for x in items])
    shape = values[0].shape
    tangents = []
    for x in items:
        if isinstance(x, Dual):
            tangents.append(np.broadcast_to(_lift(x.tangent, len(shape)), (width,) + shape))
        else:
            tangents.append(np.zeros((width,) + shape))
    return Dual(np.stack(values, axis=axis), np.stack(tangents, axis=_axis(axis)))


def gradient(
    loss_fn: Callable[[Any], Any], theta: np.ndarray
) -> Tuple[float, np.ndarray]:
    """
    Evaluate ``loss_fn`` at ``theta`` and return ``(loss, d loss / d theta)``.

    Args:
        loss_fn: Scalar function built from the primitives of this module.
        theta: Parameter vector.

    Returns:
        The loss value and the gradient vector (zeros for a constant loss).

    Raises:
        DomainError: If an elementary function leaves its domain.
    """
    theta = np.asarray(theta, dtype=float)
    out = loss_fn(variables(theta))
    if not isinstance(out, Dual):
        return float(np.real(out)), np.zeros_like(theta)
    if out.value.ndim != 0:
        raise ValueError("loss_fn must return a scalar")
    return float(np.real(out.value)), np.real(out.full_tangent()).astype(float)


@dataclass(frozen=True)
class AdamState:
    """Moment estimates and hyperparameters of one Adam optimizer."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 0.001, **kwargs: float) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), lr=lr, **kwargs)


def adam_step(
    state: AdamState, theta: np.ndarray, g: np.ndarray
) -> Tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape or state.m.shape != g.shape:
        raise ValueError(
            f"Adam dimension mismatch: theta {theta.shape}, g {g.shape}, moments {state.m.shape}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), theta
