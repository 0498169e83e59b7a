"""Minimal reverse-mode automatic differentiation over numpy arrays.

Values live in `Tensor` objects that record the operation producing them;
calling `backward()` on a scalar result walks the recorded graph once in
reverse topological order and accumulates gradients into `.grad`.

Conventions:
  * dtype follows the operands; python scalars are cast to the tensor's
    dtype so float32 graphs stay float32 end to end.
  * `matmul` is strictly 2-D; elementwise ops broadcast like numpy and
    gradients are summed back down to each operand's shape.
  * index arrays (`take_rows`) are constants; no gradient flows into them.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over broadcast axes so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(other, like: "Tensor") -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.data.dtype))

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        data = self.data + other.data

        def backward(out):
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return _finish(data, (self, other), backward)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        def backward(out):
            self._accum(-out.grad)

        return _finish(-self.data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        data = self.data - other.data

        def backward(out):
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return _finish(data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other, self).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        data = self.data * other.data

        def backward(out):
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return _finish(data, (self, other), backward)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        data = self.data / other.data

        def backward(out):
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * data / other.data, other.data.shape))

        return _finish(data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self).__truediv__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** p

        def backward(out):
            self._accum(out.grad * p * self.data ** (p - 1))

        return _finish(data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._lift(other, self)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul requires 2-D operands")
        data = self.data @ other.data

        def backward(out):
            g = out.grad
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return _finish(data, (self, other), backward)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def backward(out):
            self._accum(out.grad * data)

        return _finish(data, (self,), backward)

    def log(self):
        data = np.log(self.data)

        def backward(out):
            self._accum(out.grad / self.data)

        return _finish(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(out):
            self._accum(out.grad * 0.5 / data)

        return _finish(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)

        def backward(out):
            self._accum(out.grad * (1.0 - data * data))

        return _finish(data, (self,), backward)

    def sigmoid(self):
        x = self.data
        data = np.empty_like(x)
        pos = x >= 0
        data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        data[~pos] = ex / (1.0 + ex)

        def backward(out):
            self._accum(out.grad * data * (1.0 - data))

        return _finish(data, (self,), backward)

    def softplus(self):
        data = np.logaddexp(np.asarray(0.0, dtype=self.data.dtype), self.data)

        def backward(out):
            x = self.data
            sig = np.empty_like(x)
            pos = x >= 0
            sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            sig[~pos] = ex / (1.0 + ex)
            self._accum(out.grad * sig)

        return _finish(data, (self,), backward)

    def clip_min(self, floor: float):
        """Elementwise max(x, floor); gradient passes only where x > floor."""
        data = np.maximum(self.data, floor)

        def backward(out):
            self._accum(out.grad * (self.data > floor))

        return _finish(data, (self,), backward)

    # -- reductions and shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy())

        return _finish(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(out):
            self._accum(out.grad.reshape(self.data.shape))

        return _finish(data, (self,), backward)

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice [start, start+length) along `axis`."""
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        data = self.data[index]

        def backward(out):
            g = np.zeros_like(self.data)
            g[index] = out.grad
            self._accum(g)

        return _finish(data, (self,), backward)

    def take_rows(self, idx):
        """Row lookup `self.data[idx]`; duplicates scatter-add on backward."""
        idx = np.asarray(idx, dtype=np.intp)
        data = self.data[idx]

        def backward(out):
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)

        return _finish(data, (self,), backward)

    # -- graph traversal --------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node)


def _finish(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(out):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(offset, offset + n)
                t._accum(out.grad[tuple(index)])
            offset += n

    return _finish(data, tuple(tensors), backward)


def parameter(data, dtype=np.float64) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
