"""Reverse-mode automatic differentiation over float64 numpy buffers.

A Tensor is a value node: a numpy array plus a gradient slot. Operations
executed while a Tape is active append (output, inputs, backward) records;
Tape.backward walks the records in reverse and accumulates vector-Jacobian
products into the .grad slot of every tensor on the path, whether or not
that tensor will later be updated by an optimizer. Freezing is an optimizer
concern, not an autodiff concern.

numpy is used as array storage and BLAS only. Every derivative here is
written out by hand; nothing differentiates itself.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConvergenceError, DataError, NumericError, ShapeError, TapeError

_TAPE_STACK: list["Tape"] = []
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks on every op output (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _require_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")


class Tensor:
    """Float64 array with a gradient slot.

    The data buffer is owned by whoever created the tensor; ops never
    mutate their inputs. ``op`` names the operation that produced the
    tensor ("leaf" for user-created ones) so numeric errors can say where
    a bad value came from.
    """

    __slots__ = ("data", "grad", "name", "op")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            # Adopt freshly-owned buffers; copy views so no two grads
            # ever alias the same memory (accumulation is in-place).
            self.grad = g if g.base is None and g.flags.owndata else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records ops executed inside its ``with`` block.

    backward() may be called repeatedly; each call adds another full
    round of gradients (so two calls leave exactly doubled grads). Pass
    ``free=True`` on the last call to drop the records; the tape then
    refuses further use.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, node: _Node) -> None:
        if self._consumed:
            raise TapeError("tape was freed and cannot record new operations")
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, *, free: bool = False) -> None:
        if self._consumed:
            raise TapeError("tape was already consumed by backward(free=True)")
        if loss.data.shape != ():
            raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            key = id(node.out)
            g = flows.pop(key, None)
            if g is None:
                continue
            # All consumers of node.out sit later on the tape, so its
            # gradient is complete here and can be committed immediately.
            holders.pop(key).add_grad(g)
            for t, gt in zip(node.inputs, node.backward(g)):
                if gt is None:
                    continue
                k = id(t)
                if k in flows:
                    flows[k] = flows[k] + gt
                else:
                    flows[k] = gt
                    holders[k] = t
        for k, t in holders.items():
            t.add_grad(flows[k])
        if free:
            self._nodes.clear()
            self._consumed = True


def _finish(out_data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _DEBUG_CHECKS:
        _require_finite(out.data, f"output of op '{op}'")
    if _TAPE_STACK:
        _TAPE_STACK[-1]._record(_Node(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return [_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)]

    return _finish(out, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return [_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)]

    return _finish(out, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        return [g * c]

    return _finish(out, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # Stacked @ plain matrix: flatten the stack so BLAS sees one big
        # GEMM instead of a strided batch. Same contraction either way.
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            da = (g2 @ b.data.T).reshape(a.data.shape)
            db = a2.T @ g2
            return [da, db]

        return _finish(out, "matmul", (a, b), backward)

    out = a.data @ b.data

    def backward(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return [_unbroadcast(da, a.data.shape), _unbroadcast(db, b.data.shape)]

    return _finish(out, "matmul", (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return [np.swapaxes(g, -1, -2)]

    return _finish(out, "transpose_last2", (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} are not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return [np.transpose(g, inverse)]

    return _finish(out, "permute", (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    src = a.data.shape

    def backward(g):
        return [g.reshape(src)]

    return _finish(out, "reshape", (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={int(ids.min())} max={int(ids.max())}"
        )
    out = table.data[ids]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return [dt]

    return _finish(out, "embedding", (table,), backward)


def gather_position(a: Tensor, position: int) -> Tensor:
    """Select one sequence position from a (batch, seq, hidden) tensor."""
    if a.ndim != 3:
        raise ShapeError(f"gather_position expects rank 3, got {a.shape}")
    if not 0 <= position < a.shape[1]:
        raise ShapeError(f"position {position} out of range for seq {a.shape[1]}")
    out = a.data[:, position, :].copy()

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[:, position, :] = g
        return [dx]

    return _finish(out, "gather_position", (a,), backward)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis.

    Rejects non-finite input unconditionally: a NaN here almost always
    means an upstream op diverged, and softmax would otherwise launder it
    into a plausible-looking distribution.
    """
    if not np.all(np.isfinite(a.data)):
        raise NumericError(f"softmax input contains non-finite values (from op '{a.op}')")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def backward(g):
        # dL/dx = y * (g - sum(g * y))
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]

    return _finish(y, "softmax", (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm scale/shift must have shape ({h},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        # Standard layer norm gradient with population variance:
        # dx = istd/H * (H*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (istd / h) * (h * dxhat - s1 - xhat * s2)
        flat_g = g.reshape(-1, h)
        flat_xhat = xhat.reshape(-1, h)
        dgamma = (flat_g * flat_xhat).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return [dx, dgamma, dbeta]

    return _finish(out, "layer_norm", (x, gamma, beta), backward)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
    """
    x2 = x.data * x.data
    t = np.tanh(_GELU_K * (x.data + _GELU_C * x2 * x.data))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        # 0.5 * g * ((1 + t) + x * (1 - t**2) * k * (1 + 3c * x**2)),
        # built up in place to keep memory traffic down.
        du = (3.0 * _GELU_C) * x2
        du += 1.0
        du *= _GELU_K
        w = t * t
        np.subtract(1.0, w, out=w)
        w *= du
        w *= x.data
        w += t
        w += 1.0
        w *= 0.5
        w *= g
        return [w]

    return _finish(out, "gelu", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return [g * (1.0 - t * t)]

    return _finish(t, "tanh", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def backward(g):
        return [np.broadcast_to(g, x.data.shape).astype(np.float64)]

    return _finish(np.asarray(out), "sum_all", (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean cross entropy over rows whose label is not ``ignore_index``.

    logits: (rows, classes). labels: (rows,) integer class ids. The mean
    is over counted rows only, so padding and unmasked positions do not
    dilute the loss.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits rows {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"cross entropy logits are non-finite (from op '{logits.op}')")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross entropy got no labeled rows")
    picked = labels[valid]
    if picked.min() < 0 or picked.max() >= logits.shape[1]:
        raise DataError(
            f"label out of range [0, {logits.shape[1]}): min={int(picked.min())} "
            f"max={int(picked.max())}"
        )
    zmax = logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(logits.data - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = logits.data - zmax - np.log(sez)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, picked].sum() / count

    def backward(g):
        p = ez / sez
        dlogits = np.zeros_like(logits.data)
        dlogits[rows] = p[rows]
        dlogits[rows, picked] -= 1.0
        return [dlogits * (float(g) / count)]

    return _finish(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


def mse_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error against constant targets."""
    targets = np.asarray(targets, dtype=np.float64)
    p = pred.data.reshape(-1)
    if targets.shape != p.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match predictions {p.shape}")
    diff = p - targets
    n = p.size
    loss = (diff * diff).sum() / n

    def backward(g):
        return [(2.0 * float(g) / n) * diff.reshape(pred.data.shape)]

    return _finish(np.asarray(loss), "mse_loss", (pred,), backward)


def spectral_norm(
    m, tol: float = 1e-9, max_iter: int = 1000
) -> float:
    """Largest singular value of a 2-d matrix by power iteration.

    Iterates v <- normalize(B v) with B = m^T m from an all-ones start,
    reading off the Rayleigh quotient lambda = v^T B v. Stops when the
    eigen-residual ||B v - lambda v|| falls within tol * max(lambda, tiny)
    and returns sqrt(lambda). Raises ConvergenceError (carrying the last
    two sigma estimates) if max_iter passes without meeting tolerance.
    """
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"spectral_norm expects a 2-d matrix, got {data.shape}")
    _require_finite(data, "spectral_norm input")
    b = data.T @ data
    k = b.shape[0]
    v = np.ones(k, dtype=np.float64) / math.sqrt(k)
    history: list[float | None] = [None, None]
    for _ in range(max_iter):
        w = b @ v
        lam = float(v @ w)
        sigma = math.sqrt(max(lam, 0.0))
        history = [history[1], sigma]
        resid = float(np.linalg.norm(w - lam * v))
        if resid <= tol * max(lam, 1e-300):
            return sigma
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return 0.0
        v = w / wn
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_two=tuple(history),
    )
