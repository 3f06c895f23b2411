"""Float64 tensors with reverse-mode autodiff, covering exactly the layer set
the patch network needs: hop-propagated graph convolution, dense layers,
relu/sigmoid, scatter-max pooling, L2 normalization, the two losses, and Adam.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

_finite_checks = True
_grad_enabled = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf assertion run after every op; returns the old value."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


@contextmanager
def no_grad():
    """Disable tape recording (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor created with non-finite entries")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode pass; accumulates into `.grad` of reachable leaves."""
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without explicit grad needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

        def backward(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

    elif a.data.ndim == 2 and b.data.ndim == 1:
        if a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

        def backward(g):
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)

    elif a.data.ndim == 1 and b.data.ndim == 2:
        if a.data.shape[0] != b.data.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

        def backward(g):
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))

    else:
        raise ValueError(f"unsupported matmul ranks: {a.data.ndim} @ {b.data.ndim}")
    return _result(a.data @ b.data, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


def tensor_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _result(data, (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    data = x.data.mean(axis=axis)

    def backward(g):
        scaled = g / count
        if axis is None:
            _accumulate(x, np.broadcast_to(scaled, x.data.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(scaled, axis), x.data.shape).copy())

    return _result(data, (x,), backward)


def scatter_max(x) -> tuple[Tensor, np.ndarray]:
    """Channel-wise max over rows of an (n, d) tensor.

    Returns the pooled (d,) tensor and the winning row per channel (lowest
    row on ties); the backward pass routes each channel's gradient only to
    its winning row.
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ValueError(f"scatter_max expects a non-empty (n, d) tensor, got {x.data.shape}")
    argmax = np.argmax(x.data, axis=0)
    cols = np.arange(x.data.shape[1])
    data = x.data[argmax, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (argmax, cols), g)
        _accumulate(x, gx)

    return _result(data, (x,), backward), argmax


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) for a 1-d tensor, unit output for any nonzero input."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ValueError("l2_normalize expects a 1-d tensor")
    norm = float(np.linalg.norm(x.data))
    denom = max(norm, eps)
    out = x.data / denom

    def backward(g):
        if norm > eps:
            _accumulate(x, (g - out * (out @ g)) / denom)
        else:
            _accumulate(x, g / denom)

    return _result(out, (x,), backward)


def euclidean_distance(a, b, eps: float = 1e-12) -> Tensor:
    """||a - b|| of two 1-d tensors, with a subgradient of 0 at coincidence."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    dist = float(np.linalg.norm(diff))
    direction = diff / max(dist, eps)

    def backward(g):
        _accumulate(a, g * direction)
        _accumulate(b, -g * direction)

    return _result(np.float64(dist), (a, b), backward)


# ---------------------------------------------------------------------------
# graph convolution
# ---------------------------------------------------------------------------

@dataclass
class TagConvParams:
    """Per-hop weight matrices (k = 0..hops, including the identity term) and bias."""

    theta: list[Tensor]
    bias: Tensor
    hops: int

    def __post_init__(self):
        if len(self.theta) != self.hops + 1:
            raise ValueError(f"expected {self.hops + 1} hop matrices, got {len(self.theta)}")
        shape = self.theta[0].data.shape
        for th in self.theta:
            if th.data.shape != shape:
                raise ValueError("hop matrices must share one shape")
        if self.bias.data.shape != (shape[1],):
            raise ValueError(f"bias shape {self.bias.data.shape} != ({shape[1]},)")

    @property
    def in_dim(self) -> int:
        return self.theta[0].data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.theta[0].data.shape[1]

    def parameters(self) -> list[Tensor]:
        return [*self.theta, self.bias]


def tag_conv(params: TagConvParams, x, propagation: np.ndarray) -> Tensor:
    """sum_k M^k X Theta_k + bias, with M the normalized propagation matrix.

    Powers are applied by repeated multiplication with M; M itself carries no
    gradient (graph structure is fixed).
    """
    x = as_tensor(x)
    m = np.asarray(propagation, dtype=np.float64)
    n = x.data.shape[0]
    if x.data.ndim != 2 or x.data.shape[1] != params.in_dim:
        raise ValueError(f"node features {x.data.shape} incompatible with "
                         f"({params.in_dim} -> {params.out_dim}) conv")
    if m.shape != (n, n):
        raise ValueError(f"propagation matrix {m.shape} does not match {n} nodes")
    hops = params.hops
    propagated = [x.data]
    for _ in range(hops):
        propagated.append(m @ propagated[-1])
    out = propagated[0] @ params.theta[0].data
    for k in range(1, hops + 1):
        out = out + propagated[k] @ params.theta[k].data
    out = out + params.bias.data

    def backward(g):
        for k, th in enumerate(params.theta):
            _accumulate(th, propagated[k].T @ g)
        _accumulate(params.bias, g.sum(axis=0))
        if x.requires_grad:
            acc = g @ params.theta[hops].data.T
            for k in range(hops - 1, -1, -1):
                acc = g @ params.theta[k].data.T + m.T @ acc
            _accumulate(x, acc)

    return _result(out, (x, *params.theta, params.bias), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences (mean, not sum)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def triplet_ratio_loss(desc_ref, desc_pos, desc_neg, margin: float = 1.0,
                       eps: float = 1e-12) -> Tensor:
    """d(r,p) / (d(r,p) + margin * d(r,n) + eps); always in [0, 1]."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    d_pos = euclidean_distance(desc_ref, desc_pos)
    d_neg = euclidean_distance(desc_ref, desc_neg)
    denom = add(add(d_pos, mul(d_neg, as_tensor(margin))), as_tensor(eps))
    return div(d_pos, denom)


def stack_mean(terms: list[Tensor]) -> Tensor:
    """Mean of scalar tensors (batch reduction)."""
    if not terms:
        raise ValueError("stack_mean of empty list")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return div(total, as_tensor(float(len(terms))))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; `t` is the 1-based step count."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a fixed parameter list, with save/restore for resumable runs."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self._m[i], self._v[i] = adam_step(
                p.data, grad, self._m[i], self._v[i], self.t,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": [m.copy() for m in self._m],
                "v": [v.copy() for v in self._v]}

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        self._m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self._v = [np.array(v, dtype=np.float64) for v in state["v"]]
        for m, p in zip(self._m, self.params):
            if m.shape != p.data.shape:
                raise ValueError("optimizer state shape mismatch")
