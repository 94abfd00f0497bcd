"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every value is carried by a :class:`Tensor` wrapping a C-contiguous
``numpy`` float64 array. Operations build a define-by-run tape; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every participating tensor that requires them.

Matrix products go through ``np.einsum(optimize=False)`` rather than BLAS:
einsum evaluates each output element with a fixed summation order, so a
batched forward pass is bit-identical to running the same samples one by
one. The model layer relies on that equivalence.
"""

from __future__ import annotations

import numpy as np

EPS_LOG = 1e-12  # additive guard inside cross-entropy logs

ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid", "softmax")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised when a gradient is requested or consumed where none exists."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array participating in the gradient tape.

    `data` is immutable by convention once the tensor has been used in an
    op; optimizers mutate parameter data in place only between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward_fn=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- introspection -------------------------------------------------

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- tape ----------------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._parents != ()

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Repeated calls without clearing grads accumulate, matching the
        usual multi-loss convention.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if not parent._tracked():
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- elementwise arithmetic ----------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        out = Tensor(a.data + b.data, _parents=(a, b),
                     _backward_fn=lambda g: (_unbroadcast(g, a.shape),
                                             _unbroadcast(g, b.shape)))
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor(-a.data, _parents=(a,), _backward_fn=lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return Tensor(a.data * b.data, _parents=(a, b),
                      _backward_fn=lambda g: (_unbroadcast(g * b.data, a.shape),
                                              _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        a, b = self, other
        return Tensor(a.data / b.data, _parents=(a, b),
                      _backward_fn=lambda g: (_unbroadcast(g / b.data, a.shape),
                                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    # -- elementwise functions -----------------------------------------

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return Tensor(t, _parents=(self,), _backward_fn=lambda g: (g * (1.0 - t * t),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor(np.where(mask, self.data, 0.0), _parents=(self,),
                      _backward_fn=lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        s = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor(s, _parents=(self,), _backward_fn=lambda g: (g * s * (1.0 - s),))

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor(e, _parents=(self,), _backward_fn=lambda g: (g * e,))

    def log(self) -> "Tensor":
        return Tensor(np.log(self.data), _parents=(self,),
                      _backward_fn=lambda g: (g / self.data,))

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor(np.abs(self.data), _parents=(self,),
                      _backward_fn=lambda g: (g * sign,))

    # -- shape and reduction ---------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor(self.data.reshape(shape), _parents=(self,),
                      _backward_fn=lambda g: (g.reshape(old),))

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return Tensor(out, _parents=(self,), _backward_fn=back)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis`; gradient splits back to the operands."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    extents = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + extents)

    def back(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor(out, _parents=tuple(tensors), _backward_fn=back)


def take_columns(x: Tensor, idx) -> Tensor:
    """Select columns `idx` of a 2-d tensor; gradient scatters back."""
    if x.ndim != 2:
        raise DimensionError(f"take_columns needs a 2-d tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return Tensor(x.data[:, idx], _parents=(x,), _backward_fn=back)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; rows land on the simplex."""
    ax = axis if axis >= 0 else logits.ndim + axis
    if not 0 <= ax < logits.ndim or logits.shape[ax] == 0:
        raise DimensionError(f"softmax axis {axis} invalid for shape {logits.shape}")
    shifted = logits.data - logits.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, _parents=(logits,), _backward_fn=back)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W^T + b for x (n, in), W (out, in), b (out,).

    einsum keeps the per-element summation order independent of the batch
    extent, which makes batched and single-sample forwards bit-identical.
    """
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weights shape {weights.shape}")
    out = np.einsum("ni,oi->no", x.data, weights.data, optimize=False) + bias.data

    def back(g):
        gx = np.einsum("no,oi->ni", g, weights.data, optimize=False)
        gw = np.einsum("no,ni->oi", g, x.data, optimize=False)
        gb = g.sum(axis=0)
        return (gx, gw, gb)

    return Tensor(out, _parents=(x, weights, bias), _backward_fn=back)


class DenseLayer:
    """Fully connected layer: activation(x @ W^T + b)."""

    def __init__(self, weights: Tensor, bias: Tensor, activation: str = "identity",
                 name: str = ""):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        if weights.ndim != 2 or bias.ndim != 1 or weights.shape[0] != bias.shape[0]:
            raise DimensionError(
                f"layer weights {weights.shape} and bias {bias.shape} are inconsistent")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.name = name

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return forward_dense(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int,
               activation: str = "identity", name: str = "") -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = Tensor(rng.uniform(-limit, limit, size=(out_dim, in_dim)),
               requires_grad=True, name=f"{name}.weights" if name else "weights")
    b = Tensor(np.zeros(out_dim), requires_grad=True,
               name=f"{name}.bias" if name else "bias")
    return DenseLayer(w, b, activation, name=name)


def forward_dense(layer: DenseLayer, x: Tensor) -> Tensor:
    """Run one dense layer. Softmax activation normalizes the last axis."""
    pre = linear(x, layer.weights, layer.bias)
    if layer.activation == "identity":
        return pre
    if layer.activation == "tanh":
        return pre.tanh()
    if layer.activation == "relu":
        return pre.relu()
    if layer.activation == "sigmoid":
        return pre.sigmoid()
    return softmax(pre, axis=-1)


# -- losses -------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} does not match shape {b.shape}")


def per_sample_mae(y_pred: Tensor, y_true: Tensor) -> Tensor:
    """Mean absolute error per row of a (n, d) batch, shape (n,)."""
    _check_same_shape(y_pred, y_true, "per_sample_mae")
    return (y_pred - y_true).abs().mean(axis=1)


def loss_mae(y_pred: Tensor, y_true: Tensor) -> Tensor:
    """Mean absolute error over all elements (scalar)."""
    _check_same_shape(y_pred, y_true, "loss_mae")
    return (y_pred - y_true).abs().mean()


def per_sample_cross_entropy(probs: Tensor, targets: Tensor) -> Tensor:
    """Categorical cross-entropy per row: -sum target * log(prob + eps)."""
    _check_same_shape(probs, targets, "per_sample_cross_entropy")
    if np.any(probs.data < 0):
        raise ValueError("cross-entropy needs non-negative probabilities")
    return -((probs + EPS_LOG).log() * targets).sum(axis=1)


def loss_cross_entropy(probs: Tensor, targets: Tensor) -> Tensor:
    """Batch-mean categorical cross-entropy (scalar)."""
    return per_sample_cross_entropy(probs, targets).mean()


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss tensor."""
    loss.backward()


# -- optimizers ----------------------------------------------------------

class Optimizer:
    """SGD or Adam over an explicit parameter list.

    Moment state is keyed by position in the list, so the same parameter
    order must be used on every step. Gradients are left in place; the
    caller clears them (see :func:`clear_grads`).
    """

    def __init__(self, kind: str = "adam", learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}; expected 'sgd' or 'adam'")
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor]) -> None:
        optimizer_step(self, params)


def optimizer_step(opt: Optimizer, params: list[Tensor]) -> None:
    """Apply one update to every parameter; every grad must be present."""
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"parameter #{i}"
            raise GradientError(f"optimizer_step: {label} has no gradient")
    if opt.kind == "sgd":
        for p in params:
            p.data -= opt.learning_rate * p.grad
        return
    if opt._m is None:
        opt._m = [np.zeros_like(p.data) for p in params]
        opt._v = [np.zeros_like(p.data) for p in params]
    if len(opt._m) != len(params):
        raise GradientError(
            f"optimizer_step: got {len(params)} parameters, state holds {len(opt._m)}")
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for i, p in enumerate(params):
        opt._m[i] = opt.beta1 * opt._m[i] + (1.0 - opt.beta1) * p.grad
        opt._v[i] = opt.beta2 * opt._v[i] + (1.0 - opt.beta2) * (p.grad * p.grad)
        m_hat = opt._m[i] / bc1
        v_hat = opt._v[i] / bc2
        p.data -= opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)


def clear_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- verification helper ---------------------------------------------------

def finite_difference_grads(loss_fn, params: list[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of `loss_fn()` w.r.t. each parameter.

    `loss_fn` must re-run the full forward pass and return a float; it is
    the independent oracle against which tape gradients are checked.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn()
            flat[j] = orig - step
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor for near-zeros."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(diff / scale)) if diff.size else 0.0
