"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` remembers the operation that produced it; calling ``backward`` on
a scalar replays the recorded graph in reverse topological order. On top of
this sit multilayer perceptrons, Adam, the log-sum-exp / softmax cross-entropy
kernels used by the losses, and a small checksummed checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"PCQL-ARRAYS\n"
CHECKPOINT_SCHEMA_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    pass


class ChecksumError(IOError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(data, op=op)
        dead = tuple(p for p in parents if not p.requires_grad)
        if dead:
            # parents frozen at construction stay frozen even if the flag is restored before backward
            inner = backward

            def backward(g):
                saved = [p.requires_grad for p in dead]
                for p in dead:
                    p.requires_grad = False
                try:
                    inner(g)
                finally:
                    for p, s in zip(dead, saved):
                        p.requires_grad = s

        return Tensor(data, True, parents, backward, op)

    # -- graph traversal -----------------------------------------------------
    def topological_order(self) -> list["Tensor"]:
        """Nodes reachable from ``self`` that require gradients, inputs first."""
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is detached from every parameter; nothing to differentiate")
        order = self.topological_order()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # intermediate buffers are not needed once propagated

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g), "neg")

    def __sub__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out / other.data, other.shape))

        return Tensor._make(out, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")

        def bw(g):
            self._accumulate(g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), bw, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {self.shape} @ {other.shape}")

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw, "matmul")

    def __getitem__(self, idx):
        out = self.data[idx]

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._make(out, (self,), bw, "getitem")

    # -- reductions ------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(out, (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: self._accumulate(g.reshape(self.shape)), "reshape"
        )

    # -- elementwise nonlinearities ------------------------------------------
    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: self._accumulate(g * mask), "relu")

    def sigmoid(self):
        out = _stable_sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: self._accumulate(g * out * (1.0 - out)), "sigmoid")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: self._accumulate(g * out), "exp")

    def log(self):
        if np.any(self.data <= 0):
            raise NonFiniteError("log of a nonpositive value")
        return Tensor._make(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data), "log")

    def square(self):
        return Tensor._make(self.data**2, (self,), lambda g: self._accumulate(2.0 * g * self.data), "square")

    def norm(self, axis: int = -1):
        """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
        out = np.sqrt((self.data**2).sum(axis=axis))
        safe = np.where(out > 0, out, 1.0)

        def bw(g):
            scale = np.where(out > 0, g / safe, 0.0)
            self._accumulate(np.expand_dims(scale, axis) * self.data)

        return Tensor._make(out, (self,), bw, "norm")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, op="param")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(out, tuple(ts), bw, "concat")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), bw, "minimum")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(g * soft)

    return Tensor._make(out if keepdims else np.squeeze(out, axis=axis), (x,), bw, "logsumexp")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (x,), bw, "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (x,), bw, "softmax")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits_p, logits_q, tau: float) -> Tensor:
    """Batch-mean of ``-softmax(p/tau) . log softmax(q/tau)`` over the last axis.

    Pass a detached ``logits_p`` to treat the first distribution as a target.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits_p, logits_q = as_tensor(logits_p), as_tensor(logits_q)
    if logits_p.shape != logits_q.shape:
        raise ShapeError(f"logit shapes differ: {logits_p.shape} vs {logits_q.shape}")
    p = softmax(logits_p * (1.0 / tau))
    logq = log_softmax(logits_q * (1.0 / tau))
    per_row = -(p * logq).sum(axis=-1)
    return per_row.mean() if per_row.ndim else per_row


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

ACTIVATIONS = ("identity", "sigmoid", "relu")


class Mlp:
    """Dense network with ReLU hidden layers.

    ``widths`` lists every layer size including input and output, e.g.
    ``[20, 256, 256, 1]``. ``output`` is the activation of the last layer.
    """

    def __init__(self, widths: Sequence[int], output: str = "identity", rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least an input and an output width")
        if output not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {output!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = [int(w) for w in widths]
        self.output = output
        self.params: list[Tensor] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.params.append(parameter(np.zeros(fan_out)))

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params)

    def _check_input(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input of shape (batch, {self.widths[0]}), got {x.shape}")

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        self._check_input(x.data)
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            x = x @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                x = x.relu()
        return _apply_output(x, self.output)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on raw arrays without recording a graph."""
        x = np.asarray(x, dtype=DTYPE)
        self._check_input(x)
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            x = x @ self.params[2 * i].data + self.params[2 * i + 1].data
            if i < n_layers - 1:
                x = np.maximum(x, 0.0)
        if self.output == "sigmoid":
            return _stable_sigmoid(x)
        if self.output == "relu":
            return np.maximum(x, 0.0)
        return _check_finite(x, "Mlp.predict")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.output = self.output
        clone.params = [parameter(p.data) for p in self.params]
        return clone

    def load_values(self, values: Sequence[np.ndarray]):
        if len(values) != len(self.params):
            raise ShapeError("parameter count mismatch")
        for p, v in zip(self.params, values):
            if p.data.shape != np.shape(v):
                raise ShapeError(f"parameter shape mismatch: {p.data.shape} vs {np.shape(v)}")
            p.data = np.array(v, dtype=DTYPE, copy=True)


def _apply_output(x: Tensor, output: str) -> Tensor:
    if output == "sigmoid":
        return x.sigmoid()
    if output == "relu":
        return x.relu()
    return x


def soft_update(target: Mlp, source: Mlp, rate: float):
    """target <- (1 - rate) * target + rate * source, in place."""
    if not 0 < rate <= 1:
        raise ValueError("soft update rate must be in (0, 1]")
    for t, s in zip(target.params, source.params):
        t.data = (1.0 - rate) * t.data + rate * s.data


def grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad**2))
    return float(np.sqrt(sq))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns (new_params, state); ``state`` is updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to Adam")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new_params, state


class Adam:
    """Adam over one or more parameter groups.

    ``groups`` is either a list of tensors or a list of ``{"params": [...], "lr": x}``
    dicts; every group keeps its own moments and step count.
    """

    def __init__(self, groups, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        groups = list(groups)
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": groups}]
        self.groups: list[list[Tensor]] = []
        self.states: list[AdamState] = []
        for grp in groups:
            params = list(grp["params"])
            self.groups.append(params)
            self.states.append(
                AdamState.zeros_like(
                    [p.data for p in params],
                    learning_rate=float(grp.get("lr", lr)),
                    beta1=betas[0],
                    beta2=betas[1],
                    epsilon=eps,
                )
            )

    @property
    def params(self) -> list[Tensor]:
        return [p for grp in self.groups for p in grp]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for params, state in zip(self.groups, self.states):
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            new, _ = adam_step([p.data for p in params], grads, state)
            for p, v in zip(params, new):
                p.data = v


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. every entry of ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)  # roundoff floor for exactly-zero gradients
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values and be
    deterministic (freeze any sampled quantities outside of it).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        num = numerical_gradient(lambda: loss_fn().item(), p, eps)
        worst = max(worst, relative_error(a, num))
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------


def save_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]):
    """Write ``arrays`` (float64, little endian, insertion order) plus a JSON header.

    The payload digest is stored in the header and verified on load, so a file
    round-trips bit-exactly or fails loudly.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = dict(header)
    head["schema_version"] = head.get("schema_version", CHECKPOINT_SCHEMA_VERSION)
    head["arrays"] = entries
    head["sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(head, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob)
        fh.write(payload)


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ChecksumError(f"{path} is not a checkpoint file")
        header = json.loads(fh.readline())
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"checksum mismatch in {path}")
    arrays = {}
    for e in header.pop("arrays"):
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(DTYPE)
    return header, arrays


def mlp_arrays(net: Mlp, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i}": p.data for i, p in enumerate(net.params)}


def mlp_from_arrays(widths: Sequence[int], output: str, arrays: dict[str, np.ndarray], prefix: str) -> Mlp:
    net = Mlp(widths, output)
    net.load_values([arrays[f"{prefix}.{i}"] for i in range(len(net.params))])
    return net


def save_mlp(path: str | Path, net: Mlp):
    save_arrays(path, {"kind": "mlp", "widths": net.widths, "output": net.output}, mlp_arrays(net, "net"))


def load_mlp(path: str | Path) -> Mlp:
    header, arrays = load_arrays(path)
    if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ChecksumError(f"unsupported checkpoint schema {header.get('schema_version')}")
    return mlp_from_arrays(header["widths"], header["output"], arrays, "net")
