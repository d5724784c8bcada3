"""Dense reverse-mode autodiff over numpy arrays, two toy architectures and SGD.

Every operation builds a node holding its output array and a closure that
pushes the upstream gradient to its parents.  ``backward`` walks the graph in
reverse topological order.  All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError, TaslError

_GELU_C = math.sqrt(2.0 / math.pi)
_NORM_EPS = 1e-6


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents: tuple[Tensor, ...] = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar node; leaf grads end up in ``.grad``."""
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out.backward_fn = backward_fn
    return out


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    out = Tensor(a.data + c, (a,))
    out.backward_fn = lambda g: a._accumulate(_unbroadcast(g, a.shape))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, (a,))
    out.backward_fn = lambda g: a._accumulate(g * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def backward_fn(g):
        a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if a.data.ndim > 2 and b.data.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
        else:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out.backward_fn = backward_fn
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask, (a,))
    out.backward_fn = lambda g: a._accumulate(g * mask)
    return out


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), (a,))

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner))

    out.backward_fn = backward_fn
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (a,))
    out.backward_fn = lambda g: a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return out


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """Scale-only RMS normalisation over the last axis (T5-style layer norm)."""
    r = 1.0 / np.sqrt(np.mean(x.data**2, axis=-1, keepdims=True) + _NORM_EPS)
    n = x.data * r
    out = Tensor(n * gain.data, (x, gain))

    def backward_fn(g):
        gain._accumulate(_unbroadcast(g * n, gain.shape))
        dn = g * gain.data
        x._accumulate(r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True)))

    out.backward_fn = backward_fn
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes), (a,))
    out.backward_fn = lambda g: a._accumulate(np.transpose(g, inv))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    out = Tensor(table.data[ids], (table,))

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(gt)

    out.backward_fn = backward_fn
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of a (N, C) logit matrix."""
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, targets])
    out = Tensor(loss, (logits,))

    def backward_fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        logits._accumulate(p * (float(g) / n))

    out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture + init seed.

    ``mlp`` uses ``layer_sizes``; ``tiny-transformer`` uses ``d_model``,
    ``heads``, ``ff``, ``blocks``, ``classes`` and ``vocab`` (defaults to
    ``classes`` when 0).
    """

    kind: str = "mlp"
    layer_sizes: tuple[int, ...] = ()
    d_model: int = 0
    heads: int = 0
    ff: int = 0
    blocks: int = 0
    classes: int = 0
    vocab: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.kind == "tiny-transformer" and self.vocab == 0:
            object.__setattr__(self, "vocab", self.classes)

    @classmethod
    def mlp(cls, layer_sizes: Sequence[int], seed: int = 0) -> ArchDescriptor:
        return cls(kind="mlp", layer_sizes=tuple(layer_sizes), seed=seed)

    @classmethod
    def transformer(cls, d_model: int, heads: int, ff: int, blocks: int, classes: int,
                    vocab: int = 0, seed: int = 0) -> ArchDescriptor:
        return cls(kind="tiny-transformer", d_model=d_model, heads=heads, ff=ff, blocks=blocks,
                   classes=classes, vocab=vocab, seed=seed)

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1] if self.kind == "mlp" else self.classes

    def validate(self) -> None:
        if self.kind == "mlp":
            if len(self.layer_sizes) < 2:
                raise ConfigError("mlp needs at least two layer sizes")
            if min(self.layer_sizes) < 1:
                raise ConfigError("mlp layer sizes must be >= 1")
        elif self.kind == "tiny-transformer":
            dims = (self.d_model, self.heads, self.ff, self.blocks, self.classes, self.vocab)
            if min(dims) < 1:
                raise ConfigError("transformer dims must all be >= 1")
            if self.d_model % self.heads:
                raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        else:
            raise ConfigError(f"unknown architecture kind {self.kind!r}")


@dataclass
class Batch:
    """Float features ``[batch, features]`` with class ids, or token ids
    ``[batch, seq]`` with per-token labels."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.targets.ndim == 2:
            self.inputs = np.asarray(self.inputs, dtype=np.int64)
        else:
            self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise ShapeError("batch inputs must be a non-empty 2-D array")
        if len(self.targets) != len(self.inputs):
            raise ShapeError("inputs and targets disagree on batch size")

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.inputs[idx], self.targets[idx])

    @staticmethod
    def concat(batches: Sequence[Batch]) -> Batch:
        return Batch(np.concatenate([b.inputs for b in batches]),
                     np.concatenate([b.targets for b in batches]))


class Model:
    """Ordered collection of named ParamTensors plus the descriptor that built them."""

    def __init__(self, arch: ArchDescriptor, params: Sequence[ParamTensor]):
        self.arch = arch
        self.params: dict[str, ParamTensor] = {}
        for p in params:
            if not p.name:
                raise ConfigError("parameter tensors must be named")
            if p.name in self.params:
                raise ConfigError(f"duplicate tensor name {p.name!r}")
            self.params[p.name] = p
        self._tape: tuple | None = None

    def __getitem__(self, name: str) -> ParamTensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((p.name, p.shape) for p in self.params.values())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self.params.values()])

    def copy(self) -> Model:
        return Model(self.arch, [ParamTensor(p.name, p.values.copy(), p.grad.copy())
                                 for p in self.params.values()])

    def with_values(self, values: dict[str, np.ndarray]) -> Model:
        """New model with the same layout and the given tensor values."""
        return Model(self.arch, [ParamTensor(n, np.array(values[n], dtype=np.float64))
                                 for n in self.params])


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def transformer_tensor_names(blocks: int) -> list[str]:
    names = ["embed"]
    for i in range(blocks):
        names += [f"block{i}.{part}" for part in
                  ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.wi", "mlp.wo", "norm1", "norm2")]
    return names + ["head"]


def init_model(arch: ArchDescriptor) -> Model:
    """Weights ~ U(+-sqrt(6/(fan_in+fan_out))); biases 0; norm gains 1."""
    arch.validate()
    rng = np.random.default_rng(arch.seed)
    params: list[ParamTensor] = []
    if arch.kind == "mlp":
        sizes = arch.layer_sizes
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            params.append(ParamTensor(f"layer{i}.weight", _uniform(rng, fi, fo)))
            params.append(ParamTensor(f"layer{i}.bias", np.zeros(fo)))
        return Model(arch, params)

    d, f = arch.d_model, arch.ff
    params.append(ParamTensor("embed", _uniform(rng, arch.vocab, d)))
    for i in range(arch.blocks):
        for part in ("q", "k", "v", "o"):
            params.append(ParamTensor(f"block{i}.attn.{part}", _uniform(rng, d, d)))
        params.append(ParamTensor(f"block{i}.mlp.wi", _uniform(rng, d, f)))
        params.append(ParamTensor(f"block{i}.mlp.wo", _uniform(rng, f, d)))
        params.append(ParamTensor(f"block{i}.norm1", np.ones(d)))
        params.append(ParamTensor(f"block{i}.norm2", np.ones(d)))
    params.append(ParamTensor("head", _uniform(rng, d, arch.classes)))
    return Model(arch, params)


def positional_encoding(seq_len: int, d: int) -> np.ndarray:
    """Fixed sinusoidal position table (not trainable)."""
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _check_batch(model: Model, batch: Batch) -> None:
    arch = model.arch
    if arch.kind == "mlp":
        if batch.targets.ndim != 1 or batch.inputs.shape[1] != arch.layer_sizes[0]:
            raise ShapeError(f"mlp expects [batch, {arch.layer_sizes[0]}] features with class ids, "
                             f"got inputs {batch.inputs.shape} targets {batch.targets.shape}")
    else:
        if batch.targets.shape != batch.inputs.shape:
            raise ShapeError("transformer expects token ids and per-token labels of equal shape")
        if batch.inputs.min() < 0 or batch.inputs.max() >= arch.vocab:
            raise ShapeError(f"token id out of range for vocab {arch.vocab}")
    if batch.targets.min() < 0 or batch.targets.max() >= arch.num_classes:
        raise ShapeError(f"label id out of range for {arch.num_classes} classes")


def _logits(model: Model, batch: Batch, leaves: dict[str, Tensor]) -> Tensor:
    arch = model.arch
    if arch.kind == "mlp":
        h = Tensor(batch.inputs)
        n_layers = len(arch.layer_sizes) - 1
        for i in range(n_layers):
            h = h @ leaves[f"layer{i}.weight"] + leaves[f"layer{i}.bias"]
            if i < n_layers - 1:
                h = relu(h)
        return h

    bsz, seq = batch.inputs.shape
    d, nh = arch.d_model, arch.heads
    dh = d // nh
    x = add_const(embedding(leaves["embed"], batch.inputs), positional_encoding(seq, d))
    for i in range(arch.blocks):
        p = f"block{i}."
        hn = rms_norm(x, leaves[p + "norm1"])

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (bsz, seq, nh, dh)), (0, 2, 1, 3))

        q = heads(hn @ leaves[p + "attn.q"])
        k = heads(hn @ leaves[p + "attn.k"])
        v = heads(hn @ leaves[p + "attn.v"])
        att = softmax(scale(q @ transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)))
        o = reshape(transpose(att @ v, (0, 2, 1, 3)), (bsz, seq, d))
        x = x + o @ leaves[p + "attn.o"]
        hn = rms_norm(x, leaves[p + "norm2"])
        x = x + gelu(hn @ leaves[p + "mlp.wi"]) @ leaves[p + "mlp.wo"]
    return reshape(x @ leaves["head"], (bsz * seq, arch.classes))


def forward_loss(model: Model, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and argmax predictions; records the graph for ``backward``."""
    _check_batch(model, batch)
    leaves = {name: Tensor(p.values) for name, p in model.params.items()}
    logits = _logits(model, batch, leaves)
    loss = cross_entropy(logits, batch.targets.reshape(-1))
    preds = logits.data.argmax(axis=1).reshape(batch.targets.shape)
    model._tape = (loss, leaves, batch)
    return float(loss.data), preds


def predict(model: Model, batch: Batch) -> np.ndarray:
    _, preds = forward_loss(model, batch)
    model._tape = None
    return preds


def backward(model: Model, batch: Batch) -> None:
    """Overwrite every ParamTensor.grad with d(loss)/d(param) for the last forward pass."""
    if model._tape is None or model._tape[2] is not batch:
        raise TaslError("backward() requires forward_loss() on the same batch first")
    loss, leaves, _ = model._tape
    model._tape = None
    loss.backward()
    for name, p in model.params.items():
        g = leaves[name].grad
        p.grad = np.zeros_like(p.values) if g is None else g


def loss_and_grad(model: Model, batch: Batch) -> float:
    loss, _ = forward_loss(model, batch)
    backward(model, batch)
    return loss


def sgd_step(model: Model, lr: float) -> None:
    """In-place ``w <- w - lr * g``; refuses to write non-finite values."""
    updates = {}
    for name, p in model.params.items():
        new = p.values - lr * p.grad
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"sgd step produced non-finite values in {name}")
        updates[name] = new
    for name, new in updates.items():
        model.params[name].values = new
