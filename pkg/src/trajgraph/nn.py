"""Neural-net building blocks on top of the autodiff core.

Parameters live in a :class:`ParamStore` keyed by dotted names with
deterministic (insertion) iteration order, which is what the checkpoint
format and the optimizer rely on. Layers are thin classes that register
their parameters at construction time and stay stateless afterwards apart
from batch-norm running statistics, which are non-trainable buffers in the
same store so they persist through checkpoints.

Batch statistics can be restricted to a subset of rows via a float mask;
the encoder uses this to keep unused diagonal (self-pair) rows out of the
normalization statistics.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import DArray
from .errors import ContractError, ShapeError
from .rng import RngStream

Activation = str | None

_ACTIVATIONS = {
    None: lambda x: x,
    "elu": ad.elu,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


class ParamStore:
    """Named map from dotted keys to DArrays; insertion order is stable."""

    def __init__(self):
        self._items: dict[str, DArray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> DArray:
        if name in self._items:
            raise ContractError(f"duplicate parameter name: {name}")
        arr = DArray(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self._items[name] = arr
        self._trainable[name] = trainable
        return arr

    def __getitem__(self, name: str) -> DArray:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def keys(self):
        return self._items.keys()

    def items(self):
        return self._items.items()

    def trainable_items(self):
        return ((k, v) for k, v in self._items.items() if self._trainable[k])

    def n_values(self) -> int:
        return sum(v.size for v in self._items.values())

    def zero_grad(self):
        for v in self._items.values():
            v.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        """Restore values in place so existing layer references stay valid."""
        for k, v in self._items.items():
            if k not in state:
                if strict:
                    raise ContractError(f"checkpoint missing parameter: {k}")
                continue
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != v.data.shape:
                raise ShapeError(
                    f"parameter {k}: checkpoint shape {src.shape} != {v.data.shape}"
                )
            v.data[...] = src


def gradients(loss: DArray, store: ParamStore) -> dict[str, np.ndarray]:
    """Run backward from a scalar loss and collect per-parameter gradients.

    Parameters that did not contribute to the loss get zero gradients. The
    store's grad buffers are cleared afterwards so each optimizer step sees
    exactly one backward pass.
    """
    loss.backward()
    out = {}
    for name, p in store.trainable_items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    store.zero_grad()
    return out


def _uniform_init(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: DArray, w: DArray, b: DArray | None = None) -> DArray:
    """x @ w (+ b) over the last axis, flattened to a single 2D GEMM.

    Keeping the matmul two-dimensional keeps the weight gradient a plain
    a.T @ g instead of a batched stack that must be reduced afterwards.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x if x.ndim == 2 else x.reshape(-1, x.shape[-1])
    out = x2 @ w
    if b is not None:
        out = out + b
    return out if x.ndim == 2 else out.reshape(lead + (w.shape[-1],))


class Affine:
    """y = x @ W + b over the last axis."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng: RngStream):
        self.n_in = n_in
        self.n_out = n_out
        self.W = store.add(f"{name}.W", _uniform_init(rng, (n_in, n_out), n_in))
        self.b = store.add(f"{name}.b", _uniform_init(rng, (n_out,), n_in))

    def __call__(self, x: DArray) -> DArray:
        return linear(x, self.W, self.b)


class BatchNorm:
    """Per-feature batch normalization over all leading axes.

    Train mode normalizes with (optionally masked) batch statistics and
    advances the running buffers; eval mode uses the running statistics
    only. The mode is always an explicit argument.
    """

    def __init__(self, store: ParamStore, name: str, n_features: int,
                 momentum: float = 0.9, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = store.add(f"{name}.gamma", np.ones(n_features))
        self.beta = store.add(f"{name}.beta", np.zeros(n_features))
        self.run_mean = store.add(f"{name}.run_mean", np.zeros(n_features), trainable=False)
        self.run_var = store.add(f"{name}.run_var", np.ones(n_features), trainable=False)

    def __call__(self, x: DArray, train: bool, mask: np.ndarray | None = None) -> DArray:
        if train:
            axes = tuple(range(x.ndim - 1))
            if mask is None:
                mean = x.mean(axis=axes, keepdims=True)
                var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
            else:
                m = DArray(mask)
                count = float(mask.sum())
                if count < 2:
                    raise ContractError("batch norm needs at least 2 rows of statistics")
                mean = (x * m).sum(axis=axes, keepdims=True) / count
                var = (((x - mean) ** 2) * m).sum(axis=axes, keepdims=True) / count
            mom = self.momentum
            self.run_mean.data[...] = mom * self.run_mean.data + (1 - mom) * mean.data.reshape(-1)
            self.run_var.data[...] = mom * self.run_var.data + (1 - mom) * var.data.reshape(-1)
            xn = (x - mean) / ((var + self.eps) ** 0.5)
        else:
            xn = (x - self.run_mean) / ((self.run_var + DArray(self.eps)) ** 0.5)
        return self.gamma * xn + self.beta


def mlp_init(store: ParamStore, prefix: str, n_in: int,
             layer_spec: list[tuple[int, Activation, bool]], rng: RngStream):
    """Register parameters for an MLP described by (width, activation, norm)."""
    d = n_in
    for i, (width, _act, norm) in enumerate(layer_spec):
        Affine(store, f"{prefix}.{i}", d, width, rng)
        if norm:
            BatchNorm(store, f"{prefix}.{i}.bn", width)
        d = width


def mlp_forward(x: DArray, layer_spec: list[tuple[int, Activation, bool]],
                store: ParamStore, prefix: str, train: bool = True,
                mask: np.ndarray | None = None) -> DArray:
    """Apply an MLP previously registered under `prefix`.

    Each layer runs affine -> activation -> batch norm, matching the
    (width, activation, normalize) triples in `layer_spec`.
    """
    if store[f"{prefix}.0.W"].shape[0] != x.shape[-1]:
        raise ShapeError(
            f"mlp {prefix}: input last dim {x.shape[-1]} != "
            f"{store[f'{prefix}.0.W'].shape[0]}"
        )
    for i, (width, act, norm) in enumerate(layer_spec):
        x = linear(x, store[f"{prefix}.{i}.W"], store[f"{prefix}.{i}.b"])
        x = _ACTIVATIONS[act](x)
        if norm:
            bn_prefix = f"{prefix}.{i}.bn"
            if train:
                axes = tuple(range(x.ndim - 1))
                if mask is None:
                    mean = x.mean(axis=axes, keepdims=True)
                    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
                else:
                    m = DArray(mask)
                    count = float(mask.sum())
                    mean = (x * m).sum(axis=axes, keepdims=True) / count
                    var = (((x - mean) ** 2) * m).sum(axis=axes, keepdims=True) / count
                rm, rv = store[f"{bn_prefix}.run_mean"], store[f"{bn_prefix}.run_var"]
                rm.data[...] = 0.9 * rm.data + 0.1 * mean.data.reshape(-1)
                rv.data[...] = 0.9 * rv.data + 0.1 * var.data.reshape(-1)
                x = (x - mean) / ((var + 1e-5) ** 0.5)
            else:
                x = (x - store[f"{bn_prefix}.run_mean"]) / (
                    (store[f"{bn_prefix}.run_var"] + DArray(1e-5)) ** 0.5
                )
            x = store[f"{bn_prefix}.gamma"] * x + store[f"{bn_prefix}.beta"]
    return x


class MLP:
    """Configured multi-layer perceptron bound to a ParamStore prefix."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int,
                 layer_spec: list[tuple[int, Activation, bool]], rng: RngStream):
        self.store = store
        self.prefix = prefix
        self.layer_spec = list(layer_spec)
        mlp_init(store, prefix, n_in, self.layer_spec, rng)

    def __call__(self, x: DArray, train: bool = True,
                 mask: np.ndarray | None = None) -> DArray:
        return mlp_forward(x, self.layer_spec, self.store, self.prefix, train, mask)


def gru_cell(x: DArray, h: DArray, store: ParamStore, prefix: str) -> DArray:
    """Standard GRU update with reset/update gates.

    Gate blocks are stored as (reset, update, candidate) slices of the
    fused weight matrices.
    """
    W_ih, W_hh = store[f"{prefix}.W_ih"], store[f"{prefix}.W_hh"]
    b_ih, b_hh = store[f"{prefix}.b_ih"], store[f"{prefix}.b_hh"]
    H = W_hh.shape[0]
    if h.shape[-1] != H:
        raise ShapeError(f"gru {prefix}: hidden width {h.shape[-1]} != {H}")
    if x.shape[-1] != W_ih.shape[0]:
        raise ShapeError(f"gru {prefix}: input width {x.shape[-1]} != {W_ih.shape[0]}")
    gi = linear(x, W_ih, b_ih)
    gh = linear(h, W_hh, b_hh)
    r = ad.sigmoid(gi[..., 0:H] + gh[..., 0:H])
    z = ad.sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    n = ad.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - z) * n + z * h


class GRUCell:
    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_hidden: int,
                 rng: RngStream):
        self.store = store
        self.prefix = prefix
        self.n_hidden = n_hidden
        store.add(f"{prefix}.W_ih", _uniform_init(rng, (n_in, 3 * n_hidden), n_in))
        store.add(f"{prefix}.W_hh", _uniform_init(rng, (n_hidden, 3 * n_hidden), n_hidden))
        store.add(f"{prefix}.b_ih", _uniform_init(rng, (3 * n_hidden,), n_in))
        store.add(f"{prefix}.b_hh", _uniform_init(rng, (3 * n_hidden,), n_hidden))

    def __call__(self, x: DArray, h: DArray) -> DArray:
        return gru_cell(x, h, self.store, self.prefix)


class GRUStack:
    """Stacked GRU cells; layer i feeds its new hidden state to layer i+1."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_hidden: int,
                 n_layers: int, rng: RngStream):
        self.n_hidden = n_hidden
        self.n_layers = n_layers
        self.cells = []
        d = n_in
        for i in range(n_layers):
            self.cells.append(GRUCell(store, f"{prefix}.l{i}", d, n_hidden, rng))
            d = n_hidden

    def init_state(self, lead_shape: tuple) -> list[DArray]:
        return [DArray(np.zeros(lead_shape + (self.n_hidden,))) for _ in self.cells]

    def __call__(self, x: DArray, state: list[DArray]) -> tuple[DArray, list[DArray]]:
        new_state = []
        inp = x
        for cell, h in zip(self.cells, state):
            h_new = cell(inp, h)
            new_state.append(h_new)
            inp = h_new
        return inp, new_state


def softmax(x: DArray, axis: int = -1) -> DArray:
    """Numerically stable softmax; rows sum to 1 up to float64 rounding."""
    shift = ad.reduce_max(x, axis=axis, keepdims=True).detach()
    z = ad.exp(x - shift)
    return z / z.sum(axis=axis, keepdims=True)
