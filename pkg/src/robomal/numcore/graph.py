"""Computation graph: a closed set of operations with hand-written backward passes.

A :class:`Graph` is an append-only tape of nodes. Node ids are list indices,
so inputs always precede consumers and one reverse sweep visits every node
exactly once. Graphs are built once per model and re-evaluated with fresh
bindings each training step; all intermediate values live on the graph
between ``evaluate`` and ``gradients`` (single-threaded per graph).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import recurrent


class GraphError(Exception):
    """Malformed graph or misuse of the evaluate/gradients protocol."""


class ShapeMismatch(GraphError):
    """Operand shapes incompatible for the node's operation."""


class UnboundInput(GraphError):
    """A named input or parameter was not supplied to evaluate()."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    trainable: bool = False


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind in "iub":
        return arr
    return np.ascontiguousarray(arr, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5*tanh(x/2) + 0.5 is exact and stable in both tails
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Graph:
    """Append-only operation tape. Methods return the new node's id."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._values: list[np.ndarray | None] = []
        self._caches: list[Any] = []
        self._evaluated = False

    def _add(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node {len(self.nodes)} ({node.kind}): bad input id {i}")
        self.nodes.append(node)
        self._values.append(None)
        self._caches.append(None)
        return len(self.nodes) - 1

    # -- leaves ------------------------------------------------------------

    def input(self, name: str) -> int:
        return self._add(Node("input", name=name))

    def parameter(self, name: str, trainable: bool = True) -> int:
        return self._add(Node("parameter", name=name, trainable=trainable))

    # -- arithmetic ---------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        return self._add(Node("matmul", (a, b)))

    def add(self, a: int, b: int) -> int:
        return self._add(Node("add", (a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._add(Node("mul", (a, b)))

    def relu(self, a: int) -> int:
        return self._add(Node("relu", (a,)))

    def sigmoid(self, a: int) -> int:
        return self._add(Node("sigmoid", (a,)))

    def tanh(self, a: int) -> int:
        return self._add(Node("tanh", (a,)))

    # -- shape --------------------------------------------------------------

    def concat(self, ids: list[int], axis: int) -> int:
        return self._add(Node("concat", tuple(ids), {"axis": axis}))

    def slice(self, a: int, axis: int, start: int, stop: int) -> int:
        return self._add(Node("slice", (a,), {"axis": axis, "start": start, "stop": stop}))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self._add(Node("reshape", (a,), {"shape": tuple(shape)}))

    # -- layers ---------------------------------------------------------------

    def embedding(self, tokens: int, table: int) -> int:
        return self._add(Node("embedding", (tokens, table)))

    def conv1d(self, x: int, kernels: int) -> int:
        """Valid 1-D convolution, stride 1, channels-last [B, T, C]."""
        return self._add(Node("conv1d", (x, kernels)))

    def maxpool1d(self, x: int, width: int) -> int:
        return self._add(Node("maxpool1d", (x,), {"width": width}))

    def adaptive_maxpool1d(self, x: int, out_len: int) -> int:
        return self._add(Node("adaptive_maxpool1d", (x,), {"out_len": out_len}))

    def batchnorm1d(self, x: int, scale: int, shift: int, running_mean: int,
                    running_var: int, momentum: float = 0.1, eps: float = 1e-5) -> int:
        return self._add(Node(
            "batchnorm1d", (x, scale, shift, running_mean, running_var),
            {"momentum": momentum, "eps": eps}))

    def dropout(self, x: int, p: float) -> int:
        if not 0.0 <= p < 1.0:
            raise GraphError(f"dropout probability {p} outside [0, 1)")
        return self._add(Node("dropout", (x,), {"p": p}))

    def bce_with_logits(self, logits: int, labels: int) -> int:
        return self._add(Node("bce_with_logits", (logits, labels)))

    def bilstm(self, tokens: int, lengths: int, table: int,
               wx_f: int, wh_f: int, b_f: int,
               wx_b: int, wh_b: int, b_b: int, hidden: int) -> int:
        """Bidirectional LSTM over embedded tokens; output is the concatenated
        final hidden states [B, 2*hidden]. Positions at or beyond each sample's
        length never enter the recurrence."""
        return self._add(Node(
            "bilstm", (tokens, lengths, table, wx_f, wh_f, b_f, wx_b, wh_b, b_b),
            {"hidden": hidden}))

    def gru(self, tokens: int, lengths: int, table: int,
            wx: int, wh: int, bx: int, bh: int, hidden: int) -> int:
        """Single-direction GRU over embedded tokens; output is the final
        hidden state [B, hidden]."""
        return self._add(Node("gru", (tokens, lengths, table, wx, wh, bx, bh),
                              {"hidden": hidden}))

    # -- run state ----------------------------------------------------------

    def value(self, node_id: int) -> np.ndarray:
        if not self._evaluated or self._values[node_id] is None:
            raise GraphError("graph has not been evaluated")
        return self._values[node_id]


def _node_label(graph: Graph, i: int) -> str:
    node = graph.nodes[i]
    return f"node {i} ({node.kind}{'' if node.name is None else ' ' + node.name})"


def evaluate(graph: Graph, bindings: dict[str, np.ndarray], mode: str = "eval",
             dropout_seed: int = 0) -> np.ndarray:
    """Run the graph forward and return the last node's value.

    `bindings` supplies every input and parameter by name. `mode` is "train"
    or "eval"; dropout and batch norm change behavior between the two, and
    batch norm running statistics are updated in place (on the bound arrays)
    in train mode. Identical graph, bindings, mode and dropout_seed produce
    bit-identical outputs.
    """
    if mode not in ("train", "eval"):
        raise GraphError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not graph.nodes:
        raise GraphError("empty graph")
    values = graph._values
    caches = graph._caches
    for i, node in enumerate(graph.nodes):
        args = [values[j] for j in node.inputs]
        try:
            if node.kind in ("input", "parameter"):
                if node.name not in bindings:
                    raise UnboundInput(f"{_node_label(graph, i)} is unbound")
                values[i] = _as_f64(bindings[node.name])
                continue
            fwd = _FORWARD[node.kind]
            values[i], caches[i] = fwd(node, args, mode, dropout_seed, i)
        except (ShapeMismatch, UnboundInput):
            raise
        except GraphError:
            raise
        except ValueError as exc:
            raise ShapeMismatch(f"{_node_label(graph, i)}: {exc}") from exc
    graph._evaluated = True
    graph._run_mode = mode
    return values[-1]


def gradients(graph: Graph, output: int | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar output node; returns gradients for every
    trainable parameter, keyed by parameter name, shapes matching."""
    if not graph._evaluated:
        raise GraphError("gradients() requires a prior evaluate()")
    if output is None:
        output = len(graph.nodes) - 1
    out_val = graph._values[output]
    if out_val is None or out_val.size != 1:
        raise GraphError(f"{_node_label(graph, output)} is not a scalar output")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[output] = np.ones_like(out_val)
    for i in range(output, -1, -1):
        node = graph.nodes[i]
        g = grads[i]
        if g is None or node.kind in ("input", "parameter"):
            continue
        bwd = _BACKWARD[node.kind]
        args = [graph._values[j] for j in node.inputs]
        input_grads = bwd(node, args, graph._values[i], graph._caches[i], g)
        for j, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            if grads[j] is None:
                grads[j] = ig
            else:
                grads[j] = grads[j] + ig
    result = {}
    for i, node in enumerate(graph.nodes):
        if node.kind == "parameter" and node.trainable:
            g = grads[i]
            if g is None:
                g = np.zeros_like(graph._values[i])
            result[node.name] = g
    return result


# ---------------------------------------------------------------------------
# forward implementations: (node, args, mode, dropout_seed, node_id) -> (value, cache)
# ---------------------------------------------------------------------------

def _fwd_matmul(node, args, mode, seed, nid):
    a, b = args
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b, None


def _fwd_add(node, args, mode, seed, nid):
    a, b = args
    return a + b, None


def _fwd_mul(node, args, mode, seed, nid):
    a, b = args
    return a * b, None


def _fwd_relu(node, args, mode, seed, nid):
    (a,) = args
    return np.maximum(a, 0.0), None


def _fwd_sigmoid(node, args, mode, seed, nid):
    (a,) = args
    out = _sigmoid(a)
    return out, out


def _fwd_tanh(node, args, mode, seed, nid):
    (a,) = args
    out = np.tanh(a)
    return out, out


def _fwd_concat(node, args, mode, seed, nid):
    axis = node.attrs["axis"]
    return np.concatenate(args, axis=axis), [a.shape[axis] for a in args]


def _fwd_slice(node, args, mode, seed, nid):
    (a,) = args
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeMismatch(
            f"slice [{start}:{stop}] outside axis {axis} of extent {a.shape[axis]}")
    idx = [np.s_[:]] * a.ndim
    idx[axis] = np.s_[start:stop]
    return a[tuple(idx)].copy(), None


def _fwd_reshape(node, args, mode, seed, nid):
    (a,) = args
    return a.reshape(node.attrs["shape"]), None


def _fwd_embedding(node, args, mode, seed, nid):
    tokens, table = args
    if tokens.dtype.kind not in "iu":
        raise GraphError("embedding expects integer token ids")
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise GraphError(
            f"token id outside table of {table.shape[0]} rows")
    return table[tokens], None


def _fwd_conv1d(node, args, mode, seed, nid):
    x, w = args
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d needs [B,T,C] and [Cout,Cin,K], got {x.shape}, {w.shape}")
    b, t, c_in = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv1d channel mismatch: input {c_in}, kernel {c_in_w}")
    if t < k:
        raise ShapeMismatch(f"conv1d input length {t} shorter than kernel {k}")
    t_out = t - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)  # [B,To,C,K]
    cols = windows.reshape(b * t_out, c_in * k)
    w_mat = w.reshape(c_out, c_in * k)
    y = (cols @ w_mat.T).reshape(b, t_out, c_out)
    return y, cols


def _fwd_maxpool1d(node, args, mode, seed, nid):
    (x,) = args
    width = node.attrs["width"]
    b, t, c = x.shape
    t_out = t // width
    if t_out == 0:
        raise ShapeMismatch(f"maxpool1d width {width} exceeds length {t}")
    xw = x[:, : t_out * width].reshape(b, t_out, width, c)
    arg = xw.argmax(axis=2)
    y = np.take_along_axis(xw, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return y, arg


def _fwd_adaptive_maxpool1d(node, args, mode, seed, nid):
    (x,) = args
    out_len = node.attrs["out_len"]
    b, t, c = x.shape
    if t < out_len:
        raise ShapeMismatch(f"adaptive pool to {out_len} needs length >= {out_len}, got {t}")
    starts = (np.arange(out_len) * t) // out_len
    ends = -((np.arange(1, out_len + 1) * t) // -out_len)  # ceil division
    y = np.empty((b, out_len, c))
    arg = np.empty((b, out_len, c), dtype=np.intp)
    for i in range(out_len):
        seg = x[:, starts[i]:ends[i], :]
        a = seg.argmax(axis=1)
        arg[:, i, :] = a + starts[i]
        y[:, i, :] = np.take_along_axis(seg, a[:, None, :], axis=1)[:, 0, :]
    return y, arg


def _fwd_batchnorm1d(node, args, mode, seed, nid):
    x, scale, shift, run_mean, run_var = args
    eps = node.attrs["eps"]
    momentum = node.attrs["momentum"]
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        n = x.size // x.shape[-1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        # running stats use the unbiased variance, normalization the biased one
        run_mean *= 1.0 - momentum
        run_mean += momentum * mean
        run_var *= 1.0 - momentum
        run_var += momentum * (var * (n / max(n - 1, 1)))
    else:
        mean, var = run_mean, run_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std, mode)


def _fwd_dropout(node, args, mode, seed, nid):
    (x,) = args
    p = node.attrs["p"]
    if mode == "eval" or p == 0.0:
        return x, None
    if isinstance(seed, (tuple, list)):
        entropy = (*seed, nid)
    else:
        entropy = (seed, nid)
    rng = np.random.default_rng(entropy)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _fwd_bce_with_logits(node, args, mode, seed, nid):
    z, y = args
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {z.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise GraphError("labels must be 0 or 1")
    # mean of max(z,0) - z*y + log(1 + exp(-|z|)); exact for large |z|
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return np.asarray(per.mean()), (z, y)


def _fwd_bilstm(node, args, mode, seed, nid):
    tokens, lengths, table, wx_f, wh_f, b_f, wx_b, wh_b, b_b = args
    hidden = node.attrs["hidden"]
    ws = node.attrs.setdefault("_workspace", recurrent._Workspace())
    return recurrent.bilstm_forward(
        tokens, lengths, table, (wx_f, wh_f, b_f), (wx_b, wh_b, b_b), hidden,
        workspace=ws)


def _fwd_gru(node, args, mode, seed, nid):
    tokens, lengths, table, wx, wh, bx, bh = args
    hidden = node.attrs["hidden"]
    ws = node.attrs.setdefault("_workspace", recurrent._Workspace())
    return recurrent.gru_forward(tokens, lengths, table, wx, wh, bx, bh, hidden,
                                 workspace=ws)


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "relu": _fwd_relu,
    "sigmoid": _fwd_sigmoid,
    "tanh": _fwd_tanh,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "reshape": _fwd_reshape,
    "embedding": _fwd_embedding,
    "conv1d": _fwd_conv1d,
    "maxpool1d": _fwd_maxpool1d,
    "adaptive_maxpool1d": _fwd_adaptive_maxpool1d,
    "batchnorm1d": _fwd_batchnorm1d,
    "dropout": _fwd_dropout,
    "bce_with_logits": _fwd_bce_with_logits,
    "bilstm": _fwd_bilstm,
    "gru": _fwd_gru,
}


# ---------------------------------------------------------------------------
# backward implementations: (node, args, value, cache, grad) -> per-input grads
# ---------------------------------------------------------------------------

def _bwd_matmul(node, args, value, cache, g):
    a, b = args
    return g @ b.T, a.T @ g


def _bwd_add(node, args, value, cache, g):
    a, b = args
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_mul(node, args, value, cache, g):
    a, b = args
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_relu(node, args, value, cache, g):
    (a,) = args
    return (g * (a > 0.0),)


def _bwd_sigmoid(node, args, value, cache, g):
    s = cache
    return (g * s * (1.0 - s),)


def _bwd_tanh(node, args, value, cache, g):
    t = cache
    return (g * (1.0 - t * t),)


def _bwd_concat(node, args, value, cache, g):
    axis = node.attrs["axis"]
    sizes = cache
    splits = np.cumsum(sizes[:-1])
    return tuple(np.array_split(g, splits, axis=axis))


def _bwd_slice(node, args, value, cache, g):
    (a,) = args
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    out = np.zeros_like(a)
    idx = [np.s_[:]] * a.ndim
    idx[axis] = np.s_[start:stop]
    out[tuple(idx)] = g
    return (out,)


def _bwd_reshape(node, args, value, cache, g):
    (a,) = args
    return (g.reshape(a.shape),)


def _bwd_embedding(node, args, value, cache, g):
    tokens, table = args
    vocab, dim = table.shape
    flat_tok = tokens.ravel()
    flat_g = g.reshape(-1, dim)
    d_table = np.empty_like(table)
    for e in range(dim):
        d_table[:, e] = np.bincount(flat_tok, weights=flat_g[:, e], minlength=vocab)
    return None, d_table


def _bwd_conv1d(node, args, value, cache, g):
    x, w = args
    cols = cache
    b, t, c_in = x.shape
    c_out, _, k = w.shape
    t_out = t - k + 1
    g_flat = g.reshape(b * t_out, c_out)
    w_mat = w.reshape(c_out, c_in * k)
    dw = (g_flat.T @ cols).reshape(c_out, c_in, k)
    dcols = (g_flat @ w_mat).reshape(b, t_out, c_in, k)
    dx = np.zeros_like(x)
    for kk in range(k):
        dx[:, kk:kk + t_out, :] += dcols[:, :, :, kk]
    return dx, dw


def _bwd_maxpool1d(node, args, value, cache, g):
    (x,) = args
    width = node.attrs["width"]
    arg = cache
    b, t, c = x.shape
    t_out = t // width
    dxw = np.zeros((b, t_out, width, c))
    np.put_along_axis(dxw, arg[:, :, None, :], g[:, :, None, :], axis=2)
    dx = np.zeros_like(x)
    dx[:, : t_out * width] = dxw.reshape(b, t_out * width, c)
    return (dx,)


def _bwd_adaptive_maxpool1d(node, args, value, cache, g):
    (x,) = args
    arg = cache
    b, out_len, c = g.shape
    dx = np.zeros_like(x)
    bidx = np.arange(b)[:, None, None]
    cidx = np.arange(c)[None, None, :]
    np.add.at(dx, (bidx, arg, cidx), g)
    return (dx,)


def _bwd_batchnorm1d(node, args, value, cache, g):
    x, scale, shift, run_mean, run_var = args
    xhat, inv_std, run_mode = cache
    axes = tuple(range(x.ndim - 1))
    d_scale = (g * xhat).sum(axis=axes)
    d_shift = g.sum(axis=axes)
    if run_mode == "eval":
        return g * scale * inv_std, d_scale, d_shift, None, None
    n = x.size // x.shape[-1]
    dxhat = g * scale
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, d_scale, d_shift, None, None


def _bwd_dropout(node, args, value, cache, g):
    mask = cache
    if mask is None:
        return (g,)
    return (g * mask,)


def _bwd_bce_with_logits(node, args, value, cache, g):
    z, y = cache
    dz = (_sigmoid(z) - y) * (float(g) / z.size)
    return dz, None


def _bwd_bilstm(node, args, value, cache, g):
    d_table, dwf, dwb = recurrent.bilstm_backward(cache, g)
    return (None, None, d_table, *dwf, *dwb)


def _bwd_gru(node, args, value, cache, g):
    d_table, dwx, dwh, dbx, dbh = recurrent.gru_backward(cache, g)
    return None, None, d_table, dwx, dwh, dbx, dbh


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "mul": _bwd_mul,
    "relu": _bwd_relu,
    "sigmoid": _bwd_sigmoid,
    "tanh": _bwd_tanh,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "reshape": _bwd_reshape,
    "embedding": _bwd_embedding,
    "conv1d": _bwd_conv1d,
    "maxpool1d": _bwd_maxpool1d,
    "adaptive_maxpool1d": _bwd_adaptive_maxpool1d,
    "batchnorm1d": _bwd_batchnorm1d,
    "dropout": _bwd_dropout,
    "bce_with_logits": _bwd_bce_with_logits,
    "bilstm": _bwd_bilstm,
    "gru": _bwd_gru,
}
