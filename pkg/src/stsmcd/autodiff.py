"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are float64 numpy arrays. While a Graph is active (``with Graph():``)
every primitive appends a node to its tape; the tape order is a topological
order by construction, and ``Graph.backward`` walks it in exact reverse, so
gradient accumulation order is deterministic and runs are bit-reproducible.

A recorded graph can be replayed with fresh leaf data (``Graph.run``), which
is what the finite-difference checker uses. Data-dependent index choices
(sort orders, label gathers) are frozen into node attributes at record time,
so a replay probes the same piecewise branch the analytic gradient lives on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ssm import pscan, pscan_shifted_reverse, zoh_input_factor, zoh_input_factor_grads


class ShapeMismatch(ValueError):
    pass


class NumericFault(ArithmeticError):
    """A forward pass produced NaN or Inf."""


class GraphError(RuntimeError):
    pass


class NonDifferentiableError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: dict
    idx: int


@dataclass
class OpDef:
    forward: Callable  # (node) -> ndarray
    backward: Callable | None  # (node, gout) -> sequence of ndarray|None per input


OPS: dict[str, OpDef] = {}


def register_op(kind: str, forward, backward):
    OPS[kind] = OpDef(forward, backward)


_STACK: list["Graph"] = []


def _active() -> "Graph | None":
    return _STACK[-1] if _STACK else None


class Graph:
    """Tape of primitive applications, replayable and reverse-differentiable."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._produced: set[int] = set()
        self._needs: set[int] = set()

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def leaves(self) -> dict[str, Tensor]:
        """Named tensors consumed by the tape but not produced by it."""
        out: dict[str, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if id(t) not in self._produced and t.name is not None:
                    out.setdefault(t.name, t)
        return out

    def named_outputs(self) -> dict[str, Tensor]:
        return {n.output.name: n.output for n in self.nodes if n.output.name is not None}

    def run(self, inputs: dict | None = None) -> dict[str, Tensor]:
        """Re-execute every node in order, optionally rebinding named leaves."""
        if inputs:
            leaves = self.leaves()
            for name, value in inputs.items():
                if name not in leaves:
                    raise GraphError(f"graph has no input named '{name}'")
                arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
                if arr.shape != leaves[name].data.shape:
                    raise ShapeMismatch(
                        f"input '{name}': expected shape {leaves[name].data.shape}, got {arr.shape}"
                    )
                leaves[name].data = arr
        for node in self.nodes:
            data = OPS[node.kind].forward(node)
            if self.check_finite and not np.all(np.isfinite(data)):
                raise NumericFault(f"non-finite output at node {node.idx} ({node.kind})")
            node.output.data = data
        return self.named_outputs()

    def backward(self, seed: Tensor, cotangent=None, into: dict | None = None):
        """Accumulate d(seed)/d(leaf) into every requires_grad leaf.

        Traversal is the exact reverse of the tape, so accumulation order is
        fixed. Repeated calls accumulate; callers zero grads explicitly.
        ``into`` redirects accumulation to a dict keyed by id(tensor), which
        batch workers use so the shared accumulators stay untouched.
        """
        if id(seed) not in self._produced:
            raise GraphError("backward seed was not produced by this graph")
        ct = np.ones_like(seed.data) if cotangent is None else np.asarray(cotangent, dtype=np.float64)
        if ct.shape != seed.data.shape:
            raise ShapeMismatch(f"cotangent shape {ct.shape} != seed shape {seed.data.shape}")
        flowing: dict[int, np.ndarray] = {id(seed): ct.copy()}
        for node in reversed(self.nodes):
            g = flowing.pop(id(node.output), None)
            if g is None:
                continue
            op = OPS[node.kind]
            if op.backward is None:
                raise NonDifferentiableError(
                    f"node {node.idx} ({node.kind}) has no backward rule"
                )
            gs = op.backward(node, g)
            claimed: set[int] = set()
            for t, gi in zip(node.inputs, gs):
                if gi is None:
                    continue
                if t.requires_grad:
                    if into is None:
                        t.grad += gi
                    else:
                        key = id(t)
                        if key in into:
                            into[key] = into[key] + gi
                        else:
                            into[key] = np.array(gi, dtype=np.float64)
                elif id(t) in self._needs and id(t) in self._produced:
                    if id(t) in flowing:
                        flowing[id(t)] += gi
                    elif (
                        gi.flags.owndata
                        and gi.flags.writeable
                        and gi.dtype == np.float64
                        and id(gi) not in claimed
                    ):
                        # fresh array: adopt it as the accumulator
                        flowing[id(t)] = gi
                        claimed.add(id(gi))
                    else:
                        # views (np.split, broadcast_to) and shared arrays get copied
                        flowing[id(t)] = np.array(gi, dtype=np.float64)

    def nondifferentiable_nodes(self) -> list[Node]:
        return [
            n
            for n in self.nodes
            if OPS[n.kind].backward is None and id(n.output) in self._needs
        ]


def apply_op(kind: str, inputs, **attrs) -> Tensor:
    node = Node(kind, tuple(inputs), None, attrs, {}, -1)
    graph = _active()
    data = OPS[kind].forward(node)
    if graph is not None and graph.check_finite and not np.all(np.isfinite(data)):
        raise NumericFault(f"non-finite output at node {len(graph.nodes)} ({kind})")
    out = Tensor(data)
    node.output = out
    if graph is not None:
        node.idx = len(graph.nodes)
        graph.nodes.append(node)
        graph._produced.add(id(out))
        if any(t.requires_grad or id(t) in graph._needs for t in node.inputs):
            graph._needs.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))  # exp of a non-positive value, never overflows
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# --- elementwise and linear algebra kinds -------------------------------------------------

register_op(
    "add",
    lambda n: n.inputs[0].data + n.inputs[1].data,
    lambda n, g: (
        _unbroadcast(g, n.inputs[0].data.shape),
        _unbroadcast(g, n.inputs[1].data.shape),
    ),
)

register_op(
    "sub",
    lambda n: n.inputs[0].data - n.inputs[1].data,
    lambda n, g: (
        _unbroadcast(g, n.inputs[0].data.shape),
        -_unbroadcast(g, n.inputs[1].data.shape),
    ),
)

register_op(
    "mul",
    lambda n: n.inputs[0].data * n.inputs[1].data,
    lambda n, g: (
        _unbroadcast(g * n.inputs[1].data, n.inputs[0].data.shape),
        _unbroadcast(g * n.inputs[0].data, n.inputs[1].data.shape),
    ),
)

register_op(
    "scale",
    lambda n: n.inputs[0].data * n.attrs["c"],
    lambda n, g: (g * n.attrs["c"],),
)

register_op(
    "exp",
    lambda n: np.exp(n.inputs[0].data),
    lambda n, g: (g * n.output.data,),
)


def _log_fwd(n):
    x = n.inputs[0].data
    floor = n.attrs.get("floor")
    return np.log(x if floor is None else np.maximum(x, floor))


def _log_bwd(n, g):
    x = n.inputs[0].data
    floor = n.attrs.get("floor")
    if floor is None:
        return (g / x,)
    return (np.where(x > floor, g / np.maximum(x, floor), 0.0),)


register_op("log", _log_fwd, _log_bwd)

register_op(
    "softplus",
    lambda n: np.logaddexp(0.0, n.inputs[0].data),
    lambda n, g: (g * _sigmoid(n.inputs[0].data),),
)


def _silu_bwd(n, g):
    s = _sigmoid(n.inputs[0].data)
    return (g * s * (1.0 + n.inputs[0].data * (1.0 - s)),)


register_op("silu", lambda n: n.inputs[0].data * _sigmoid(n.inputs[0].data), _silu_bwd)


def _softmax_fwd(n):
    x = n.inputs[0].data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(n, g):
    y = n.output.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


register_op("softmax", _softmax_fwd, _softmax_bwd)


def _layer_norm_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _layer_norm_fwd(n):
    x, scale_, shift = (t.data for t in n.inputs)
    xhat, _ = _layer_norm_stats(x, n.attrs["eps"])
    return xhat * scale_ + shift


def _layer_norm_bwd(n, g):
    x, scale_, _ = (t.data for t in n.inputs)
    xhat, inv = _layer_norm_stats(x, n.attrs["eps"])
    lead = tuple(range(g.ndim - 1))
    gscale = (g * xhat).sum(axis=lead)
    gshift = g.sum(axis=lead)
    gh = g * scale_
    gx = inv * (
        gh
        - gh.mean(axis=-1, keepdims=True)
        - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, gscale, gshift


register_op("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def _linear_fwd(n):
    x, w = n.inputs[0].data, n.inputs[1].data
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w
    if len(n.inputs) == 3:
        y = y + n.inputs[2].data
    return y


def _linear_bwd(n, g):
    x, w = n.inputs[0].data, n.inputs[1].data
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    if len(n.inputs) == 3:
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gw


register_op("linear", _linear_fwd, _linear_bwd)


def _dir_linear_fwd(n):
    # x: (L, K, i), w: (K, i, o) -> (L, K, o), one weight set per scan direction
    x, w = n.inputs[0].data, n.inputs[1].data
    y = np.matmul(x[:, :, None, :], w[None])[:, :, 0, :]
    if len(n.inputs) == 3:
        y = y + n.inputs[2].data
    return y


def _dir_linear_bwd(n, g):
    x, w = n.inputs[0].data, n.inputs[1].data
    gx = np.matmul(g[:, :, None, :], w.transpose(0, 2, 1)[None])[:, :, 0, :]
    gw = np.matmul(x.transpose(1, 2, 0), g.transpose(1, 0, 2))
    if len(n.inputs) == 3:
        return gx, gw, g.sum(axis=0)
    return gx, gw


register_op("dir_linear", _dir_linear_fwd, _dir_linear_bwd)


# --- shape manipulation kinds --------------------------------------------------------------


def _concat_bwd(n, g):
    axis = n.attrs["axis"]
    sizes = [t.data.shape[axis] for t in n.inputs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


register_op(
    "concat",
    lambda n: np.concatenate([t.data for t in n.inputs], axis=n.attrs["axis"]),
    _concat_bwd,
)


def _slice_bwd(n, g):
    gx = np.zeros_like(n.inputs[0].data)
    gx[n.attrs["key"]] = g
    return (gx,)


register_op("slice", lambda n: n.inputs[0].data[n.attrs["key"]].copy(), _slice_bwd)

register_op(
    "reshape",
    lambda n: n.inputs[0].data.reshape(n.attrs["shape"]),
    lambda n, g: (g.reshape(n.inputs[0].data.shape),),
)

register_op(
    "transpose",
    lambda n: n.inputs[0].data.transpose(n.attrs["axes"]).copy(),
    lambda n, g: (g.transpose(tuple(np.argsort(n.attrs["axes"]))),),
)


def _upsample_fwd(n):
    f = n.attrs["factor"]
    return n.inputs[0].data.repeat(f, axis=0).repeat(f, axis=1)


def _upsample_bwd(n, g):
    f = n.attrs["factor"]
    h, w = n.inputs[0].data.shape[:2]
    rest = g.shape[2:]
    return (g.reshape(h, f, w, f, *rest).sum(axis=(1, 3)),)


register_op("upsample_nearest", _upsample_fwd, _upsample_bwd)


def _reduce_bwd_shape(x, axis):
    shape = list(x.shape)
    if axis is None:
        return [1] * x.ndim
    for ax in axis if isinstance(axis, tuple) else (axis,):
        shape[ax] = 1
    return shape


def _reduce_sum_bwd(n, g):
    x = n.inputs[0].data
    return (np.broadcast_to(g.reshape(_reduce_bwd_shape(x, n.attrs["axis"])), x.shape).copy(),)


def _reduce_mean_bwd(n, g):
    x = n.inputs[0].data
    count = x.size // n.output.data.size
    return (
        np.broadcast_to(g.reshape(_reduce_bwd_shape(x, n.attrs["axis"])), x.shape) / count,
    )


register_op(
    "reduce_sum", lambda n: n.inputs[0].data.sum(axis=n.attrs["axis"]), _reduce_sum_bwd
)
register_op(
    "reduce_mean", lambda n: n.inputs[0].data.mean(axis=n.attrs["axis"]), _reduce_mean_bwd
)


# --- gather/scatter by index ---------------------------------------------------------------


def _gather_rows_bwd(n, g):
    gx = np.zeros_like(n.inputs[0].data)
    np.add.at(gx, n.attrs["idx"], g)
    return (gx,)


register_op(
    "gather_rows", lambda n: n.inputs[0].data[n.attrs["idx"]].copy(), _gather_rows_bwd
)


def _select_class_fwd(n):
    p = n.inputs[0].data
    idx = n.attrs["idx"]
    return p[np.arange(p.shape[0]), idx].copy()


def _select_class_bwd(n, g):
    p = n.inputs[0].data
    gx = np.zeros_like(p)
    gx[np.arange(p.shape[0]), n.attrs["idx"]] = g
    return (gx,)


register_op("select_class", _select_class_fwd, _select_class_bwd)


def _scan_gather_fwd(n):
    # x: (HW, C), perms: (K, HW) -> sequences (HW, K, C)
    return n.inputs[0].data[n.attrs["perms"]].transpose(1, 0, 2).copy()


def _scan_gather_bwd(n, g):
    inv = n.attrs["inv_perms"]
    gx = np.zeros_like(n.inputs[0].data)
    for k in range(inv.shape[0]):
        gx += g[inv[k], k, :]
    return (gx,)


register_op("scan_gather", _scan_gather_fwd, _scan_gather_bwd)


def _scan_scatter_fwd(n):
    # y: (HW, K, C) -> (HW, C); each direction scattered back then summed
    y = n.inputs[0].data
    inv = n.attrs["inv_perms"]
    out = np.zeros((y.shape[0], y.shape[2]), dtype=np.float64)
    for k in range(inv.shape[0]):
        out += y[inv[k], k, :]
    return out


def _scan_scatter_bwd(n, g):
    perms = n.attrs["perms"]
    gy = np.empty_like(n.inputs[0].data)
    for k in range(perms.shape[0]):
        gy[:, k, :] = g[perms[k]]
    return (gy,)


register_op("scan_scatter", _scan_scatter_fwd, _scan_scatter_bwd)

register_op(
    "argmax",
    lambda n: np.argmax(n.inputs[0].data, axis=n.attrs["axis"]).astype(np.float64),
    None,
)


# --- convolution kinds ---------------------------------------------------------------------


def _pad_hw(x):
    return np.pad(x, ((1, 1), (1, 1)) + ((0, 0),) * (x.ndim - 2))


def _dwconv3_fwd(n):
    x, w = n.inputs[0].data, n.inputs[1].data
    if x.shape[-1] != w.shape[-1]:
        raise ShapeMismatch(f"depthwise_conv3x3: {x.shape[-1]} channels vs kernel {w.shape[-1]}")
    xp = _pad_hw(x)
    h, wd = x.shape[:2]
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += w[i, j] * xp[i : i + h, j : j + wd]
    if len(n.inputs) == 3:
        out = out + n.inputs[2].data
    return out


def _dwconv3_bwd(n, g):
    x, w = n.inputs[0].data, n.inputs[1].data
    xp = _pad_hw(x)
    h, wd = x.shape[:2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(3):
        for j in range(3):
            gxp[i : i + h, j : j + wd] += g * w[i, j]
            gw[i, j] = (g * xp[i : i + h, j : j + wd]).sum(axis=(0, 1))
    gx = gxp[1:-1, 1:-1]
    if len(n.inputs) == 3:
        return gx, gw, g.sum(axis=(0, 1))
    return gx, gw


register_op("depthwise_conv3x3", _dwconv3_fwd, _dwconv3_bwd)


def _conv3_fwd(n):
    # x: (H, W, Ci), w: (3, 3, Ci, Co), stride 1, zero pad 1
    x, w = n.inputs[0].data, n.inputs[1].data
    if x.shape[-1] != w.shape[2]:
        raise ShapeMismatch(f"conv3x3: {x.shape[-1]} channels vs kernel {w.shape[2]}")
    xp = _pad_hw(x)
    h, wd = x.shape[:2]
    out = np.zeros(x.shape[:2] + (w.shape[3],))
    for i in range(3):
        for j in range(3):
            out += xp[i : i + h, j : j + wd] @ w[i, j]
    if len(n.inputs) == 3:
        out = out + n.inputs[2].data
    return out


def _conv3_bwd(n, g):
    x, w = n.inputs[0].data, n.inputs[1].data
    xp = _pad_hw(x)
    h, wd = x.shape[:2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    g2 = g.reshape(-1, g.shape[-1])
    for i in range(3):
        for j in range(3):
            gxp[i : i + h, j : j + wd] += g @ w[i, j].T
            patch = xp[i : i + h, j : j + wd].reshape(-1, w.shape[2])
            gw[i, j] = patch.T @ g2
    gx = gxp[1:-1, 1:-1]
    if len(n.inputs) == 3:
        return gx, gw, g.sum(axis=(0, 1))
    return gx, gw


register_op("conv3x3", _conv3_fwd, _conv3_bwd)


def _patchify(x, k):
    h, w, c = x.shape
    return (
        x.reshape(h // k, k, w // k, k, c).transpose(0, 2, 1, 3, 4).reshape(h // k, w // k, k * k * c)
    )


def _strided_conv_fwd(n):
    # k x k patches at stride k projected by w: (k*k*Ci, Co)
    x, w = n.inputs[0].data, n.inputs[1].data
    k = n.attrs["k"]
    h, wd, c = x.shape
    if h % k or wd % k:
        raise ShapeMismatch(f"strided_conv: spatial {h}x{wd} not divisible by {k}")
    if k * k * c != w.shape[0]:
        raise ShapeMismatch(f"strided_conv: patch dim {k * k * c} != weight rows {w.shape[0]}")
    out = _patchify(x, k) @ w
    if len(n.inputs) == 3:
        out = out + n.inputs[2].data
    return out


def _strided_conv_bwd(n, g):
    x, w = n.inputs[0].data, n.inputs[1].data
    k = n.attrs["k"]
    h, wd, c = x.shape
    xr = _patchify(x, k)
    gxr = g @ w.T
    gx = (
        gxr.reshape(h // k, wd // k, k, k, c).transpose(0, 2, 1, 3, 4).reshape(h, wd, c)
    )
    gw = xr.reshape(-1, xr.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    if len(n.inputs) == 3:
        return gx, gw, g.sum(axis=(0, 1))
    return gx, gw


register_op("strided_conv", _strided_conv_fwd, _strided_conv_bwd)


# --- fused selective scan ------------------------------------------------------------------
#
# Composing the recurrence from per-step nodes makes the tape (and the finite
# difference suite) explode with sequence length, so the scan is one primitive
# with a hand-derived backward. Forward runs the associative prefix scan; the
# backward adjoint is the same recurrence with time reversed and the decay
# coefficients shifted one step.


def _scan_coeffs(n):
    u, delta, b, _, a = (t.data for t in n.inputs[:5])
    da = np.exp(delta[..., None] * a[None])  # (L, K, D, N)
    if n.attrs["mode"] == "euler":
        w = np.broadcast_to(delta[..., None], da.shape)
        dbu = np.einsum("lkd,lkn,lkd->lkdn", delta, b, u, optimize=False)
    else:
        w = delta[..., None] * zoh_input_factor(delta[..., None] * a[None])
        dbu = w * np.einsum("lkn,lkd->lkdn", b, u, optimize=False)
    return da, w, dbu


def _selective_scan_fwd(n):
    u, delta, b, c = (t.data for t in n.inputs[:4])
    if delta.shape != u.shape:
        raise ShapeMismatch(f"selective_scan: delta shape {delta.shape} != input {u.shape}")
    if np.any(delta <= 0):
        raise ValueError("selective_scan: delta must be strictly positive")
    da, w, dbu = _scan_coeffs(n)
    h = pscan(da, dbu)
    n.saved["h"] = h
    n.saved["da"] = da
    n.saved["w"] = w
    y = np.matmul(h, c[:, :, :, None])[..., 0]
    if len(n.inputs) == 6:
        y = y + n.inputs[5].data * u
    return y


def _selective_scan_bwd(n, g):
    u, delta, b, c, a = (t.data for t in n.inputs[:5])
    da, w, h = n.saved["da"], n.saved["w"], n.saved["h"]

    gc = np.matmul(g[:, :, None, :], h)[:, :, 0, :]
    gh = np.einsum("lkd,lkn->lkdn", g, c, optimize=False)
    lam = pscan_shifted_reverse(da, gh)

    # decay-path factor lam_t * h_{t-1} * da_t, with h_0 = 0
    t_da = np.empty_like(da)
    t_da[0] = 0.0
    np.multiply(lam[1:], h[:-1], out=t_da[1:])
    t_da[1:] *= da[1:]

    g_delta = np.einsum("lkdn,kdn->lkd", t_da, a, optimize=False)
    g_a = np.einsum("lkdn,lkd->kdn", t_da, delta, optimize=False)
    if n.attrs["mode"] == "euler":
        lam_b = np.einsum("lkdn,lkn->lkd", lam, b, optimize=False)
        g_u = delta * lam_b
        g_b = np.einsum("lkdn,lkd->lkn", lam, delta * u, optimize=False)
        g_delta += u * lam_b
    else:
        lam_w = lam * w
        g_u = np.einsum("lkdn,lkn->lkd", lam_w, b, optimize=False)
        g_b = np.einsum("lkdn,lkd->lkn", lam_w, u, optimize=False)
        bu = np.einsum("lkn,lkd->lkdn", b, u, optimize=False)
        r = delta[..., None] * a[None]
        dw_ddelta, dw_da = zoh_input_factor_grads(r, delta[..., None])
        g_delta += np.einsum("lkdn,lkdn->lkd", lam * bu, dw_ddelta, optimize=False)
        g_a += np.einsum("lkdn,lkdn->kdn", lam * bu, dw_da, optimize=False)

    if len(n.inputs) == 6:
        skip = n.inputs[5].data
        g_u = g_u + g * skip
        g_skip = (g * u).sum(axis=0)
        return g_u, g_delta, g_b, gc, g_a, g_skip
    return g_u, g_delta, g_b, gc, g_a


register_op("selective_scan", _selective_scan_fwd, _selective_scan_bwd)


# --- thin functional wrappers ---------------------------------------------------------------


def add(a, b):
    return apply_op("add", (a, b))


def sub(a, b):
    return apply_op("sub", (a, b))


def mul(a, b):
    return apply_op("mul", (a, b))


def scale(a, c: float):
    return apply_op("scale", (a,), c=float(c))


def exp(a):
    return apply_op("exp", (a,))


def log(a, floor: float | None = None):
    return apply_op("log", (a,), floor=floor)


def softplus(a):
    return apply_op("softplus", (a,))


def silu(a):
    return apply_op("silu", (a,))


def softmax(a):
    return apply_op("softmax", (a,))


def layer_norm(x, scale_, shift, eps: float = 1e-5):
    return apply_op("layer_norm", (x, scale_, shift), eps=eps)


def linear(x, w, b=None):
    return apply_op("linear", (x, w) if b is None else (x, w, b))


def dir_linear(x, w, b=None):
    return apply_op("dir_linear", (x, w) if b is None else (x, w, b))


def concat(tensors, axis: int):
    return apply_op("concat", tuple(tensors), axis=axis)


def slice_(x, key):
    return apply_op("slice", (x,), key=key)


def reshape(x, shape):
    return apply_op("reshape", (x,), shape=tuple(shape))


def transpose(x, axes):
    return apply_op("transpose", (x,), axes=tuple(axes))


def upsample_nearest(x, factor: int):
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample_nearest: factor must be a positive integer, got {factor}")
    return apply_op("upsample_nearest", (x,), factor=int(factor))


def reduce_sum(x, axis=None):
    return apply_op("reduce_sum", (x,), axis=axis)


def reduce_mean(x, axis=None):
    return apply_op("reduce_mean", (x,), axis=axis)


def gather_rows(x, idx):
    return apply_op("gather_rows", (x,), idx=np.asarray(idx, dtype=np.int64))


def select_class(p, idx):
    return apply_op("select_class", (p,), idx=np.asarray(idx, dtype=np.int64))


def scan_gather(x, perms, inv_perms):
    return apply_op("scan_gather", (x,), perms=perms, inv_perms=inv_perms)


def scan_scatter(y, perms, inv_perms):
    return apply_op("scan_scatter", (y,), perms=perms, inv_perms=inv_perms)


def argmax(x, axis: int = -1):
    return apply_op("argmax", (x,), axis=axis)


def selective_scan(u, delta, b, c, a, skip=None, mode: str = "euler"):
    if mode not in ("euler", "zoh"):
        raise ValueError(f"selective_scan: unknown mode '{mode}'")
    ins = (u, delta, b, c, a) if skip is None else (u, delta, b, c, a, skip)
    return apply_op("selective_scan", ins, mode=mode)


# --- parameter checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, named: dict[str, "Tensor | np.ndarray"]):
    """Write named float64 tensors: magic, version u32, count u32, then per
    tensor a u16-length UTF-8 name, rank u32, dims u32 each, little-endian data."""
    import struct

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, value in named.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    import struct
    from pathlib import Path

    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointFormatError(f"{path}: truncated tensor '{name}'")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).copy()
        offset = end
    return out


# --- finite-difference gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel: float
    mean_rel: float
    checked: int
    tol: float
    skipped: bool = False
    reason: str = ""
    worst: tuple = ()
    errors: list = field(default_factory=list)

    def __str__(self):
        if self.skipped:
            return f"SKIP ({self.reason})"
        tag = "pass" if self.passed else "FAIL"
        return f"{tag} max={self.max_rel:.3e} mean={self.mean_rel:.3e} n={self.checked}"


def grad_check(
    graph: Graph,
    output: Tensor,
    leaves,
    step: float = 1e-4,
    tol: float = 1e-3,
    samples: int = 64,
    rng=None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar output against central differences.

    ``leaves`` selects which requires_grad tensors to probe. Coordinates are
    sampled without replacement across all selected leaves. Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-3), the floor absorbing finite
    difference noise on near-zero gradients.
    """
    if output.data.size != 1:
        raise GraphError("grad_check requires a scalar output node")
    nd = graph.nondifferentiable_nodes()
    if nd:
        kinds = ", ".join(f"{n.idx}:{n.kind}" for n in nd)
        warnings.warn(f"grad_check skipped: non-differentiable nodes on path ({kinds})")
        return GradCheckReport(
            passed=True, max_rel=0.0, mean_rel=0.0, checked=0, tol=tol,
            skipped=True, reason=f"non-differentiable nodes: {kinds}",
        )
    rng = np.random.default_rng(0) if rng is None else rng
    analytic: dict[int, np.ndarray] = {}
    graph.backward(output, np.ones_like(output.data), into=analytic)

    coords = []
    for li, leaf in enumerate(leaves):
        if not leaf.requires_grad:
            raise GraphError("grad_check leaves must have requires_grad set")
        coords.extend((li, j) for j in range(leaf.data.size))
    if not coords:
        raise GraphError("grad_check: no leaf coordinates to probe")
    if len(coords) > samples:
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(i)] for i in pick]

    errs = []
    worst = ()
    for li, j in coords:
        leaf = leaves[li]
        flat = leaf.data.reshape(-1)
        keep = flat[j]
        flat[j] = keep + step
        graph.run()
        fp = float(output.data)
        flat[j] = keep - step
        graph.run()
        fm = float(output.data)
        flat[j] = keep
        fd = (fp - fm) / (2.0 * step)
        an = float(analytic.get(id(leaf), np.zeros_like(leaf.data)).reshape(-1)[j])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
        errs.append(rel)
        if not worst or rel > worst[0]:
            worst = (rel, li, j, an, fd)
    graph.run()  # leave graph values consistent with unperturbed leaves

    errs_arr = np.asarray(errs)
    return GradCheckReport(
        passed=bool(errs_arr.max() <= tol),
        max_rel=float(errs_arr.max()),
        mean_rel=float(errs_arr.mean()),
        checked=len(errs),
        tol=tol,
        worst=worst,
        errors=errs,
    )
