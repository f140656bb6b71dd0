"""Dense-tensor computation graphs with reverse-mode differentiation.

The engine is deliberately small: float64 numpy arrays, a closed set of
primitives, and a static acyclic graph whose insertion order is a valid
topological order. That is enough to express and train the small
convolutional fusion networks in :mod:`padkit.netgraph` deterministically,
and small enough that every gradient can be checked against central finite
differences.

Conventions:
    * feature maps are ``(H, W, C)`` float64 arrays; vectors are ``(C,)``;
      scalars are 0-d arrays,
    * convolutions use odd kernels with zero "same" padding,
    * ReLU uses subgradient 0 at the kink,
    * forward/backward over one graph instance is single threaded; distinct
      instances may run concurrently.

Checkpoint file layout (little endian throughout)::

    magic   8 bytes   b"PADCKPT\\x00"
    version uint32    1
    count   uint32    number of parameters
    then per parameter, in insertion order:
        name_len uint32, name utf-8 bytes,
        rank     uint32, dims uint32[rank],
        payload  float64[prod(dims)] row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "GraphError",
    "Node",
    "Graph",
    "forward",
    "backward",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PADCKPT\x00"
CHECKPOINT_VERSION = 1


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches, or bad node inputs.

    Carries the offending node name so callers can localize failures in
    machine-built graphs.
    """

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message if node is None else f"node '{node}': {message}")
        self.node = node


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the only value type here)."""
    a = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d
    return a if a.ndim == 0 else np.ascontiguousarray(a)


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict
    shape: tuple[int, ...]


@dataclass
class Graph:
    """Static DAG of primitive ops over named tensors.

    Nodes are appended through the builder methods below, each of which
    validates shapes eagerly, so a fully built graph cannot fail shape
    checks at run time. ``nodes`` preserves insertion order, which is a
    topological order by construction (inputs must already exist).
    """

    nodes: dict[str, Node] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)

    # -- node creation -------------------------------------------------

    def _add(self, name: str, op: str, inputs: tuple[str, ...], attrs: dict,
             shape: tuple[int, ...]) -> str:
        if name in self.nodes:
            raise GraphError("duplicate node name", name)
        for ref in inputs:
            if ref not in self.nodes:
                raise GraphError(f"unknown input '{ref}'", name)
        self.nodes[name] = Node(name, op, inputs, attrs, shape)
        return name

    def input(self, name: str, shape: Iterable[int]) -> str:
        return self._add(name, "input", (), {}, tuple(int(s) for s in shape))

    def param(self, name: str, value) -> str:
        value = as_tensor(value)
        self._add(name, "param", (), {}, value.shape)
        self.params[name] = value
        return name

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self.nodes[name].shape

    def relu(self, name: str, x: str) -> str:
        return self._add(name, "relu", (x,), {}, self.shape_of(x))

    def add(self, name: str, a: str, b: str) -> str:
        sa, sb = self.shape_of(a), self.shape_of(b)
        if sa != sb:
            raise GraphError(f"add shape mismatch {sa} vs {sb}", name)
        return self._add(name, "add", (a, b), {}, sa)

    def scale_sum(self, name: str, xs: Iterable[str],
                  coeffs: Iterable[float] | None = None) -> str:
        xs = tuple(xs)
        if not xs:
            raise GraphError("scale_sum needs at least one input", name)
        coeffs = tuple(1.0 for _ in xs) if coeffs is None else tuple(float(c) for c in coeffs)
        if len(coeffs) != len(xs):
            raise GraphError("scale_sum coeffs/inputs length mismatch", name)
        shapes = {self.shape_of(x) for x in xs}
        if len(shapes) != 1:
            raise GraphError(f"scale_sum shape mismatch {sorted(shapes)}", name)
        return self._add(name, "scale_sum", xs, {"coeffs": coeffs}, shapes.pop())

    def linear(self, name: str, x: str, w: str, b: str) -> str:
        sx, sw, sb = self.shape_of(x), self.shape_of(w), self.shape_of(b)
        if len(sx) != 1 or len(sw) != 2 or len(sb) != 1:
            raise GraphError(f"linear expects vector/matrix/vector, got {sx}/{sw}/{sb}", name)
        if sx[0] != sw[0] or sw[1] != sb[0]:
            raise GraphError(f"linear shape mismatch {sx} @ {sw} + {sb}", name)
        return self._add(name, "linear", (x, w, b), {}, (sw[1],))

    def conv2d(self, name: str, x: str, w: str, b: str, stride: int = 1) -> str:
        sx, sw, sb = self.shape_of(x), self.shape_of(w), self.shape_of(b)
        if len(sx) != 3 or len(sw) != 4 or len(sb) != 1:
            raise GraphError(f"conv2d expects HWC/KKIO/O, got {sx}/{sw}/{sb}", name)
        kh, kw, cin, cout = sw
        if kh % 2 == 0 or kw % 2 == 0:
            raise GraphError(f"conv2d kernel sizes must be odd, got {kh}x{kw}", name)
        if cin != sx[2] or cout != sb[0]:
            raise GraphError(f"conv2d channel mismatch {sx} vs {sw}/{sb}", name)
        if stride < 1:
            raise GraphError(f"conv2d stride must be >= 1, got {stride}", name)
        hout = (sx[0] + 2 * (kh // 2) - kh) // stride + 1
        wout = (sx[1] + 2 * (kw // 2) - kw) // stride + 1
        if hout < 1 or wout < 1:
            raise GraphError(f"conv2d output would be empty for input {sx}", name)
        return self._add(name, "conv2d", (x, w, b), {"stride": int(stride)},
                         (hout, wout, cout))

    def gap(self, name: str, x: str) -> str:
        sx = self.shape_of(x)
        if len(sx) != 3:
            raise GraphError(f"gap expects HWC, got {sx}", name)
        return self._add(name, "gap", (x,), {}, (sx[2],))

    def downsample2(self, name: str, x: str) -> str:
        sx = self.shape_of(x)
        if len(sx) != 3:
            raise GraphError(f"downsample2 expects HWC, got {sx}", name)
        return self._add(name, "downsample2", (x,), {},
                         ((sx[0] + 1) // 2, (sx[1] + 1) // 2, sx[2]))

    def softmax_xent(self, name: str, logits: str, label: str) -> str:
        sl = self.shape_of(logits)
        if len(sl) != 1 or sl[0] < 2:
            raise GraphError(f"softmax_xent expects a logit vector, got {sl}", name)
        if self.shape_of(label) != ():
            raise GraphError("softmax_xent label must be a scalar class index", name)
        return self._add(name, "softmax_xent", (logits, label), {}, ())

    # -- traversal helpers ----------------------------------------------

    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes.values() if n.op == "input"]

    def descendants(self, sources: Iterable[str]) -> set[str]:
        """All nodes reachable downstream of ``sources`` (sources excluded)."""
        srcs = set(sources)
        out: set[str] = set()
        for node in self.nodes.values():  # insertion order is topological
            if node.name in srcs:
                continue
            if any(ref in srcs or ref in out for ref in node.inputs):
                out.add(node.name)
        return out

    def ancestors(self, target: str) -> set[str]:
        out: set[str] = set()
        stack = list(self.nodes[target].inputs)
        while stack:
            ref = stack.pop()
            if ref not in out:
                out.add(ref)
                stack.extend(self.nodes[ref].inputs)
        return out


# ---------------------------------------------------------------------------
# primitive forward / backward kernels
# ---------------------------------------------------------------------------


def _conv_cols(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    hout = (x.shape[0] + 2 * ph - kh) // stride + 1
    wout = (x.shape[1] + 2 * pw - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                     # (hout, wout, cin, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(hout * wout, kh * kw * x.shape[2])
    return cols, hout, wout


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    cols, hout, wout = _conv_cols(x, kh, kw, stride)
    y = cols @ w.reshape(kh * kw * cin, cout) + b
    return y.reshape(hout, wout, cout)


def _conv2d_bwd(gy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int):
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    hout, wout = gy.shape[:2]
    cols, _, _ = _conv_cols(x, kh, kw, stride)
    gflat = gy.reshape(hout * wout, cout)
    gw = (cols.T @ gflat).reshape(kh, kw, cin, cout)
    gb = gflat.sum(axis=0)
    gcols = (gflat @ w.reshape(kh * kw * cin, cout).T).reshape(hout, wout, kh, kw, cin)
    gxp = np.zeros((x.shape[0] + 2 * ph, x.shape[1] + 2 * pw, cin))
    for i in range(kh):
        for j in range(kw):
            gxp[i:i + stride * hout:stride, j:j + stride * wout:stride] += gcols[:, :, i, j]
    gx = gxp[ph:ph + x.shape[0], pw:pw + x.shape[1]]
    return gx, gw, gb


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _eval_node(node: Node, val: Callable[[str], np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "relu":
        return np.maximum(val(node.inputs[0]), 0.0)
    if op == "add":
        return val(node.inputs[0]) + val(node.inputs[1])
    if op == "scale_sum":
        coeffs = node.attrs["coeffs"]
        acc = coeffs[0] * val(node.inputs[0])
        for c, ref in zip(coeffs[1:], node.inputs[1:]):
            acc = acc + c * val(ref)
        return acc
    if op == "linear":
        x, w, b = (val(r) for r in node.inputs)
        return x @ w + b
    if op == "conv2d":
        x, w, b = (val(r) for r in node.inputs)
        return _conv2d_fwd(x, w, b, node.attrs["stride"])
    if op == "gap":
        return val(node.inputs[0]).mean(axis=(0, 1))
    if op == "downsample2":
        return val(node.inputs[0])[::2, ::2, :]
    if op == "softmax_xent":
        logits = val(node.inputs[0])
        label = int(val(node.inputs[1]))
        z = logits - logits.max()
        loss = np.log(np.exp(z).sum()) - z[label]
        return np.asarray(loss)
    raise GraphError(f"unknown op '{op}'", node.name)


def _backprop_node(node: Node, gy: np.ndarray, val: Callable[[str], np.ndarray],
                   accumulate: Callable[[str, np.ndarray], None]) -> None:
    op = node.op
    if op == "relu":
        x = val(node.inputs[0])
        accumulate(node.inputs[0], gy * (x > 0))
    elif op == "add":
        accumulate(node.inputs[0], gy)
        accumulate(node.inputs[1], gy)
    elif op == "scale_sum":
        for c, ref in zip(node.attrs["coeffs"], node.inputs):
            accumulate(ref, c * gy)
    elif op == "linear":
        x, w, _ = (val(r) for r in node.inputs)
        accumulate(node.inputs[0], gy @ w.T)
        accumulate(node.inputs[1], np.outer(x, gy))
        accumulate(node.inputs[2], gy)
    elif op == "conv2d":
        x, w, _ = (val(r) for r in node.inputs)
        gx, gw, gb = _conv2d_bwd(gy, x, w, node.attrs["stride"])
        accumulate(node.inputs[0], gx)
        accumulate(node.inputs[1], gw)
        accumulate(node.inputs[2], gb)
    elif op == "gap":
        x = val(node.inputs[0])
        h, w_, _ = x.shape
        accumulate(node.inputs[0], np.broadcast_to(gy / (h * w_), x.shape))
    elif op == "downsample2":
        x = val(node.inputs[0])
        gx = np.zeros_like(x)
        gx[::2, ::2, :] = gy
        accumulate(node.inputs[0], gx)
    elif op == "softmax_xent":
        logits = val(node.inputs[0])
        label = int(val(node.inputs[1]))
        g = _softmax(logits)
        g[label] -= 1.0
        accumulate(node.inputs[0], g * gy)
        # label input is an index, not a differentiable quantity
    else:
        raise GraphError(f"unknown op '{op}'", node.name)


# ---------------------------------------------------------------------------
# public execution API
# ---------------------------------------------------------------------------


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every node; returns the full name -> value map.

    Raises :class:`GraphError` on missing/misshaped inputs and on non-finite
    input or parameter values. Given the same inputs and parameters the
    result is bitwise reproducible on one platform.
    """
    values: dict[str, np.ndarray] = {}
    for name, node in graph.nodes.items():
        if node.op == "input":
            if name not in inputs:
                raise GraphError("missing input value", name)
            x = as_tensor(inputs[name])
            if x.shape != node.shape:
                raise GraphError(f"input shape {x.shape} != declared {node.shape}", name)
            if not np.all(np.isfinite(x)):
                raise GraphError("non-finite input value", name)
            values[name] = x
        elif node.op == "param":
            p = graph.params[name]
            if not np.all(np.isfinite(p)):
                raise GraphError("non-finite parameter value", name)
            values[name] = p
        else:
            values[name] = _eval_node(node, values.__getitem__)
    return values


def backward(graph: Graph, values: Mapping[str, np.ndarray],
             loss: str) -> dict[str, np.ndarray]:
    """Gradients of the scalar node ``loss`` with respect to every parameter.

    ``loss`` must hold exactly one element (shape ``()`` or ``(1,)`` etc.).
    Parameters with no path to the loss get exact zero gradients. Fan-out
    contributions accumulate by summation.
    """
    if loss not in graph.nodes:
        raise GraphError("unknown loss node", loss)
    if np.asarray(values[loss]).size != 1:
        raise GraphError(f"loss must be scalar, has shape {values[loss].shape}", loss)

    grads: dict[str, np.ndarray] = {loss: np.ones_like(values[loss])}

    def accumulate(ref: str, g: np.ndarray) -> None:
        if ref in grads:
            grads[ref] = grads[ref] + g
        else:
            grads[ref] = np.array(g, dtype=np.float64, copy=True)

    for node in reversed(list(graph.nodes.values())):
        if node.name not in grads or node.op in ("input", "param"):
            continue
        _backprop_node(node, grads[node.name], values.__getitem__, accumulate)

    return {name: grads.get(name, np.zeros_like(p)) for name, p in graph.params.items()}


def grad_check(graph: Graph, inputs: Mapping[str, np.ndarray], loss: str,
               epsilon: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Perturbs every coordinate of every parameter; the error metric per
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    values = forward(graph, inputs)
    analytic = backward(graph, values, loss)
    worst = 0.0
    for name, p in graph.params.items():
        ga = analytic[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(forward(graph, inputs)[loss])
            flat[i] = orig - epsilon
            lo = float(forward(graph, inputs)[loss])
            flat[i] = orig
            num = (hi - lo) / (2.0 * epsilon)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors in the documented binary layout."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            a = as_tensor(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises ``ValueError`` on a bad magic/version or a truncated file; a
    truncated file never yields partial data.
    """
    with open(path, "rb") as f:
        raw = f.read()

    def take(n: int, offset: int) -> tuple[bytes, int]:
        if offset + n > len(raw):
            raise ValueError(f"truncated checkpoint '{path}'")
        return raw[offset:offset + n], offset + n

    buf, off = take(len(CHECKPOINT_MAGIC), 0)
    if buf != CHECKPOINT_MAGIC:
        raise ValueError(f"'{path}' is not a parameter checkpoint")
    buf, off = take(8, off)
    version, count = struct.unpack("<II", buf)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        buf, off = take(4, off)
        (nlen,) = struct.unpack("<I", buf)
        buf, off = take(nlen, off)
        name = buf.decode("utf-8")
        buf, off = take(4, off)
        (rank,) = struct.unpack("<I", buf)
        buf, off = take(4 * rank, off)
        dims = struct.unpack(f"<{rank}I", buf) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        buf, off = take(8 * size, off)
        params[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint '{path}'")
    return params
