"""Minimal reverse-mode differentiation over dense numpy tensors.

Graphs are static: a :class:`GraphBuilder` wires ops into an acyclic,
topologically ordered node list with shapes validated at build time (the
leading batch dimension is symbolic, written -1).  ``forward`` evaluates the
graph on a parameter dict plus named inputs and returns cached activations;
``backward`` replays the tape and returns gradients for every parameter and
input.  Training runs in float32; gradient verification uses float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    idx: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]  # -1 marks the batch-dependent dimension
    attrs: dict = field(default_factory=dict, hash=False)
    name: str | None = None


@dataclass(frozen=True)
class Ref:
    """Handle to a node during graph construction."""

    builder: "GraphBuilder"
    idx: int

    @property
    def shape(self):
        return self.builder.nodes[self.idx].shape


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, int]
    params: dict[str, int]
    outputs: dict[str, int]
    dtype: type

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: self.nodes[idx].shape for name, idx in self.params.items()}


@dataclass
class Cache:
    """Forward tape: node values plus dropout masks, keyed by node index."""

    values: list
    extras: dict[int, np.ndarray]
    mode: str


def _concretize(shape, batch):
    return tuple(batch if d == -1 else d for d in shape)


def _check_same(a, b, what, idx):
    """Shapes must agree dim-by-dim; -1 matches anything."""
    if len(a) != len(b) or any(
        x != y and x != -1 and y != -1 for x, y in zip(a, b)
    ):
        raise ShapeError(f"node {idx}: {what}: {a} vs {b}")


def _broadcast_shape(a, b, idx):
    if len(a) != len(b):
        raise ShapeError(f"node {idx}: broadcast requires equal ranks, got {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x == y:
            out.append(x)
        elif x == 1:
            out.append(y)
        elif y == 1:
            out.append(x)
        elif x == -1 or y == -1:
            out.append(-1)
        else:
            raise ShapeError(f"node {idx}: cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class GraphBuilder:
    def __init__(self, dtype=np.float32):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.dtype = dtype

    def _add(self, op, inputs, shape, attrs=None, name=None) -> Ref:
        node = Node(len(self.nodes), op, tuple(i.idx for i in inputs), tuple(shape), attrs or {}, name)
        self.nodes.append(node)
        return Ref(self, node.idx)

    def _shape(self, ref: Ref):
        return self.nodes[ref.idx].shape

    # leaves -----------------------------------------------------------

    def input(self, name, shape) -> Ref:
        if name in self.inputs:
            raise ValueError(f"duplicate input {name!r}")
        ref = self._add("input", [], shape, name=name)
        self.inputs[name] = ref.idx
        return ref

    def param(self, name, shape) -> Ref:
        if name in self.params:
            raise ValueError(f"duplicate param {name!r}")
        if any(d <= 0 for d in shape):
            raise ShapeError(f"param {name!r} must have concrete shape, got {shape}")
        ref = self._add("param", [], shape, name=name)
        self.params[name] = ref.idx
        return ref

    # layers -------------------------------------------------------------

    def dense(self, x, out_dim: int, name: str) -> Ref:
        shape = self._shape(x)
        w = self.param(f"{name}.w", (shape[-1], out_dim))
        b = self.param(f"{name}.b", (out_dim,))
        return self._add("dense", [x, w, b], shape[:-1] + (out_dim,))

    def matmul(self, x, w) -> Ref:
        xs, ws = self._shape(x), self._shape(w)
        if len(ws) != 2 or xs[-1] != ws[0]:
            raise ShapeError(f"matmul: {xs} @ {ws}")
        return self._add("matmul", [x, w], xs[:-1] + (ws[1],))

    def conv2d(self, x, out_channels: int, name: str, kernel: int = 4, stride: int = 2, pad: int = 1) -> Ref:
        b_, h, w_, c = self._shape(x)
        ho = (h + 2 * pad - kernel) // stride + 1
        wo = (w_ + 2 * pad - kernel) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d: kernel {kernel} too large for input {(h, w_)}")
        wgt = self.param(f"{name}.w", (kernel, kernel, c, out_channels))
        bias = self.param(f"{name}.b", (out_channels,))
        return self._add(
            "conv2d", [x, wgt, bias], (b_, ho, wo, out_channels), {"stride": stride, "pad": pad}
        )

    def conv2d_transpose(self, x, out_channels: int, name: str, kernel: int = 4, stride: int = 2, pad: int = 1) -> Ref:
        b_, h, w_, c = self._shape(x)
        ho = stride * (h - 1) + kernel - 2 * pad
        wo = stride * (w_ - 1) + kernel - 2 * pad
        wgt = self.param(f"{name}.w", (kernel, kernel, out_channels, c))
        bias = self.param(f"{name}.b", (out_channels,))
        return self._add(
            "conv2d_transpose", [x, wgt, bias], (b_, ho, wo, out_channels), {"stride": stride, "pad": pad}
        )

    def dropout(self, x, p: float) -> Ref:
        if not (0.0 <= p < 1.0):
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        return self._add("dropout", [x], self._shape(x), {"p": p})

    # elementwise ----------------------------------------------------------

    def relu(self, x) -> Ref:
        return self._add("relu", [x], self._shape(x))

    def leaky_relu(self, x, alpha: float = 0.01) -> Ref:
        return self._add("leaky_relu", [x], self._shape(x), {"alpha": alpha})

    def sigmoid(self, x) -> Ref:
        return self._add("sigmoid", [x], self._shape(x))

    def exp(self, x) -> Ref:
        return self._add("exp", [x], self._shape(x))

    def square(self, x) -> Ref:
        return self._add("square", [x], self._shape(x))

    def sqrt(self, x) -> Ref:
        return self._add("sqrt", [x], self._shape(x))

    def scale(self, x, c: float) -> Ref:
        return self._add("scale", [x], self._shape(x), {"c": float(c)})

    def add_const(self, x, c: float) -> Ref:
        return self._add("add_const", [x], self._shape(x), {"c": float(c)})

    def add(self, a, b) -> Ref:
        return self._add("add", [a, b], _broadcast_shape(self._shape(a), self._shape(b), len(self.nodes)))

    def sub(self, a, b) -> Ref:
        return self._add("sub", [a, b], _broadcast_shape(self._shape(a), self._shape(b), len(self.nodes)))

    def mul(self, a, b) -> Ref:
        return self._add("mul", [a, b], _broadcast_shape(self._shape(a), self._shape(b), len(self.nodes)))

    # structural -----------------------------------------------------------

    def reshape(self, x, shape) -> Ref:
        known_in = [d for d in self._shape(x) if d != -1]
        known_out = [d for d in shape if d != -1]
        if shape.count(-1) == 0 and self._shape(x).count(-1) == 0:
            if int(np.prod(known_in)) != int(np.prod(known_out)):
                raise ShapeError(f"reshape {self._shape(x)} -> {shape}: size mismatch")
        return self._add("reshape", [x], tuple(shape))

    def concat(self, parts, axis: int) -> Ref:
        shapes = [self._shape(p) for p in parts]
        base = list(shapes[0])
        total = 0
        for s in shapes:
            for i, (x, y) in enumerate(zip(base, s)):
                if i != axis and x != y and -1 not in (x, y):
                    raise ShapeError(f"concat axis {axis}: incompatible {shapes}")
            total += s[axis]
        base[axis] = total if all(s[axis] != -1 for s in shapes) else -1
        return self._add("concat", list(parts), tuple(base), {"axis": axis})

    def slice(self, x, axis: int, start: int, stop: int) -> Ref:
        shape = list(self._shape(x))
        if shape[axis] != -1 and not (0 <= start < stop <= shape[axis]):
            raise ShapeError(f"slice [{start}:{stop}] out of range on axis {axis} of {shape}")
        shape[axis] = stop - start
        return self._add("slice", [x], tuple(shape), {"axis": axis, "start": start, "stop": stop})

    def tile(self, x, axis: int, reps: int) -> Ref:
        shape = list(self._shape(x))
        if shape[axis] != 1:
            raise ShapeError(f"tile axis {axis} must have size 1, got {shape}")
        shape[axis] = reps
        return self._add("tile", [x], tuple(shape), {"axis": axis, "reps": reps})

    def reduce_sum(self, x, axis=None, keepdims: bool = False) -> Ref:
        return self._reduce("reduce_sum", x, axis, keepdims)

    def reduce_mean(self, x, axis=None, keepdims: bool = False) -> Ref:
        return self._reduce("reduce_mean", x, axis, keepdims)

    def _reduce(self, op, x, axis, keepdims) -> Ref:
        in_shape = self._shape(x)
        if axis is None:
            axes = tuple(range(len(in_shape)))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if keepdims:
            shape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
        else:
            shape = tuple(d for i, d in enumerate(in_shape) if i not in axes)
        return self._add(op, [x], shape, {"axes": axes, "keepdims": keepdims})

    # stochastic / losses ---------------------------------------------------

    def gaussian_reparam(self, mu, logvar, noise) -> Ref:
        _check_same(self._shape(mu), self._shape(logvar), "reparam mu/logvar", len(self.nodes))
        _check_same(self._shape(mu), self._shape(noise), "reparam mu/noise", len(self.nodes))
        return self._add("gaussian_reparam", [mu, logvar, noise], self._shape(mu))

    def softmax_cross_entropy(self, logits, labels) -> Ref:
        ls = self._shape(logits)
        if len(ls) != 2:
            raise ShapeError(f"softmax_cross_entropy expects (batch, classes), got {ls}")
        return self._add("softmax_cross_entropy", [logits, labels], ())

    def bernoulli_logits_ll(self, logits, targets) -> Ref:
        _check_same(self._shape(logits), self._shape(targets), "bernoulli logits/targets", len(self.nodes))
        return self._add("bernoulli_logits_ll", [logits, targets], self._shape(logits))

    def build(self, outputs: dict[str, Ref]) -> Graph:
        return Graph(
            nodes=list(self.nodes),
            inputs=dict(self.inputs),
            params=dict(self.params),
            outputs={k: v.idx for k, v in outputs.items()},
            dtype=self.dtype,
        )


def init_params(graph: Graph, rng: RngStream) -> dict[str, np.ndarray]:
    """Uniform fan-in init for weights, zero biases; one rng tick total."""
    gen = rng.generator()
    params = {}
    for name, idx in graph.params.items():
        shape = graph.nodes[idx].shape
        if name.endswith(".b") or len(shape) == 1:
            params[name] = np.zeros(shape, dtype=graph.dtype)
            continue
        if len(shape) == 2:
            fan_in = shape[0]
        elif len(shape) == 4:
            # conv (kh, kw, cin, cout); transpose conv (kh, kw, cout, cin)
            fan_in = shape[0] * shape[1] * shape[2]
        else:
            fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = gen.uniform(-bound, bound, size=shape).astype(graph.dtype)
    return params


# convolution helpers --------------------------------------------------------


def _im2col(x, kernel, stride, pad):
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, kernel, kernel, c),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b * ho * wo, kernel * kernel * c), (ho, wo)


def _col2im(cols, x_shape, kernel, stride, pad):
    b, h, w, c = x_shape
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    cols6 = cols.reshape(b, ho, wo, kernel, kernel, c)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += cols6[:, :, :, i, j, :]
    return xp[:, pad : pad + h, pad : pad + w, :]


# execution ------------------------------------------------------------------


def forward(graph: Graph, params, inputs, mode: str = "eval", rng: RngStream | None = None):
    """Evaluate the graph; returns (outputs dict, Cache).

    Eval mode is deterministic; dropout draws masks from rng in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    values: list = [None] * len(graph.nodes)
    extras: dict[int, np.ndarray] = {}
    gen = None

    for node in graph.nodes:
        op = node.op
        if op == "input":
            try:
                x = inputs[node.name]
            except KeyError:
                raise KeyError(f"missing input {node.name!r}") from None
            x = np.asarray(x)
            if x.dtype.kind == "f":
                x = x.astype(graph.dtype, copy=False)
            _check_same(x.shape, node.shape, f"input {node.name!r}", node.idx)
            values[node.idx] = x
            continue
        if op == "param":
            try:
                p = params[node.name]
            except KeyError:
                raise KeyError(f"missing param {node.name!r}") from None
            if p.shape != node.shape:
                raise ShapeError(f"node {node.idx}: param {node.name!r} shape {p.shape} != {node.shape}")
            values[node.idx] = p
            continue

        args = [values[i] for i in node.inputs]
        if op == "dense":
            x, w, b = args
            x2 = x.reshape(-1, x.shape[-1])
            values[node.idx] = (x2 @ w + b).reshape(x.shape[:-1] + (w.shape[1],))
        elif op == "matmul":
            x, w = args
            x2 = x.reshape(-1, x.shape[-1])
            values[node.idx] = (x2 @ w).reshape(x.shape[:-1] + (w.shape[1],))
        elif op == "conv2d":
            x, w, b = args
            k, stride, pad = w.shape[0], node.attrs["stride"], node.attrs["pad"]
            cols, (ho, wo) = _im2col(x, k, stride, pad)
            out = cols @ w.reshape(-1, w.shape[3]) + b
            values[node.idx] = out.reshape(x.shape[0], ho, wo, w.shape[3])
            extras[node.idx] = cols
        elif op == "conv2d_transpose":
            x, w, b = args
            k, stride, pad = w.shape[0], node.attrs["stride"], node.attrs["pad"]
            co = w.shape[2]
            ho = stride * (x.shape[1] - 1) + k - 2 * pad
            wo = stride * (x.shape[2] - 1) + k - 2 * pad
            cols = x.reshape(-1, x.shape[3]) @ w.reshape(-1, w.shape[3]).T
            out = _col2im(cols, (x.shape[0], ho, wo, co), k, stride, pad)
            values[node.idx] = out + b
        elif op == "dropout":
            (x,) = args
            if mode == "train":
                if gen is None:
                    if rng is None:
                        raise ValueError("train-mode forward with dropout requires rng")
                    gen = rng.generator()
                keep = (gen.random(x.shape) >= node.attrs["p"]).astype(graph.dtype)
                keep /= graph.dtype(1.0 - node.attrs["p"])
                extras[node.idx] = keep
                values[node.idx] = x * keep
            else:
                values[node.idx] = x
        elif op == "relu":
            values[node.idx] = np.maximum(args[0], 0)
        elif op == "leaky_relu":
            x = args[0]
            values[node.idx] = np.where(x > 0, x, graph.dtype(node.attrs["alpha"]) * x)
        elif op == "sigmoid":
            x = args[0]
            values[node.idx] = 1.0 / (1.0 + np.exp(-x))
        elif op == "exp":
            values[node.idx] = np.exp(args[0])
        elif op == "square":
            values[node.idx] = np.square(args[0])
        elif op == "sqrt":
            values[node.idx] = np.sqrt(args[0])
        elif op == "scale":
            values[node.idx] = args[0] * graph.dtype(node.attrs["c"])
        elif op == "add_const":
            values[node.idx] = args[0] + graph.dtype(node.attrs["c"])
        elif op == "add":
            values[node.idx] = args[0] + args[1]
        elif op == "sub":
            values[node.idx] = args[0] - args[1]
        elif op == "mul":
            values[node.idx] = args[0] * args[1]
        elif op == "reshape":
            values[node.idx] = args[0].reshape(_concretize(node.shape, -1))
        elif op == "concat":
            values[node.idx] = np.concatenate(args, axis=node.attrs["axis"])
        elif op == "slice":
            sl = [np.s_[:]] * args[0].ndim
            sl[node.attrs["axis"]] = np.s_[node.attrs["start"] : node.attrs["stop"]]
            values[node.idx] = args[0][tuple(sl)]
        elif op == "tile":
            values[node.idx] = np.repeat(args[0], node.attrs["reps"], axis=node.attrs["axis"])
        elif op in ("reduce_sum", "reduce_mean"):
            x = args[0]
            axes, keepdims = node.attrs["axes"], node.attrs["keepdims"]
            if op == "reduce_sum":
                values[node.idx] = x.sum(axis=axes, keepdims=keepdims)
            else:
                values[node.idx] = x.mean(axis=axes, keepdims=keepdims)
        elif op == "gaussian_reparam":
            mu, logvar, noise = args
            values[node.idx] = mu + np.exp(0.5 * logvar) * noise
        elif op == "softmax_cross_entropy":
            logits, labels = args
            labels = np.asarray(labels, dtype=np.int64)
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            log_softmax = shifted - log_z
            values[node.idx] = np.asarray(
                -log_softmax[np.arange(len(labels)), labels].mean(), dtype=graph.dtype
            )
            extras[node.idx] = np.exp(log_softmax)
        elif op == "bernoulli_logits_ll":
            logits, targets = args
            values[node.idx] = targets * logits - np.logaddexp(0.0, logits).astype(graph.dtype)
        else:
            raise ValueError(f"node {node.idx}: unknown op {op!r}")

    outputs = {name: values[idx] for name, idx in graph.outputs.items()}
    return outputs, Cache(values=values, extras=extras, mode=mode)


def backward(graph: Graph, cache: Cache, output_grads: dict[str, np.ndarray]):
    """Reverse pass; returns (param_grads, input_grads) keyed by name."""
    if cache.mode != "train":
        raise RuntimeError("backward requires a train-mode forward cache")
    values, extras = cache.values, cache.extras
    grads: list = [None] * len(graph.nodes)
    for name, g in output_grads.items():
        idx = graph.outputs[name]
        seed = np.asarray(g, dtype=graph.dtype)
        grads[idx] = seed if grads[idx] is None else grads[idx] + seed

    def accumulate(idx, g):
        grads[idx] = g if grads[idx] is None else grads[idx] + g

    for node in reversed(graph.nodes):
        g = grads[node.idx]
        if g is None or node.op in ("input", "param"):
            continue
        op = node.op
        args = [values[i] for i in node.inputs]
        if op == "dense":
            x, w, b = args
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.reshape(-1, x.shape[-1])
            accumulate(node.inputs[0], (g2 @ w.T).reshape(x.shape))
            accumulate(node.inputs[1], x2.T @ g2)
            accumulate(node.inputs[2], g2.sum(axis=0))
        elif op == "matmul":
            x, w = args
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.reshape(-1, x.shape[-1])
            accumulate(node.inputs[0], (g2 @ w.T).reshape(x.shape))
            accumulate(node.inputs[1], x2.T @ g2)
        elif op == "conv2d":
            x, w, b = args
            k, stride, pad = w.shape[0], node.attrs["stride"], node.attrs["pad"]
            cols = extras[node.idx]
            g2 = g.reshape(-1, g.shape[-1])
            accumulate(node.inputs[1], (cols.T @ g2).reshape(w.shape))
            accumulate(node.inputs[2], g2.sum(axis=0))
            dcols = g2 @ w.reshape(-1, w.shape[3]).T
            accumulate(node.inputs[0], _col2im(dcols, x.shape, k, stride, pad))
        elif op == "conv2d_transpose":
            x, w, b = args
            k, stride, pad = w.shape[0], node.attrs["stride"], node.attrs["pad"]
            dcols, _ = _im2col(g, k, stride, pad)
            w2 = w.reshape(-1, w.shape[3])
            accumulate(node.inputs[0], (dcols @ w2).reshape(x.shape))
            accumulate(node.inputs[1], (dcols.T @ x.reshape(-1, x.shape[3])).reshape(w.shape))
            accumulate(node.inputs[2], g.sum(axis=(0, 1, 2)))
        elif op == "dropout":
            accumulate(node.inputs[0], g * extras[node.idx])
        elif op == "relu":
            accumulate(node.inputs[0], g * (args[0] > 0))
        elif op == "leaky_relu":
            alpha = graph.dtype(node.attrs["alpha"])
            accumulate(node.inputs[0], g * np.where(args[0] > 0, graph.dtype(1.0), alpha))
        elif op == "sigmoid":
            y = values[node.idx]
            accumulate(node.inputs[0], g * y * (1.0 - y))
        elif op == "exp":
            accumulate(node.inputs[0], g * values[node.idx])
        elif op == "square":
            accumulate(node.inputs[0], g * 2.0 * args[0])
        elif op == "sqrt":
            y = values[node.idx]
            # subgradient 0 at exactly 0 (constant rows have zero dispersion)
            with np.errstate(divide="ignore"):
                d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
            accumulate(node.inputs[0], g * d)
        elif op == "scale":
            accumulate(node.inputs[0], g * graph.dtype(node.attrs["c"]))
        elif op == "add_const":
            accumulate(node.inputs[0], g)
        elif op == "add":
            accumulate(node.inputs[0], _unbroadcast(g, args[0].shape))
            accumulate(node.inputs[1], _unbroadcast(g, args[1].shape))
        elif op == "sub":
            accumulate(node.inputs[0], _unbroadcast(g, args[0].shape))
            accumulate(node.inputs[1], _unbroadcast(-g, args[1].shape))
        elif op == "mul":
            accumulate(node.inputs[0], _unbroadcast(g * args[1], args[0].shape))
            accumulate(node.inputs[1], _unbroadcast(g * args[0], args[1].shape))
        elif op == "reshape":
            accumulate(node.inputs[0], g.reshape(args[0].shape))
        elif op == "concat":
            axis = node.attrs["axis"]
            offset = 0
            for i, a in zip(node.inputs, args):
                sl = [np.s_[:]] * g.ndim
                sl[axis] = np.s_[offset : offset + a.shape[axis]]
                accumulate(i, g[tuple(sl)])
                offset += a.shape[axis]
        elif op == "slice":
            full = np.zeros_like(args[0])
            sl = [np.s_[:]] * full.ndim
            sl[node.attrs["axis"]] = np.s_[node.attrs["start"] : node.attrs["stop"]]
            full[tuple(sl)] = g
            accumulate(node.inputs[0], full)
        elif op == "tile":
            accumulate(node.inputs[0], g.sum(axis=node.attrs["axis"], keepdims=True))
        elif op in ("reduce_sum", "reduce_mean"):
            x = args[0]
            axes, keepdims = node.attrs["axes"], node.attrs["keepdims"]
            gg = np.asarray(g)
            if not keepdims:
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            if op == "reduce_mean":
                count = np.prod([x.shape[ax] for ax in axes])
                gg = gg / graph.dtype(count)
            accumulate(node.inputs[0], np.broadcast_to(gg, x.shape).astype(graph.dtype, copy=False))
        elif op == "gaussian_reparam":
            mu, logvar, noise = args
            std_noise = np.exp(0.5 * logvar) * noise
            accumulate(node.inputs[0], g)
            accumulate(node.inputs[1], g * 0.5 * std_noise)
            accumulate(node.inputs[2], g * np.exp(0.5 * logvar))
        elif op == "softmax_cross_entropy":
            logits, labels = args
            labels = np.asarray(labels, dtype=np.int64)
            softmax = extras[node.idx].copy()
            softmax[np.arange(len(labels)), labels] -= 1.0
            accumulate(node.inputs[0], (g / len(labels)) * softmax)
        elif op == "bernoulli_logits_ll":
            logits, targets = args
            sig = 1.0 / (1.0 + np.exp(-logits))
            accumulate(node.inputs[0], g * (targets - sig))
        else:
            raise ValueError(f"node {node.idx}: no gradient for op {op!r}")

    param_grads = {
        name: (grads[idx] if grads[idx] is not None else np.zeros(graph.nodes[idx].shape, dtype=graph.dtype))
        for name, idx in graph.params.items()
    }
    input_grads = {name: grads[idx] for name, idx in graph.inputs.items()}
    return param_grads, input_grads
