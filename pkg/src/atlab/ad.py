"""Reverse-mode automatic differentiation over dense float64 tensors.

Graphs are static DAGs of a small set of primitives (affine, 2-D convolution,
ReLU, 2x2 max-pool, flatten, elementwise add/mul, feature reductions, and two
fused per-example losses). Every tensor is a plain ``numpy.ndarray`` of
float64; the batch axis is always axis 0 and no primitive ever mixes examples
across it except the final scalar ``batch_mean`` node. That property is what
makes per-example parameter gradients and all-example input gradients
available from a single backward traversal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class GraphError(Exception):
    """Structural or numeric failure during graph construction/evaluation."""


class ShapeError(GraphError):
    """Input/parameter shape incompatible with a node's contract."""


class NonFiniteError(GraphError):
    """A per-example loss or gradient became NaN/Inf."""

    def __init__(self, msg, example=None):
        super().__init__(msg)
        self.example = example


class _PassCounter:
    """Counts backward graph traversals; test instrumentation only."""

    def __init__(self):
        self.backward = 0

    def reset(self):
        self.backward = 0


counters = _PassCounter()

# Node kinds whose output keeps one row per input example. Only batch_mean
# collapses the batch axis, so backward passes seeded at any per-example node
# stay example-separable.
_PER_EXAMPLE_KINDS = {
    "input", "affine", "conv2d", "relu", "maxpool2", "flatten",
    "add", "mul", "sum", "mean", "xent", "neg_margin",
}

LOSS_KINDS = ("cross_entropy", "margin")
_LOSS_NODE = {"cross_entropy": "xent", "margin": "neg_margin"}


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class Node:
    kind: str
    name: str
    inputs: tuple[int, ...]
    # flat-vector offsets of this node's parameter segments, or () if none
    slots: tuple[ParamSlot, ...] = ()
    attrs: tuple[tuple[str, object], ...] = ()
    out_shape: tuple[int, ...] = ()  # per-example (feature) shape

    def attr(self, key):
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)


@dataclass
class Graph:
    """Topologically ordered primitive DAG with a designated scalar loss.

    ``nodes[loss_id]`` is the single scalar output (mean of the per-example
    losses at ``loss_vec_id``). ``logits_id`` points at the pre-loss values
    that classifiers expose.
    """

    nodes: list[Node]
    input_id: int
    logits_id: int
    loss_vec_id: int
    loss_id: int
    input_shape: tuple[int, ...]
    num_classes: int | None
    slots: tuple[ParamSlot, ...]

    @property
    def loss_kind(self):
        kind = self.nodes[self.loss_vec_id].kind
        for name, node_kind in _LOSS_NODE.items():
            if node_kind == kind:
                return name
        return None

    def with_loss(self, loss):
        """Return a copy with the per-example loss node swapped to ``loss``."""
        if loss not in LOSS_KINDS:
            raise GraphError(f"unknown loss kind {loss!r}; expected one of {LOSS_KINDS}")
        if self.loss_kind is None:
            raise GraphError("graph has a custom loss vector; cannot swap loss kind")
        if loss == self.loss_kind:
            return self
        old = self.nodes[self.loss_vec_id]
        nodes = list(self.nodes)
        nodes[self.loss_vec_id] = Node(
            kind=_LOSS_NODE[loss], name=old.name, inputs=old.inputs,
            out_shape=old.out_shape,
        )
        return Graph(nodes, self.input_id, self.logits_id, self.loss_vec_id,
                     self.loss_id, self.input_shape, self.num_classes, self.slots)

    def validate(self):
        """Check topological order and the single-scalar-loss contract."""
        for i, node in enumerate(self.nodes):
            for j in node.inputs:
                if j >= i:
                    raise GraphError(f"node '{node.name}' consumes later node {j}")
        if self.nodes[self.loss_id].kind != "batch_mean":
            raise GraphError("designated loss node must be the batch mean")
        if self.nodes[self.loss_vec_id].out_shape != ():
            raise GraphError("per-example loss node must be scalar per example")


class GraphBuilder:
    """Incremental construction of a Graph; methods return node ids."""

    def __init__(self, input_shape):
        self.nodes: list[Node] = []
        self.slots: list[ParamSlot] = []
        self._names: set[str] = set()
        self.input_shape = tuple(int(d) for d in input_shape)
        self.input_id = self._add(Node("input", "input", (), out_shape=self.input_shape))

    def _add(self, node):
        if node.name in self._names:
            raise GraphError(f"duplicate node name {node.name!r}")
        self._names.add(node.name)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _shape(self, nid):
        return self.nodes[nid].out_shape

    def affine(self, src, out_features, name, bias=True):
        shape = self._shape(src)
        if len(shape) != 1:
            raise ShapeError(f"node '{name}': affine needs flat input, got {shape}")
        in_features = shape[0]
        slots = [ParamSlot(f"{name}.w", (in_features, out_features))]
        if bias:
            slots.append(ParamSlot(f"{name}.b", (out_features,)))
        self.slots.extend(slots)
        return self._add(Node("affine", name, (src,), slots=tuple(slots),
                              attrs=(("bias", bias),), out_shape=(out_features,)))

    def conv2d(self, src, out_channels, name, kernel=3, pad=None):
        shape = self._shape(src)
        if len(shape) != 3:
            raise ShapeError(f"node '{name}': conv2d needs (C,H,W) input, got {shape}")
        c, h, w = shape
        if pad is None:
            pad = (kernel - 1) // 2
        ho, wo = h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"node '{name}': kernel {kernel} too large for input {shape}")
        slots = (ParamSlot(f"{name}.w", (out_channels, c, kernel, kernel)),
                 ParamSlot(f"{name}.b", (out_channels,)))
        self.slots.extend(slots)
        return self._add(Node("conv2d", name, (src,), slots=slots,
                              attrs=(("kernel", kernel), ("pad", pad)),
                              out_shape=(out_channels, ho, wo)))

    def relu(self, src, name=None):
        name = name or f"relu{len(self.nodes)}"
        return self._add(Node("relu", name, (src,), out_shape=self._shape(src)))

    def maxpool2(self, src, name=None):
        shape = self._shape(src)
        if len(shape) != 3:
            raise ShapeError(f"maxpool2 needs (C,H,W) input, got {shape}")
        c, h, w = shape
        name = name or f"pool{len(self.nodes)}"
        return self._add(Node("maxpool2", name, (src,), out_shape=(c, h // 2, w // 2)))

    def flatten(self, src, name=None):
        name = name or f"flatten{len(self.nodes)}"
        size = int(np.prod(self._shape(src)))
        return self._add(Node("flatten", name, (src,), out_shape=(size,)))

    def add(self, a, b, name=None):
        return self._binary("add", a, b, name)

    def mul(self, a, b, name=None):
        return self._binary("mul", a, b, name)

    def _binary(self, kind, a, b, name):
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            raise ShapeError(f"{kind} operands differ in shape: {sa} vs {sb}")
        name = name or f"{kind}{len(self.nodes)}"
        return self._add(Node(kind, name, (a, b), out_shape=sa))

    def sum(self, src, name=None):
        name = name or f"sum{len(self.nodes)}"
        return self._add(Node("sum", name, (src,), out_shape=()))

    def mean(self, src, name=None):
        name = name or f"mean{len(self.nodes)}"
        return self._add(Node("mean", name, (src,), out_shape=()))

    def build(self, logits=None, loss="cross_entropy", loss_vec=None):
        """Finalize the graph.

        Classifier path: pass ``logits`` (a (C,)-shaped node) and a loss kind.
        Custom path: pass ``loss_vec``, an already-per-example-scalar node,
        used directly as the per-example loss (``logits`` defaults to it).
        """
        if loss_vec is None:
            if logits is None:
                raise GraphError("build needs logits or an explicit loss_vec")
            shape = self._shape(logits)
            if len(shape) != 1 or shape[0] < 2:
                raise ShapeError(f"logits must be (C,) with C >= 2, got {shape}")
            loss_vec = self._add(Node(_LOSS_NODE[loss], "loss", (logits,), out_shape=()))
            num_classes = shape[0]
        else:
            if self._shape(loss_vec) != ():
                raise ShapeError("loss_vec node must be scalar per example")
            if logits is None:
                logits = loss_vec
            num_classes = None
        loss_id = self._add(Node("batch_mean", "batch_mean", (loss_vec,), out_shape=()))
        graph = Graph(self.nodes, self.input_id, logits, loss_vec, loss_id,
                      self.input_shape, num_classes, tuple(self.slots))
        graph.validate()
        return graph


def layout_from_slots(slots):
    layout = []
    offset = 0
    for slot in slots:
        layout.append((slot.name, offset, slot.shape))
        offset += slot.size
    return tuple(layout), offset


@dataclass
class ParamVector:
    """Flat float64 parameter vector with named, contiguous segments."""

    data: Array
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self._index = {name: (off, shape) for name, off, shape in self.layout}
        total = sum(int(np.prod(s)) if s else 1 for _, _, s in self.layout)
        if total != self.data.size:
            raise ShapeError(f"layout covers {total} values, data has {self.data.size}")

    @classmethod
    def zeros(cls, slots):
        layout, size = layout_from_slots(slots)
        return cls(np.zeros(size), layout)

    @property
    def size(self):
        return self.data.size

    def view(self, name):
        off, shape = self._index[name]
        return self.data[off:off + int(np.prod(shape) if shape else 1)].reshape(shape)

    def copy(self):
        return ParamVector(self.data.copy(), self.layout)


def _check_batch(graph, batch, labels):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == len(graph.input_shape):
        raise ShapeError(
            f"node 'input': expected batched input (B, {graph.input_shape}), "
            f"got unbatched {batch.shape}")
    if batch.shape[0] == 0:
        raise ShapeError("node 'input': empty batch (B=0)")
    if tuple(batch.shape[1:]) != graph.input_shape:
        raise ShapeError(
            f"node 'input': expected per-example shape {graph.input_shape}, "
            f"got {tuple(batch.shape[1:])}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch.shape[0]:
        raise ShapeError(
            f"batch has {batch.shape[0]} examples but {labels.shape[0]} labels")
    if graph.num_classes is not None:
        if labels.size and (labels.min() < 0 or labels.max() >= graph.num_classes):
            raise ShapeError(
                f"labels must lie in [0, {graph.num_classes}), got "
                f"[{labels.min()}, {labels.max()}]")
    return batch, labels


def _windows(xp, k):
    # (B, C, Hp, Wp) -> view (B, C, Ho, Wo, k, k)
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))


def _node_forward(node, ins, params, labels, aux):
    kind = node.kind
    if kind == "affine":
        x = ins[0]
        y = x @ params.view(f"{node.name}.w")
        if node.attr("bias"):
            y = y + params.view(f"{node.name}.b")
        return y
    if kind == "relu":
        return np.maximum(ins[0], 0.0)
    if kind == "conv2d":
        k, pad = node.attr("kernel"), node.attr("pad")
        xp = np.pad(ins[0], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        aux[id(node)] = xp
        w = params.view(f"{node.name}.w")
        y = np.einsum("bcijuv,ocuv->boij", _windows(xp, k), w, optimize=True)
        return y + params.view(f"{node.name}.b")[None, :, None, None]
    if kind == "maxpool2":
        x = ins[0]
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xr = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        idx = np.argmax(xr, axis=-1)  # first max wins: deterministic ties
        aux[id(node)] = (idx, x.shape)
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    if kind == "flatten":
        return ins[0].reshape(ins[0].shape[0], -1)
    if kind == "add":
        return ins[0] + ins[1]
    if kind == "mul":
        return ins[0] * ins[1]
    if kind == "sum":
        return ins[0].reshape(ins[0].shape[0], -1).sum(axis=1)
    if kind == "mean":
        return ins[0].reshape(ins[0].shape[0], -1).mean(axis=1)
    if kind == "xent":
        z = ins[0]
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        probs = np.exp(z - m)
        probs /= probs.sum(axis=1, keepdims=True)
        aux[id(node)] = probs
        return lse - z[np.arange(z.shape[0]), labels]
    if kind == "neg_margin":
        z = ins[0]
        b = z.shape[0]
        masked = z.copy()
        masked[np.arange(b), labels] = -np.inf
        runner = np.argmax(masked, axis=1)
        aux[id(node)] = runner
        return z[np.arange(b), runner] - z[np.arange(b), labels]
    if kind == "batch_mean":
        return ins[0].mean()
    raise GraphError(f"node '{node.name}': unknown kind {kind!r}")


def _node_input_grads(node, g, ins, values, params, aux):
    """Gradients w.r.t. each input of ``node`` given output gradient ``g``."""
    kind = node.kind
    if kind == "affine":
        return (g @ params.view(f"{node.name}.w").T,)
    if kind == "relu":
        return (g * (ins[0] > 0.0),)
    if kind == "conv2d":
        k, pad = node.attr("kernel"), node.attr("pad")
        w = params.view(f"{node.name}.w")
        xp = aux[id(node)]
        dxp = np.zeros_like(xp)
        dcols = np.einsum("ocuv,boij->buvcij", w, g, optimize=True)
        ho, wo = g.shape[2], g.shape[3]
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + ho, v:v + wo] += dcols[:, u, v]
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return (dxp,)
    if kind == "maxpool2":
        idx, in_shape = aux[id(node)]
        b, c, h, w = in_shape
        h2, w2 = h // 2, w // 2
        flat = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
        dx_even = flat.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(in_shape)
        dx[:, :, :2 * h2, :2 * w2] = dx_even.reshape(b, c, 2 * h2, 2 * w2)
        return (dx,)
    if kind == "flatten":
        return (g.reshape(ins[0].shape),)
    if kind == "add":
        return (g, g)
    if kind == "mul":
        return (g * ins[1], g * ins[0])
    if kind == "sum":
        return (np.broadcast_to(g.reshape((-1,) + (1,) * (ins[0].ndim - 1)),
                                ins[0].shape).copy(),)
    if kind == "mean":
        d = int(np.prod(ins[0].shape[1:]))
        return (np.broadcast_to((g / d).reshape((-1,) + (1,) * (ins[0].ndim - 1)),
                                ins[0].shape).copy(),)
    if kind == "xent":
        probs = aux[id(node)]
        dz = probs.copy()
        dz[np.arange(dz.shape[0]), aux["labels"]] -= 1.0
        return (dz * g[:, None],)
    if kind == "neg_margin":
        runner = aux[id(node)]
        b = ins[0].shape[0]
        dz = np.zeros_like(ins[0])
        dz[np.arange(b), aux["labels"]] = -1.0
        dz[np.arange(b), runner] += 1.0
        return (dz * g[:, None],)
    raise GraphError(f"node '{node.name}': no backward for kind {kind!r}")


def _accumulate_param_grads(node, g, ins, sink, offsets):
    """Add ``node``'s parameter-gradient contribution into ``sink``.

    ``sink`` is one of: a (P,) vector (summed over the batch), a (B, P)
    matrix (per-example rows), or a (B,) vector of accumulated squared norms.
    """
    kind = node.kind
    if kind == "affine":
        x = ins[0]
        off_w = offsets[f"{node.name}.w"]
        if sink.ndim == 1 and offsets is not None:
            sink[off_w:off_w + x.shape[1] * g.shape[1]] += (x.T @ g).ravel()
            if node.attr("bias"):
                off_b = offsets[f"{node.name}.b"]
                sink[off_b:off_b + g.shape[1]] += g.sum(axis=0)
        else:
            dw = np.einsum("bi,bo->bio", x, g)
            sink[:, off_w:off_w + dw[0].size] += dw.reshape(g.shape[0], -1)
            if node.attr("bias"):
                off_b = offsets[f"{node.name}.b"]
                sink[:, off_b:off_b + g.shape[1]] += g
        return
    if kind == "conv2d":
        k = node.attr("kernel")
        xp = ins[0]  # padded input stashed by caller
        cols = _windows(xp, k)
        off_w = offsets[f"{node.name}.w"]
        off_b = offsets[f"{node.name}.b"]
        if sink.ndim == 1 and offsets is not None:
            dw = np.einsum("bcijuv,boij->ocuv", cols, g, optimize=True)
            sink[off_w:off_w + dw.size] += dw.ravel()
            sink[off_b:off_b + g.shape[1]] += g.sum(axis=(0, 2, 3))
        else:
            dw = np.einsum("bcijuv,boij->bocuv", cols, g, optimize=True)
            sink[:, off_w:off_w + dw[0].size] += dw.reshape(g.shape[0], -1)
            sink[:, off_b:off_b + g.shape[1]] += g.sum(axis=(2, 3))
        return
    raise GraphError(f"node '{node.name}' has parameters but no grad rule")


def _accumulate_sq_norms(node, g, ins, sink):
    """Per-example squared parameter-gradient norms, no (B, P) allocation."""
    kind = node.kind
    if kind == "affine":
        x = ins[0]
        xsq = np.einsum("bi,bi->b", x, x)
        gsq = np.einsum("bo,bo->b", g, g)
        sink += xsq * gsq
        if node.attr("bias"):
            sink += gsq
        return
    if kind == "conv2d":
        k = node.attr("kernel")
        cols = _windows(ins[0], k)
        dw = np.einsum("bcijuv,boij->bocuv", cols, g, optimize=True)
        dw = dw.reshape(dw.shape[0], -1)
        sink += np.einsum("bp,bp->b", dw, dw)
        db = g.sum(axis=(2, 3))
        sink += np.einsum("bo,bo->b", db, db)
        return
    raise GraphError(f"node '{node.name}' has parameters but no norm rule")


def _evaluate(graph, params, batch, labels):
    """Run the forward pass; returns (values, aux) with per-node caches."""
    expected, total = layout_from_slots(graph.slots)
    if params.layout != expected or params.size != total:
        raise ShapeError("parameter vector layout does not match the graph")
    values: list[Array] = [None] * len(graph.nodes)
    aux = {"labels": labels}
    for i, node in enumerate(graph.nodes):
        if node.kind == "input":
            values[i] = batch
            continue
        ins = [values[j] for j in node.inputs]
        values[i] = _node_forward(node, ins, params, labels, aux)
    losses = values[graph.loss_vec_id]
    if not np.isfinite(losses).all():
        bad = int(np.flatnonzero(~np.isfinite(losses))[0])
        raise NonFiniteError(f"non-finite loss at example {bad}", example=bad)
    return values, aux


def forward(graph, params, batch, labels):
    """Per-example losses and logits for a batch.

    Returns ``(losses, logits)`` where ``losses`` has one finite entry per
    example and ``logits`` is the designated pre-loss node's value.
    """
    batch, labels = _check_batch(graph, batch, labels)
    values, _ = _evaluate(graph, params, batch, labels)
    return values[graph.loss_vec_id].copy(), values[graph.logits_id].copy()


def _backprop(graph, params, values, aux, seed_id, seed, *,
              param_sink=None, offsets=None, sq_norms=None):
    """Single reverse traversal from ``seed_id``; fills the requested sinks."""
    counters.backward += 1
    grads: dict[int, Array] = {seed_id: seed}
    input_grad = None
    for i in range(seed_id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.kind == "input":
            input_grad = g
            continue
        ins = [values[j] for j in node.inputs]
        if node.slots:
            grad_ins = ins
            if node.kind == "conv2d":
                grad_ins = [aux[id(node)]]  # padded input
            if sq_norms is not None:
                _accumulate_sq_norms(node, g, grad_ins, sq_norms)
            if param_sink is not None:
                _accumulate_param_grads(node, g, grad_ins, param_sink, offsets)
        dins = _node_input_grads(node, g, ins, values, params, aux)
        for j, dg in zip(node.inputs, dins):
            if j in grads:
                grads[j] = grads[j] + dg
            else:
                grads[j] = dg
    return input_grad


def _param_offsets(graph):
    layout, _ = layout_from_slots(graph.slots)
    return {name: off for name, off, _ in layout}


def backward_batch(graph, params, batch, labels, weights=None):
    """Gradient of the (optionally reweighted) mean loss w.r.t. parameters.

    With ``weights`` given, differentiates (1/B) * sum_i weights[i] * loss_i;
    the default is the plain batch mean.
    """
    batch, labels = _check_batch(graph, batch, labels)
    values, aux = _evaluate(graph, params, batch, labels)
    b = batch.shape[0]
    if weights is None:
        seed = np.full(b, 1.0 / b)
    else:
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != b:
            raise ShapeError(f"{weights.shape[0]} weights for batch of {b}")
        seed = weights / b
    sink = np.zeros(params.size)
    _backprop(graph, params, values, aux, graph.loss_vec_id, seed,
              param_sink=sink, offsets=_param_offsets(graph))
    if not np.isfinite(sink).all():
        raise NonFiniteError("non-finite parameter gradient")
    return sink


def per_example_grads(graph, params, batch, labels):
    """(B, P) matrix of per-example parameter gradients, one traversal.

    Valid because no primitive on the loss path mixes the batch axis; row i
    equals backward_batch on the singleton batch {x_i}.
    """
    batch, labels = _check_batch(graph, batch, labels)
    values, aux = _evaluate(graph, params, batch, labels)
    b = batch.shape[0]
    sink = np.zeros((b, params.size))
    _backprop(graph, params, values, aux, graph.loss_vec_id, np.ones(b),
              param_sink=sink, offsets=_param_offsets(graph))
    if not np.isfinite(sink).all():
        bad = int(np.flatnonzero(~np.isfinite(sink).all(axis=1))[0])
        raise NonFiniteError(f"non-finite gradient row for example {bad}", example=bad)
    return sink


def per_example_grad_norms(graph, params, batch, labels):
    """Per-example L2 norms of parameter gradients without the (B, P) matrix."""
    batch, labels = _check_batch(graph, batch, labels)
    values, aux = _evaluate(graph, params, batch, labels)
    b = batch.shape[0]
    sq = np.zeros(b)
    _backprop(graph, params, values, aux, graph.loss_vec_id, np.ones(b),
              sq_norms=sq)
    return np.sqrt(sq)


def input_grads(graph, params, batch, labels):
    """Row i = gradient of loss_i w.r.t. x_i, for the whole batch at once."""
    return loss_and_input_grads(graph, params, batch, labels)[1]


def loss_and_input_grads(graph, params, batch, labels):
    """Per-example losses and input gradients from one evaluation."""
    batch, labels = _check_batch(graph, batch, labels)
    values, aux = _evaluate(graph, params, batch, labels)
    g = _backprop(graph, params, values, aux, graph.loss_vec_id,
                  np.ones(batch.shape[0]))
    if g is None:
        g = np.zeros_like(batch)
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite input gradient")
    return values[graph.loss_vec_id].copy(), g


def logit_input_jacobian(graph, params, x, label=0):
    """(C, *input_shape) Jacobian of the logits w.r.t. a single input."""
    if graph.num_classes is None:
        raise GraphError("graph has no logits node with classes")
    batch = np.asarray(x, dtype=np.float64)[None]
    batch, labels = _check_batch(graph, batch, [label])
    values, aux = _evaluate(graph, params, batch, labels)
    c = graph.num_classes
    rows = []
    for k in range(c):
        seed = np.zeros((1, c))
        seed[0, k] = 1.0
        g = _backprop(graph, params, values, aux, graph.logits_id, seed)
        rows.append(np.zeros(graph.input_shape) if g is None else g[0])
    return np.stack(rows)


def finite_diff_gradient(graph, params, batch, labels, h=1e-5):
    """Central-difference gradient of the mean loss; test oracle only."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    batch, labels = _check_batch(graph, batch, labels)
    theta = params.data
    grad = np.zeros(params.size)
    work = ParamVector(theta.copy(), params.layout)
    for j in range(params.size):
        orig = theta[j]
        work.data[j] = orig + h
        up, _ = _evaluate(graph, work, batch, labels)
        work.data[j] = orig - h
        down, _ = _evaluate(graph, work, batch, labels)
        work.data[j] = orig
        grad[j] = (up[graph.loss_vec_id].mean() - down[graph.loss_vec_id].mean()) / (2 * h)
    return grad
