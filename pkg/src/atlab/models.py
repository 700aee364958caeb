"""Model zoo: MLPs and a small conv net, plus init and evaluation helpers.

A model is just a Graph (see ad.py) plus an initialized ParamVector. Both
architectures end in a linear layer producing one logit per class; the loss
node is swappable between cross-entropy and the negative-margin loss used by
margin-based attacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    kind: "mlp" or "convnet".
    layers: for MLPs, the full width sequence including input and output,
        e.g. [784, 128, 64, 10]. Ignored for the conv net.
    input_shape: per-example shape, e.g. (784,) or (1, 28, 28).
    num_classes: logit count; must match the last MLP layer.
    """

    kind: str = "mlp"
    layers: tuple[int, ...] = (784, 128, 64, 10)
    input_shape: tuple[int, ...] = (784,)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(d) for d in self.layers))
        object.__setattr__(self, "input_shape",
                           tuple(int(d) for d in self.input_shape))
        if self.kind not in ("mlp", "convnet"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp":
            if len(self.layers) < 2:
                raise ValueError("mlp needs at least input and output widths")
            if self.layers[-1] != self.num_classes:
                raise ValueError(
                    f"last layer width {self.layers[-1]} != "
                    f"num_classes {self.num_classes}")
            if int(np.prod(self.input_shape)) != self.layers[0]:
                raise ValueError(
                    f"input shape {self.input_shape} does not flatten to "
                    f"first layer width {self.layers[0]}")
        else:
            if len(self.input_shape) != 3:
                raise ValueError("convnet needs a (C, H, W) input shape")


def build_graph(spec, loss="cross_entropy"):
    """Construct the computation graph for ``spec``."""
    if spec.kind == "mlp":
        gb = ad.GraphBuilder(spec.input_shape)
        h = gb.input_id
        if len(spec.input_shape) > 1:
            h = gb.flatten(h, "flat_in")
        for li in range(1, len(spec.layers)):
            h = gb.affine(h, spec.layers[li], f"fc{li}")
            if li < len(spec.layers) - 1:
                h = gb.relu(h, f"relu{li}")
        return gb.build(logits=h, loss=loss)
    # conv net: two conv/pool stages then two affine layers
    gb = ad.GraphBuilder(spec.input_shape)
    h = gb.conv2d(gb.input_id, 8, "conv1", kernel=3)
    h = gb.relu(h, "relu_c1")
    h = gb.maxpool2(h, "pool1")
    h = gb.conv2d(h, 16, "conv2", kernel=3)
    h = gb.relu(h, "relu_c2")
    h = gb.maxpool2(h, "pool2")
    h = gb.flatten(h, "flat")
    h = gb.affine(h, 64, "fc1")
    h = gb.relu(h, "relu_f1")
    h = gb.affine(h, spec.num_classes, "fc2")
    return gb.build(logits=h, loss=loss)


def init_params(graph, rng):
    """Kaiming-uniform weights, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases."""
    params = ad.ParamVector.zeros(graph.slots)
    for slot in graph.slots:
        seg = params.view(slot.name)
        if slot.name.endswith(".b"):
            continue  # already zero
        if len(slot.shape) == 2:
            fan_in = slot.shape[0]
        else:  # conv weight (O, C, k, k)
            fan_in = int(np.prod(slot.shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        seg[...] = rng.uniform(-bound, bound, size=slot.shape)
    return params


@dataclass
class Model:
    spec: ModelSpec
    graph: ad.Graph
    params: ad.ParamVector
    _margin_graph: ad.Graph | None = field(default=None, repr=False)

    def graph_for(self, loss):
        if loss == "cross_entropy":
            return self.graph
        if self._margin_graph is None:
            self._margin_graph = self.graph.with_loss(loss)
        return self._margin_graph


def build_model(spec, rng=None, seed=0):
    """Graph + freshly initialized parameters for ``spec``."""
    if rng is None:
        rng = np.random.default_rng(seed)
    graph = build_graph(spec)
    return Model(spec=spec, graph=graph, params=init_params(graph, rng))


def predict(model, x):
    """Argmax class predictions for a batch."""
    x = np.asarray(x, dtype=np.float64)
    _, logits = ad.forward(model.graph, model.params, x,
                           np.zeros(x.shape[0], dtype=np.int64))
    return logits.argmax(axis=1)


def accuracy(model, x, y):
    """Fraction of examples whose argmax logit matches the label."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ValueError("accuracy needs at least one example")
    return float((predict(model, x) == y).mean())


def margin_loss(logits, labels):
    """Per-example negative margin: max_{j != y} z_j - z_y.

    Positive iff the example is misclassified. Matches the graph's
    "margin" loss node value exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = logits.shape[0]
    masked = logits.copy()
    masked[np.arange(b), labels] = -np.inf
    return masked.max(axis=1) - logits[np.arange(b), labels]
