"""Reverse-mode differentiation over a static, ordered layer graph.

A :class:`Graph` is a list of nodes.  Each node applies one layer to the
outputs of earlier nodes or to named input slots.  Activations live in a
:class:`Workspace`, never in the graph, so one graph can serve several
workers at once.  All arrays carry a leading batch axis; image tensors
are laid out ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when layer shapes do not line up."""


class StateError(RuntimeError):
    """Raised when a backward pass has no matching forward pass."""


def check_grid(grid, channels=None):
    """Validate a single ``(C, H, W)`` grid and return it as float64."""
    grid = np.asarray(grid, dtype=DTYPE)
    if grid.ndim != 3:
        raise ShapeError(f"grid must have 3 axes (C, H, W), got shape {grid.shape}")
    if channels is not None and grid.shape[0] != channels:
        raise ShapeError(f"grid has {grid.shape[0]} channels, expected {channels}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    return grid


class ParamVector:
    """A named parameter array whose shape is fixed at construction."""

    def __init__(self, name, values):
        self.name = name
        self._values = np.array(values, dtype=DTYPE)
        self._shape = self._values.shape

    @property
    def shape(self):
        return self._shape

    @property
    def size(self):
        return self._values.size

    @property
    def values(self):
        return self._values

    @values.setter
    def values(self, new):
        new = np.asarray(new, dtype=DTYPE)
        if new.shape != self._shape:
            raise ShapeError(
                f"parameter {self.name!r} has shape {self._shape}, got {new.shape}"
            )
        self._values = new.copy()

    def zeros_like(self):
        return np.zeros(self._shape, dtype=DTYPE)

    def __repr__(self):
        return f"ParamVector({self.name!r}, shape={self._shape})"


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Layers
#
# A layer is stateless apart from its hyperparameters.  ``forward`` returns
# (output, cache) and ``backward`` consumes the cache.  Parameterized layers
# expose ``param_shapes`` and take their parameter arrays explicitly.
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    n_inputs = 1

    def param_shapes(self, in_shapes):
        return {}

    def init_params(self, in_shapes, rng):
        return {}

    def out_shape(self, in_shapes):
        raise NotImplementedError

    def forward(self, xs, params, train, rng):
        raise NotImplementedError

    def backward(self, grad, cache, params, need_input=True):
        """Return (input gradients, parameter gradients).

        With ``need_input`` false a layer may return None for input gradients.
        """
        raise NotImplementedError

    def hyper(self):
        return {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        self.units = int(units)

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if len(s) != 1:
            raise ShapeError(f"dense expects a flat input, got {s}")
        return (self.units,)

    def param_shapes(self, in_shapes):
        (s,) = in_shapes
        return {"W": (s[0], self.units), "b": (self.units,)}

    def init_params(self, in_shapes, rng):
        (s,) = in_shapes
        return {
            "W": xavier_uniform(rng, (s[0], self.units), s[0], self.units),
            "b": np.zeros(self.units),
        }

    def forward(self, xs, params, train, rng):
        (x,) = xs
        return x @ params["W"] + params["b"], x

    def backward(self, grad, cache, params, need_input=True):
        x = cache
        return [grad @ params["W"].T], {"W": x.T @ grad, "b": grad.sum(axis=0)}

    def hyper(self):
        return {"units": self.units}


class LinearHeads(Dense):
    """Independent linear outputs, one per regressed quantity."""

    kind = "linear-heads"


def sigmoid(z):
    # exp of a non-positive argument only, so tiny probabilities keep full
    # relative precision instead of cancelling against 1
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Logistic(Dense):
    """Dense projection to a single logit followed by the logistic function."""

    kind = "logistic"

    def __init__(self, units=1):
        super().__init__(1)

    def forward(self, xs, params, train, rng):
        (x,) = xs
        z = x @ params["W"] + params["b"]
        p = sigmoid(z)
        return p, (x, p)

    def backward(self, grad, cache, params, need_input=True):
        x, p = cache
        gz = grad * p * (1.0 - p)
        return [gz @ params["W"].T], {"W": x.T @ gz, "b": gz.sum(axis=0)}

    def hyper(self):
        return {}


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, params, train, rng):
        (x,) = xs
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache, params, need_input=True):
        return [grad * cache], {}


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def __init__(self, keep=0.75):
        if not 0.0 < keep <= 1.0:
            raise ValueError(f"keep probability must lie in (0, 1], got {keep}")
        self.keep = float(keep)

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs, params, train, rng):
        (x,) = xs
        if not train or self.keep == 1.0:
            return x, None
        if rng is None:
            raise StateError("train-mode dropout needs a random generator")
        mask = (rng.random(x.shape) < self.keep) / self.keep
        return x * mask, mask

    def backward(self, grad, cache, params, need_input=True):
        if cache is None:
            return [grad], {}
        return [grad * cache], {}

    def hyper(self):
        return {"keep": self.keep}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shapes):
        return (int(np.prod(in_shapes[0])),)

    def forward(self, xs, params, train, rng):
        (x,) = xs
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, params, need_input=True):
        return [grad.reshape(cache)], {}


class Concat(Layer):
    """Concatenate flat feature vectors."""

    kind = "concat"

    def __init__(self, n_inputs=2):
        self.n_inputs = int(n_inputs)

    def out_shape(self, in_shapes):
        if any(len(s) != 1 for s in in_shapes):
            raise ShapeError(f"concat expects flat inputs, got {in_shapes}")
        return (sum(s[0] for s in in_shapes),)

    def forward(self, xs, params, train, rng):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, grad, cache, params, need_input=True):
        splits = np.cumsum(cache)[:-1]
        return list(np.split(grad, splits, axis=1)), {}

    def hyper(self):
        return {"n_inputs": self.n_inputs}


class TileConcat(Layer):
    """Append a feature vector to a feature map as spatially constant channels.

    Inputs are ``(feature_map, vector)``; the backward pass sums the spatial
    gradient of each appended channel back into the vector.
    """

    kind = "tile-concat"
    n_inputs = 2

    def out_shape(self, in_shapes):
        fmap, vec = in_shapes
        if len(fmap) != 3 or len(vec) != 1:
            raise ShapeError(f"tile-concat expects (C, H, W) and (F,), got {in_shapes}")
        return (fmap[0] + vec[0], fmap[1], fmap[2])

    def forward(self, xs, params, train, rng):
        fmap, vec = xs
        n, c1, h, w = fmap.shape
        tiled = np.broadcast_to(vec[:, :, None, None], (n, vec.shape[1], h, w))
        return np.concatenate([fmap, tiled], axis=1), c1

    def backward(self, grad, cache, params, need_input=True):
        c1 = cache
        return [grad[:, :c1], grad[:, c1:].sum(axis=(2, 3))], {}


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, filters, kernel, stride=1, padding=0):
        self.filters = int(filters)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if len(s) != 3:
            raise ShapeError(f"conv2d expects a (C, H, W) input, got {s}")
        c, h, w = s
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d kernel {self.kernel} does not fit input {h}x{w} "
                f"with padding {self.padding}"
            )
        return (self.filters, ho, wo)

    def param_shapes(self, in_shapes):
        c = in_shapes[0][0]
        return {"W": (self.filters, c, self.kernel, self.kernel), "b": (self.filters,)}

    def init_params(self, in_shapes, rng):
        c = in_shapes[0][0]
        k2 = self.kernel * self.kernel
        shape = (self.filters, c, self.kernel, self.kernel)
        return {
            "W": xavier_uniform(rng, shape, c * k2, self.filters * k2),
            "b": np.zeros(self.filters),
        }

    def _cols(self, xp):
        # im2col laid out (C*k*k, N*Ho*Wo) so each copied row is contiguous
        k, st = self.kernel, self.stride
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::st, ::st]
        n, c, ho, wo = win.shape[:4]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
        return cols.reshape(c * k * k, n * ho * wo), (n, ho, wo)

    def forward(self, xs, params, train, rng):
        (x,) = xs
        xp = _pad(x, self.padding)
        cols, (n, ho, wo) = self._cols(xp)
        W = params["W"]
        f = W.shape[0]
        out = (W.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
        out = out + params["b"][None, :, None, None]
        return out, (cols, xp.shape, x.shape)

    def backward(self, grad, cache, params, need_input=True):
        cols, padded_shape, in_shape = cache
        W = params["W"]
        f, c, k, _ = W.shape
        n, _, ho, wo = grad.shape
        g = grad.transpose(1, 0, 2, 3).reshape(f, -1)
        dW = (g @ cols.T).reshape(W.shape)
        db = grad.sum(axis=(0, 2, 3))
        if not need_input:
            return [None], {"W": dW, "b": db}
        dcols = (W.reshape(f, -1).T @ g).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros(padded_shape)
        view = dxp.transpose(1, 0, 2, 3)
        s = self.stride
        for i in range(k):
            for j in range(k):
                view[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
        p = self.padding
        dx = dxp[:, :, p : p + in_shape[2], p : p + in_shape[3]] if p else dxp
        return [dx], {"W": dW, "b": db}

    def hyper(self):
        return {
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }


class MaxPool2d(Layer):
    """Non-overlapping max pooling; ties go to the first cell in row-major order."""

    kind = "maxpool2d"

    def __init__(self, kernel=2):
        self.kernel = int(kernel)

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if len(s) != 3:
            raise ShapeError(f"maxpool2d expects a (C, H, W) input, got {s}")
        c, h, w = s
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"maxpool2d kernel {self.kernel} larger than {h}x{w}")
        return (c, h // self.kernel, w // self.kernel)

    def forward(self, xs, params, train, rng):
        (x,) = xs
        k = self.kernel
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        blocks = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, grad, cache, params, need_input=True):
        idx, in_shape = cache
        k = self.kernel
        n, c, h, w = in_shape
        ho, wo = grad.shape[2], grad.shape[3]
        blocks = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(in_shape)
        dx[:, :, : ho * k, : wo * k] = blocks.reshape(n, c, ho * k, wo * k)
        return [dx], {}

    def hyper(self):
        return {"kernel": self.kernel}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (
        Dense,
        LinearHeads,
        Logistic,
        ReLU,
        Dropout,
        Flatten,
        Concat,
        TileConcat,
        Conv2d,
        MaxPool2d,
    )
}


def make_layer(kind, **hyper):
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**hyper)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    name: str
    layer: Layer
    inputs: tuple


@dataclass
class Graph:
    """An acyclic, ordered layer graph with named input slots and one output.

    Shapes are inferred when nodes are added, so a graph that builds never
    hits a shape error at run time for correctly shaped inputs.
    """

    slots: dict
    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.slots = {k: tuple(v) for k, v in self.slots.items()}
        for name, shape in self.slots.items():
            self.shapes[name] = shape

    # -- construction -----------------------------------------------------

    def add(self, name, layer, *inputs, rng=None):
        if name in self.shapes:
            raise ValueError(f"duplicate node name {name!r}")
        if not inputs:
            inputs = (self.output,)
        for src in inputs:
            if src not in self.shapes:
                raise ShapeError(f"node {name!r}: unknown input {src!r}")
        if len(inputs) != layer.n_inputs:
            raise ShapeError(
                f"node {name!r}: {layer.kind} takes {layer.n_inputs} inputs, "
                f"got {len(inputs)}"
            )
        in_shapes = [self.shapes[s] for s in inputs]
        try:
            out = layer.out_shape(in_shapes)
        except ShapeError as exc:
            raise ShapeError(f"node {name!r}: {exc}") from None
        shapes = layer.param_shapes(in_shapes)
        init = layer.init_params(in_shapes, rng) if (shapes and rng is not None) else {}
        for pname, pshape in shapes.items():
            values = init.get(pname, np.zeros(pshape))
            self.params[f"{name}.{pname}"] = ParamVector(f"{name}.{pname}", values)
        self.nodes.append(Node(name, layer, tuple(inputs)))
        self.shapes[name] = out
        return name

    @property
    def output(self):
        if not self.nodes:
            raise ShapeError("graph has no nodes")
        return self.nodes[-1].name

    @property
    def output_shape(self):
        return self.shapes[self.output]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def node(self, name):
        for nd in self.nodes:
            if nd.name == name:
                return nd
        raise KeyError(name)

    def node_params(self, node):
        prefix = node.name + "."
        return {
            k[len(prefix) :]: p.values
            for k, p in self.params.items()
            if k.startswith(prefix)
        }

    def depends_on(self, slot):
        """Names of nodes whose value changes when ``slot`` changes."""
        dirty = {slot}
        for nd in self.nodes:
            if any(src in dirty for src in nd.inputs):
                dirty.add(nd.name)
        dirty.discard(slot)
        return dirty

    def state(self):
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].values = v

    # -- description (used by checkpoints) --------------------------------

    def describe(self):
        lines = []
        for name, shape in self.slots.items():
            lines.append(f"slot {name} {'x'.join(str(s) for s in shape)}")
        for nd in self.nodes:
            hyper = " ".join(f"{k}={v}" for k, v in nd.layer.hyper().items())
            line = f"layer {nd.name} {nd.layer.kind} {','.join(nd.inputs)}"
            lines.append(f"{line} {hyper}".rstrip())
        return lines

    @classmethod
    def from_description(cls, lines):
        slots = {}
        layer_lines = []
        for line in lines:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "slot":
                slots[parts[1]] = tuple(int(s) for s in parts[2].split("x"))
            elif parts[0] == "layer":
                layer_lines.append(parts[1:])
            else:
                raise ValueError(f"unrecognized graph line: {line!r}")
        graph = cls(slots)
        for name, kind, inputs, *rest in layer_lines:
            hyper = {}
            for item in rest:
                key, val = item.split("=", 1)
                hyper[key] = float(val) if "." in val else int(val)
            graph.add(name, make_layer(kind, **hyper), *inputs.split(","))
        return graph

    # -- execution ---------------------------------------------------------

    def workspace(self):
        return Workspace(self)

    def forward(self, inputs, train=False, rng=None):
        """One-shot forward pass returning the output array."""
        return self.workspace().forward(inputs, train=train, rng=rng)


class Workspace:
    """Per-call activation storage for forward and backward passes."""

    def __init__(self, graph):
        self.graph = graph
        self._values = None
        self._caches = None
        self._train = None
        self._clean = set()

    def forward(self, inputs, train=False, rng=None, reuse=None):
        """Run the graph on batched inputs.

        ``inputs`` maps slot names to arrays with a leading batch axis.
        With ``reuse``, a previous workspace whose inputs differ only in the
        slots named by ``reuse[1]``, nodes independent of those slots are
        copied instead of recomputed.
        """
        g = self.graph
        values = {}
        batch = None
        for name, shape in g.slots.items():
            if name not in inputs:
                raise ShapeError(f"missing input slot {name!r}")
            x = np.asarray(inputs[name], dtype=DTYPE)
            if x.shape[1:] != shape:
                raise ShapeError(
                    f"input slot {name!r} expects per-sample shape {shape}, got {x.shape[1:]}"
                )
            if batch is None:
                batch = x.shape[0]
            elif x.shape[0] != batch:
                raise ShapeError("input slots disagree on batch size")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"input slot {name!r} contains non-finite values")
            values[name] = x
        extra = set(inputs) - set(g.slots)
        if extra:
            raise ShapeError(f"unknown input slots {sorted(extra)}")

        clean = set()
        if reuse is not None:
            prev, changed = reuse
            if prev._values is None or prev._train:
                raise StateError("can only reuse a completed eval-mode workspace")
            dirty = set()
            for slot in changed:
                dirty |= g.depends_on(slot)
            clean = {nd.name for nd in g.nodes} - dirty

        caches = {}
        for nd in g.nodes:
            if nd.name in clean:
                v = prev._values[nd.name]
                if v.shape[0] != batch:
                    if v.shape[0] != 1:
                        raise ShapeError("reuse needs a single-sample workspace to broadcast")
                    v = np.broadcast_to(v, (batch,) + v.shape[1:])
                values[nd.name] = v
                caches[nd.name] = None
                continue
            xs = [values[s] for s in nd.inputs]
            out, cache = nd.layer.forward(xs, g.node_params(nd), train, rng)
            values[nd.name] = out
            caches[nd.name] = cache
        self._values = values
        self._caches = caches
        self._train = train
        self._clean = clean
        return values[g.output]

    def value(self, name):
        if self._values is None:
            raise StateError("no forward pass recorded")
        return self._values[name]

    def _backward(self, grad_out, wanted_slots):
        if self._values is None:
            raise StateError("backward called before forward")
        g = self.graph
        out = self._values[g.output]
        grad_out = np.broadcast_to(np.asarray(grad_out, dtype=DTYPE), out.shape)
        grads = {g.output: np.array(grad_out)}
        pgrads = {k: p.zeros_like() for k, p in g.params.items()}
        for nd in reversed(g.nodes):
            if nd.name not in grads:
                continue
            if nd.name in self._clean:
                # reused from another workspace: independent of the changed slots
                continue
            need = any(src not in g.slots or src in wanted_slots for src in nd.inputs)
            gin, gp = nd.layer.backward(
                grads.pop(nd.name), self._caches[nd.name], g.node_params(nd), need_input=need
            )
            for pname, gv in gp.items():
                pgrads[f"{nd.name}.{pname}"] += gv
            if not need:
                continue
            for src, gv in zip(nd.inputs, gin):
                if src in grads:
                    grads[src] = grads[src] + gv
                else:
                    grads[src] = gv
        return grads, pgrads

    def backward_weights(self, grad_out=1.0):
        """Gradients of ``sum(grad_out * output)`` for every parameter.

        Accumulation starts from zero on every call.
        """
        if self._values is not None and self._clean:
            raise StateError("weight gradients need a full forward pass, not a reused one")
        _, pgrads = self._backward(grad_out, ())
        return pgrads

    def backward_inputs(self, grad_out=1.0, slots=None):
        """Gradients of the output with respect to input slots.

        Requires an eval-mode forward pass so the result is deterministic.
        """
        if self._values is None:
            raise StateError("backward called before forward")
        if self._train:
            raise StateError("input gradients need an eval-mode forward pass")
        wanted = tuple(self.graph.slots if slots is None else slots)
        grads, _ = self._backward(grad_out, wanted)
        out = {}
        for s in wanted:
            if s in grads:
                out[s] = grads[s]
            else:
                out[s] = np.zeros_like(self._values[s])
        return out


def tile_concat(config_features, feature_map):
    """Single-sample point-wise tiling of ``config_features`` onto ``feature_map``."""
    fmap = check_grid(feature_map)
    vec = np.asarray(config_features, dtype=DTYPE).reshape(-1)
    out, _ = TileConcat().forward([fmap[None], vec[None]], {}, False, None)
    return out[0]
