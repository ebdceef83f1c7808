"""Sequential compute graphs over numpy arrays with reverse-mode gradients.

A :class:`ComputeGraph` is an ordered list of layers. Each layer knows its
forward map, the vector-Jacobian product of that map (``backward``), and a
``forward_diff`` used by :func:`finite_difference_check` to push a pair of
nearby inputs through the graph without cancellation.

Arrays stand in for tensors directly: float32 for attacks and training,
float64 (``graph.astype(np.float64)``) for gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trap import affine


class GraphError(ValueError):
    """Shape or reference error, tagged with the offending layer id."""

    def __init__(self, layer_id, message):
        self.layer_id = layer_id
        super().__init__(f"layer {layer_id!r}: {message}")


class NonFiniteError(FloatingPointError):
    def __init__(self, coordinate, message="non-finite value"):
        self.coordinate = coordinate
        super().__init__(f"{message} at input coordinate {coordinate}")


class Layer:
    kind = ""

    def __init__(self, layer_id: str):
        self.layer_id = layer_id
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def param_shapes(self) -> dict:
        return {}

    def forward(self, x):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, grad, cache, param_grads=True):
        """Return ``(grad_x, {param_name: grad})``."""
        raise NotImplementedError

    def forward_diff(self, x, d):
        """Propagate ``(x, d)`` standing for the input pair ``x`` and ``x + d``.

        Returns ``(y, dy, crossed)`` where ``dy`` is ``f(x + d) - f(x)`` and
        ``crossed`` marks batch rows whose pair straddles a kink.
        """
        y, _ = self.forward(x)
        return y, self.forward(x + d)[0] - y, np.zeros(len(x), dtype=bool)

    def select(self, rows):
        """This layer restricted to the given batch rows (for per-item state)."""
        return self

    def astype(self, dtype):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def hyperparams(self) -> dict:
        return {}

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparams().items())
        return f"{type(self).__name__}({self.layer_id!r}{', ' if hp else ''}{hp})"


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, layer_id, in_channels, out_channels, kernel_size, stride=1, padding=0, weight=None, bias=None):
        super().__init__(layer_id)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.params["weight"] = (
            np.zeros((out_channels, in_channels, k, k), np.float32) if weight is None else np.asarray(weight)
        )
        self.params["bias"] = np.zeros(out_channels, np.float32) if bias is None else np.asarray(bias)

    def hyperparams(self):
        return dict(
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            kernel_size=self.kernel_size,
            stride=self.stride,
            padding=self.padding,
        )

    def param_shapes(self):
        k = self.kernel_size
        return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise GraphError(self.layer_id, f"expects ({self.in_channels}, H, W) input, got {shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (shape[1] + 2 * p - k) // s + 1
        wo = (shape[2] + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise GraphError(self.layer_id, f"kernel {k} does not fit input {shape}")
        return (self.out_channels, ho, wo)

    def _apply(self, x, with_bias=True):
        k = self.kernel_size
        cols, ho, wo = _im2col(x, k, k, self.stride, self.padding)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T
        if with_bias:
            out += self.params["bias"]
        out = out.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), cols

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise GraphError(self.layer_id, f"expects (N, {self.in_channels}, H, W) input, got {x.shape}")
        y, cols = self._apply(x)
        return y, (x.shape, cols)

    def backward(self, grad, cache, param_grads=True):
        in_shape, cols = cache
        n, c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = grad.shape[2], grad.shape[3]
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        pgrads = {}
        if param_grads:
            pgrads["weight"] = (gm.T @ cols).reshape(self.params["weight"].shape)
            pgrads["bias"] = gm.sum(axis=0)
        dcols = (gm @ self.params["weight"].reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dx), pgrads

    def forward_diff(self, x, d):
        y, _ = self.forward(x)
        dy, _ = self._apply(d, with_bias=False)
        return y, dy, np.zeros(len(x), dtype=bool)


class Linear(Layer):
    kind = "linear"

    def __init__(self, layer_id, in_features, out_features, weight=None, bias=None):
        super().__init__(layer_id)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = (
            np.zeros((out_features, in_features), np.float32) if weight is None else np.asarray(weight)
        )
        self.params["bias"] = np.zeros(out_features, np.float32) if bias is None else np.asarray(bias)

    def hyperparams(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise GraphError(self.layer_id, f"expects ({self.in_features},) input, got {shape}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise GraphError(self.layer_id, f"expects (N, {self.in_features}) input, got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, grad, cache, param_grads=True):
        pgrads = {}
        if param_grads:
            pgrads["weight"] = grad.T @ cache
            pgrads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"], pgrads

    def forward_diff(self, x, d):
        y, _ = self.forward(x)
        return y, d @ self.params["weight"].T, np.zeros(len(x), dtype=bool)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, grad, cache, param_grads=True):
        return grad * cache, {}

    def forward_diff(self, x, d):
        y = np.maximum(x, 0)
        xp = x + d
        pos, pos_p = x > 0, xp > 0
        dy = np.where(pos & pos_p, d, 0.0)
        dy = np.where(~pos & pos_p, xp, dy)
        dy = np.where(pos & ~pos_p, -x, dy)
        crossed = (pos != pos_p).reshape(len(x), -1).any(axis=1)
        return y, dy.astype(x.dtype), crossed


class MaxPool2d(Layer):
    """Max pooling; ties route the gradient to the first maximum in row-major order."""

    kind = "maxpool2d"

    def __init__(self, layer_id, kernel_size=2, stride=None):
        super().__init__(layer_id)
        self.kernel_size = kernel_size
        self.stride = stride or kernel_size

    def hyperparams(self):
        return dict(kernel_size=self.kernel_size, stride=self.stride)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise GraphError(self.layer_id, f"expects (C, H, W) input, got {shape}")
        k, s = self.kernel_size, self.stride
        ho, wo = (shape[1] - k) // s + 1, (shape[2] - k) // s + 1
        if ho < 1 or wo < 1:
            raise GraphError(self.layer_id, f"window {k} does not fit input {shape}")
        return (shape[0], ho, wo)

    def _windows(self, x):
        k, s = self.kernel_size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(*win.shape[:4], k * k)

    def forward(self, x):
        if x.ndim != 4:
            raise GraphError(self.layer_id, f"expects (N, C, H, W) input, got {x.shape}")
        win = self._windows(x)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, grad, cache, param_grads=True):
        shape, arg = cache
        k, s = self.kernel_size, self.stride
        ho, wo = grad.shape[2], grad.shape[3]
        dx = np.zeros(shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(hit, grad, 0)
        return dx, {}

    def forward_diff(self, x, d):
        win = self._windows(x)
        arg = win.argmax(axis=-1)
        xp = x + d
        win_p = self._windows(xp)
        arg_p = win_p.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        same = arg == arg_p
        d_at = np.take_along_axis(self._windows(d), arg[..., None], axis=-1)[..., 0]
        y_p = np.take_along_axis(win_p, arg_p[..., None], axis=-1)[..., 0]
        dy = np.where(same, d_at, y_p - y)
        # a tied maximum is a kink too, unless the window is untouched by d
        top2 = np.sort(win, axis=-1)[..., -2:]
        top2_p = np.sort(win_p, axis=-1)[..., -2:]
        tie = (top2[..., 0] == top2[..., 1]) | (top2_p[..., 0] == top2_p[..., 1])
        touched = (self._windows(d) != 0).any(axis=-1)
        crossed = (~same | (tie & touched)).reshape(len(x), -1).any(axis=1)
        return y, dy, crossed


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, grad, cache, param_grads=True):
        return grad.reshape(cache), {}

    def forward_diff(self, x, d):
        return x.reshape(len(x), -1), d.reshape(len(d), -1), np.zeros(len(x), dtype=bool)


class WarpInput(Layer):
    """Per-item affine warp of the input; items with ``applied`` False pass through."""

    kind = "warp-input"

    def __init__(self, layer_id="warp", matrices=None, applied=None):
        super().__init__(layer_id)
        self.matrices = None if matrices is None else np.asarray(matrices, dtype=np.float64)
        self.applied = None if applied is None else np.asarray(applied, dtype=bool)
        self._plan = None

    def _plan_for(self, shape):
        if self._plan is None or self._plan[0] != shape[2:]:
            index, weight = affine.sampling_plan(self.matrices[self.applied], shape[2], shape[3])
            self._plan = (shape[2:], index, weight)
        return self._plan[1], self._plan[2]

    def _check(self, x):
        if x.ndim != 4:
            raise GraphError(self.layer_id, f"expects (N, C, H, W) input, got {x.shape}")
        if self.matrices is not None and len(self.matrices) != len(x):
            raise GraphError(self.layer_id, f"holds {len(self.matrices)} transforms for a batch of {len(x)}")

    def forward(self, x):
        self._check(x)
        if self.matrices is None or not self.applied.any():
            return x, None
        index, weight = self._plan_for(x.shape)
        y = x.copy()
        y[self.applied] = affine.warp_with_plan(x[self.applied], index, weight)
        return y, None

    def backward(self, grad, cache, param_grads=True):
        if self.matrices is None or not self.applied.any():
            return grad, {}
        index, weight = self._plan_for(grad.shape)
        dx = grad.copy()
        dx[self.applied] = affine.warp_backward_with_plan(grad[self.applied], index, weight)
        return dx, {}

    def forward_diff(self, x, d):
        # linear in the image values, so the difference is the warp of d
        y, _ = self.forward(x)
        dy, _ = self.forward(d)
        return y, dy, np.zeros(len(x), dtype=bool)

    def select(self, rows):
        if self.matrices is None:
            return self
        return WarpInput(self.layer_id, self.matrices[rows], self.applied[rows])


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool2d, Linear, Flatten, WarpInput)}


@dataclass
class GradientBundle:
    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)  # layer_id -> {name: array}


class ComputeGraph:
    def __init__(self, layers, input_shape, num_classes, name="", arch=None, metadata=None):
        self.layers = list(layers)
        self.arch = arch
        self.metadata = dict(metadata or {})
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.name = name
        self._dtype = np.dtype(np.float32)  # used when no layer has parameters
        ids = [layer.layer_id for layer in self.layers]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise GraphError(sorted(dup)[0], "duplicate layer id")
        self._index = {lid: i for i, lid in enumerate(ids)}
        self.shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            for pname, expected in layer.param_shapes().items():
                if layer.params[pname].shape != expected:
                    got = layer.params[pname].shape
                    raise GraphError(layer.layer_id, f"parameter {pname} has shape {got}, expected {expected}")
            self.shapes.append(shape)
        if shape != (num_classes,):
            raise GraphError(ids[-1] if ids else None, f"graph emits {shape}, expected ({num_classes},) logits")

    @property
    def layer_ids(self):
        return [layer.layer_id for layer in self.layers]

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params.values():
                return p.dtype
        return self._dtype

    def index(self, layer_id) -> int:
        try:
            return self._index[layer_id]
        except KeyError:
            raise GraphError(layer_id, "no such layer") from None

    def layer(self, layer_id) -> Layer:
        return self.layers[self.index(layer_id)]

    def astype(self, dtype) -> "ComputeGraph":
        clone = self.with_layers([layer.astype(dtype) for layer in self.layers])
        clone._dtype = np.dtype(dtype)
        return clone

    def with_layers(self, layers) -> "ComputeGraph":
        clone = ComputeGraph(layers, self.input_shape, self.num_classes, self.name, self.arch, self.metadata)
        clone._dtype = self._dtype
        return clone

    def with_input_warp(self, matrices, applied, layer_id="warp") -> "ComputeGraph":
        """A view of this graph with a warp-input layer prepended (parameters shared)."""
        return self.with_layers([WarpInput(layer_id, matrices, applied)] + self.layers)

    def select(self, rows) -> "ComputeGraph":
        return self.with_layers([layer.select(rows) for layer in self.layers])

    def parameters(self):
        for layer in self.layers:
            for name, p in layer.params.items():
                yield layer.layer_id, name, p

    def __repr__(self):
        return f"ComputeGraph({self.name!r}, {len(self.layers)} layers, input={self.input_shape})"


def _prepare_input(graph, x):
    x = np.asarray(x)
    if x.ndim != len(graph.input_shape) + 1 or x.shape[1:] != graph.input_shape:
        first = graph.layers[0].layer_id if graph.layers else None
        raise GraphError(first, f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}")
    return x.astype(graph.dtype, copy=False)


def _run(graph, x, stop):
    caches = []
    for layer in graph.layers[: stop + 1]:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def evaluate_graph(graph: ComputeGraph, x, tap=None):
    """Return ``(logits, tapped_activation)``; the latter is None without a tap."""
    tap_index = None if tap is None else graph.index(tap)
    out = _prepare_input(graph, x)
    tapped = None
    for i, layer in enumerate(graph.layers):
        out, _ = layer.forward(out)
        if i == tap_index:
            tapped = out
    return out, tapped


def hidden_activation(graph: ComputeGraph, x, layer_id):
    """Activation after ``layer_id``, running only the layers up to it."""
    out, _ = _run(graph, _prepare_input(graph, x), graph.index(layer_id))
    return out


class LossSpec:
    """A scalar loss on the logits (``target`` None) or on a tapped activation."""

    target = None

    def value_and_grad(self, out):
        raise NotImplementedError

    def difference(self, out, d):
        """Per-row ``loss(out + d) - loss(out)``; subclasses avoid cancellation."""
        v0 = self.per_item(out)
        v1 = self.per_item(out + d)
        return v1 - v0

    def per_item(self, out):
        raise NotImplementedError

    def select(self, rows):
        return self


def log_softmax(z):
    z = np.asarray(z)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Per-item cross-entropy with max-subtraction stabilization."""
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


class SoftmaxCrossEntropy(LossSpec):
    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def per_item(self, out):
        return softmax_cross_entropy(out, self.labels)

    def value_and_grad(self, out):
        logp = log_softmax(out)
        rows = np.arange(len(self.labels))
        grad = np.exp(logp)
        grad[rows, self.labels] -= 1
        return float(-logp[rows, self.labels].sum()), grad.astype(out.dtype, copy=False)

    def difference(self, out, d):
        # lse(z + d) - lse(z) = log1p(sum softmax(z) * expm1(d))
        z = out - out.max(axis=1, keepdims=True)
        e = np.exp(z)
        ratio = (e * np.expm1(d)).sum(axis=1) / e.sum(axis=1)
        rows = np.arange(len(self.labels))
        return np.log1p(ratio) - d[rows, self.labels]

    def select(self, rows):
        return SoftmaxCrossEntropy(self.labels[rows])


class LogitSum(LossSpec):
    def per_item(self, out):
        return out.reshape(len(out), -1).sum(axis=1)

    def value_and_grad(self, out):
        return float(out.sum()), np.ones_like(out)

    def difference(self, out, d):
        return d.reshape(len(d), -1).sum(axis=1)


class ActivationSum(LossSpec):
    def __init__(self, target):
        self.target = target

    per_item = LogitSum.per_item
    value_and_grad = LogitSum.value_and_grad
    difference = LogitSum.difference


class ActivationLoss(LossSpec):
    """Loss on the flattened activation at ``target``.

    ``head`` supplies ``value_and_grad(flat)`` returning the summed value and
    the gradient, ``per_item(flat)``, and optionally ``difference`` and
    ``select`` with the same meaning as on :class:`LossSpec`.
    """

    def __init__(self, target, head):
        self.target = target
        self.head = head

    def per_item(self, out):
        return self.head.per_item(out.reshape(len(out), -1))

    def value_and_grad(self, out):
        value, grad = self.head.value_and_grad(out.reshape(len(out), -1))
        return value, grad.reshape(out.shape).astype(out.dtype, copy=False)

    def difference(self, out, d):
        flat, dflat = out.reshape(len(out), -1), d.reshape(len(d), -1)
        if hasattr(self.head, "difference"):
            return self.head.difference(flat, dflat)
        return self.head.per_item(flat + dflat) - self.head.per_item(flat)

    def select(self, rows):
        return ActivationLoss(self.target, self.head.select(rows))


def _loss_stop(graph, loss):
    return len(graph.layers) - 1 if loss.target is None else graph.index(loss.target)


def backward_graph(graph: ComputeGraph, x, loss: LossSpec, param_grads=True):
    """Loss value and its exact reverse-mode gradient.

    Only the layers up to the loss target run; deeper layers get all-zero
    parameter gradients.
    """
    stop = _loss_stop(graph, loss)
    x = _prepare_input(graph, x)
    out, caches = _run(graph, x, stop)
    value, grad = loss.value_and_grad(out)
    grads = {}
    for i in range(stop, -1, -1):
        layer = graph.layers[i]
        grad, pg = layer.backward(grad, caches[i], param_grads=param_grads)
        if param_grads:
            grads[layer.layer_id] = pg
    if param_grads:
        for layer in graph.layers[stop + 1 :]:
            grads[layer.layer_id] = {k: np.zeros_like(v) for k, v in layer.params.items()}
    return value, GradientBundle(grad, grads)


def _pair_forward(graph, x, d, stop):
    crossed = np.zeros(len(x), dtype=bool)
    for layer in graph.layers[: stop + 1]:
        x, d, c = layer.forward_diff(x, d)
        crossed |= c
    return x, d, crossed


def finite_difference_check(graph: ComputeGraph, x, loss: LossSpec, step=1e-6, chunk=256, return_details=False):
    """Largest relative error between the analytic and central-difference gradients.

    For every input coordinate the pair ``x - step*e`` and ``x + step*e`` is
    pushed through the graph as a (point, difference) pair, so the central
    difference is formed without subtracting two nearly equal loss values.
    Coordinates whose pair straddles a ReLU or max-pool kink are excluded.
    """
    if np.dtype(graph.dtype) != np.float64:
        raise ValueError("finite_difference_check requires a float64 graph (graph.astype(np.float64))")
    if step <= 0:
        raise ValueError("step must be positive")
    x = _prepare_input(graph, x).astype(np.float64)
    _, bundle = backward_graph(graph, x, loss, param_grads=False)
    analytic = bundle.input_grad
    stop = _loss_stop(graph, loss)
    numeric = np.zeros_like(x)
    excluded = np.zeros(x.shape, dtype=bool)
    per_item = int(np.prod(x.shape[1:]))
    for n in range(len(x)):
        for start in range(0, per_item, chunk):
            coords = np.arange(start, min(per_item, start + chunk))
            m = len(coords)
            base = np.repeat(x[n : n + 1], m, axis=0).reshape(m, -1)
            base[np.arange(m), coords] -= step
            d = np.zeros_like(base)
            d[np.arange(m), coords] = 2 * step
            shape = (m,) + x.shape[1:]
            rows = [n] * m
            out, dout, crossed = _pair_forward(graph.select(rows), base.reshape(shape), d.reshape(shape), stop)
            delta = loss.select(rows).difference(out, dout)
            fd = delta / (2 * step)
            bad = ~np.isfinite(fd)
            if bad.any():
                flat = int(coords[np.argmax(bad)])
                raise NonFiniteError((n,) + np.unravel_index(flat, x.shape[1:]))
            numeric[n].reshape(-1)[coords] = fd
            excluded[n].reshape(-1)[coords] = crossed
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12)
    rel[excluded] = 0.0
    err = float(rel.max()) if rel.size else 0.0
    if return_details:
        return err, {"analytic": analytic, "numeric": numeric, "excluded": excluded}
    return err
