"""Static compute graphs with reverse-mode differentiation.

A :class:`Graph` is an ordered list of nodes. Node 0 is the input; every other
node names the earlier nodes it consumes and the parameters it reads from the
graph's parameter store. All tensors are numpy arrays carrying a leading batch
axis inside the graph; a single unbatched sample is accepted at the boundary
and returned unbatched.

Per-sample shapes are inferred when nodes are added, so shape bugs surface at
build time with the offending node's name.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ..errors import ShapeError, ValidationError
from . import kernels

__all__ = ["Graph", "GradResult", "Node", "OPS", "forward", "backward", "top2_indices"]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""
    shape: tuple[int, ...] = ()


@dataclass
class GradResult:
    params: dict[str, np.ndarray]
    input: np.ndarray


class OpDef(NamedTuple):
    shape: Callable
    forward: Callable
    backward: Callable
    n_inputs: int | None
    n_params: int


def _need(node, cond, expected, actual):
    if not cond:
        raise ShapeError(node, expected, actual)


# --- op implementations -----------------------------------------------------
# shape(name, in_shapes, param_shapes, attrs) -> per-sample out shape
# forward(xs, ps, attrs) -> (y, ctx)
# backward(g, ctx, xs, ps, attrs, need_params) -> (input grads, param grads)


def _dense_shape(name, ins, ps, attrs):
    (x,), (w, b) = ins, ps
    _need(name, len(x) == 1, (w[1] if len(w) == 2 else "?",), x)
    _need(name, len(w) == 2 and w[1] == x[0], ("K", x[0]), w)
    _need(name, b == (w[0],), (w[0],), b)
    return (w[0],)


def _dense_fwd(xs, ps, attrs):
    (x,), (w, b) = xs, ps
    return x @ w.T + b, None


def _dense_bwd(g, ctx, xs, ps, attrs, need_params):
    (x,), (w, _) = xs, ps
    gps = [g.T @ x, g.sum(axis=0)] if need_params else [None, None]
    return [g @ w], gps


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv_shape(name, ins, ps, attrs):
    (x,), (w, b) = ins, ps
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    if stride not in (1, 2):
        raise ValidationError(f"node {name!r}: conv2d stride must be 1 or 2, got {stride}")
    _need(name, len(x) == 3, ("C", "H", "W"), x)
    _need(name, len(w) == 4 and w[1] == x[0] and w[2] == w[3], ("O", x[0], "k", "k"), w)
    _need(name, b == (w[0],), (w[0],), b)
    k = w[2]
    ho, wo = _conv_out(x[1], k, stride, pad), _conv_out(x[2], k, stride, pad)
    _need(name, ho >= 1 and wo >= 1, (">=k", ">=k"), x[1:])
    return (w[0], ho, wo)


def _conv_fwd(xs, ps, attrs):
    (x,), (w, b) = xs, ps
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    o, k = w.shape[0], w.shape[2]
    bsz = x.shape[0]
    ho, wo = _conv_out(x.shape[2], k, stride, pad), _conv_out(x.shape[3], k, stride, pad)
    cols = kernels.im2col(x, k, stride, pad)
    y = cols @ w.reshape(o, -1).T + b
    y = np.ascontiguousarray(y.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2))
    return y, cols


def _conv_bwd(g, cols, xs, ps, attrs, need_params):
    (x,), (w, _) = xs, ps
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    o, k = w.shape[0], w.shape[2]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    if need_params:
        gps = [(g2.T @ cols).reshape(w.shape), g2.sum(axis=0)]
    else:
        gps = [None, None]
    gx = kernels.col2im(g2 @ w.reshape(o, -1), x.shape, k, stride, pad)
    return [gx], gps


def _same_shape(name, ins, ps, attrs):
    return ins[0]


def _relu_fwd(xs, ps, attrs):
    return np.maximum(xs[0], 0), None


def _relu_bwd(g, ctx, xs, ps, attrs, need_params):
    return [g * (xs[0] > 0)], []


def _tanh_fwd(xs, ps, attrs):
    y = np.tanh(xs[0])
    return y, y


def _tanh_bwd(g, y, xs, ps, attrs, need_params):
    return [g * (1 - y * y)], []


def _scale_shift_fwd(xs, ps, attrs):
    x = xs[0]
    return x * x.dtype.type(attrs["scale"]) + x.dtype.type(attrs["shift"]), None


def _scale_shift_bwd(g, ctx, xs, ps, attrs, need_params):
    return [g * g.dtype.type(attrs["scale"])], []


def _pool_shape(name, ins, ps, attrs):
    (x,) = ins
    _need(name, len(x) == 3 and x[1] >= 2 and x[2] >= 2, ("C", ">=2", ">=2"), x)
    return (x[0], x[1] // 2, x[2] // 2)


def _pool_fwd(xs, ps, attrs):
    return kernels.maxpool2_forward(xs[0])


def _pool_bwd(g, arg, xs, ps, attrs, need_params):
    return [kernels.maxpool2_backward(g, arg, xs[0].shape)], []


def _gap_shape(name, ins, ps, attrs):
    (x,) = ins
    _need(name, len(x) == 3, ("C", "H", "W"), x)
    return (x[0],)


def _gap_fwd(xs, ps, attrs):
    return xs[0].mean(axis=(2, 3)), None


def _gap_bwd(g, ctx, xs, ps, attrs, need_params):
    x = xs[0]
    scale = x.dtype.type(1.0 / (x.shape[2] * x.shape[3]))
    return [np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy()], []


def _softmax_fwd(xs, ps, attrs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, xs, ps, attrs, need_params):
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))], []


def _add_shape(name, ins, ps, attrs):
    a, b = ins
    _need(name, a == b, a, b)
    return a


def _add_fwd(xs, ps, attrs):
    return xs[0] + xs[1], None


def _add_bwd(g, ctx, xs, ps, attrs, need_params):
    return [g, g], []


def _clip_fwd(xs, ps, attrs):
    x = xs[0]
    lo, hi = attrs.get("lo", -np.inf), attrs.get("hi", np.inf)
    return np.clip(x, lo, hi).astype(x.dtype, copy=False), (x > lo) & (x < hi)


def _clip_bwd(g, mask, xs, ps, attrs, need_params):
    return [g * mask], []


def _upsample_shape(name, ins, ps, attrs):
    (x,) = ins
    _need(name, len(x) == 3, ("C", "H", "W"), x)
    return (x[0], 2 * x[1], 2 * x[2])


def _upsample_fwd(xs, ps, attrs):
    return xs[0].repeat(2, axis=2).repeat(2, axis=3), None


def _upsample_bwd(g, ctx, xs, ps, attrs, need_params):
    b, c, h, w = g.shape
    return [g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))], []


def _l1_shape(name, ins, ps, attrs):
    a, b = ins
    _need(name, a == b, a, b)
    return (1,)


def _l1_fwd(xs, ps, attrs):
    a, b = xs
    d = (a - b).reshape(a.shape[0], -1)
    return np.abs(d).mean(axis=1, keepdims=True), d


def _l1_bwd(g, d, xs, ps, attrs, need_params):
    a = xs[0]
    ga = (np.sign(d) * (g / d.shape[1])).reshape(a.shape)
    return [ga, -ga], []


def _combine_shape(name, ins, ps, attrs):
    weights = attrs["weights"]
    if len(weights) != len(ins):
        raise ValidationError(
            f"node {name!r}: {len(weights)} weights for {len(ins)} inputs"
        )
    for s in ins:
        _need(name, s == (1,), (1,), s)
    return (1,)


def _combine_fwd(xs, ps, attrs):
    out = np.zeros_like(xs[0])
    for w, x in zip(attrs["weights"], xs):
        out = out + x.dtype.type(w) * x
    return out, None


def _combine_bwd(g, ctx, xs, ps, attrs, need_params):
    return [g * g.dtype.type(w) for w in attrs["weights"]], []


def _vector_to_scalar_shape(name, ins, ps, attrs):
    (x,) = ins
    _need(name, len(x) == 1 and x[0] >= 2, ("N>=2",), x)
    return (1,)


def _labels(attrs, n):
    labels = attrs.get("labels")
    if labels is None:
        raise ValidationError("loss node has no labels bound")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != n:
        raise ValidationError(f"{labels.shape[0]} labels bound for a batch of {n}")
    return labels


def top2_indices(probs):
    """Indices of the two largest entries per row; lower index wins ties."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., 0], order[..., 1]


def _margin_fwd(xs, ps, attrs):
    p = xs[0]
    labels = _labels(attrs, p.shape[0])
    rows = np.arange(p.shape[0])
    fir, sec = top2_indices(p)
    sign = np.where(labels == fir, 1, -1).astype(p.dtype)
    y = sign * (p[rows, fir] - p[rows, sec])
    return y[:, None], (rows, fir, sec, sign)


def _margin_bwd(g, ctx, xs, ps, attrs, need_params):
    rows, fir, sec, sign = ctx
    gp = np.zeros_like(xs[0])
    gp[rows, fir] += g[:, 0] * sign
    gp[rows, sec] -= g[:, 0] * sign
    return [gp], []


def _pick_fwd(xs, ps, attrs):
    p = xs[0]
    labels = _labels(attrs, p.shape[0])
    rows = np.arange(p.shape[0])
    return p[rows, labels][:, None], (rows, labels)


def _pick_bwd(g, ctx, xs, ps, attrs, need_params):
    rows, labels = ctx
    gp = np.zeros_like(xs[0])
    gp[rows, labels] = g[:, 0]
    return [gp], []


OPS: dict[str, OpDef] = {
    "dense": OpDef(_dense_shape, _dense_fwd, _dense_bwd, 1, 2),
    "conv2d": OpDef(_conv_shape, _conv_fwd, _conv_bwd, 1, 2),
    "relu": OpDef(_same_shape, _relu_fwd, _relu_bwd, 1, 0),
    "tanh": OpDef(_same_shape, _tanh_fwd, _tanh_bwd, 1, 0),
    "scale_shift": OpDef(_same_shape, _scale_shift_fwd, _scale_shift_bwd, 1, 0),
    "maxpool2": OpDef(_pool_shape, _pool_fwd, _pool_bwd, 1, 0),
    "gap": OpDef(_gap_shape, _gap_fwd, _gap_bwd, 1, 0),
    "softmax": OpDef(_same_shape, _softmax_fwd, _softmax_bwd, 1, 0),
    "add": OpDef(_add_shape, _add_fwd, _add_bwd, 2, 0),
    "clip": OpDef(_same_shape, _clip_fwd, _clip_bwd, 1, 0),
    "upsample2": OpDef(_upsample_shape, _upsample_fwd, _upsample_bwd, 1, 0),
    "l1_mean": OpDef(_l1_shape, _l1_fwd, _l1_bwd, 2, 0),
    "combine": OpDef(_combine_shape, _combine_fwd, _combine_bwd, None, 0),
    "margin": OpDef(_vector_to_scalar_shape, _margin_fwd, _margin_bwd, 1, 0),
    "pick": OpDef(_vector_to_scalar_shape, _pick_fwd, _pick_bwd, 1, 0),
}


class _Cache(NamedTuple):
    key: np.ndarray
    single: bool
    acts: list
    ctxs: list


class Graph:
    """An ordered, acyclic list of nodes plus a named parameter store.

    Build with :meth:`add_param` and :meth:`add`; evaluate with
    :meth:`forward` and differentiate with :meth:`backward`. ``forward``
    remembers the activations of its most recent call (unless
    ``cache=False``), which is what ``backward`` consumes, so one instance must
    not be driven from two threads at once.
    """

    def __init__(self, input_shape, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        if not 1 <= len(self.input_shape) <= 3 or min(self.input_shape) < 1:
            raise ValidationError(f"bad graph input shape {self.input_shape}")
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = [Node("input", (), name="input", shape=self.input_shape)]
        self.params: dict[str, np.ndarray] = {}
        self._cache: _Cache | None = None

    # -- construction --------------------------------------------------------

    def add_param(self, name, value):
        if name in self.params:
            raise ValidationError(f"duplicate parameter {name!r}")
        self.params[name] = np.array(value, dtype=self.dtype)
        return name

    def add(self, op, *inputs, params=(), name=None, **attrs):
        """Append a node and return its id."""
        if op not in OPS:
            raise ValidationError(f"unknown op kind {op!r}; valid: {sorted(OPS)}")
        spec = OPS[op]
        nid = len(self.nodes)
        name = name or f"{op}{nid}"
        for i in inputs:
            if not 0 <= i < nid:
                raise ValidationError(f"node {name!r} input {i} does not precede it")
        if spec.n_inputs is not None and len(inputs) != spec.n_inputs:
            raise ValidationError(f"node {name!r}: {op} takes {spec.n_inputs} inputs")
        if len(params) != spec.n_params:
            raise ValidationError(f"node {name!r}: {op} takes {spec.n_params} parameters")
        for p in params:
            if p not in self.params:
                raise ValidationError(f"node {name!r} references missing parameter {p!r}")
        shape = spec.shape(
            name,
            [self.nodes[i].shape for i in inputs],
            [self.params[p].shape for p in params],
            attrs,
        )
        self.nodes.append(Node(op, tuple(inputs), tuple(params), attrs, name, tuple(shape)))
        self._cache = None
        return nid

    @property
    def output(self):
        return len(self.nodes) - 1

    @property
    def output_shape(self):
        return self.nodes[-1].shape

    def node_id(self, name):
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def copy(self):
        g = copy.copy(self)
        g.nodes = [copy.deepcopy(n) for n in self.nodes]
        g.params = {k: v.copy() for k, v in self.params.items()}
        g._cache = None
        return g

    def astype(self, dtype):
        g = self.copy()
        g.dtype = np.dtype(dtype)
        g.params = {k: v.astype(dtype) for k, v in g.params.items()}
        return g

    # -- evaluation ----------------------------------------------------------

    def _batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        n = len(self.input_shape)
        if x.ndim == n and x.shape == self.input_shape:
            return x[None], True
        if x.ndim == n + 1 and x.shape[1:] == self.input_shape and x.shape[0] >= 1:
            return x, False
        raise ShapeError("input", self.input_shape, x.shape)

    def _run(self, x, upto=None):
        xb, single = self._batch(x)
        last = self.output if upto is None else upto
        acts = [xb]
        ctxs = [None]
        for node in self.nodes[1 : last + 1]:
            y, ctx = OPS[node.op].forward(
                [acts[i] for i in node.inputs],
                [self.params[p] for p in node.params],
                node.attrs,
            )
            acts.append(y)
            ctxs.append(ctx)
        return _Cache(x, single, acts, ctxs)

    def forward(self, x, *, cache=True, node=None):
        """Evaluate the graph on ``x`` (one sample or a batch).

        ``node`` stops evaluation early and returns that node's activation.
        """
        run = self._run(x, upto=node)
        if cache:
            self._cache = run
        out = run.acts[-1]
        return out[0] if run.single else out

    def activations(self, x):
        """All node activations (batched) for ``x``; also primes the cache."""
        run = self._run(x)
        self._cache = run
        return run.acts

    def _cached(self, x, upto):
        c = self._cache
        if c is not None and len(c.acts) > upto and (c.key is x or (
            np.shape(c.key) == np.shape(x) and np.array_equal(c.key, x)
        )):
            return c
        c = self._run(x)
        self._cache = c
        return c

    def backward(self, x, output_grad, *, need_params=True):
        """Reverse-mode gradients for ``x``.

        ``output_grad`` is the cotangent of the output node, or a mapping
        ``{node_id: cotangent}`` to seed interior nodes (e.g. a feature tap).
        """
        seeds = output_grad if isinstance(output_grad, dict) else {self.output: output_grad}
        for nid in seeds:
            if not 0 <= nid < len(self.nodes):
                raise ValidationError(f"no node {nid} to seed")
        run = self._cached(x, max(seeds))
        grads: list = [None] * len(self.nodes)
        for nid, g in seeds.items():
            g = np.asarray(g, dtype=self.dtype)
            expected = run.acts[nid].shape
            if run.single:
                g = g[None] if g.shape == expected[1:] else g
            if g.shape != expected:
                shown = expected[1:] if run.single else expected
                raise ShapeError(f"{self.nodes[nid].name} (output_grad)", shown, np.shape(seeds[nid]))
            grads[nid] = g if grads[nid] is None else grads[nid] + g
        pgrads: dict[str, np.ndarray] = {}
        for nid in range(max(seeds), 0, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            xs = [run.acts[i] for i in node.inputs]
            ps = [self.params[p] for p in node.params]
            gxs, gps = OPS[node.op].backward(g, run.ctxs[nid], xs, ps, node.attrs, need_params)
            for i, gi in zip(node.inputs, gxs):
                grads[i] = gi if grads[i] is None else grads[i] + gi
            if need_params:
                for p, gp in zip(node.params, gps):
                    pgrads[p] = gp if p not in pgrads else pgrads[p] + gp
        if need_params:
            for p in self.params:
                pgrads.setdefault(p, np.zeros_like(self.params[p]))
        gin = grads[0] if grads[0] is not None else np.zeros_like(run.acts[0])
        return GradResult(pgrads, gin[0] if run.single else gin)


def forward(graph: Graph, x) -> np.ndarray:
    return graph.forward(x)


def backward(graph: Graph, x, output_grad, *, need_params=True) -> GradResult:
    return graph.backward(x, output_grad, need_params=need_params)
