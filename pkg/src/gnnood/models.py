"""The six node classifiers: GCN, GCN--, GAT, SGC, APPNP and DGat.

All models share one calling convention::

    params = init_params(spec, d_in, classes, seed)
    logits = forward(spec, params, graph, mode="eval")

``params`` is a plain ``dict`` of float64 arrays. Passing ``tape=`` records the
forward pass for :meth:`gnnood.tensor.Tape.backward`. Models return
pre-softmax logits; the softmax lives in the loss.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import make_rng

KINDS = ("GCN", "GCN_MINUS", "GAT", "SGC", "APPNP", "DGAT")
HEADED_BY_DEFAULT = {"GCN"}
ATTENTION_KINDS = {"GAT", "DGAT"}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layers: int = 2
    hidden: int = 100
    heads: int = 1
    beta: float = 0.1
    gamma: float = 0.5
    dropout: float = 0.5
    leaky_slope: float = 0.2
    prop_steps: int | None = None
    linear_head: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.linear_head is None:
            object.__setattr__(self, "linear_head", self.kind in HEADED_BY_DEFAULT)
        if self.kind == "GCN" and not self.linear_head:
            raise ConfigError("GCN always ends in a linear head; use GCN_MINUS for the headless variant")
        if self.kind == "GCN_MINUS" and self.linear_head:
            raise ConfigError("GCN_MINUS has no linear head by definition")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.kind == "DGAT" and self.layers < 2:
            raise ConfigError("DGAT needs layers >= 2 (attention is computed from a hidden layer)")
        if self.hidden < 1 or self.heads < 1:
            raise ConfigError("hidden and heads must be >= 1")
        if self.kind in ATTENTION_KINDS and self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.prop_steps is not None and self.prop_steps < 0:
            raise ConfigError("prop_steps must be >= 0")
        if self.kind in ("APPNP", "DGAT") and self.steps < 1:
            raise ConfigError(f"{self.kind} needs at least one propagation step")

    @property
    def steps(self):
        """Propagation steps K; defaults to the layer count."""
        return self.layers if self.prop_steps is None else self.prop_steps

    def canonical(self):
        """Copy with hyperparameters the kind ignores reset to defaults (for grid de-duplication)."""
        changes = {}
        if self.kind not in ATTENTION_KINDS:
            changes["heads"] = 1
            changes["leaky_slope"] = 0.2
        if self.kind not in ("APPNP", "DGAT"):
            changes["beta"] = 0.1
        if self.kind != "DGAT":
            changes["gamma"] = 0.5
        if self.kind not in ("SGC", "APPNP", "DGAT"):
            changes["prop_steps"] = None
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(spec, d_in, c):
    """Ordered ``{name: shape}`` for every parameter of ``spec``."""
    if d_in < 1 or c < 1:
        raise ConfigError("input dimension and class count must be >= 1")
    shapes = {}
    h = spec.hidden
    out = h if spec.linear_head else c

    def linear(name, fan_in, fan_out):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        shapes[f"{name}.bias"] = (1, fan_out)

    if spec.kind in ("GCN", "GCN_MINUS"):
        dims = [d_in] + [h] * (spec.layers - 1) + [out]
        for l in range(spec.layers):
            linear(f"conv{l}", dims[l], dims[l + 1])
    elif spec.kind == "GAT":
        per_head = h // spec.heads
        width = d_in
        for l in range(spec.layers):
            last = l == spec.layers - 1
            dh = out if last else per_head
            for k in range(spec.heads):
                shapes[f"gat{l}.head{k}.weight"] = (width, dh)
                shapes[f"gat{l}.head{k}.att_src"] = (dh, 1)
                shapes[f"gat{l}.head{k}.att_dst"] = (dh, 1)
            shapes[f"gat{l}.bias"] = (1, dh if last else dh * spec.heads)
            width = dh * spec.heads
    else:
        dims = [d_in] + [h] * (spec.layers - 1) + [out]
        for l in range(spec.layers):
            linear(f"mlp{l}", dims[l], dims[l + 1])
        if spec.kind == "DGAT":
            dh = h // spec.heads
            for k in range(spec.heads):
                shapes[f"att{k}.weight"] = (h, dh)
                shapes[f"att{k}.src"] = (dh, 1)
                shapes[f"att{k}.dst"] = (dh, 1)
    if spec.linear_head:
        linear("head", h, c)
    return shapes


def init_params(spec, d_in, c, seed):
    """Glorot-uniform weights and zero biases; each tensor has its own seeded stream."""
    params = {}
    for name, shape in param_shapes(spec, d_in, c).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = make_rng(seed, "init", name).uniform(-bound, bound, size=shape)
    return params


def count_params(params):
    return int(sum(np.asarray(p).size for p in params.values()))


def check_params(spec, params, d_in, c):
    expected = param_shapes(spec, d_in, c)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter set mismatch for {spec.kind}: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if np.shape(params[name]) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


def bind(params, tape=None):
    """Wrap raw arrays as tensors, registering them on ``tape`` when given."""
    if tape is None:
        return {k: T.DenseMatrix(v) for k, v in params.items()}
    return {k: tape.watch(v, k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks


class _Ctx:
    """Per-call dropout bookkeeping: every dropout site draws from its own stream."""

    def __init__(self, spec, mode, seed, step):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.rate = spec.dropout
        self.training = mode == "train"
        self.seed = seed
        self.step = step

    def drop(self, x, site):
        if not self.training or self.rate == 0.0:
            return x
        return T.dropout(x, self.rate, make_rng(self.seed, "dropout", self.step, site), True)


def _linear(P, name, x):
    return T.add(T.matmul(x, P[f"{name}.weight"]), P[f"{name}.bias"])


def _mlp(P, spec, x, ctx):
    """Returns (last hidden activation before dropout, output). Hidden is None for 1 layer."""
    hidden = None
    z = x
    for l in range(spec.layers):
        z = _linear(P, f"mlp{l}", z)
        if l < spec.layers - 1:
            hidden = T.relu(z)
            z = ctx.drop(hidden, f"mlp{l}")
    return hidden, z


def _attention(pattern, z, weight, src, dst, slope):
    """Row-stochastic attention on ``pattern`` and the transformed features it aggregates."""
    wz = T.matmul(z, weight)
    scores = T.leaky_relu(T.edge_scores(pattern, T.matmul(wz, src), T.matmul(wz, dst)), slope)
    return T.masked_row_softmax(scores), wz


def _propagate(adj, h, beta, steps):
    """K steps of z <- (1 - beta) adj z + beta h, starting from z = h."""
    z = h
    for _ in range(steps):
        z = T.add(T.scale(T.spmm(adj, z), 1.0 - beta), T.scale(h, beta))
    return z


def _head(P, spec, rep):
    return _linear(P, "head", rep) if spec.linear_head else rep


def _check_input(spec, params, g):
    c = params["head.bias"].shape[1] if spec.linear_head else None
    if c is None:
        c = _out_width(spec, params)
    check_params(spec, params, g.feature_dim, c)


def _out_width(spec, params):
    if spec.kind in ("GCN", "GCN_MINUS"):
        return params[f"conv{spec.layers - 1}.bias"].shape[1]
    if spec.kind == "GAT":
        return params[f"gat{spec.layers - 1}.bias"].shape[1]
    return params[f"mlp{spec.layers - 1}.bias"].shape[1]


# ---------------------------------------------------------------------------
# representations (everything before the optional linear head)


def _gcn_rep(P, spec, g, adj, ctx):
    z = g.features
    for l in range(spec.layers):
        z = T.add(T.spmm(adj, T.matmul(z, P[f"conv{l}.weight"])), P[f"conv{l}.bias"])
        if l < spec.layers - 1 or spec.kind == "GCN":
            z = ctx.drop(T.relu(z), f"conv{l}")
    return z


def _gat_rep(P, spec, g, ctx):
    pattern = g.norm_adj.pattern
    z = g.features
    for l in range(spec.layers):
        last = l == spec.layers - 1
        outs = []
        for k in range(spec.heads):
            name = f"gat{l}.head{k}"
            alpha, wz = _attention(pattern, z, P[f"{name}.weight"], P[f"{name}.att_src"],
                                   P[f"{name}.att_dst"], spec.leaky_slope)
            outs.append(T.spmm(alpha, wz))
        if last:
            merged = outs[0]
            for o in outs[1:]:
                merged = T.add(merged, o)
            z = T.add(T.scale(merged, 1.0 / spec.heads), P[f"gat{l}.bias"])
            if spec.linear_head:
                z = ctx.drop(T.relu(z), f"gat{l}")
        else:
            z = T.add(T.concat_cols(outs) if spec.heads > 1 else outs[0], P[f"gat{l}.bias"])
            z = ctx.drop(T.relu(z), f"gat{l}")
    return z


def _sgc_rep(P, spec, g, adj, ctx):
    z = g.features
    for _ in range(spec.steps):
        z = T.spmm(adj, z)
    return _mlp(P, spec, z, ctx)[1]


def _appnp_rep(P, spec, g, adj, ctx):
    h = _mlp(P, spec, g.features, ctx)[1]
    return _propagate(adj, h, spec.beta, spec.steps)


def dgat_attention(P, spec, g, z_init):
    """Head-averaged attention matrix P on the self-loop pattern."""
    pattern = g.norm_adj.pattern
    heads = []
    for k in range(spec.heads):
        alpha, _ = _attention(pattern, z_init, P[f"att{k}.weight"], P[f"att{k}.src"],
                              P[f"att{k}.dst"], spec.leaky_slope)
        heads.append(alpha)
    return T.sparse_combine([(1.0 / spec.heads, a) for a in heads])


def _dgat_rep(P, spec, g, adj, ctx):
    z_init, h = _mlp(P, spec, g.features, ctx)
    attn = dgat_attention(P, spec, g, z_init)
    blended = T.sparse_combine([(1.0 - spec.gamma, attn), (spec.gamma, adj)])
    return _propagate(blended, h, spec.beta, spec.steps)


_REPS = {
    "GCN": lambda P, s, g, a, c: _gcn_rep(P, s, g, a, c),
    "GCN_MINUS": lambda P, s, g, a, c: _gcn_rep(P, s, g, a, c),
    "GAT": lambda P, s, g, a, c: _gat_rep(P, s, g, c),
    "SGC": _sgc_rep,
    "APPNP": _appnp_rep,
    "DGAT": _dgat_rep,
}


def represent(spec, bound, g, mode="eval", *, seed=0, step=0, adj=None):
    """Node representations before the linear head (equal to the logits for headless models)."""
    ctx = _Ctx(spec, mode, seed, step)
    return _REPS[spec.kind](bound, spec, g, g.norm_adj if adj is None else adj, ctx)


def apply_head(spec, bound, rep):
    return _head(bound, spec, rep)


def forward(spec, params, g, mode="eval", *, tape=None, seed=0, step=0, adj=None):
    """Logits (N x classes) for any model kind.

    ``mode`` only switches dropout. In train mode the dropout masks are a pure
    function of ``(seed, step, site)``.
    """
    if spec.kind not in _REPS:
        raise ConfigError(f"unknown model kind {spec.kind!r}")
    _check_input(spec, params, g)
    bound = bind(params, tape)
    return _head(bound, spec, represent(spec, bound, g, mode, seed=seed, step=step, adj=adj))


def _expect(spec, *kinds):
    if spec.kind not in kinds:
        raise ConfigError(f"expected a {'/'.join(kinds)} spec, got {spec.kind}")


def gcn_forward(spec, params, g, adj=None, mode="eval", **kw):
    _expect(spec, "GCN", "GCN_MINUS")
    return forward(spec, params, g, mode, adj=adj, **kw)


def gat_forward(spec, params, g, mode="eval", **kw):
    _expect(spec, "GAT")
    return forward(spec, params, g, mode, **kw)


def sgc_forward(spec, params, g, adj=None, mode="eval", **kw):
    _expect(spec, "SGC")
    return forward(spec, params, g, mode, adj=adj, **kw)


def appnp_forward(spec, params, g, adj=None, mode="eval", **kw):
    _expect(spec, "APPNP")
    return forward(spec, params, g, mode, adj=adj, **kw)


def dgat_forward(spec, params, g, adj=None, mode="eval", **kw):
    _expect(spec, "DGAT")
    return forward(spec, params, g, mode, adj=adj, **kw)
