"""Independent reference implementations used to freeze expected values.

Everything here works on plain dense numpy arrays (or mpmath numbers) and shares
no code with the package beyond reading parameter dictionaries by name.
"""

import math

import mpmath
import numpy as np

from gnnood.graph import SplitMasks, graph_from_edges


# ---------------------------------------------------------------------------
# graphs


def random_graph(seed, n=8, d=6, c=3, p=0.35, envs=None):
    """Small random undirected graph with every split non-empty."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    x = rng.standard_normal((n, d))
    y = rng.integers(0, c, size=n)
    env = np.zeros(n, dtype=np.int64) if envs is None else np.asarray(envs)
    if envs is None:
        env[n // 2:] = 1
    half = n // 2  # n >= 4: train [0, half-1), iid_test {half-1}, ood_test [half, n)
    ids = np.arange(n)
    splits = SplitMasks(ids[:half - 1], [], ids[half - 1:half], [], ids[half:])
    return graph_from_edges(x, edges, y, c, env, int(env.max()) + 1, splits)


def separable_graph(seed=0):
    """20 nodes, two classes, features +-1 (plus small noise) along one axis, edges inside classes."""
    rng = np.random.default_rng(seed)
    y = np.arange(20) % 2
    x = np.stack([2.0 * y - 1.0, rng.standard_normal(20)], axis=1) + 0.1 * rng.standard_normal((20, 2))
    same = [(i, j) for i in range(20) for j in range(i + 1, 20) if y[i] == y[j] and rng.random() < 0.3]
    env = np.zeros(20, dtype=int)
    env[16:] = 1
    splits = SplitMasks(np.arange(12), [12, 13], [14, 15], [16, 17], [18, 19])
    return graph_from_edges(x, same, y, 2, env, 2, splits)


def dense_adjacency(g):
    return g.adjacency.to_dense()


def dense_norm_adj(a):
    """D^-1/2 (A + I) D^-1/2 from a dense 0/1 adjacency."""
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    return at / np.sqrt(np.outer(d, d))


# ---------------------------------------------------------------------------
# kernels


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_mp(row):
    row = [mpmath.mpf(float(v)) for v in row]
    e = [mpmath.e ** v for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


def cross_entropy_mp(logits, labels, mask):
    total = mpmath.mpf(0)
    for i in mask:
        row = [mpmath.mpf(float(v)) for v in logits[i]]
        lse = mpmath.log(mpmath.fsum(mpmath.e ** v for v in row))
        total += lse - row[labels[i]]
    return float(total / len(mask))


def relu(x):
    return np.maximum(x, 0.0)


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def row_softmax_masked(scores, mask):
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def dense_attention(z, w, a_src, a_dst, mask, slope):
    wz = z @ w
    scores = leaky((wz @ a_src) + (wz @ a_dst).T, slope)
    return row_softmax_masked(scores, mask), wz


# ---------------------------------------------------------------------------
# models (eval mode: no dropout)


def _mlp(P, layers, x):
    hidden, z = None, x
    for l in range(layers):
        z = z @ P[f"mlp{l}.weight"] + P[f"mlp{l}.bias"]
        if l < layers - 1:
            z = relu(z)
            hidden = z
    return hidden, z


def _propagate(adj, h, beta, steps):
    z = h
    for _ in range(steps):
        z = (1.0 - beta) * (adj @ z) + beta * h
    return z


def dense_forward(spec, P, g):
    a = dense_adjacency(g)
    ahat = dense_norm_adj(a)
    mask = (a + np.eye(a.shape[0])) > 0
    x = g.features.data
    k = spec.kind
    if k in ("GCN", "GCN_MINUS"):
        z = x
        for l in range(spec.layers):
            z = ahat @ (z @ P[f"conv{l}.weight"]) + P[f"conv{l}.bias"]
            if l < spec.layers - 1 or k == "GCN":
                z = relu(z)
    elif k == "GAT":
        z = x
        for l in range(spec.layers):
            outs = []
            for h in range(spec.heads):
                nm = f"gat{l}.head{h}"
                alpha, wz = dense_attention(z, P[f"{nm}.weight"], P[f"{nm}.att_src"], P[f"{nm}.att_dst"],
                                            mask, spec.leaky_slope)
                outs.append(alpha @ wz)
            if l == spec.layers - 1:
                z = sum(outs) / spec.heads + P[f"gat{l}.bias"]
                if spec.linear_head:
                    z = relu(z)
            else:
                z = relu(np.concatenate(outs, axis=1) + P[f"gat{l}.bias"])
    elif k == "SGC":
        z = np.linalg.matrix_power(ahat, spec.steps) @ x
        z = _mlp(P, spec.layers, z)[1]
    elif k == "APPNP":
        z = _propagate(ahat, _mlp(P, spec.layers, x)[1], spec.beta, spec.steps)
    elif k == "DGAT":
        zi, h = _mlp(P, spec.layers, x)
        pm = sum(dense_attention(zi, P[f"att{j}.weight"], P[f"att{j}.src"], P[f"att{j}.dst"], mask,
                                 spec.leaky_slope)[0] for j in range(spec.heads)) / spec.heads
        z = _propagate((1.0 - spec.gamma) * pm + spec.gamma * ahat, h, spec.beta, spec.steps)
    else:
        raise ValueError(k)
    if spec.linear_head:
        z = z @ P["head.weight"] + P["head.bias"]
    return z


def param_count(spec, d_in, c):
    """Closed-form parameter count by shape arithmetic."""
    h, L = spec.hidden, spec.layers
    out = h if spec.linear_head else c
    head = h * c + c if spec.linear_head else 0
    if spec.kind in ("GCN", "GCN_MINUS", "SGC", "APPNP", "DGAT"):
        dims = [d_in] + [h] * (L - 1) + [out]
        n = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(L))
        if spec.kind == "DGAT":
            dh = h // spec.heads
            n += spec.heads * (h * dh + 2 * dh)
        return n + head
    dh = h // spec.heads
    n, width = 0, d_in
    for l in range(L):
        last = l == L - 1
        o = out if last else dh
        n += spec.heads * (width * o + 2 * o) + (o if last else o * spec.heads)
        width = o * spec.heads
    return n + head


# ---------------------------------------------------------------------------
# finite differences


def fd_gradient(f, params, name, step=1e-5):
    """Central differences of scalar ``f(params)`` w.r.t. every entry of ``params[name]``."""
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name][idx] += step
        minus[name][idx] -= step
        grad[idx] = (f(plus) - f(minus)) / (2 * step)
    return grad


def grad_close(analytic, numeric, rel=1e-4, floor=1e-8):
    """Entrywise: relative error < ``rel``, or absolute error < ``floor`` for tiny entries."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= rel * scale) | (diff < floor)
    rel_err = np.where(scale >= 1e-6, diff / np.maximum(scale, 1e-300), 0.0)  # relative error of non-tiny entries
    worst = float(rel_err.max()) if diff.size else 0.0
    return bool(ok.all()), worst


# ---------------------------------------------------------------------------
# statistics


def t_test_mp(a, b, dps=50):
    """Paired t statistic and two-tailed p from numerically integrating the t density."""
    with mpmath.workdps(dps):
        d = [mpmath.mpf(float(x)) - mpmath.mpf(float(y)) for x, y in zip(a, b)]
        n = len(d)
        mean = mpmath.fsum(d) / n
        var = mpmath.fsum((x - mean) ** 2 for x in d) / (n - 1)
        t = mean / mpmath.sqrt(var / n)
        df = n - 1
        p = 2 * t_tail_mp(abs(t), df)
        return float(t), float(p)


def t_tail_mp(t, df):
    """P(T >= t) by quadrature of the Student t density."""
    df = mpmath.mpf(df)
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    pdf = lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)  # noqa: E731
    return mpmath.quad(pdf, [t, t + 10, mpmath.inf])


def t_cdf_mp(t, df):
    with mpmath.workdps(40):
        tail = t_tail_mp(abs(mpmath.mpf(t)), df)
        return float(1 - tail if t > 0 else tail)


def population_variance(xs):
    m = math.fsum(xs) / len(xs)
    return math.fsum((x - m) ** 2 for x in xs) / len(xs)


def groupdro_update(risks, q, eta):
    w = [qi * math.exp(eta * r) for qi, r in zip(q, risks)]
    s = math.fsum(w)
    new = [x / s for x in w]
    return new, math.fsum(x * r for x, r in zip(new, risks))


def model_gradient_check(spec, g, seed=0, mode="train"):
    """Analytic vs central-difference gradients for every parameter of ``spec`` on ``g``.

    Returns ``{name: (ok, worst relative error)}``.
    """
    from gnnood import tensor as T
    from gnnood.models import forward, init_params

    c = g.classes
    params = init_params(spec, g.feature_dim, c, seed)
    rng = np.random.default_rng(seed)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}  # non-zero biases
    train = g.splits.train

    def loss(p, tape=None):
        return T.softmax_cross_entropy(forward(spec, p, g, mode, tape=tape, seed=seed, step=3), g.labels, train)

    tape = T.Tape()
    grads = tape.backward(loss(params, tape))
    out = {}
    for name in params:
        out[name] = grad_close(grads[name], fd_gradient(lambda p: loss(p).item(), params, name))
    return out
