"""Graph container, normalized adjacency, text file format and shift generators."""

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .rng import make_rng
from .tensor import CSRPattern, DenseMatrix, SparseMatrix

MAGIC = "GNNOOD 1"
SPLIT_NAMES = ("train", "iid_val", "iid_test", "ood_val", "ood_test")


def _index_array(ids):
    arr = np.unique(np.asarray(ids, dtype=np.int64))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SplitMasks:
    """Five disjoint node-id sets. Stored sorted and de-duplicated."""

    train: np.ndarray
    iid_val: np.ndarray
    iid_test: np.ndarray
    ood_val: np.ndarray
    ood_test: np.ndarray

    def __post_init__(self):
        for name in SPLIT_NAMES:
            object.__setattr__(self, name, _index_array(getattr(self, name)))

    def items(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]

    def validate(self, n, env_id):
        seen = np.zeros(n, dtype=bool)
        for name, ids in self.items():
            if ids.size and (ids[0] < 0 or ids[-1] >= n):
                raise DataError(f"split {name!r} has node ids outside [0, {n})")
            if seen[ids].any():
                raise DataError(f"split {name!r} overlaps an earlier split")
            seen[ids] = True
        for name in ("train", "iid_test", "ood_test"):
            if getattr(self, name).size == 0:
                raise DataError(f"split {name!r} is empty")
        train_envs = set(env_id[self.train].tolist())
        leaked = train_envs & set(env_id[self.ood_test].tolist())
        if leaked:
            raise DataError(f"ood_test shares environments {sorted(leaked)} with train")

    def __eq__(self, other):
        return isinstance(other, SplitMasks) and all(
            np.array_equal(a, b) for (_, a), (_, b) in zip(self.items(), other.items())
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Graph:
    """Node features, symmetric unweighted adjacency (no self-loops), labels, environments, splits."""

    features: DenseMatrix
    adjacency: SparseMatrix
    labels: np.ndarray
    classes: int
    env_id: np.ndarray
    num_envs: int
    splits: SplitMasks

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        env = np.asarray(self.env_id, dtype=np.int64)
        labels.setflags(write=False)
        env.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "env_id", env)
        if not isinstance(self.features, DenseMatrix):
            object.__setattr__(self, "features", DenseMatrix(self.features))
        n = self.n
        if self.features.rows != n or env.shape[0] != n:
            raise DataError(f"features ({self.features.rows}), labels ({n}) and env ids "
                            f"({env.shape[0]}) disagree on the node count")
        if not np.all(np.isfinite(self.features.data)):
            raise DataError("features contain NaN or Inf")
        if n and (labels.min() < 0 or labels.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")
        if n and (env.min() < 0 or env.max() >= self.num_envs):
            raise DataError(f"environment ids must lie in [0, {self.num_envs})")
        adj = self.adjacency
        if adj.shape != (n, n):
            raise DataError(f"adjacency shape {adj.shape} does not match {n} nodes")
        pat = adj.pattern
        if np.any(pat.row_idx == pat.col_idx):
            raise DataError("adjacency must not store self-loops")
        fwd = set(zip(pat.row_idx.tolist(), pat.col_idx.tolist()))
        for i, j in fwd:
            if (j, i) not in fwd:
                raise DataError(f"adjacency is not symmetric: edge ({i}, {j}) has no ({j}, {i})")
        self.splits.validate(n, env)

    @property
    def n(self):
        return int(self.labels.shape[0])

    @property
    def feature_dim(self):
        return self.features.cols

    @cached_property
    def degrees(self):
        return self.adjacency.pattern.row_counts.copy()

    @cached_property
    def norm_adj(self):
        return normalize_adjacency(self)

    def edges(self):
        """Undirected edges as an (m, 2) array with i < j, sorted."""
        pat = self.adjacency.pattern
        keep = pat.row_idx < pat.col_idx
        return np.stack([pat.row_idx[keep], pat.col_idx[keep]], axis=1)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        a, b = self.adjacency, other.adjacency
        return (
            self.classes == other.classes
            and self.num_envs == other.num_envs
            and self.features.shape == other.features.shape
            and np.array_equal(self.features.data, other.features.data)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.env_id, other.env_id)
            and a.pattern.same_as(b.pattern)
            and np.array_equal(a.values, b.values)
            and self.splits == other.splits
        )

    __hash__ = None


def graph_from_edges(features, edges, labels, classes, env_id, num_envs, splits):
    """Build a :class:`Graph` from an undirected edge list (each edge once, any orientation)."""
    n = np.asarray(labels).shape[0]
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    r = np.concatenate([e[:, 0], e[:, 1]])
    c = np.concatenate([e[:, 1], e[:, 0]])
    adj = SparseMatrix.from_coo(n, n, r, c, np.ones(r.shape[0]))
    return Graph(DenseMatrix(features), adj, labels, classes, env_id, num_envs, splits)


def normalize_adjacency(g):
    """Symmetric normalization of A + I: entry (i, j) = 1 / sqrt(d_i d_j), d = degree + 1.

    Accepts a :class:`Graph` or its bare adjacency :class:`SparseMatrix`.
    """
    adj = g if isinstance(g, SparseMatrix) else g.adjacency
    n = adj.rows
    pat = adj.pattern
    r = np.concatenate([pat.row_idx, np.arange(n)])
    c = np.concatenate([pat.col_idx, np.arange(n)])
    order = np.lexsort((c, r))
    r, c = r[order], c[order]
    row_ptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
    deg = (pat.row_counts + 1).astype(np.float64)
    # d_i * d_j is commutative in floating point, so the result is exactly symmetric
    values = 1.0 / np.sqrt(deg[r] * deg[c])
    return SparseMatrix(CSRPattern(n, n, row_ptr, c), values)


# ---------------------------------------------------------------------------
# file format


def save_graph(g, path):
    lines = [MAGIC, f"{g.n} {g.feature_dim} {g.classes} {g.num_envs}"]
    feats = g.features.data
    for i in range(g.n):
        row = " ".join(repr(float(v)) for v in feats[i])
        lines.append(f"{g.labels[i]} {g.env_id[i]} {row}".rstrip())
    edges = g.edges()
    lines.append(f"EDGES {len(edges)}")
    lines.extend(f"{i} {j}" for i, j in edges)
    for name, ids in g.splits.items():
        lines.append(" ".join(["SPLIT", name] + [str(i) for i in ids]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _ints(tokens, lineno, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers for {what}, got {' '.join(tokens)!r}", lineno) from None


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {what}", pos + 1)
        pos += 1
        return lines[pos - 1], pos

    line, ln = take("header")
    if line.strip() != MAGIC:
        raise ParseError(f"bad magic {line!r}, expected {MAGIC!r}", ln)
    line, ln = take("dimensions")
    dims = _ints(line.split(), ln, "N d c E")
    if len(dims) != 4 or min(dims) < 0:
        raise ParseError("dimension line must be 'N d c E' with non-negative integers", ln)
    n, d, c, n_env = dims

    feats = np.zeros((n, d))
    labels = np.zeros(n, dtype=np.int64)
    env = np.zeros(n, dtype=np.int64)
    for i in range(n):
        line, ln = take(f"node line {i}")
        tok = line.split()
        if len(tok) != d + 2:
            raise ParseError(f"node line needs {d + 2} fields, got {len(tok)}", ln)
        labels[i], env[i] = _ints(tok[:2], ln, "label and env")
        if not 0 <= labels[i] < c:
            raise ParseError(f"label {labels[i]} outside [0, {c})", ln)
        if not 0 <= env[i] < n_env:
            raise ParseError(f"environment {env[i]} outside [0, {n_env})", ln)
        try:
            feats[i] = [float(t) for t in tok[2:]]
        except ValueError:
            raise ParseError("malformed feature value", ln) from None
        if not np.all(np.isfinite(feats[i])):
            raise ParseError("non-finite feature value", ln)

    line, ln = take("EDGES header")
    tok = line.split()
    if len(tok) != 2 or tok[0] != "EDGES":
        raise ParseError(f"expected 'EDGES m', got {line!r}", ln)
    (m,) = _ints(tok[1:], ln, "edge count")
    edges = np.zeros((m, 2), dtype=np.int64)
    seen = set()
    for k in range(m):
        line, ln = take(f"edge {k}")
        ij = _ints(line.split(), ln, "edge")
        if len(ij) != 2:
            raise ParseError("edge line must be 'i j'", ln)
        i, j = ij
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"edge ({i}, {j}) references a node outside [0, {n})", ln)
        if i == j:
            raise ParseError(f"self-loop ({i}, {j}) is not allowed", ln)
        if i > j:
            raise ParseError(f"edge ({i}, {j}) must be written with i < j; "
                             "each undirected edge is listed exactly once", ln)
        if (i, j) in seen:
            raise ParseError(f"duplicate edge ({i}, {j})", ln)
        seen.add((i, j))
        edges[k] = ij

    masks = {}
    while pos < len(lines):
        line, ln = take("SPLIT section")
        tok = line.split()
        if len(tok) < 2 or tok[0] != "SPLIT" or tok[1] not in SPLIT_NAMES:
            raise ParseError(f"expected 'SPLIT <name> ids...', got {line[:40]!r}", ln)
        if tok[1] in masks:
            raise ParseError(f"split {tok[1]!r} given twice", ln)
        ids = _ints(tok[2:], ln, "split node ids")
        if any(not 0 <= i < n for i in ids):
            raise ParseError(f"split {tok[1]!r} references a node outside [0, {n})", ln)
        masks[tok[1]] = ids
    missing = [s for s in SPLIT_NAMES if s not in masks]
    if missing:
        raise ParseError(f"missing split sections: {', '.join(missing)}", pos + 1)
    return graph_from_edges(feats, edges, labels, c, env, n_env, SplitMasks(**masks))


# ---------------------------------------------------------------------------
# synthetic distribution shift


@dataclass(frozen=True)
class GeneratorConfig:
    """Degree-corrected SBM with Gaussian class-conditional features.

    ``p_in``/``p_out`` are the base within/between-class edge probabilities;
    each node's propensity is lognormal with log-std ``degree_spread``.
    """

    num_nodes: int = 1000
    num_classes: int = 4
    num_envs: int = 4
    feature_dim: int = 16
    p_in: float = 0.03
    p_out: float = 0.003
    degree_spread: float = 0.5
    feature_signal: float = 1.0
    feature_noise: float = 1.0
    spurious_dim: int = 4
    spurious_scale: float = 1.0
    spurious_noise: float = 0.5
    train_frac: float = 0.6
    iid_val_frac: float = 0.2
    ood_val_frac: float = 0.5
    min_env_nodes: int = field(default=4, repr=False)

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_envs < 4:
            raise ConfigError(f"num_envs must be >= 4 (two training, two OOD), got {self.num_envs}")
        if self.num_nodes < self.num_envs * self.min_env_nodes:
            raise ConfigError(f"{self.num_nodes} nodes cannot fill {self.num_envs} environments "
                              f"of at least {self.min_env_nodes} nodes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        for name in ("p_in", "p_out"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if not (0 < self.train_frac and 0 <= self.iid_val_frac and self.train_frac + self.iid_val_frac < 1):
            raise ConfigError("train_frac and iid_val_frac must leave room for iid_test")
        if not 0 < self.ood_val_frac < 1:
            raise ConfigError("ood_val_frac must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def _base_graph(cfg, seed):
    """Labels, undirected edges and invariant features; shared by both generators."""
    n, c = cfg.num_nodes, cfg.num_classes
    labels = make_rng(seed, "labels").permutation(np.arange(n) % c)

    rng = make_rng(seed, "edges")
    theta = rng.lognormal(0.0, cfg.degree_spread, size=n)
    theta /= theta.mean()
    iu, ju = np.triu_indices(n, k=1)
    base = np.where(labels[iu] == labels[ju], cfg.p_in, cfg.p_out)
    prob = np.minimum(1.0, theta[iu] * theta[ju] * base)
    keep = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    rng = make_rng(seed, "features")
    means = rng.normal(0.0, cfg.feature_signal, size=(c, cfg.feature_dim))
    feats = means[labels] + rng.normal(0.0, cfg.feature_noise, size=(n, cfg.feature_dim))
    return labels, edges, feats


def _split(cfg, env_id, seed):
    n_train_envs = cfg.num_envs - cfg.num_envs // 2
    rng = make_rng(seed, "splits")
    in_dist = rng.permutation(np.flatnonzero(env_id < n_train_envs))
    ood = rng.permutation(np.flatnonzero(env_id >= n_train_envs))
    a = int(round(cfg.train_frac * in_dist.size))
    b = a + int(round(cfg.iid_val_frac * in_dist.size))
    k = int(round(cfg.ood_val_frac * ood.size))
    return SplitMasks(in_dist[:a], in_dist[a:b], in_dist[b:], ood[:k], ood[k:])


def _degrees(n, edges):
    return np.bincount(edges.ravel(), minlength=n)


def degree_environments(degrees, num_envs):
    """Equal-size environments by ascending degree (ties broken by node id)."""
    n = degrees.shape[0]
    order = np.lexsort((np.arange(n), degrees))
    env = np.empty(n, dtype=np.int64)
    env[order] = np.arange(n) * num_envs // n
    return env


def gen_covariate_shift(cfg, seed):
    """Degree-domain covariate shift: the highest-degree environments are held out as OOD."""
    cfg.validate()
    labels, edges, feats = _base_graph(cfg, seed)
    env = degree_environments(_degrees(cfg.num_nodes, edges), cfg.num_envs)
    return graph_from_edges(feats, edges, labels, cfg.num_classes, env, cfg.num_envs,
                            _split(cfg, env, seed))


def gen_concept_shift(cfg, spurious_corr_train, spurious_corr_ood, seed):
    """Concept shift through an appended spurious block.

    In each environment a fixed fraction of nodes (the environment's correlation,
    rounded to whole nodes) gets a spurious one-hot of its true label; the others get
    a uniformly random wrong label. The invariant block equals the covariate
    generator's features for the same ``(cfg, seed)``.
    """
    cfg.validate()
    for name, p in (("spurious_corr_train", spurious_corr_train), ("spurious_corr_ood", spurious_corr_ood)):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {p}")
    if cfg.spurious_dim <= 0:
        raise ConfigError("spurious_dim must be positive")
    if cfg.spurious_dim < cfg.num_classes:
        raise ConfigError(f"one-hot spurious encoding needs spurious_dim >= num_classes "
                          f"({cfg.spurious_dim} < {cfg.num_classes})")
    n, c = cfg.num_nodes, cfg.num_classes
    labels, edges, feats = _base_graph(cfg, seed)
    env = np.empty(n, dtype=np.int64)
    env[make_rng(seed, "envs").permutation(n)] = np.arange(n) * cfg.num_envs // n
    n_train_envs = cfg.num_envs - cfg.num_envs // 2

    rng = make_rng(seed, "spurious")
    encoded = labels.copy()
    for e in range(cfg.num_envs):
        members = rng.permutation(np.flatnonzero(env == e))
        corr = spurious_corr_train if e < n_train_envs else spurious_corr_ood
        wrong = members[int(round(corr * members.size)):]
        encoded[wrong] = (labels[wrong] + rng.integers(1, c, size=wrong.size)) % c
    spur = np.zeros((n, cfg.spurious_dim))
    spur[np.arange(n), encoded] = cfg.spurious_scale
    spur += rng.normal(0.0, cfg.spurious_noise, size=spur.shape)

    return graph_from_edges(np.concatenate([feats, spur], axis=1), edges, labels, c, env,
                            cfg.num_envs, _split(cfg, env, seed))


def spurious_agreement(g, cfg, ids):
    """Fraction of ``ids`` whose spurious block argmax equals the true label."""
    block = g.features.data[ids, cfg.feature_dim:cfg.feature_dim + cfg.num_classes]
    return float(np.mean(block.argmax(axis=1) == g.labels[ids]))
