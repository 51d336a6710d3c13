"""Iterative information-bottleneck clustering and its correspondence with attention.

The assignment step uses a Gaussian cluster model with one covariance shared by
all clusters::

    p(c|i) ∝ p(c) exp(-(mu_c - x_i)^T S^-1 (mu_c - x_i))

followed by soft-count priors and soft-weighted means. With uniform priors and
means of equal Mahalanobis norm, the quadratic terms that depend on c cancel and
the mean update becomes a dot-product attention aggregation with keys
``W_K x_c = 2 mu_c`` and query transform ``W_Q = S^-1``;
:func:`attention_equivalence_check` evaluates both routes independently.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ProtocolError
from .rng import make_rng

MAX_ITER = 200
TOL = 1e-10


@dataclass(frozen=True, eq=False)
class IBState:
    assignments: np.ndarray  # n x C, rows on the simplex
    priors: np.ndarray  # C
    means: np.ndarray  # C x d
    cov: np.ndarray  # d x d, shared
    eps: float = 1.0

    @property
    def n_clusters(self):
        return self.priors.shape[0]

    def check(self, tol=1e-12):
        if np.any(self.assignments < 0) or np.max(np.abs(self.assignments.sum(axis=1) - 1.0)) > tol:
            raise ProtocolError("assignment rows must be non-negative and sum to 1")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > tol:
            raise ProtocolError("priors must lie on the simplex")
        if np.max(np.abs(self.cov - self.cov.T)) > tol:
            raise ProtocolError("covariance must be symmetric")
        _cholesky(self.cov)


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(cov)
        raise NumericalError(f"shared covariance is not positive definite (condition number {cond:.3g})") from None


def _precision(cov):
    L = _cholesky(cov)
    inv_l = np.linalg.inv(L)
    prec = inv_l.T @ inv_l
    return 0.5 * (prec + prec.T)


def init_state(points, n_clusters, eps=1.0, cov=None):
    """Uniform assignments and priors; means by deterministic farthest-point selection."""
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    if not 1 <= n_clusters <= n:
        raise ProtocolError(f"need 1 <= clusters <= points, got {n_clusters} clusters for {n} points")
    chosen = [0]
    dist = np.sum((x - x[0]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1))
    cov = eps ** 2 * np.eye(d) if cov is None else np.asarray(cov, dtype=np.float64)
    return IBState(
        assignments=np.full((n, n_clusters), 1.0 / n_clusters),
        priors=np.full(n_clusters, 1.0 / n_clusters),
        means=x[chosen].copy(),
        cov=cov,
        eps=eps,
    )


def mahalanobis_sq(points, means, prec):
    """(n x C) matrix of (mu_c - x_i)^T prec (mu_c - x_i)."""
    diff = means[None, :, :] - points[:, None, :]
    return np.einsum("icd,de,ice->ic", diff, prec, diff)


def _row_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def assign(state, points):
    """New p(c|i) from the previous priors and means."""
    prec = _precision(state.cov)
    with np.errstate(divide="ignore"):
        log_prior = np.log(state.priors)
    return _row_softmax(log_prior[None, :] - mahalanobis_sq(points, state.means, prec))


def weighted_means(assignments, points, fallback):
    mass = assignments.sum(axis=0)
    out = fallback.copy()
    live = mass > 0
    out[live] = (assignments[:, live].T @ points) / mass[live, None]
    return out


def ib_iterate(state, points):
    """One update: assignments, then soft-count priors, then means."""
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] < state.n_clusters:
        raise ProtocolError(f"{x.shape[0]} points for {state.n_clusters} clusters")
    p = assign(state, x)
    priors = p.mean(axis=0)
    priors = priors / priors.sum()
    return replace(state, assignments=p, priors=priors, means=weighted_means(p, x, state.means))


def ib_objective(state, points):
    """Clustering free energy: I(i; c) plus the expected Mahalanobis distortion.

    Non-increasing under :func:`ib_iterate` (each step minimizes it over one block
    of variables), and the information term vanishes for a single cluster.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    p = state.assignments
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, p * (np.log(p) - np.log(state.priors)[None, :]), 0.0)
    info = ratio.sum() / n
    distortion = (p * mahalanobis_sq(x, state.means, _precision(state.cov))).sum() / n
    return float(info + distortion)


def run(state, points, max_iter=MAX_ITER, tol=TOL):
    """Iterate to convergence (max assignment change < ``tol``). Returns (state, objective trace, converged)."""
    trace = [ib_objective(state, points)]
    converged = False
    for _ in range(max_iter):
        new = ib_iterate(state, points)
        change = float(np.max(np.abs(new.assignments - state.assignments)))
        state = new
        trace.append(ib_objective(state, points))
        if change < tol:
            converged = True
            break
    return state, trace, converged


# ---------------------------------------------------------------------------
# attention correspondence


def check_normalized(state, tol=1e-10):
    prec = _precision(state.cov)
    norms = np.einsum("cd,de,ce->c", state.means, prec, state.means)
    bad = np.flatnonzero(np.abs(norms - norms[0]) > tol * max(1.0, abs(norms[0])))
    if bad.size:
        c = int(bad[0])
        raise ProtocolError(f"cluster {c} breaks the normalization: mu^T S^-1 mu = {norms[c]:.12g} "
                            f"vs {norms[0]:.12g} for cluster 0")
    return norms


def ib_mean_update(state, points):
    """Means after one assignment step, computed from Mahalanobis distances and priors."""
    x = np.asarray(points, dtype=np.float64)
    return weighted_means(assign(state, x), x, state.means)


def attention_mean_update(keys, w_q, points):
    """z_c = eta_c * sum_i softmax_c(keys_c^T W_Q x_i) x_i with eta_c the inverse attention mass.

    ``keys`` holds ``W_K x_c`` for each cluster representative.
    """
    x = np.asarray(points, dtype=np.float64)
    scores = x @ w_q.T @ keys.T  # (n, C): keys_c^T W_Q x_i
    attn = _row_softmax(scores)
    eta = 1.0 / attn.sum(axis=0)
    return eta[:, None] * (attn.T @ x)


def attention_equivalence_check(state, points, prior_tol=1e-12):
    """Largest elementwise gap between the IB mean update and the attention aggregation.

    Requires uniform priors and means with equal Mahalanobis norm; violations
    raise :class:`ProtocolError` naming the offending cluster.
    """
    C = state.n_clusters
    off = np.flatnonzero(np.abs(state.priors - 1.0 / C) > prior_tol)
    if off.size:
        raise ProtocolError(f"cluster {int(off[0])} has prior {state.priors[off[0]]:.12g}; "
                            f"the correspondence needs uniform priors 1/{C}")
    check_normalized(state)
    via_ib = ib_mean_update(state, points)
    via_attention = attention_mean_update(2.0 * state.means, _precision(state.cov), points)
    return float(np.max(np.abs(via_ib - via_attention)))


# ---------------------------------------------------------------------------
# fixtures


def two_blob_points(n=40, center=5.0, sigma=0.1, dim=2, seed=0):
    """Two Gaussian blobs at +center and -center (all coordinates); returns (points, membership)."""
    rng = make_rng(seed, "ib", "blobs")
    member = np.arange(n) % 2
    centers = np.where(member[:, None] == 0, center, -center) * np.ones((1, dim))
    return centers + sigma * rng.standard_normal((n, dim)), member


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d) * 0.5


def normalized_fixture(seed, n=None, d=None, C=None):
    """Random points, a random shared covariance and uniform-prior means of equal Mahalanobis norm."""
    rng = make_rng(seed, "ib", "fixture")
    d = int(rng.integers(1, 5)) if d is None else d
    C = int(rng.integers(1, 5)) if C is None else C
    n = int(rng.integers(max(C, 5), 30)) if n is None else n
    cov = random_spd(rng, d)
    prec = _precision(cov)
    radius = rng.uniform(0.3, 1.5)
    dirs = rng.standard_normal((C, d))
    means = radius * dirs / np.sqrt(np.einsum("cd,de,ce->c", dirs, prec, dirs))[:, None]
    points = rng.standard_normal((n, d))
    state = IBState(np.full((n, C), 1.0 / C), np.full(C, 1.0 / C), means, cov)
    return state, points


def verify(fixture="two-blob", seed=0):
    """Report for the ``ib-verify`` command: equivalence deviation plus an objective trace."""
    if fixture == "two-blob":
        points, _ = two_blob_points(seed=seed)
        state = init_state(points, 2)
        final, trace, converged = run(state, points)
        sphere = IBState(final.assignments, np.full(2, 0.5), _equalize(final.means, final.cov), final.cov)
        deviation = attention_equivalence_check(sphere, points)
    elif fixture == "random":
        state, points = normalized_fixture(seed)
        deviation = attention_equivalence_check(state, points)
        _, trace, converged = run(state, points)
    else:
        raise ProtocolError(f"unknown fixture {fixture!r}; expected 'two-blob' or 'random'")
    return {"fixture": fixture, "seed": seed, "deviation": deviation,
            "objective_trace": trace, "converged": converged}


def _equalize(means, cov):
    """Rescale means to the largest Mahalanobis norm among them."""
    prec = _precision(cov)
    norms = np.sqrt(np.einsum("cd,de,ce->c", means, prec, means))
    target = norms.max()
    return means * np.where(norms > 0, target / np.where(norms > 0, norms, 1.0), 1.0)[:, None]
