"""Training objectives (ERM, IRM, VREx, GroupDRO, Graph-Mixup) and the full-batch training loop."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError
from .evaluation import accuracy
from .models import apply_head, bind, forward, init_params, represent
from .rng import make_rng

STRATEGIES = ("ERM", "IRM", "VREX", "GROUPDRO", "GRAPH_MIXUP")


@dataclass(frozen=True)
class TrainPlan:
    strategy: str = "ERM"
    epochs: int = 100
    lr: float = 5e-3
    weight_decay: float = 5e-4
    penalty_weight: float = 1.0
    group_step: float = 0.01
    mixup_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be >= 0")
        if not self.group_step > 0:
            raise ConfigError("group_step must be > 0")
        if not self.mixup_alpha > 0:
            raise ConfigError("mixup_alpha must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


def env_batches(g):
    """``{env: sorted train node ids}`` for every environment present in the train split."""
    train = g.splits.train
    envs = g.env_id[train]
    return {int(e): train[envs == e] for e in np.unique(envs)}


# ---------------------------------------------------------------------------
# objectives


def erm_loss(logits, labels, train_mask):
    return T.softmax_cross_entropy(logits, labels, train_mask)


def env_risks(logits, labels, envs):
    return [T.softmax_cross_entropy(logits, labels, ids) for ids in envs.values() if len(ids)]


def _as_scalars(values):
    return [v if isinstance(v, T.DenseMatrix) else T.DenseMatrix([[float(v)]]) for v in values]


def _total(xs):
    out = xs[0]
    for x in xs[1:]:
        out = T.add(out, x)
    return out


def irm_penalty(logits, labels, envs):
    """IRMv1: sum over environments of (d/dw R_e(w * logits) at w = 1) squared."""
    terms = []
    for ids in envs.values():
        if len(ids):
            g = T.irm_scale_grad(logits, labels, ids)
            terms.append(T.mul(g, g))
    if not terms:
        raise ConfigError("IRM needs at least one non-empty training environment")
    return _total(terms)


def vrex_penalty(risks):
    """Population variance of the per-environment risks."""
    risks = _as_scalars(risks)
    k = len(risks)
    if k == 0:
        raise ConfigError("VREx needs at least one environment")
    mean = T.scale(_total(risks), 1.0 / k)
    neg_mean = T.scale(mean, -1.0)
    sq = []
    for r in risks:
        dev = T.add(r, neg_mean)
        sq.append(T.mul(dev, dev))
    return T.scale(_total(sq), 1.0 / k)


def groupdro_step(risks, weights, step_size):
    """Exponentiated-gradient update of the group weights, then the re-weighted loss.

    Returns ``(new_weights, loss)`` where ``loss = sum_e new_weights[e] * risks[e]``.
    The weights are treated as constants by the tape.
    """
    risks = _as_scalars(risks)
    q = np.asarray(weights, dtype=np.float64)
    if q.shape != (len(risks),):
        raise ConfigError(f"{q.shape[0]} weights for {len(risks)} risks")
    r = np.array([x.item() for x in risks])
    with np.errstate(divide="ignore"):
        logits = np.log(q) + step_size * r
    logits -= logits.max()
    new = np.exp(logits)
    new /= new.sum()
    loss = _total([T.scale(x, w) for x, w in zip(risks, new)])
    return new, loss


def mixup_batch(hidden, onehot, train_mask, lam, perm):
    """Convex combination of train rows with a permuted copy; labels mixed the same way.

    ``perm`` permutes positions within ``train_mask``.
    """
    train_mask = np.asarray(train_mask, dtype=np.int64)
    partner = train_mask[np.asarray(perm, dtype=np.int64)]
    mixed = T.add(T.scale(T.gather_rows(hidden, train_mask), lam),
                  T.scale(T.gather_rows(hidden, partner), 1.0 - lam))
    onehot = np.asarray(onehot, dtype=np.float64)
    soft = lam * onehot[train_mask] + (1.0 - lam) * onehot[partner]
    return mixed, soft


def graph_mixup(spec, bound, hidden, labels, classes, train_mask, lam, perm):
    """Soft cross-entropy of the linear head on mixed hidden representations."""
    if not spec.linear_head:
        raise ConfigError(f"Graph-Mixup mixes hidden representations and needs a linear head; "
                          f"{spec.kind} is configured without one")
    onehot = np.eye(classes)[np.asarray(labels)]
    mixed, soft = mixup_batch(hidden, onehot, train_mask, lam, perm)
    return T.soft_cross_entropy(apply_head(spec, bound, mixed), soft)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """First/second-moment adaptive steps (0.9 / 0.999, eps 1e-8) with L2 weight decay."""

    def __init__(self, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.b1 * self.m.get(name, 0.0) + (1.0 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    penalty: float
    train_acc: float
    iid_val_acc: float


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    trace: list = field(default_factory=list)


def strategy_objective(spec, plan, g, bound, epoch, state):
    """Training loss for one epoch. Returns ``(objective, penalty value)``.

    ``state`` carries the GroupDRO weights between epochs.
    """
    labels = g.labels
    train = g.splits.train
    rep = represent(spec, bound, g, "train", seed=plan.seed, step=epoch)

    if plan.strategy == "GRAPH_MIXUP":
        rng = make_rng(plan.seed, "mixup", epoch)
        lam = float(rng.beta(plan.mixup_alpha, plan.mixup_alpha))
        perm = rng.permutation(train.size)
        return graph_mixup(spec, bound, rep, labels, g.classes, train, lam, perm), 0.0

    logits = apply_head(spec, bound, rep)
    if plan.strategy == "ERM":
        return erm_loss(logits, labels, train), 0.0
    envs = env_batches(g)
    if plan.strategy == "IRM":
        pen = irm_penalty(logits, labels, envs)
        return T.add(erm_loss(logits, labels, train), T.scale(pen, plan.penalty_weight)), pen.item()
    if plan.strategy == "VREX":
        pen = vrex_penalty(env_risks(logits, labels, envs))
        return T.add(erm_loss(logits, labels, train), T.scale(pen, plan.penalty_weight)), pen.item()
    # GROUPDRO
    risks = env_risks(logits, labels, envs)
    q = state.get("q")
    if q is None:
        q = np.full(len(risks), 1.0 / len(risks))
    state["q"], loss = groupdro_step(risks, q, plan.group_step)
    return loss, 0.0


def train(spec, plan, g, params=None):
    """Full-batch training; returns the parameters of the epoch with the best IID-validation accuracy.

    Ties go to the earlier epoch. Raises :class:`NumericalError` on a non-finite loss or gradient.
    """
    if plan.strategy == "GRAPH_MIXUP" and not spec.linear_head:
        raise ConfigError(f"Graph-Mixup needs a model with a linear head; {spec.kind} has none")
    if params is None:
        params = init_params(spec, g.feature_dim, g.classes, plan.seed)
    opt = Adam(plan.lr, plan.weight_decay)
    state = {}
    val = g.splits.iid_val
    trace = []
    best_params, best_epoch, best_acc = None, -1, -math.inf
    for epoch in range(plan.epochs):
        tape = T.Tape()
        bound = bind(params, tape)
        loss, pen = strategy_objective(spec, plan, g, bound, epoch, state)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss {value} at epoch {epoch} "
                                 f"({spec.kind}, {plan.strategy}, lr={plan.lr}, seed={plan.seed})")
        grads = tape.backward(loss)
        bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericalError(f"non-finite gradient for {bad[0]} at epoch {epoch} "
                                 f"({spec.kind}, {plan.strategy}, lr={plan.lr}, seed={plan.seed})")
        params = opt.step(params, grads)
        logits = forward(spec, params, g, "eval")
        train_acc = accuracy(logits, g.labels, g.splits.train)
        val_acc = accuracy(logits, g.labels, val) if val.size else train_acc
        trace.append(EpochRecord(epoch, value, pen, train_acc, val_acc))
        if val_acc > best_acc:
            best_params, best_epoch, best_acc = params, epoch, val_acc
    return TrainResult(best_params, best_epoch, trace)
