"""Accuracy, IID/OOD generalization gap, and the paired t-test used to compare models."""

import math
import sys
from dataclasses import asdict, dataclass, field
from decimal import Decimal

import numpy as np

from .errors import ProtocolError, ShapeError
from .tensor import DenseMatrix

T_INF = sys.float_info.max  # stands in for +/- infinity in zero-variance t statistics


def accuracy(logits, labels, mask):
    """Fraction of ``mask`` rows whose argmax equals the label (ties go to the lowest class)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ProtocolError("accuracy over an empty mask")
    z = np.asarray(logits.data if isinstance(logits, DenseMatrix) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    return float(np.mean(z[mask].argmax(axis=1) == labels[mask]))


def gap(iid_test, ood_test):
    """IID test score minus OOD test score.

    The subtraction is carried out on the shortest decimal form of each input,
    so scores reported to a fixed number of decimals give an exactly rounded
    difference (``gap(0.7328, 0.7038) == 0.029``).
    """
    for v in (iid_test, ood_test):
        if not 0.0 <= v <= 1.0:
            raise ProtocolError(f"accuracy {v} outside [0, 1]")
    return float(Decimal(repr(float(iid_test))) - Decimal(repr(float(ood_test))))


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a, b, x, eps=1e-16, max_iter=500):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf2(t, df):
    """Two-tailed tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t) or abs(t) >= T_INF:
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t, df):
    tail = 0.5 * t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


# ---------------------------------------------------------------------------
# paired test


@dataclass(frozen=True)
class TTest:
    t_value: float
    p_value: float
    df: int


def paired_t_test(a, b):
    """Two-tailed paired t-test of ``a`` against ``b`` (paired by position, i.e. by seed).

    Zero variance of the differences gives (t=0, p=1) for a zero mean and
    (t=+/-T_INF, p=0) otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ProtocolError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ProtocolError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    df = n - 1
    if var == 0.0:
        if mean == 0.0:
            return TTest(0.0, 1.0, df)
        return TTest(math.copysign(T_INF, mean), 0.0, df)
    t = mean / math.sqrt(var / n)
    return TTest(t, t_sf2(t, df), df)


def significance_color(t, p, alpha=0.05):
    """``"better"`` / ``"worse"`` for a significant positive / negative t, else ``"not_significant"``."""
    if p < alpha and t > 0:
        return "better"
    if p < alpha and t < 0:
        return "worse"
    return "not_significant"


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunResult:
    seed: int
    iid_test_acc: float
    ood_test_acc: float
    iid_val_acc: float
    ood_val_acc: float
    train_acc: float = float("nan")
    best_epoch: int = -1
    aborted: bool = False
    diagnostic: str = ""

    def __post_init__(self):
        if not self.aborted:
            for name in ("iid_test_acc", "ood_test_acc", "iid_val_acc", "ood_val_acc"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ProtocolError(f"{name}={v} outside [0, 1]")

    @property
    def gap(self):
        return gap(self.iid_test_acc, self.ood_test_acc)

    def to_dict(self):
        return asdict(self)


def _mean_std(values):
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return math.fsum(values) / len(values), std


@dataclass
class MetricsReport:
    """Per-seed results for one configuration plus summary statistics over the completed runs."""

    runs: list
    test: TTest | None = field(default=None)

    @property
    def completed(self):
        return [r for r in self.runs if not r.aborted]

    def summary(self):
        ok = self.completed
        iid_m, iid_s = _mean_std([r.iid_test_acc for r in ok])
        ood_m, ood_s = _mean_std([r.ood_test_acc for r in ok])
        _, gap_s = _mean_std([r.iid_test_acc - r.ood_test_acc for r in ok])
        val_m, _ = _mean_std([r.iid_val_acc for r in ok])
        return {
            "n_runs": len(self.runs),
            "n_aborted": len(self.runs) - len(ok),
            "iid_val_mean": val_m,
            "iid_test_mean": iid_m,
            "iid_test_std": iid_s,
            "ood_test_mean": ood_m,
            "ood_test_std": ood_s,
            "gap_mean": iid_m - ood_m,
            "gap_std": gap_s,
        }

    def iid_val_mean(self):
        ok = self.completed
        if not ok:
            return float("-inf")
        return math.fsum(r.iid_val_acc for r in ok) / len(ok)

    def to_dict(self):
        out = {"runs": [r.to_dict() for r in self.runs], "summary": self.summary()}
        if self.test is not None:
            out["test"] = asdict(self.test)
        return out
