"""Volume-based diagnosis: features, RBF-kernel SVM (SMO), stratified CV, metrics."""

from __future__ import annotations

import csv
import enum
import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientDataError, NumericError, UndefinedMetricError
from .linalg import make_rng

log = logging.getLogger(__name__)

FEATURES = ("left_volume", "right_volume", "age", "sex")
TABLE_COLUMNS = ("id", "left_volume_cm3", "right_volume_cm3", "age", "sex", "diagnosis")
DIAGNOSES = ("CN", "AD", "EMCI", "LMCI")


class Task(str, enum.Enum):
    AD_VS_CN = "ad-cn"
    EMCI_VS_LMCI = "emci-lmci"

    @classmethod
    def parse(cls, text) -> "Task":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "-").replace("-vs-", "-")
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown task {text!r}; expected ad-cn or emci-lmci") from None

    @property
    def classes(self) -> tuple[str, str]:
        """(positive, negative) diagnosis labels."""
        return ("AD", "CN") if self is Task.AD_VS_CN else ("LMCI", "EMCI")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    left_volume: float
    right_volume: float
    age: float
    sex: str
    diagnosis: str

    def __post_init__(self):
        if not (self.left_volume > 0 and self.right_volume > 0):
            raise DataError(f"subject {self.id}: volumes must be positive")
        if not self.age > 0:
            raise DataError(f"subject {self.id}: age must be positive")
        if self.sex not in ("M", "F"):
            raise DataError(f"subject {self.id}: sex must be M or F, got {self.sex!r}")
        if self.diagnosis not in DIAGNOSES:
            raise DataError(f"subject {self.id}: unknown diagnosis {self.diagnosis!r}")


def read_subject_table(path: str | os.PathLike) -> list[SubjectRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in TABLE_COLUMNS:
            if col not in header:
                raise DataError(f"subject table is missing column {col!r}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k}
            try:
                out.append(
                    SubjectRecord(
                        id=row["id"],
                        left_volume=float(row["left_volume_cm3"]),
                        right_volume=float(row["right_volume_cm3"]),
                        age=float(row["age"]),
                        sex=row["sex"].upper(),
                        diagnosis=row["diagnosis"].upper(),
                    )
                )
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return out


def write_subject_table(records, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in records:
            w.writerow([r.id, f"{r.left_volume:.6f}", f"{r.right_volume:.6f}", f"{r.age:.2f}", r.sex, r.diagnosis])


def build_features(records, task) -> tuple[np.ndarray, np.ndarray]:
    """Rows [left, right, age, sex(M=1)] and labels (+1 = AD / LMCI)."""
    task = Task.parse(task)
    records = list(records)
    if not records:
        raise DataError("no subject records")
    pos, neg = task.classes
    bad = sorted({r.diagnosis for r in records} - {pos, neg})
    if bad:
        raise DataError(f"task {task.value} accepts only {pos}/{neg}, found {bad}")
    x = np.array([[r.left_volume, r.right_volume, r.age, 1.0 if r.sex == "M" else 0.0] for r in records])
    y = np.array([1.0 if r.diagnosis == pos else -1.0 for r in records])
    return x, y


@dataclass
class SvmModel:
    support: np.ndarray  # standardised support vectors
    dual_coef: np.ndarray  # alpha_i * y_i
    alpha: np.ndarray  # all multipliers, training order
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    iterations: int = 0

    def standardise(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


def _smo(k: np.ndarray, y: np.ndarray, c: float, tol: float, max_iter: int):
    """Dual solver with second-order working-set selection."""
    n = y.size
    alpha = np.zeros(n)
    grad = -np.ones(n)
    qd = np.diag(k).copy()
    tau = 1e-12
    it = 0
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < c)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            break
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        gmax = yg[i]
        gmin = np.min(np.where(low, yg, np.inf))
        if gmax - gmin < tol:
            break
        b = gmax - yg
        cand = low & (b > 0)
        if not cand.any():
            break
        a = qd[i] + qd - 2.0 * k[i]
        a = np.where(a > 0, a, tau)
        obj = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))

        qi = y[i] * y * k[i]
        qj = y[j] * y * k[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = qd[i] + qd[j] + 2.0 * qi[j]
            quad = quad if quad > 0 else tau
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > c:
                    ni, nj = c, c - diff
            elif nj > c:
                nj, ni = c, c + diff
        else:
            quad = qd[i] + qd[j] - 2.0 * qi[j]
            quad = quad if quad > 0 else tau
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > c:
                if ni > c:
                    ni, nj = c, total - c
            elif nj < 0:
                nj, ni = 0.0, total
            if total > c:
                if nj > c:
                    nj, ni = c, total - c
            elif ni < 0:
                ni, nj = 0.0, total
        grad += qi * (ni - ai) + qj * (nj - aj)
        alpha[i], alpha[j] = ni, nj
        it += 1
    else:
        log.warning("SMO stopped at the iteration cap (%d) before reaching tol=%g", max_iter, tol)

    # bias from the free multipliers, or the midpoint of the feasible interval
    yg = y * grad
    free = (alpha > 0) & (alpha < c)
    if free.any():
        rho = float(yg[free].mean())
    else:
        ub_mask = ((alpha >= c) & (y < 0)) | ((alpha <= 0) & (y > 0))
        lb_mask = ((alpha >= c) & (y > 0)) | ((alpha <= 0) & (y < 0))
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2.0) if np.isfinite(ub + lb) else 0.0
    return alpha, -rho, it


def svm_train(x, y, C: float = 1.0, gamma: float | str | None = "auto", tol: float = 1e-3,
              max_iter: int = 200_000) -> SvmModel:
    """Fit z-scoring on ``x`` then a C-SVM with an RBF kernel.

    ``gamma='auto'`` means 1 / n_features.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DataError(f"features {x.shape} do not match {y.size} labels")
    if x.shape[0] < 2 or not ((y > 0).any() and (y < 0).any()):
        raise DataError("SVM training needs at least one sample of each class")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be +1 / -1")
    if gamma is None or gamma == "auto":
        gamma = 1.0 / x.shape[1]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    k = rbf_kernel(xs, xs, float(gamma))
    alpha, bias, it = _smo(k, y, float(C), tol, max_iter)
    if not np.all(np.isfinite(alpha)):
        raise NumericError("SMO produced non-finite multipliers")
    sv = alpha > 0
    return SvmModel(
        support=xs[sv],
        dual_coef=(alpha * y)[sv],
        alpha=alpha,
        bias=bias,
        gamma=float(gamma),
        C=float(C),
        mean=mean,
        std=std,
        iterations=it,
    )


def svm_decision(model: SvmModel, x) -> np.ndarray | float:
    """Signed decision value(s); positive means the +1 class."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = model.standardise(np.atleast_2d(x))
    if model.support.shape[0] == 0:
        out = np.full(xs.shape[0], model.bias)
    else:
        out = rbf_kernel(xs, model.support, model.gamma) @ model.dual_coef + model.bias
    return float(out[0]) if single else out


@dataclass
class CVResult:
    ids: list[str]
    scores: np.ndarray
    labels: np.ndarray
    folds: np.ndarray


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold index per sample: each class is shuffled then dealt round-robin."""
    rng = make_rng(seed)
    folds = np.empty(y.size, dtype=np.int64)
    for cls in (1.0, -1.0):
        idx = np.flatnonzero(y == cls)
        if idx.size < k:
            raise InsufficientDataError(f"class {int(cls):+d} has {idx.size} members, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


def cross_validate(records, task, k: int = 5, seed: int = 42, C: float = 1.0, gamma="auto") -> CVResult:
    """Out-of-fold decision values; scaling and SVM are fitted per training fold."""
    records = list(records)
    x, y = build_features(records, task)
    folds = stratified_folds(y, k, seed)
    scores = np.empty(y.size)
    for f in range(k):
        test = folds == f
        model = svm_train(x[~test], y[~test], C=C, gamma=gamma)
        scores[test] = svm_decision(model, x[test])
    return CVResult([r.id for r in records], scores, y, folds)


@dataclass(frozen=True)
class ClassReport:
    auc: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def table_row(self) -> dict[str, str]:
        pct = lambda v: f"{100.0 * v:.2f}%"  # noqa: E731
        return {
            "AUC": f"{self.auc:.4f}",
            "Precision": pct(self.precision),
            "Sensitivity": pct(self.sensitivity),
            "Specificity": pct(self.specificity),
            "F1-score": pct(self.f1),
            "Accuracy": pct(self.accuracy),
        }

    def as_dict(self) -> dict:
        return {
            "auc": self.auc, "precision": self.precision, "sensitivity": self.sensitivity,
            "specificity": self.specificity, "f1": self.f1, "accuracy": self.accuracy,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def roc_auc(scores, labels) -> float:
    """Trapezoidal ROC area over the distinct score thresholds.

    Computed on integer counts, so it equals the tie-corrected Mann-Whitney
    statistic divided by n_pos * n_neg exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    area2 = 0
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        dtp = int(y[i:j].sum())
        dfp = (j - i) - dtp
        area2 += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        i = j
    return area2 / (2 * n_pos * n_neg)


def classification_report(scores, labels, threshold: float = 0.0) -> ClassReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores vs {y.size} labels")
    if y.all() or not y.any():
        raise UndefinedMetricError("classification metrics need both classes present")
    pred = s > threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    tn = int((~pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    f1 = 2 * precision * sensitivity / (precision + sensitivity) if precision + sensitivity else 0.0
    return ClassReport(
        auc=roc_auc(s, y),
        precision=precision,
        sensitivity=sensitivity,
        specificity=_ratio(tn, tn + fp),
        f1=f1,
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def synth_cohort(
    n_per_class: int = 100,
    task="ad-cn",
    means: tuple[float, float] = (2.28, 2.70),
    std: float = 0.15,
    seed: int = 0,
) -> list[SubjectRecord]:
    """Synthetic subjects: both hippocampal volumes ~ N(mean, std) per class.

    ``means`` is (positive class, negative class). Age and sex are drawn
    independently of the diagnosis.
    """
    task = Task.parse(task)
    rng = make_rng(seed)
    out = []
    for label, mu in zip(task.classes, means):
        for i in range(n_per_class):
            left, right = rng.normal(mu, std, size=2)
            age = float(np.clip(rng.normal(74.0, 7.5), 50.0, 95.0))
            sex = "M" if rng.random() < 0.5 else "F"
            out.append(SubjectRecord(f"{label}{i:03d}", max(float(left), 0.1), max(float(right), 0.1), age, sex, label))
    return out


def format_report(report: ClassReport, title: str = "") -> str:
    row = report.table_row()
    cols = list(row)
    lines = []
    if title:
        lines.append(title)
    lines.append("\t".join(cols))
    lines.append("\t".join(row[c] for c in cols))
    lines.append("")
    lines.append("confusion matrix (rows = truth, cols = prediction)")
    lines.append("\tpred+\tpred-")
    lines.append(f"true+\t{report.tp}\t{report.fn}")
    lines.append(f"true-\t{report.fp}\t{report.tn}")
    return "\n".join(lines) + "\n"

