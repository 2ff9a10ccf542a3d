"""Evaluation protocol: 4-parameter logistic remapping, PLCC, SRCC and the
binary 2AFC agreement score."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import ArgumentError, DegenerateInputError


def logistic4(beta, x):
    b1, b2, b3, b4 = beta
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2


def _logistic_jacobian(beta, x):
    b1, b2, b3, b4 = beta
    s4 = abs(b4)
    s = 1.0 / (1.0 + np.exp(-(x - b3) / s4))
    ds = s * (1.0 - s)
    amp = b1 - b2
    return np.stack(
        [s, 1.0 - s, -amp * ds / s4, -amp * ds * (x - b3) / (s4 * s4) * np.sign(b4 if b4 != 0 else 1.0)],
        axis=1,
    )


@dataclass
class LogisticFit:
    beta: np.ndarray
    sse: float
    iterations: int
    converged: bool
    initial_sse: float = float("nan")

    def __call__(self, x):
        return logistic4(self.beta, np.asarray(x, dtype=np.float64))


def initial_beta(pred, y):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.array([y.max(), y.min(), pred.mean(), pred.std() / 4.0])


def fit_logistic(pred, y, max_iter=200, rtol=1e-10):
    """Least-squares fit of the 4-parameter logistic by damped Gauss-Newton.

    Steps are accepted only when they lower the squared error, so the result
    is never worse than the initialisation.  Hitting ``max_iter`` returns the
    best point found with ``converged=False`` and a ``RuntimeWarning``.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ArgumentError(f"length mismatch: {x.size} predictions, {y.size} labels")
    if x.size < 5:
        raise ArgumentError(f"logistic fit needs at least 5 points, got {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateInputError("logistic fit on constant predictions")

    beta = initial_beta(x, y)
    resid = logistic4(beta, x) - y
    sse = float(resid @ resid)
    initial = sse
    damping = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if sse == 0.0:
            converged = True
            break
        jac = _logistic_jacobian(beta, x)
        jtj = jac.T @ jac
        grad = jac.T @ resid
        improved = False
        while damping < 1e16:
            lhs = jtj + damping * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(lhs, -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = beta + step
            if trial[3] == 0 or not np.all(np.isfinite(trial)):
                damping *= 10.0
                continue
            r_trial = logistic4(trial, x) - y
            sse_trial = float(r_trial @ r_trial)
            if np.isfinite(sse_trial) and sse_trial < sse:
                improved = True
                break
            damping *= 10.0
        if not improved:
            converged = True  # no descent direction left at machine precision
            break
        change = (sse - sse_trial) / sse
        beta, resid, sse = trial, r_trial, sse_trial
        damping = max(damping / 10.0, 1e-12)
        if change < rtol:
            converged = True
            break
    if not converged:
        warnings.warn(f"logistic fit did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    return LogisticFit(beta=beta, sse=sse, iterations=it, converged=converged, initial_sse=initial)


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    if denom == 0:
        raise DegenerateInputError("correlation of a constant vector")
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def _vectors(pred, y, min_len=2):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if pred.shape != y.shape:
        raise ArgumentError(f"length mismatch: {pred.size} vs {y.size}")
    if pred.size < min_len:
        raise ArgumentError(f"need at least {min_len} samples, got {pred.size}")
    return pred, y


def plcc(pred, y, with_fit=True):
    """Pearson correlation, by default after logistic remapping of ``pred``."""
    pred, y = _vectors(pred, y)
    if np.ptp(pred) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("PLCC with a constant vector")
    if with_fit:
        pred = fit_logistic(pred, y)(pred)
    return _pearson(pred, y)


def srcc(pred, y):
    """Spearman correlation: Pearson on midranks (ties share the average rank)."""
    pred, y = _vectors(pred, y)
    return _pearson(rankdata(pred), rankdata(y))


def score_2afc(judgments, continuous=False):
    """Agreement between model and human binary preferences.

    ``judgments`` rows are ``(y_a, y_b, p_a, p_b)`` with ``p_a + p_b = 1``.
    Per item: 1 if the strict model ordering matches the strict human
    ordering, 0.5 on an exact model tie, else 0; the mean is returned.
    ``continuous=True`` instead credits the human vote share of the side
    the model picked.
    """
    arr = np.asarray(judgments, dtype=np.float64)
    if arr.size == 0:
        raise ArgumentError("score_2afc on an empty judgment list")
    arr = arr.reshape(-1, 4)
    ya, yb, pa, pb = arr.T
    if np.any(np.abs(pa + pb - 1.0) > 1e-6):
        raise ArgumentError("each judgment needs p_a + p_b = 1")
    lt, gt, eq = ya < yb, ya > yb, ya == yb
    if continuous:
        per_item = lt * pb + gt * pa + 0.5 * eq
    else:
        per_item = (lt & (pa < pb)) * 1.0 + (gt & (pa > pb)) * 1.0 + 0.5 * eq
    return float(per_item.mean())


@dataclass
class EvalReport:
    n_samples: int
    plcc: float = float("nan")
    srcc: float = float("nan")
    fit: LogisticFit | None = None
    twoafc: float | None = None
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        d = {"n_samples": self.n_samples, "plcc": self.plcc, "srcc": self.srcc}
        if self.fit is not None:
            d.update({f"beta{i + 1}": float(b) for i, b in enumerate(self.fit.beta)})
            d["fit_converged"] = self.fit.converged
        if self.twoafc is not None:
            d["twoafc"] = self.twoafc
        d.update(self.extras)
        return d

    def to_text(self):
        """Flat ``key=value`` lines; floats use ``repr`` so values round-trip."""
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in self.as_dict().items())


def evaluate_scores(pred, y):
    """PLCC (with logistic fit) and SRCC of scalar predictions against labels."""
    pred, y = _vectors(pred, y)
    report = EvalReport(n_samples=int(pred.size))
    report.srcc = srcc(pred, y)
    if pred.size >= 5:
        fit = fit_logistic(pred, y)
        report.fit = fit
        report.plcc = _pearson(fit(pred), y)
    else:
        report.plcc = plcc(pred, y, with_fit=False)
    return report
