"""Linear SVM (hinge-loss subgradient descent) and a logistic linear head.

Features are z-scored with training statistics; zero-variance columns are
dropped. Labels: CN = -1, AD = +1; a score >= 0 predicts AD.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

log = logging.getLogger(__name__)

LABEL_SIGN = {"CN": -1, "AD": 1}


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    C: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    depth: int
    dropped: list[int] = field(default_factory=list)
    n_features: int = 0
    kind: str = "svm"
    history: list[float] = field(default_factory=list, repr=False)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise InvalidArgumentError(f"expected {self.n_features} features, got {X.shape[1]}")
        keep = _kept(self.n_features, self.dropped)
        return (X[:, keep] - self.feature_means) / self.feature_stds

    def to_dict(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "C": self.C, "bias": self.bias,
                "n_features": self.n_features, "dropped": list(self.dropped),
                "means": self.feature_means.tolist(), "stds": self.feature_stds.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        return cls(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]), float(d["C"]),
                   np.asarray(d["means"], dtype=np.float64), np.asarray(d["stds"], dtype=np.float64),
                   int(d["depth"]), list(d["dropped"]), int(d["n_features"]), d.get("kind", "svm"))


def save_model(model: SvmModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_model(path) -> SvmModel:
    return SvmModel.from_dict(json.loads(Path(path).read_text()))


def _kept(n: int, dropped) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[list(dropped)] = False
    return np.flatnonzero(mask)


def _as_matrix(features) -> tuple[np.ndarray, int]:
    rows, depths = [], set()
    for f in features:
        if hasattr(f, "values"):
            rows.append(f.values)
            depths.add(f.depth)
        else:
            rows.append(np.asarray(f, dtype=np.float64))
    if not rows:
        raise InvalidArgumentError("no training examples")
    if len(depths) > 1:
        raise InvalidArgumentError(f"features mix depths {sorted(depths)}")
    X = np.vstack(rows).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("features contain non-finite values")
    return X, depths.pop() if depths else 0


def _as_signs(labels) -> np.ndarray:
    try:
        y = np.array([LABEL_SIGN[l] if isinstance(l, str) else int(l) for l in labels], dtype=np.float64)
    except KeyError as exc:
        raise InvalidArgumentError(f"unknown label {exc.args[0]!r}") from None
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise InvalidArgumentError("labels must be CN/AD or -1/+1")
    if len(set(y)) < 2:
        raise InvalidArgumentError("training data must contain both classes")
    return y


def _fit_standardization(X: np.ndarray):
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    scale = np.maximum(np.abs(means), 1.0)
    dropped = np.flatnonzero(stds <= 1e-12 * scale)
    if dropped.size:
        log.warning("dropping %d zero-variance feature(s)", dropped.size)
    keep = _kept(X.shape[1], dropped)
    return means[keep], stds[keep], dropped.tolist()


def svm_objective(w: np.ndarray, b: float, Z: np.ndarray, y: np.ndarray, C: float) -> float:
    margins = 1.0 - y * (Z @ w + b)
    return float(0.5 * w @ w + C * np.clip(margins, 0.0, None).sum())


def _subgradient_descent(Z, y, C, tol, max_epochs, check_every=200):
    n, p = Z.shape
    w = np.zeros(p)
    b = 0.0
    best = (svm_objective(w, b, Z, y, C), w.copy(), b)
    history = [best[0]]
    # step size decays as 1/sqrt(t + t0) from a scale set by the data
    lip = 1.0 + C * np.sum(np.linalg.norm(Z, axis=1) + 1.0)
    eta0 = 1.0 / lip
    t0 = 10.0
    mark = best[0]
    for epoch in range(1, max_epochs + 1):
        margins = y * (Z @ w + b)
        active = margins < 1.0
        gw = w - C * (y[active, None] * Z[active]).sum(axis=0)
        gb = -C * y[active].sum()
        eta = eta0 * np.sqrt((1.0 + t0) / (epoch + t0))
        w = w - eta * gw
        b = b - eta * gb
        obj = svm_objective(w, b, Z, y, C)
        if obj < best[0]:
            best = (obj, w.copy(), b)
        history.append(best[0])
        if epoch % check_every == 0:
            if mark - best[0] <= tol * max(abs(best[0]), 1.0):
                break
            mark = best[0]
    return best[1], best[2], history


def svm_train(features, labels, C: float = 1.0, tol: float = 1e-6, max_epochs: int = 20000) -> SvmModel:
    """Soft-margin linear SVM by full-batch subgradient descent.

    The returned parameters are the best iterate seen, so the recorded
    objective history is nonincreasing.
    """
    if C <= 0:
        raise InvalidArgumentError("C must be positive")
    X, depth = _as_matrix(features)
    y = _as_signs(labels)
    if X.shape[0] != y.shape[0]:
        raise InvalidArgumentError("features and labels differ in length")
    means, stds, dropped = _fit_standardization(X)
    Z = (X[:, _kept(X.shape[1], dropped)] - means) / stds
    w, b, history = _subgradient_descent(Z, y, C, tol, max_epochs)
    return SvmModel(w, float(b), float(C), means, stds, depth, dropped, X.shape[1], "svm", history)


def svm_score(model: SvmModel, feature) -> float | np.ndarray:
    vals = feature.values if hasattr(feature, "values") else np.asarray(feature, dtype=np.float64)
    scores = model.standardize(vals) @ model.weights + model.bias
    return float(scores[0]) if np.ndim(vals) == 1 else scores


def svm_predict(model: SvmModel, feature):
    s = svm_score(model, feature)
    if np.ndim(s) == 0:
        return "AD" if s >= 0 else "CN"
    return np.where(np.asarray(s) >= 0, "AD", "CN")


# ---------------------------------------------------------------------------
# logistic head


def logistic_loss_and_grad(w: np.ndarray, b: float, Z: np.ndarray, y01: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy (+ l2/2 |w|^2) and its gradient in (w, b)."""
    s = Z @ w + b
    # log(1 + e^s) - y s, written stably
    loss = np.mean(np.logaddexp(0.0, s) - y01 * s) + 0.5 * l2 * (w @ w)
    p = 0.5 * (1.0 + np.tanh(0.5 * s))
    r = (p - y01) / Z.shape[0]
    return float(loss), Z.T @ r + l2 * w, float(r.sum())


def head_train(features, labels, lr: float = 0.5, epochs: int = 500, l2: float = 1e-2) -> SvmModel:
    """Linear logistic head trained by deterministic full-batch gradient descent."""
    X, depth = _as_matrix(features)
    y = _as_signs(labels)
    means, stds, dropped = _fit_standardization(X)
    Z = (X[:, _kept(X.shape[1], dropped)] - means) / stds
    y01 = (y > 0).astype(np.float64)
    w = np.zeros(Z.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        loss, gw, gb = logistic_loss_and_grad(w, b, Z, y01, l2)
        history.append(loss)
        w = w - lr * gw
        b = b - lr * gb
    return SvmModel(w, float(b), 0.0, means, stds, depth, dropped, X.shape[1], "head", history)
