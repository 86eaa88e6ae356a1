"""Reversible conditioning between physical streamfunction samples and
normalized training tensors: y = arcsinh(theta*x)/theta squashes the heavy
tails, then a global min-max map sends the dataset to [0, 1].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import ScalarField, VectorField


class EmptyDataset(ValueError):
    pass


class DegenerateRange(ValueError):
    """All transformed values identical; the min-max map is undefined."""


@dataclass(frozen=True)
class TransformSpec:
    theta: float = 2e5
    lo: float = 0.0
    hi: float = 1.0
    clip: float = 3.0

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not self.hi > self.lo:
            raise DegenerateRange(f"hi={self.hi} must exceed lo={self.lo}")
        if self.clip <= 0:
            raise ValueError("clip must be positive")

    def digest(self) -> str:
        text = f"{self.theta:.17g}|{self.lo:.17g}|{self.hi:.17g}|{self.clip:.17g}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class ClampStats:
    clamped: int = 0
    total: int = 0

    @property
    def fraction(self) -> float:
        return self.clamped / self.total if self.total else 0.0


def fit(values: np.ndarray, theta: float = 2e5, clip: float = 3.0) -> TransformSpec:
    """Fit lo/hi as the global extrema of arcsinh(theta*x)/theta over every
    sample and pixel."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyDataset("cannot fit a transform to an empty dataset")
    squashed = np.arcsinh(theta * values) / theta
    lo, hi = float(squashed.min()), float(squashed.max())
    if not hi > lo:
        raise DegenerateRange("dataset has no spread after the arcsinh squash")
    return TransformSpec(theta=theta, lo=lo, hi=hi, clip=clip)


def forward_values(
    values: np.ndarray, spec: TransformSpec, stats: ClampStats | None = None
) -> np.ndarray:
    """Physical values -> [0, 1]; out-of-range inputs clamp (counted)."""
    squashed = np.arcsinh(spec.theta * np.asarray(values, dtype=float)) / spec.theta
    scaled = (squashed - spec.lo) / (spec.hi - spec.lo)
    if stats is not None:
        stats.clamped += int((scaled < 0.0).sum() + (scaled > 1.0).sum())
        stats.total += scaled.size
    return np.clip(scaled, 0.0, 1.0)


def inverse_values(values: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """[0, 1] -> physical values; inputs are clamped to [0, 1] first because
    sinh explodes outside the fitted range."""
    t = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.sinh(spec.theta * (t * (spec.hi - spec.lo) + spec.lo)) / spec.theta


def forward(
    sample: ScalarField, spec: TransformSpec, stats: ClampStats | None = None
) -> ScalarField:
    return ScalarField(sample.grid, forward_values(sample.values, spec, stats))


def inverse(t: ScalarField, spec: TransformSpec) -> ScalarField:
    return ScalarField(t.grid, inverse_values(t.values, spec))


def clip_perturbation(w: VectorField, spec: TransformSpec) -> tuple[VectorField, float]:
    """Componentwise clamp of a velocity perturbation to [-clip, clip];
    returns the clipped field and the fraction of components clipped."""
    cap = spec.clip
    clipped = VectorField(
        ScalarField(w.grid, np.clip(w.u.values, -cap, cap)),
        ScalarField(w.grid, np.clip(w.v.values, -cap, cap)),
    )
    n_out = int((np.abs(w.u.values) > cap).sum() + (np.abs(w.v.values) > cap).sum())
    return clipped, n_out / (2 * w.grid.size)


def save_spec(path: str | Path, spec: TransformSpec) -> None:
    from .fileio import write_kv

    write_kv(
        path,
        {"theta": spec.theta, "lo": spec.lo, "hi": spec.hi, "clip": spec.clip,
         "digest": spec.digest()},
    )


def load_spec(path: str | Path) -> TransformSpec:
    from .fileio import read_kv

    kv = read_kv(path)
    spec = TransformSpec(
        theta=float(kv["theta"]), lo=float(kv["lo"]), hi=float(kv["hi"]),
        clip=float(kv["clip"]),
    )
    if "digest" in kv and kv["digest"] != spec.digest():
        raise ValueError(f"transform spec digest mismatch in {path}")
    return spec


class ArcsinhMinMaxScaler(TransformerMixin, BaseEstimator):
    """Sklearn-style wrapper around the arcsinh + global min-max conditioning.

    Works on (n_samples, n_features) arrays of flattened fields.  The fitted
    state is exposed as `spec_` for the rest of the pipeline; `n_clamped_`
    counts out-of-range values seen by transform() since fitting.
    """

    def __init__(self, theta: float = 2e5, clip: float = 3.0):
        self.theta = theta
        self.clip = clip

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=False, allow_nd=True)
        self.spec_ = fit(X, theta=self.theta, clip=self.clip)
        self.n_clamped_ = 0
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        stats = ClampStats()
        out = forward_values(X, self.spec_, stats)
        self.n_clamped_ += stats.clamped
        return out

    def inverse_transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        return inverse_values(X, self.spec_)
