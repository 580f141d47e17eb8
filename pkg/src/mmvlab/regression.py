"""Least-squares conditional expectations on a total-degree polynomial basis."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import RegressionIllConditioned

COND_CAP = 1e8
FD_REL_STEP = 1e-4


def exponents(dim: int, degree: int) -> np.ndarray:
    """All monomial exponent vectors of total degree <= ``degree``, constant first."""
    rows = [np.zeros(dim, dtype=int)]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), d):
            e = np.zeros(dim, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), dim)


@dataclass(frozen=True, eq=False)
class PolyBasis:
    """Monomials in standardised coordinates ``(x - center) / scale``.

    Coordinates with (near) zero spread are dropped; with none left the basis
    is the constant alone.
    """

    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    powers: np.ndarray

    @classmethod
    def for_sample(cls, X: np.ndarray, degree: int) -> "PolyBasis":
        X = np.asarray(X, dtype=float).reshape(X.shape[0], -1)
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        ref = np.maximum(np.abs(center), 1.0)
        active = np.flatnonzero(scale > 1e-12 * ref)
        return cls(center, np.where(scale > 0, scale, 1.0), active, exponents(active.size, degree))

    @property
    def size(self) -> int:
        return self.powers.shape[0]

    def design(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(X.shape[0], -1)
        z = (X[:, self.active] - self.center[self.active]) / self.scale[self.active]
        out = np.ones((X.shape[0], self.size))
        if self.active.size == 0:
            return out
        deg = int(self.powers.max())
        pw = [np.ones_like(z)]
        for _ in range(deg):
            pw.append(pw[-1] * z)
        for j, e in enumerate(self.powers[1:], start=1):
            col = out[:, j]
            for i, p in enumerate(e):
                if p:
                    col *= pw[p][:, i]
        return out


@dataclass(frozen=True, eq=False)
class Fit:
    """Fitted regression surface with diagnostics.

    ``r2`` is the in-sample coefficient of determination; ``cond`` the
    condition number of the design matrix; ``sigma2`` the residual variance.
    """

    basis: PolyBasis
    coef: np.ndarray
    r2: float
    cond: float
    sigma2: float
    gram_inv: np.ndarray
    n_obs: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.basis.design(X) @ self.coef

    def se(self, X: np.ndarray) -> np.ndarray:
        """Standard error of the fitted conditional mean at ``X``."""
        Phi = self.basis.design(X)
        return np.sqrt(np.maximum(np.einsum("pi,ij,pj->p", Phi, self.gram_inv, Phi), 0.0) * self.sigma2)

    def gradient(self, X: np.ndarray, transform=None) -> np.ndarray:
        """Central finite differences of ``transform(predict(X))`` in every coordinate."""
        X = np.asarray(X, dtype=float).reshape(X.shape[0], -1)
        f = (lambda v: v) if transform is None else transform
        out = np.zeros_like(X)
        for i in self.basis.active:
            eps = FD_REL_STEP * self.basis.scale[i]
            up, dn = X.copy(), X.copy()
            up[:, i] += eps
            dn[:, i] -= eps
            out[:, i] = (f(self.predict(up)) - f(self.predict(dn))) / (2 * eps)
        return out


def fit(X: np.ndarray, y: np.ndarray, degree: int, *, basis: PolyBasis = None, cond_cap: float = COND_CAP) -> Fit:
    """Least-squares fit of ``y`` on the polynomial basis in ``X``."""
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    basis = basis or PolyBasis.for_sample(X, degree)
    Phi = basis.design(X)
    u, sv, vt = np.linalg.svd(Phi, full_matrices=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    if cond > cond_cap:
        raise RegressionIllConditioned(f"design condition number {cond:.3g} exceeds cap {cond_cap:.3g}")
    coef = vt.T @ ((u.T @ y) / sv)
    resid = y - Phi @ coef
    dof = max(len(y) - Phi.shape[1], 1)
    sigma2 = float(resid @ resid / dof)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    gram_inv = (vt.T / sv**2) @ vt
    return Fit(basis, coef, r2, cond, sigma2, gram_inv, len(y))
