"""Least-squares conditional expectations on polynomial features of the state."""

from __future__ import annotations

from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .errors import RegressionSingular

RIDGE = 1e-10


@lru_cache(maxsize=None)
def monomial_exponents(dim: int, degree: int) -> tuple:
    """Index tuples of all monomials of total degree 1..degree in ``dim`` variables."""
    out = []
    for p in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(dim), p))
    return tuple(out)


class Projection:
    """Projection onto the span of {1, monomials of x up to ``degree``}.

    Coordinates are standardized and constant ones dropped. Feature columns
    are centered so the intercept is unpenalized by the ridge term and the
    fitted values always keep the sample mean of the target.
    """

    def __init__(self, x: np.ndarray, degree: int):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        live = np.ptp(x, axis=0) > 1e-12 * (1.0 + np.abs(mean))
        self.n = n
        if degree == 0 or not live.any():
            self.features = None
            return
        z = (x[:, live] - mean[live]) / std[live]
        terms = monomial_exponents(int(live.sum()), degree)
        if n <= len(terms) + 1:
            raise RegressionSingular(f"{n} samples cannot fit {len(terms) + 1} basis functions")
        phi = np.empty((n, len(terms)))
        for c, idx in enumerate(terms):
            col = z[:, idx[0]].copy()
            for i in idx[1:]:
                col *= z[:, i]
            phi[:, c] = col
        phi -= phi.mean(axis=0)
        gram = np.einsum("ni,nj->ij", phi, phi)
        gram[np.diag_indices_from(gram)] += RIDGE * np.trace(gram) / gram.shape[0]
        if not np.isfinite(gram).all():
            raise RegressionSingular("design matrix is not finite")
        self.features = phi
        self.gram = gram

    def fit(self, y: np.ndarray) -> np.ndarray:
        """Fitted values of each column of ``y`` (shape ``(n,)`` or ``(n, r)``)."""
        y = np.asarray(y, dtype=float)
        mean = y.mean(axis=0)
        if self.features is None:
            return np.broadcast_to(mean, y.shape).copy()
        rhs = np.einsum("ni,n...->i...", self.features, y - mean)
        try:
            coef = np.linalg.solve(self.gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise RegressionSingular(str(exc)) from exc
        out = mean + np.einsum("ni,i...->n...", self.features, coef)
        if not np.isfinite(out).all():
            raise RegressionSingular("regression produced non-finite values")
        return out
