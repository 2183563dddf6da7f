"""Global polynomial least-squares regression for conditional expectations.

One regressor per time step: monomials of the (standardized) Markov state up
to a total degree, solved through ridge-stabilized normal equations.  All
path-axis reductions are blockwise and order-fixed, so results do not depend
on the worker count.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from ._parallel import map_blocks
from .errors import DegenerateBasisError

_STD_FLOOR = 1e-12


def _multi_indices(state_dim, degree):
    out = []
    for alpha in product(range(degree + 1), repeat=state_dim):
        if sum(alpha) <= degree:
            out.append(alpha)
    out.sort(key=lambda a: (sum(a), a))
    return out


class StepRegressor:
    """Least-squares projection onto polynomials of the state at one node."""

    def __init__(self, states, degree, ridge=1e-10, jobs=None):
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        self.mean = states.mean(axis=0)
        std = states.std(axis=0)
        self.scale = np.where(std > _STD_FLOOR, std, np.inf)  # flat columns drop out
        self.indices = _multi_indices(states.shape[1], degree)
        self.ridge = ridge
        self.jobs = jobs
        self._phi = self._basis(states)
        n, nb = self._phi.shape
        parts = map_blocks(lambda s: self._phi[s].T @ self._phi[s], n, jobs)
        gram = np.add.reduce(np.stack(parts, axis=0), axis=0)
        gram += ridge * max(n, 1) * np.eye(nb)
        self._gram = gram

    def _basis(self, states):
        z = (states - self.mean) / self.scale
        cols = []
        for alpha in self.indices:
            col = np.ones(states.shape[0])
            for dim, power in enumerate(alpha):
                if power:
                    col = col * z[:, dim] ** power
            cols.append(col)
        return np.stack(cols, axis=1)

    def fit(self, targets):
        """Return regression coefficients for one or many target columns."""
        t = np.asarray(targets, dtype=float)
        flat = t.reshape(t.shape[0], -1)
        n = flat.shape[0]
        parts = map_blocks(lambda s: self._phi[s].T @ flat[s], n, self.jobs)
        rhs = np.add.reduce(np.stack(parts, axis=0), axis=0)
        coef = np.linalg.solve(self._gram, rhs)
        if not np.all(np.isfinite(coef)):
            raise DegenerateBasisError("regression produced non-finite coefficients")
        return coef.reshape((coef.shape[0],) + t.shape[1:])

    def predict(self, coef):
        """In-sample predictions for coefficients from :meth:`fit`."""
        c = coef.reshape(coef.shape[0], -1)
        out = self._phi @ c
        return out.reshape((self._phi.shape[0],) + coef.shape[1:])

    def fit_predict(self, targets):
        return self.predict(self.fit(targets))
