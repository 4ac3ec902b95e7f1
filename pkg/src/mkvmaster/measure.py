"""Uniform empirical measures on R^d and the quadratic Wasserstein distance."""

import csv
import io
import json

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError

__all__ = [
    "EmpiricalMeasure",
    "w2_distance",
    "coupled_distance",
    "second_moment",
    "mean",
    "std",
]


class EmpiricalMeasure:
    """Uniform mixture of N Dirac masses in R^d.

    The atoms are stored as a read-only ``(N, d)`` float array; every atom
    carries weight ``1/N``. Construction copies its input so instances can be
    shared freely.

    Parameters
    ----------
    atoms : array_like
        ``(N, d)`` array, or a 1-D array of N scalars (``d = 1``).
    """

    __slots__ = ("_atoms",)

    def __init__(self, atoms):
        arr = np.array(atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidInputError(f"atoms must be a non-empty (N, d) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("atoms must be finite")
        arr.setflags(write=False)
        self._atoms = arr

    @classmethod
    def _trusted(cls, arr):
        # internal fast path: arr is already a finite 2-D float array owned by the caller
        obj = cls.__new__(cls)
        arr = arr.view()
        arr.setflags(write=False)
        obj._atoms = arr
        return obj

    @property
    def atoms(self):
        return self._atoms

    @property
    def n(self):
        return self._atoms.shape[0]

    @property
    def dim(self):
        return self._atoms.shape[1]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, dim={self.dim})"

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return self._atoms.shape == other._atoms.shape and bool(np.array_equal(self._atoms, other._atoms))

    __hash__ = None

    def shifted(self, vector):
        """Translate every atom by ``vector``."""
        return EmpiricalMeasure(self._atoms + np.asarray(vector, dtype=float))

    def with_atom(self, index, point):
        """Copy of the measure with atom ``index`` replaced by ``point``."""
        arr = self._atoms.copy()
        arr[index] = point
        return EmpiricalMeasure._trusted(arr)

    def marginal(self, coords):
        """Image measure under projection on the coordinates ``coords``."""
        return EmpiricalMeasure._trusted(np.ascontiguousarray(self._atoms[:, coords]))

    # -- serialization -------------------------------------------------
    def to_json(self):
        return json.dumps(self._atoms.tolist())

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow([f"x{j + 1}" for j in range(self.dim)])
        for row in self._atoms:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise InvalidInputError("empty CSV")
        body = rows[1:] if any(not _is_number(c) for c in rows[0]) else rows
        return cls([[float(c) for c in row] for row in body if row])


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def _check_pair(mu, nu):
    if mu.dim != nu.dim:
        raise InvalidInputError(f"dimension mismatch: {mu.dim} != {nu.dim}")
    if mu.n != nu.n:
        raise InvalidInputError(f"unequal atom counts: {mu.n} != {nu.n} (resample first)")


def w2_distance(mu, nu):
    """Quadratic Wasserstein distance between two equal-size empirical measures.

    For uniform measures with the same number of atoms an optimal plan is a
    permutation, so the distance is an assignment problem. In one dimension
    the monotone (sorted) matching is optimal; otherwise an exact linear
    assignment is solved.
    """
    _check_pair(mu, nu)
    x, y = mu.atoms, nu.atoms
    if mu.dim == 1:
        xs = np.sort(x[:, 0], kind="stable")
        ys = np.sort(y[:, 0], kind="stable")
        cost = np.mean((xs - ys) ** 2)
    else:
        c = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        rows, cols = linear_sum_assignment(c)
        cost = c[rows, cols].sum() / mu.n
    return float(np.sqrt(max(cost, 0.0)))


def coupled_distance(mu, nu):
    """L2 distance of the index coupling ``x^i <-> y^i``.

    An upper bound for :func:`w2_distance`; exact when the atoms are already
    optimally paired (as for particle systems driven by common noise).
    """
    _check_pair(mu, nu)
    return float(np.sqrt(np.mean(((mu.atoms - nu.atoms) ** 2).sum(axis=1))))


def second_moment(mu):
    return float(np.mean((mu.atoms**2).sum(axis=1)))


def mean(mu):
    return mu.atoms.mean(axis=0)


def std(mu):
    """Root mean squared distance of the atoms to their mean."""
    centred = mu.atoms - mu.atoms.mean(axis=0)
    return float(np.sqrt(np.mean((centred**2).sum(axis=1))))
