"""Sparse conductance graphs restricted to a vertex mask."""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix, diags
from scipy.sparse.csgraph import connected_components

from .cluster import open_bond_graph
from .env import Environment
from .errors import ShapeError


class DomainGraph:
    """Open bonds of ``env`` with both endpoints in ``mask``, locally indexed.

    Parameters
    ----------
    env : Environment
    mask : ndarray of bool, shape env.box.sides
    weighted : bool
        Conductances as edge weights (True) or unit weights on open bonds.

    Attributes
    ----------
    verts : ndarray of int64
        Row-major indices of the mask vertices, increasing.
    W : scipy.sparse.csr_matrix
        Symmetric weighted adjacency on local indices.
    degree : ndarray
        Row sums of ``W``.
    """

    def __init__(self, env: Environment, mask: np.ndarray, weighted: bool = True):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != env.box.sides:
            raise ShapeError(f"mask shape {mask.shape} != box shape {env.box.sides}")
        self.env = env
        self.mask = mask
        self.verts = np.flatnonzero(mask.ravel())
        self.n = int(self.verts.size)
        full = open_bond_graph(env, mask, weighted=weighted).tocsr()
        self.W = csr_matrix(full[self.verts][:, self.verts])
        self.W.sum_duplicates()
        self.degree = np.asarray(self.W.sum(axis=1)).ravel()
        self._components = None

    def local(self, field: np.ndarray) -> np.ndarray:
        """Values of a full-box field on the mask vertices."""
        field = np.asarray(field)
        if field.shape != self.mask.shape:
            raise ShapeError(f"field shape {field.shape} != box shape {self.mask.shape}")
        return field.ravel()[self.verts]

    def field(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter local values back into a full-box array."""
        out = np.full(self.mask.size, fill, dtype=np.result_type(values, np.float64))
        out[self.verts] = values
        return out.reshape(self.mask.shape)

    def laplacian(self) -> csr_matrix:
        """``D - W``, the matrix of ``-div a grad`` with free boundary."""
        return csr_matrix(diags(self.degree) - self.W)

    def components(self) -> np.ndarray:
        """Component index of every local vertex (singletons included)."""
        if self._components is None:
            _, comp = connected_components(self.W, directed=False)
            self._components = comp
        return self._components

    def positions(self) -> np.ndarray:
        """Local index of each box vertex, -1 off the mask."""
        pos = np.full(self.mask.size, -1, dtype=np.int64)
        pos[self.verts] = np.arange(self.n)
        return pos.reshape(self.mask.shape)
