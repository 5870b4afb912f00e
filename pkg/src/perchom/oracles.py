"""Closed-form and enumeration references used to validate the numerics."""

from __future__ import annotations

import itertools
import math

import numpy as np


def kahan_sum(terms) -> float:
    """Compensated summation of an iterable of floats."""
    total = 0.0
    comp = 0.0
    for term in terms:
        y = term - comp
        s = total + y
        comp = (s - total) - y
        total = s
    return total


def scaled_bessel_i(n: int, z: float, tol: float = 1e-18) -> float:
    """``exp(-z) I_n(z)`` from the ascending power series.

    Terms follow ``c_{m+1} = c_m (z/2)^2 / ((m+1)(m+1+n))`` starting at
    ``(z/2)^n / n!`` and are added with compensated summation.
    """
    n = abs(int(n))
    h = 0.5 * z
    first = math.exp(n * math.log(h) - math.lgamma(n + 1) - z) if z > 0 else float(n == 0)
    if z == 0:
        return first

    def terms():
        c = first
        m = 0
        while True:
            yield c
            m += 1
            c *= h * h / (m * (m + n))
            if c < tol * first and m > h:
                return

    return kahan_sum(terms())


def lattice_heat_kernel(t: float, x) -> float:
    """Heat kernel of the unit-conductance walk on Z^d.

    Each coordinate is an independent rate-2 walk, so
    ``p(t, x) = prod_k exp(-2t) I_{x_k}(2t)``; for d=2 this is
    ``exp(-4t) I_{x1}(2t) I_{x2}(2t)``.
    """
    out = 1.0
    for c in x:
        out *= scaled_bessel_i(int(c), 2.0 * t)
    return out


def two_vertex_return(a: float, t: float) -> float:
    """``P[X_t = y]`` for the walk on one bond of conductance ``a``."""
    return 0.5 * (1.0 + math.exp(-2.0 * a * t))


def exhaustive_theta_3x3(p: float) -> float:
    """Exact probability that the center of a 3x3 box lies in the proxy.

    Enumerates all 2^12 bond configurations with the same conventions as
    the Monte Carlo estimator: the proxy is the largest component with at
    least one bond, ties going to the component with the smallest vertex
    in row-major order. Components are found by breadth-first search.
    """
    verts = [(i, j) for i in range(3) for j in range(3)]
    bonds = []
    for i in range(3):
        for j in range(3):
            if i + 1 < 3:
                bonds.append(((i, j), (i + 1, j)))
            if j + 1 < 3:
                bonds.append(((i, j), (i, j + 1)))
    total = 0.0
    for config in itertools.product((0, 1), repeat=len(bonds)):
        k = sum(config)
        weight = p**k * (1 - p) ** (len(bonds) - k)
        adj = {v: [] for v in verts}
        for on, (a, b) in zip(config, bonds):
            if on:
                adj[a].append(b)
                adj[b].append(a)
        seen = set()
        comps = []
        for v in verts:
            if v in seen or not adj[v]:
                continue
            queue = [v]
            seen.add(v)
            comp = []
            while queue:
                u = queue.pop()
                comp.append(u)
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        queue.append(w)
            comps.append((len(comp), min(comp), set(comp)))
        if not comps:
            continue
        best = min(comps, key=lambda c: (-c[0], c[1]))
        if (1, 1) in best[2]:
            total += weight
    return total


def bfs_labels(open_bonds, vertices):
    """Partition ``vertices`` into open-bond components by breadth-first search.

    Returns a dict vertex -> component id for vertices touching an open bond.
    """
    adj = {v: [] for v in vertices}
    for a, b in open_bonds:
        adj[a].append(b)
        adj[b].append(a)
    out = {}
    cid = 0
    for v in vertices:
        if v in out or not adj[v]:
            continue
        stack = [v]
        out[v] = cid
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in out:
                    out[w] = cid
                    stack.append(w)
        cid += 1
    return out


def dense_laplacian(n: int, edges) -> np.ndarray:
    """Dense ``D - W`` for weighted edges ``(i, j, w)``."""
    A = np.zeros((n, n))
    for i, j, w in edges:
        A[i, j] -= w
        A[j, i] -= w
        A[i, i] += w
        A[j, j] += w
    return A
