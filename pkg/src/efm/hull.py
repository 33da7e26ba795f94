"""Sampling conditions from the convex hull of a finite point set."""

import numpy as np
from scipy.spatial import Delaunay, QhullError


def _triangulate(points):
    try:
        tri = Delaunay(points)
    except (QhullError, ValueError):
        return None
    simplices = tri.simplices
    verts = points[simplices]  # (S, k+1, k)
    edges = verts[:, 1:, :] - verts[:, :1, :]
    vols = np.abs(np.linalg.det(edges))
    keep = vols > 1e-14 * max(vols.max(), 1e-300)
    return simplices[keep], vols[keep]


def hull_weights(points, n, rng):
    """Convex weights ``(n, m)`` whose images ``weights @ points`` are uniform on the hull.

    Full-dimensional hulls are triangulated and sampled simplex-by-volume
    with flat Dirichlet barycentrics.  Degenerate hulls (fewer than ``k+1``
    affinely independent points, or ``k = 1`` segments handled the same way)
    fall back to flat Dirichlet weights over all points.
    """
    points = np.asarray(points, dtype=float)
    m, k = points.shape
    if m == 1:
        return np.ones((n, 1))
    if k == 1:
        lo, hi = np.argmin(points[:, 0]), np.argmax(points[:, 0])
        u = rng.uniform(size=n)
        w = np.zeros((n, m))
        w[:, lo] += 1.0 - u
        w[:, hi] += u
        return w
    tri = _triangulate(points) if m > k else None
    if tri is None or len(tri[0]) == 0:
        return rng.dirichlet(np.ones(m), size=n)
    simplices, vols = tri
    which = rng.choice(len(simplices), size=n, p=vols / vols.sum())
    bary = rng.dirichlet(np.ones(k + 1), size=n)
    w = np.zeros((n, m))
    np.add.at(w, (np.arange(n)[:, None], simplices[which]), bary)
    return w


def uniform_hull_points(points, n, rng):
    points = np.asarray(points, dtype=float)
    return hull_weights(points, n, rng) @ points
