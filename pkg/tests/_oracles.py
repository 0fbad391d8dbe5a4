"""Independent reference computations used by the test suite.

Everything here is deliberately written as a separate code path from the
package: brute-force scans, plain bisection, dense finite-element assembly,
quadrature and finite differences.  Tests compare package output against
these, never against the package itself.
"""

from __future__ import annotations

import numpy as np

# ----------------------------------------------------------------------
# saturation curve (plain formula + bisection, no package code)
# ----------------------------------------------------------------------


def saturation_pressure(t):
    """Direct evaluation of the saturation-pressure correlation (Pa)."""
    return 100.0 * np.exp(46.784 - 6435.0 / t - 3.868 * np.log(t))


def saturation_temperature_bisect(p, lo=274.0, hi=647.0, iters=200):
    """Plain bisection inverse of :func:`saturation_pressure`."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if saturation_pressure(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------
# flash oracle: fine temperature scan + enthalpy ordering
# ----------------------------------------------------------------------


def flash_oracle(eos, p, h_spec, n_scan=20001):
    """Classify the equilibrium state of a mixture at (p, specific enthalpy).

    Uses only the EOS property calls (the laws under test are shared), but an
    independent algorithm: classification by enthalpy ordering at saturation
    and a brute-force scan + bisection for single-phase temperatures.

    Returns ``(branch, T)`` with branch in {"liquid", "two-phase", "gas"}.
    """
    t_sat = saturation_temperature_bisect(p)
    h_l_sat = float(eos.h_l(p, t_sat))
    h_g_sat = float(eos.h_g(p, t_sat))
    if h_l_sat < h_spec < h_g_sat:
        return "two-phase", t_sat
    if h_spec <= h_l_sat:
        hfun = eos.h_l
        branch = "liquid"
    else:
        hfun = eos.h_g
        branch = "gas"
    grid = np.linspace(274.0, 647.0, n_scan)
    h = np.asarray(hfun(p, grid)) - h_spec
    sign = np.sign(h)
    crossings = np.nonzero(np.diff(sign) != 0)[0]
    if h[0] > 0 or h[-1] < 0:
        return branch, None  # no root in range
    lo = grid[crossings[0]]
    hi = grid[crossings[0] + 1]
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(hfun(p, mid)) - h_spec < 0:
            lo = mid
        else:
            hi = mid
    return branch, 0.5 * (lo + hi)


# ----------------------------------------------------------------------
# dense first-order FEM on tetrahedra (oracle for flux stencils)
# ----------------------------------------------------------------------


def tet_p1_stiffness(verts, perm):
    """4x4 P1 stiffness matrix of one tetrahedron via explicit basis solve.

    Basis coefficients are obtained by solving the 4x4 Vandermonde-type
    system (independent of the production gradient formulas).
    """
    verts = np.asarray(verts, dtype=float)
    a = np.hstack([np.ones((4, 1)), verts])
    coeff = np.linalg.solve(a, np.eye(4))  # columns: basis i -> (const, gx, gy, gz)
    grads = coeff[1:, :]  # (3, 4)
    vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    return vol * grads.T @ np.asarray(perm, dtype=float) @ grads


def tri_p1_stiffness_3d(verts, conductance):
    """3x3 P1 stiffness of a triangle embedded in 3D, isotropic conductance.

    Maps the triangle into its own plane, assembles 2D P1 there.
    """
    verts = np.asarray(verts, dtype=float)
    e1 = verts[1] - verts[0]
    e2 = verts[2] - verts[0]
    n = np.cross(e1, e2)
    area2 = np.linalg.norm(n)
    u = e1 / np.linalg.norm(e1)
    w = np.cross(n, u)
    w /= np.linalg.norm(w)
    pts2 = np.array([[0.0, 0.0], [e1 @ u, e1 @ w], [e2 @ u, e2 @ w]])
    a = np.hstack([np.ones((3, 1)), pts2])
    coeff = np.linalg.solve(a, np.eye(3))
    grads = coeff[1:, :]  # (2, 3)
    area = 0.5 * area2
    return conductance * area * grads.T @ grads


def fem_cell_stiffness(cell_center, face_centers, face_node_loops, node_coords,
                       perm, fracture_faces=(), face_weights=None):
    """Condensed P1 stiffness of one cell over (cell, nodes, fracture faces).

    Assembles plain P1 FEM over the sub-tetrahedra (cell center, face center,
    face edge) with every vertex an independent dof, then eliminates
    non-fracture face centers with the barycentric interpolation weights.

    Parameters
    ----------
    face_node_loops : list of arrays of *local* node indices (0..n_nodes-1).
    fracture_faces : local face indices that keep their own dof.
    face_weights : per-face arrays of interpolation weights (default uniform).

    Returns the condensed matrix over dofs ordered
    ``[cell, nodes..., fracture faces...]``.
    """
    n_nodes = len(node_coords)
    n_faces = len(face_centers)
    ndof_full = 1 + n_nodes + n_faces
    a_full = np.zeros((ndof_full, ndof_full))
    for f, loop in enumerate(face_node_loops):
        loop = np.asarray(loop)
        for k in range(len(loop)):
            s1, s2 = loop[k], loop[(k + 1) % len(loop)]
            verts = np.array([
                cell_center, face_centers[f],
                node_coords[s1], node_coords[s2],
            ])
            dofs = [0, 1 + n_nodes + f, 1 + s1, 1 + s2]
            e = tet_p1_stiffness(verts, perm)
            for i in range(4):
                for j in range(4):
                    a_full[dofs[i], dofs[j]] += e[i, j]
    # condense non-fracture face centers into node values
    keep = [0] + list(range(1, 1 + n_nodes)) + [
        1 + n_nodes + f for f in fracture_faces
    ]
    c = np.zeros((ndof_full, len(keep) ))
    col_of = {dof: j for j, dof in enumerate(keep)}
    for dof in range(1 + n_nodes):
        c[dof, col_of[dof]] = 1.0
    for f, loop in enumerate(face_node_loops):
        dof = 1 + n_nodes + f
        if f in fracture_faces:
            c[dof, col_of[dof]] = 1.0
        else:
            w = (np.full(len(loop), 1.0 / len(loop))
                 if face_weights is None else np.asarray(face_weights[f]))
            for s, ws in zip(loop, w):
                c[dof, col_of[1 + s]] += ws
    return c.T @ a_full @ c


def fem_fracture_stiffness(face_center, node_coords, conductance):
    """Condensed P1 stiffness of one fracture face over (face, nodes).

    Triangulates the polygon around its center point; every vertex keeps its
    dof (matrix over ``[face, nodes...]``).
    """
    m = len(node_coords)
    a = np.zeros((1 + m, 1 + m))
    for k in range(m):
        s1, s2 = k, (k + 1) % m
        verts = [face_center, node_coords[s1], node_coords[s2]]
        dofs = [0, 1 + s1, 1 + s2]
        e = tri_p1_stiffness_3d(verts, conductance)
        for i in range(3):
            for j in range(3):
                a[dofs[i], dofs[j]] += e[i, j]
    return a


# ----------------------------------------------------------------------
# misc
# ----------------------------------------------------------------------


def central_difference_jacobian(fun, x, h=1e-6, scale=None):
    """Dense central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        hj = h * (scale[j] if scale is not None else max(1.0, abs(x[j])))
        xp = x.copy()
        xm = x.copy()
        xp[j] += hj
        xm[j] -= hj
        jac[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * hj)
    return jac
