"""Polyhedral meshes with fracture faces, boundary tags and well trees.

The mesh is the geometric half of the discretization: cells, faces, edges,
nodes, the subset of faces representing fractures (with a width per face),
tagged node sets for boundary conditions, and rooted well trees living on
mesh edges.  Everything is validated and frozen at construction time; all
downstream modules treat a mesh as immutable.

Cells are given by node lists; faces and edges are derived from the cell
type (8 nodes = hexahedron, 4 nodes = tetrahedron) and deduplicated by node
set, so a face shared by two cells exists once.  Face centers are
barycentric combinations of the face nodes with non-negative weights
summing to one (equal weights by default); cell centers are node
barycenters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DfmMesh",
    "WellGeometry",
    "MeshFormatError",
    "MeshValidationError",
    "WellTreeError",
    "build_cartesian_mesh",
    "load_dfm_mesh",
    "write_dfm_mesh",
    "build_well",
]


class MeshValidationError(ValueError):
    """Geometry or topology violates a mesh invariant."""


class MeshFormatError(ValueError):
    """Malformed mesh file."""


class WellTreeError(ValueError):
    """Well edges do not form a single rooted tree on mesh edges."""


# local face node orderings per cell type (by node count)
_HEX_FACES = ((0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
              (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))
_TET_FACES = ((0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2))
_FACES_BY_SIZE = {8: _HEX_FACES, 4: _TET_FACES}


@dataclass(frozen=True)
class WellGeometry:
    """Rooted tree of mesh edges describing one multi-branch well.

    Nodes are stored in topological order (root first); ``parent[i]`` is the
    position (in ``nodes``) of the parent of ``nodes[i]``, or -1 for the
    root.  The orientation follows the drilling direction: edges point away
    from the root.
    """

    name: str
    radius: float
    nodes: np.ndarray          # mesh node ids, root first, topological order
    parent: np.ndarray         # index into `nodes`, -1 at the root
    depth: np.ndarray          # z coordinate per well node (m)

    @property
    def root(self) -> int:
        return int(self.nodes[0])

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edges(self):
        """(parent mesh node, child mesh node) pairs in topological order."""
        return [
            (int(self.nodes[self.parent[i]]), int(self.nodes[i]))
            for i in range(1, len(self.nodes))
        ]

    def children(self):
        """Per-position list of child positions."""
        kids = [[] for _ in range(len(self.nodes))]
        for i in range(1, len(self.nodes)):
            kids[self.parent[i]].append(i)
        return kids

    def path_to_root(self, position: int):
        """Positions from ``position`` up to (and including) the root."""
        path = [position]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path


class DfmMesh:
    """Validated polyhedral mesh with fracture faces and tagged node sets.

    Attributes
    ----------
    nodes : (n_nodes, 3) float array
    cell_nodes : tuple of int arrays, node ids per cell
    cell_faces : tuple of int arrays, face ids per cell
    cell_centers, cell_volumes : per-cell geometry
    faces : tuple of int arrays, node loop per face
    face_centers : (n_faces, 3), barycentric combinations of face nodes
    face_weights : tuple of float arrays, the barycentric weights per face
    face_cells : tuple of tuples, host cells per face (1 or 2 entries)
    face_areas : per-face area
    edges : (n_edges, 2) sorted node pairs
    fracture_faces : int array of face ids flagged as fractures
    fracture_width : float array aligned with ``fracture_faces`` (m)
    fracture_plane : int array aligned with ``fracture_faces``; faces of the
        same connected coplanar patch share a plane id
    fracture_nodes : int array of nodes lying on at least one fracture face
    node_groups : dict tag -> int array (boundary sets, Dirichlet sets)
    wells : tuple of WellGeometry read from file (may be empty)
    node_cells, node_fracture_faces : adjacency maps
    """

    def __init__(self, nodes, cell_node_lists, fracture=None, node_groups=None,
                 wells=(), check_convexity=False):
        self.nodes = np.array(nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshValidationError("nodes must be an (n, 3) coordinate array")
        self.cell_nodes = tuple(
            np.asarray(c, dtype=np.int64) for c in cell_node_lists
        )
        n_nodes = len(self.nodes)
        for k, cn in enumerate(self.cell_nodes):
            if len(cn) not in _FACES_BY_SIZE:
                raise MeshValidationError(
                    f"cell {k} has {len(cn)} nodes; supported: 4 (tet), 8 (hex)"
                )
            if cn.min() < 0 or cn.max() >= n_nodes:
                raise MeshValidationError(f"cell {k} references a missing node")
        self._build_topology()
        self._build_geometry()
        self._attach_fractures(fracture or [])
        self.node_groups = {
            tag: np.asarray(ids, dtype=np.int64)
            for tag, ids in (node_groups or {}).items()
        }
        for tag, ids in self.node_groups.items():
            if len(ids) and (ids.min() < 0 or ids.max() >= n_nodes):
                raise MeshValidationError(f"node group '{tag}' references a missing node")
        self.wells = tuple(wells)
        if check_convexity:
            self._warn_non_convex()
        self._freeze()

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    def _build_topology(self):
        face_index: dict[tuple, int] = {}
        faces: list[np.ndarray] = []
        face_cells: list[list[int]] = []
        cell_faces = []
        for k, cn in enumerate(self.cell_nodes):
            local = _FACES_BY_SIZE[len(cn)]
            ids = []
            for loop in local:
                glob = cn[list(loop)]
                key = tuple(sorted(glob.tolist()))
                f = face_index.get(key)
                if f is None:
                    f = len(faces)
                    face_index[key] = f
                    faces.append(np.asarray(glob, dtype=np.int64))
                    face_cells.append([])
                face_cells[f].append(k)
                ids.append(f)
            cell_faces.append(np.asarray(ids, dtype=np.int64))
        self.faces = tuple(faces)
        self.cell_faces = tuple(cell_faces)
        self.face_cells = tuple(tuple(c) for c in face_cells)
        self._face_index = face_index

        edge_set = set()
        for loop in self.faces:
            m = len(loop)
            for i in range(m):
                a, b = int(loop[i]), int(loop[(i + 1) % m])
                edge_set.add((a, b) if a < b else (b, a))
        self.edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)
        self.edge_set = frozenset(map(tuple, self.edges.tolist()))

        node_cells = [[] for _ in range(len(self.nodes))]
        for k, cn in enumerate(self.cell_nodes):
            for s in cn:
                node_cells[s].append(k)
        self.node_cells = tuple(np.asarray(c, dtype=np.int64) for c in node_cells)

    def _build_geometry(self):
        self.face_weights = tuple(
            np.full(len(loop), 1.0 / len(loop)) for loop in self.faces
        )
        self.face_centers = np.array([
            w @ self.nodes[loop] for loop, w in zip(self.faces, self.face_weights)
        ])
        self.cell_centers = np.array([
            self.nodes[cn].mean(axis=0) for cn in self.cell_nodes
        ])
        areas = np.empty(len(self.faces))
        for f, loop in enumerate(self.faces):
            xc = self.face_centers[f]
            pts = self.nodes[loop]
            nxt = np.roll(pts, -1, axis=0)
            cross = np.cross(pts - xc, nxt - xc)
            areas[f] = 0.5 * np.linalg.norm(cross, axis=1).sum()
        self.face_areas = areas
        vols = np.zeros(len(self.cell_nodes))
        for k in range(len(self.cell_nodes)):
            xk = self.cell_centers[k]
            for f in self.cell_faces[k]:
                loop = self.faces[f]
                xf = self.face_centers[f]
                pts = self.nodes[loop]
                nxt = np.roll(pts, -1, axis=0)
                # tetrahedra (cell center, face center, edge)
                vols[k] += np.abs(
                    np.cross(pts - xf, nxt - xf) @ (xk - xf)
                ).sum() / 6.0
        self.cell_volumes = vols
        if np.any(vols <= 0):
            bad = np.nonzero(vols <= 0)[0]
            raise MeshValidationError(f"degenerate cells (zero volume): {bad.tolist()}")

    def _attach_fractures(self, fracture):
        """``fracture`` is a list of (node id tuple, width)."""
        ids, widths = [], []
        for nodes_of_face, width in fracture:
            key = tuple(sorted(int(s) for s in nodes_of_face))
            if max(key, default=0) >= len(self.nodes) or min(key, default=0) < 0:
                raise MeshValidationError(
                    f"fracture face {list(nodes_of_face)} references a missing node"
                )
            f = self._face_index.get(key)
            if f is None:
                raise MeshValidationError(
                    "non-conforming fracture face (not a face of any cell): "
                    f"nodes {list(key)}"
                )
            if width <= 0:
                raise MeshValidationError(f"fracture face {f} has non-positive width")
            ids.append(f)
            widths.append(float(width))
        self.fracture_faces = np.asarray(ids, dtype=np.int64)
        self.fracture_width = np.asarray(widths, dtype=float)
        self.fracture_plane = self._group_fracture_planes()
        is_frac_node = np.zeros(len(self.nodes), dtype=bool)
        node_ff = [[] for _ in range(len(self.nodes))]
        for j, f in enumerate(self.fracture_faces):
            for s in self.faces[f]:
                is_frac_node[s] = True
                node_ff[s].append(j)
        self.fracture_nodes = np.nonzero(is_frac_node)[0].astype(np.int64)
        self.node_fracture_faces = tuple(
            np.asarray(x, dtype=np.int64) for x in node_ff
        )

    def _group_fracture_planes(self):
        """Connected coplanar patches of fracture faces share a plane id."""
        n = len(self.fracture_faces)
        plane = -np.ones(n, dtype=np.int64)
        normals = []
        for j, f in enumerate(self.fracture_faces):
            loop = self.faces[f]
            pts = self.nodes[loop]
            # Newell normal
            nrm = np.cross(pts - self.face_centers[f],
                           np.roll(pts, -1, axis=0) - self.face_centers[f]).sum(axis=0)
            nrm /= np.linalg.norm(nrm)
            normals.append(nrm)
        next_plane = 0
        scale = max(1.0, float(np.abs(self.nodes).max()))
        for j in range(n):
            if plane[j] >= 0:
                continue
            plane[j] = next_plane
            xj = self.face_centers[self.fracture_faces[j]]
            for i in range(j + 1, n):
                if plane[i] >= 0:
                    continue
                parallel = abs(abs(normals[j] @ normals[i]) - 1.0) < 1e-9
                xi = self.face_centers[self.fracture_faces[i]]
                in_plane = abs(normals[j] @ (xi - xj)) < 1e-8 * scale
                if parallel and in_plane:
                    plane[i] = next_plane
            next_plane += 1
        return plane

    def _warn_non_convex(self):
        # A cell is convex exactly when its volume fills the convex hull of
        # its nodes (both are computed exactly for planar-faced cells).
        from scipy.spatial import ConvexHull, QhullError

        bad = []
        for k in range(len(self.cell_nodes)):
            pts = self.nodes[self.cell_nodes[k]]
            try:
                hull_volume = ConvexHull(pts).volume
            except QhullError:
                bad.append(k)
                continue
            if hull_volume > self.cell_volumes[k] * (1.0 + 1e-9):
                bad.append(k)
        if bad:
            warnings.warn(f"non-convex cells detected: {bad[:20]}"
                          + ("..." if len(bad) > 20 else ""), stacklevel=3)

    def _freeze(self):
        for arr in [self.nodes, self.face_centers, self.face_areas,
                    self.cell_centers, self.cell_volumes, self.edges,
                    self.fracture_faces, self.fracture_width,
                    self.fracture_plane, self.fracture_nodes]:
            arr.setflags(write=False)

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cell_nodes)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_fracture_faces(self) -> int:
        return len(self.fracture_faces)

    def group(self, tag: str) -> np.ndarray:
        try:
            return self.node_groups[tag]
        except KeyError:
            raise KeyError(
                f"unknown node group '{tag}'; defined: {sorted(self.node_groups)}"
            ) from None

    def validate_fracture_planarity(self, rel_tol=1e-8):
        """Check each fracture face is planar within ``rel_tol`` of its diameter."""
        for j, f in enumerate(self.fracture_faces):
            loop = self.faces[f]
            pts = self.nodes[loop] - self.face_centers[f]
            diam = max(np.linalg.norm(pts, axis=1).max() * 2.0, 1e-300)
            # smallest singular value = out-of-plane extent
            s = np.linalg.svd(pts, compute_uv=False)
            if s[-1] > rel_tol * diam:
                raise MeshValidationError(
                    f"fracture face {int(f)} is non-planar "
                    f"(deviation {s[-1]:.3e} over diameter {diam:.3e})"
                )


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------


def build_cartesian_mesh(nx: int, ny: int, nz: int, box) -> DfmMesh:
    """Uniform hexahedral mesh of an axis-aligned box.

    Parameters
    ----------
    nx, ny, nz : int
        Cells per direction (>= 1).
    box : ((x0,x1), (y0,y1), (z0,z1))
        Box bounds in meters.

    Boundary nodes are tagged ``xmin, xmax, ymin, ymax, zmin, zmax``.
    """
    if min(nx, ny, nz) < 1:
        raise MeshValidationError("cell counts must be >= 1")
    (x0, x1), (y0, y1), (z0, z1) = box
    if not (x1 > x0 and y1 > y0 and z1 > z0):
        raise MeshValidationError("box has zero or negative extent")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    zs = np.linspace(z0, z1, nz + 1)
    nodes = np.array([(x, y, z) for z in zs for y in ys for x in xs])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    cells = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                cells.append([
                    nid(i, j, k), nid(i + 1, j, k),
                    nid(i + 1, j + 1, k), nid(i, j + 1, k),
                    nid(i, j, k + 1), nid(i + 1, j, k + 1),
                    nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
                ])
    eps = 1e-9 * max(x1 - x0, y1 - y0, z1 - z0)
    groups = {
        "xmin": np.nonzero(np.abs(nodes[:, 0] - x0) < eps)[0],
        "xmax": np.nonzero(np.abs(nodes[:, 0] - x1) < eps)[0],
        "ymin": np.nonzero(np.abs(nodes[:, 1] - y0) < eps)[0],
        "ymax": np.nonzero(np.abs(nodes[:, 1] - y1) < eps)[0],
        "zmin": np.nonzero(np.abs(nodes[:, 2] - z0) < eps)[0],
        "zmax": np.nonzero(np.abs(nodes[:, 2] - z1) < eps)[0],
    }
    return DfmMesh(nodes, cells, node_groups=groups)


# ----------------------------------------------------------------------
# text format
# ----------------------------------------------------------------------


def _tokens(path):
    """Yield (lineno, token list) for non-empty, non-comment lines."""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_dfm_mesh(path) -> DfmMesh:
    """Load a mesh from the ``.dfm`` text format.

    Sections (whitespace separated, ``#`` starts a comment, indices 0-based)::

        NODES n            # then n lines: x y z
        CELLS m            # then m lines: n_nodes id0 id1 ...
        FRACTURE_FACES k   # then k lines: n_nodes sorted-ids... width
        DIRICHLET_NODES k tag   # then k node indices (any line layout)
        WELLS w            # then per well: "radius n_edges" + n_edges lines
                           # "parent child" in drilling order

    ``FRACTURE_FACES``, ``DIRICHLET_NODES`` (repeatable) and ``WELLS`` are
    optional.  Cells are hexahedra (8 node ids, ordered as the two opposite
    quads) or tetrahedra (4 ids).
    """
    lines = list(_tokens(path))
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(f"{path}: unexpected end of file")
        tok = lines[pos]
        pos += 1
        return tok

    def take_values(count, what):
        """Collect ``count`` whitespace tokens spanning as many lines as needed."""
        vals = []
        while len(vals) < count:
            _, tok = take()
            vals.extend(tok)
        if len(vals) != count:
            raise MeshFormatError(f"{path}: malformed {what} block")
        return vals

    nodes = None
    cells = None
    fracture = []
    groups: dict[str, list[int]] = {}
    wells_raw = []

    while pos < len(lines):
        lineno, tok = take()
        key = tok[0].upper()
        if key == "NODES":
            n = int(tok[1])
            vals = take_values(3 * n, "NODES")
            nodes = np.asarray(vals, dtype=float).reshape(n, 3)
        elif key == "CELLS":
            m = int(tok[1])
            cells = []
            for _ in range(m):
                _, t = take()
                nn = int(t[0])
                ids = [int(v) for v in t[1:]]
                while len(ids) < nn:
                    _, t = take()
                    ids.extend(int(v) for v in t)
                if len(ids) != nn:
                    raise MeshFormatError(f"{path}: malformed cell near line {lineno}")
                cells.append(ids)
        elif key == "FRACTURE_FACES":
            for _ in range(int(tok[1])):
                _, t = take()
                nn = int(t[0])
                if len(t) != nn + 2:
                    raise MeshFormatError(
                        f"{path}: fracture face line needs {nn} ids + width"
                    )
                fracture.append(([int(v) for v in t[1:-1]], float(t[-1])))
        elif key == "DIRICHLET_NODES":
            count, tag = int(tok[1]), tok[2]
            ids = [int(v) for v in take_values(count, "DIRICHLET_NODES")]
            groups.setdefault(tag, []).extend(ids)
        elif key == "WELLS":
            for _ in range(int(tok[1])):
                _, t = take()
                radius, n_edges = float(t[0]), int(t[1])
                edges = []
                for _ in range(n_edges):
                    _, te = take()
                    edges.append((int(te[0]), int(te[1])))
                wells_raw.append((radius, edges))
        else:
            raise MeshFormatError(f"{path}:{lineno}: unknown section '{tok[0]}'")

    if nodes is None or cells is None:
        raise MeshFormatError(f"{path}: NODES and CELLS sections are required")

    # duplicate coordinates are legal but suspicious
    scale = max(1.0, float(np.abs(nodes).max()))
    rounded = np.round(nodes / (1e-9 * scale)).astype(np.int64)
    uniq = len(np.unique(rounded, axis=0))
    if uniq < len(nodes):
        warnings.warn(
            f"{path}: {len(nodes) - uniq} duplicate node coordinates within tolerance"
        )

    mesh = DfmMesh(nodes, cells, fracture=fracture, node_groups=groups,
                   check_convexity=True)
    mesh.validate_fracture_planarity()
    wells = tuple(
        build_well(mesh, edges, radius, name=f"well_{i}")
        for i, (radius, edges) in enumerate(wells_raw)
    )
    return DfmMesh(nodes, cells, fracture=fracture, node_groups=groups,
                   wells=wells)


def write_dfm_mesh(mesh: DfmMesh, path) -> None:
    """Write a mesh in the ``.dfm`` text format (round-trips with the loader)."""
    with open(path, "w") as fh:
        fh.write("# dfm mesh\n")
        fh.write(f"NODES {mesh.n_nodes}\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        fh.write(f"CELLS {mesh.n_cells}\n")
        for cn in mesh.cell_nodes:
            fh.write(f"{len(cn)} " + " ".join(map(str, cn.tolist())) + "\n")
        if mesh.n_fracture_faces:
            fh.write(f"FRACTURE_FACES {mesh.n_fracture_faces}\n")
            for f, w in zip(mesh.fracture_faces, mesh.fracture_width):
                ids = sorted(mesh.faces[f].tolist())
                fh.write(f"{len(ids)} " + " ".join(map(str, ids)) + f" {float(w)!r}\n")
        for tag in sorted(mesh.node_groups):
            ids = mesh.node_groups[tag]
            fh.write(f"DIRICHLET_NODES {len(ids)} {tag}\n")
            fh.write(" ".join(map(str, ids.tolist())) + "\n")
        if mesh.wells:
            fh.write(f"WELLS {len(mesh.wells)}\n")
            for w in mesh.wells:
                edges = w.edges()
                fh.write(f"{float(w.radius)!r} {len(edges)}\n")
                for a, b in edges:
                    fh.write(f"{a} {b}\n")


# ----------------------------------------------------------------------
# wells
# ----------------------------------------------------------------------


def build_well(mesh: DfmMesh, edges, radius: float, name: str = "well") -> WellGeometry:
    """Build a rooted well tree from oriented (parent, child) node pairs.

    The pairs are given in drilling order: each edge points away from the
    root.  The root is the unique node that never appears as a child.
    """
    if radius <= 0:
        raise WellTreeError("well radius must be positive")
    if not edges:
        raise WellTreeError("well needs at least one edge")
    parent_of: dict[int, int] = {}
    nodes_seen: list[int] = []
    for a, b in edges:
        key = (a, b) if a < b else (b, a)
        if key not in mesh.edge_set:
            raise WellTreeError(f"well edge ({a}, {b}) is not a mesh edge")
        if b in parent_of:
            raise WellTreeError(f"node {b} has two parents (cycle or merged branches)")
        parent_of[b] = a
        for s in (a, b):
            if s not in nodes_seen:
                nodes_seen.append(s)
    roots = [s for s in nodes_seen if s not in parent_of]
    if len(roots) != 1:
        raise WellTreeError(
            f"well edges must form one rooted tree; found {len(roots)} roots: {roots}"
        )
    root = roots[0]
    # breadth-first order from the root; unreachable nodes mean a cycle
    children: dict[int, list[int]] = {}
    for child, par in parent_of.items():
        children.setdefault(par, []).append(child)
    order = [root]
    i = 0
    while i < len(order):
        order.extend(children.get(order[i], []))
        i += 1
    if len(order) != len(nodes_seen):
        missing = sorted(set(nodes_seen) - set(order))
        raise WellTreeError(f"cycle detected: nodes {missing} unreachable from root")
    pos = {s: i for i, s in enumerate(order)}
    parent = np.array([-1] + [pos[parent_of[s]] for s in order[1:]], dtype=np.int64)
    nodes = np.asarray(order, dtype=np.int64)
    return WellGeometry(
        name=name,
        radius=float(radius),
        nodes=nodes,
        parent=parent,
        depth=mesh.nodes[nodes, 2].copy(),
    )
