"""Vertex-centered finite-volume discretization on polyhedral meshes.

Builds, per cell, the matrix of transmissibilities ``T_K`` relating the cell
unknown to its surrounding node (and fracture-face) unknowns, such that the
two-point-like flux

    F(K, nu) = sum_nu' T_K[nu, nu'] * (u_K - u_nu')

reproduces a continuous P1 finite-element flux.  The construction
tetrahedrizes each cell around its center and each face center, assembles P1
stiffness with the cell permeability, and eliminates the face-center values
of non-fracture faces by interpolating them from the face nodes with the
mesh's barycentric face weights.  Faces flagged as fractures keep their own
unknown; each such face additionally carries a tangential (width-integrated)
transmissibility matrix over its nodes from a P1 triangulation around the
face center.

Every matrix is built twice: once with the physical permeability (pressure
fluxes) and once with unit conductivity (a geometry-only twin that heat
conduction rescales by an effective thermal conductivity each time step
without re-tetrahedrizing).

The module also distributes porous and rock volumes from cells and fracture
faces onto their nodes, which turns the nodal unknowns into genuine control
volumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import _FACES_BY_SIZE, DfmMesh

__all__ = [
    "VagDiscretization",
    "CellGroup",
    "FractureGroup",
    "VolumeDistribution",
    "distribute_volumes",
    "effective_thermal_conductivity",
]


@dataclass(frozen=True)
class CellGroup:
    """Cells sharing a local dof layout, with stacked local matrices.

    ``sites[i, j]`` is the global site id (node id, or ``n_nodes + f`` for
    fracture face ``f``) of local column ``j`` of cell ``cells[i]``;
    ``trans[i]`` is its transmissibility matrix with the physical
    permeability, ``trans_unit[i]`` the unit-conductivity twin.
    """

    cells: np.ndarray       # (nc,)
    sites: np.ndarray       # (nc, m)
    trans: np.ndarray       # (nc, m, m)
    trans_unit: np.ndarray  # (nc, m, m)


@dataclass(frozen=True)
class FractureGroup:
    """Fracture faces with the same node count, with stacked matrices.

    ``trans`` includes fracture permeability and width; ``trans_unit`` is the
    pure in-plane geometry integral (scale by conductivity x width to get a
    heat-conduction matrix).
    """

    faces: np.ndarray       # (nf,) fracture ordinals (0-based)
    face_sites: np.ndarray  # (nf,) global site id of each face
    sites: np.ndarray       # (nf, m) node site ids
    trans: np.ndarray       # (nf, m, m)
    trans_unit: np.ndarray  # (nf, m, m)


def _p1_gradients(verts):
    """P1 basis gradients and volumes for stacked tetrahedra.

    ``verts``: (n, 4, 3).  Returns ``grads`` (n, 4, 3) and ``vol`` (n,).
    Gradients come from inverting the 3x3 edge matrix, so constants and
    affine fields are reproduced exactly.
    """
    edges = verts[:, 1:, :] - verts[:, :1, :]          # rows: v_i - v_0
    det = np.linalg.det(edges)
    vol = np.abs(det) / 6.0
    inv = np.linalg.inv(edges)
    grads = np.empty(verts.shape)
    grads[:, 1:, :] = np.swapaxes(inv, -1, -2)
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads, vol


def _tri_gradients(verts):
    """In-plane P1 gradients and areas for stacked triangles in 3D.

    ``verts``: (n, 3, 3).  Returns ``grads`` (n, 3, 3) and ``area`` (n,).
    """
    e1 = verts[:, 1, :] - verts[:, 0, :]
    e2 = verts[:, 2, :] - verts[:, 0, :]
    normal = np.cross(e1, e2)
    twice_area = np.linalg.norm(normal, axis=1)
    nhat = normal / twice_area[:, None]
    grads = np.empty(verts.shape)
    # gradient of the hat at vertex i: rotate the opposite edge into the plane
    grads[:, 0, :] = np.cross(nhat, verts[:, 2, :] - verts[:, 1, :])
    grads[:, 1, :] = np.cross(nhat, verts[:, 0, :] - verts[:, 2, :])
    grads[:, 2, :] = np.cross(nhat, verts[:, 1, :] - verts[:, 0, :])
    grads /= twice_area[:, None, None]
    return grads, 0.5 * twice_area


class VagDiscretization:
    """Transmissibilities and site numbering for one mesh.

    Sites (the non-cell unknowns) are numbered nodes first, fracture faces
    after: site ``s`` for node ``s``, site ``n_nodes + j`` for the ``j``-th
    fracture face.  Cell unknowns live in their own arrays.

    Parameters
    ----------
    mesh : DfmMesh
    perm_cells : (n_cells,) scalars or (n_cells, 3, 3) tensors [m^2]
    perm_fracture : (n_fracture_faces,) scalar tangential permeability [m^2]
    """

    def __init__(self, mesh: DfmMesh, perm_cells, perm_fracture=()):
        self.mesh = mesh
        self.n_nodes = mesh.n_nodes
        self.n_fracture = mesh.n_fracture_faces
        self.n_sites = self.n_nodes + self.n_fracture
        self.site_coords = (
            np.vstack([mesh.nodes, mesh.face_centers[mesh.fracture_faces]])
            if self.n_fracture
            else mesh.nodes.copy()
        )

        perm_cells = np.asarray(perm_cells, dtype=float)
        if perm_cells.ndim == 1:
            perm_cells = perm_cells[:, None, None] * np.eye(3)
        if perm_cells.shape != (mesh.n_cells, 3, 3):
            raise ValueError("perm_cells must be (n_cells,) or (n_cells, 3, 3)")
        perm_fracture = np.asarray(perm_fracture, dtype=float).reshape(-1)
        if len(perm_fracture) != self.n_fracture:
            raise ValueError("perm_fracture must have one scalar per fracture face")

        self._frac_ordinal = {
            int(f): j for j, f in enumerate(mesh.fracture_faces)
        }
        self.cell_groups = self._build_cell_groups(perm_cells)
        self.fracture_groups = self._build_fracture_groups(perm_fracture)

    # ------------------------------------------------------------------

    def _build_cell_groups(self, perm_cells):
        mesh = self.mesh
        # group cells by (node count, local fracture pattern)
        buckets: dict[tuple, list[int]] = {}
        for k in range(mesh.n_cells):
            pattern = tuple(
                i for i, f in enumerate(mesh.cell_faces[k])
                if int(f) in self._frac_ordinal
            )
            buckets.setdefault((len(mesh.cell_nodes[k]), pattern), []).append(k)

        groups = []
        for (n_cell_nodes, pattern), cell_list in sorted(buckets.items()):
            cells = np.asarray(cell_list, dtype=np.int64)
            cn = np.stack([mesh.cell_nodes[k] for k in cell_list])
            cf = np.stack([mesh.cell_faces[k] for k in cell_list])
            # local faces in cell-type order: position i of cell_faces is the
            # i-th template face for every cell of this node count
            local_loops = [list(loop) for loop in _FACES_BY_SIZE[n_cell_nodes]]

            # sub-tet slot table: (cell, face f, edge (a, b)) per tet
            n_faces = len(local_loops)
            ndof = 1 + n_cell_nodes + n_faces
            tet_face = []
            tet_slots = []
            for fi, loop in enumerate(local_loops):
                m = len(loop)
                for e in range(m):
                    a, b = loop[e], loop[(e + 1) % m]
                    tet_face.append(fi)
                    tet_slots.append((0, 1 + n_cell_nodes + fi, 1 + a, 1 + b))
            tet_face = np.asarray(tet_face)
            tet_slots = np.asarray(tet_slots)          # (T, 4)
            n_tets = len(tet_slots)

            nc = len(cells)
            verts = np.empty((nc, n_tets, 4, 3))
            verts[:, :, 0, :] = mesh.cell_centers[cells][:, None, :]
            verts[:, :, 1, :] = mesh.face_centers[cf[:, tet_face]]
            node_a = cn[:, tet_slots[:, 2] - 1]
            node_b = cn[:, tet_slots[:, 3] - 1]
            verts[:, :, 2, :] = mesh.nodes[node_a]
            verts[:, :, 3, :] = mesh.nodes[node_b]

            flat = verts.reshape(-1, 4, 3)
            grads, vol = _p1_gradients(flat)
            grads = grads.reshape(nc, n_tets, 4, 3)
            vol = vol.reshape(nc, n_tets)
            lam = perm_cells[cells]                    # (nc, 3, 3)
            kg = np.einsum("nab,ntib->ntia", lam, grads)
            s_perm = np.einsum("ntia,ntja->ntij", kg, grads) * vol[..., None, None]
            s_unit = np.einsum("ntia,ntja->ntij", grads, grads) * vol[..., None, None]

            full = np.zeros((nc, ndof, ndof))
            full_unit = np.zeros((nc, ndof, ndof))
            for t in range(n_tets):
                sl = tet_slots[t]
                for i in range(4):
                    for j in range(4):
                        full[:, sl[i], sl[j]] += s_perm[:, t, i, j]
                        full_unit[:, sl[i], sl[j]] += s_unit[:, t, i, j]

            # interpolate away the centers of non-fracture faces
            kept_faces = list(pattern)
            n_kept = len(kept_faces)
            cond = np.zeros((ndof, 1 + n_cell_nodes + n_kept))
            for d in range(1 + n_cell_nodes):
                cond[d, d] = 1.0
            for pos, fi in enumerate(kept_faces):
                cond[1 + n_cell_nodes + fi, 1 + n_cell_nodes + pos] = 1.0
            for fi, loop in enumerate(local_loops):
                if fi in pattern:
                    continue
                w = 1.0 / len(loop)
                for a in loop:
                    cond[1 + n_cell_nodes + fi, 1 + a] += w
            local = np.einsum("ri,nrc,cj->nij", cond, full, cond)
            local_unit = np.einsum("ri,nrc,cj->nij", cond, full_unit, cond)

            sites = np.empty((nc, n_cell_nodes + n_kept), dtype=np.int64)
            sites[:, :n_cell_nodes] = cn
            for pos, fi in enumerate(kept_faces):
                for row, k in enumerate(cell_list):
                    f = int(mesh.cell_faces[k][fi])
                    sites[row, n_cell_nodes + pos] = (
                        self.n_nodes + self._frac_ordinal[f]
                    )
            groups.append(CellGroup(
                cells=cells,
                sites=sites,
                trans=local[:, 1:, 1:],
                trans_unit=local_unit[:, 1:, 1:],
            ))
        return groups

    def _build_fracture_groups(self, perm_fracture):
        mesh = self.mesh
        buckets: dict[int, list[int]] = {}
        for j, f in enumerate(mesh.fracture_faces):
            buckets.setdefault(len(mesh.faces[f]), []).append(j)
        groups = []
        for m, ordinals in sorted(buckets.items()):
            ordinals = np.asarray(ordinals, dtype=np.int64)
            faces = mesh.fracture_faces[ordinals]
            loops = np.stack([mesh.faces[f] for f in faces])   # (nf, m)
            nf = len(faces)
            ndof = 1 + m
            verts = np.empty((nf, m, 3, 3))
            verts[:, :, 0, :] = mesh.face_centers[faces][:, None, :]
            nxt = np.roll(np.arange(m), -1)
            verts[:, :, 1, :] = mesh.nodes[loops]
            verts[:, :, 2, :] = mesh.nodes[loops[:, nxt]]
            grads, area = _tri_gradients(verts.reshape(-1, 3, 3))
            grads = grads.reshape(nf, m, 3, 3)
            area = area.reshape(nf, m)
            s_unit = np.einsum("ntia,ntja->ntij", grads, grads) * area[..., None, None]
            cond = (perm_fracture[ordinals] * mesh.fracture_width[ordinals])
            full_unit = np.zeros((nf, ndof, ndof))
            for t in range(m):
                slots = (0, 1 + t, 1 + (t + 1) % m)
                for i in range(3):
                    for j in range(3):
                        full_unit[:, slots[i], slots[j]] += s_unit[:, t, i, j]
            groups.append(FractureGroup(
                faces=ordinals,
                face_sites=self.n_nodes + ordinals,
                sites=loops,
                trans=full_unit[:, 1:, 1:] * cond[:, None, None],
                trans_unit=full_unit[:, 1:, 1:],
            ))
        return groups

    # ------------------------------------------------------------------
    # dense views and flux evaluation (small meshes / tests)
    # ------------------------------------------------------------------

    def cell_matrix(self, k: int, unit=False):
        """(sites, T) of cell ``k`` (m site ids and the m x m matrix)."""
        for g in self.cell_groups:
            hit = np.nonzero(g.cells == k)[0]
            if len(hit):
                i = hit[0]
                return g.sites[i], (g.trans_unit if unit else g.trans)[i]
        raise KeyError(f"cell {k} not in any group")

    def fracture_matrix(self, ordinal: int, unit=False):
        """(node site ids, T) of fracture face ordinal ``ordinal``."""
        for g in self.fracture_groups:
            hit = np.nonzero(g.faces == ordinal)[0]
            if len(hit):
                i = hit[0]
                return g.sites[i], (g.trans_unit if unit else g.trans)[i]
        raise KeyError(f"fracture face {ordinal} not in any group")

    def cell_fluxes(self, k: int, u_cell: float, u_sites, unit=False):
        """F(K, nu) = sum_nu' T[nu, nu'] (u_K - u_nu') for one cell."""
        sites, t = self.cell_matrix(k, unit=unit)
        return t @ (u_cell - np.asarray(u_sites)[sites])

    def fracture_fluxes(self, ordinal: int, u_sites, unit=False):
        """F(sigma, s) for one fracture face; the face value plays the
        cell role."""
        sites, t = self.fracture_matrix(ordinal, unit=unit)
        u = np.asarray(u_sites)
        u_face = u[self.n_nodes + ordinal]
        return t @ (u_face - u[sites])


def effective_thermal_conductivity(lambda_rock, porosity, s_liquid, s_gas,
                                   lambda_liquid=None, lambda_gas=None):
    """Saturation-weighted thermal conductivity of the fluid-filled medium.

    ``(1 - phi) * lambda_rock + phi * (s_l * lambda_l + s_g * lambda_g)``;
    both phase conductivities default to the rock value, which collapses the
    whole expression to ``lambda_rock``.
    """
    if lambda_liquid is None:
        lambda_liquid = lambda_rock
    if lambda_gas is None:
        lambda_gas = lambda_rock
    lambda_rock = np.asarray(lambda_rock, dtype=float)
    porosity = np.asarray(porosity, dtype=float)
    return (1.0 - porosity) * lambda_rock + porosity * (
        np.asarray(s_liquid) * lambda_liquid + np.asarray(s_gas) * lambda_gas
    )


@dataclass(frozen=True)
class VolumeDistribution:
    """Porous and rock volumes per control volume.

    ``*_nodes`` are per mesh node, ``*_fracture`` per fracture face ordinal,
    ``*_cells`` per cell.  ``pore_sites`` / ``rock_sites`` stack nodes and
    fracture faces in site order.
    """

    pore_nodes: np.ndarray
    pore_fracture: np.ndarray
    pore_cells: np.ndarray
    rock_nodes: np.ndarray
    rock_fracture: np.ndarray
    rock_cells: np.ndarray

    @property
    def pore_sites(self):
        return np.concatenate([self.pore_nodes, self.pore_fracture])

    @property
    def rock_sites(self):
        return np.concatenate([self.rock_nodes, self.rock_fracture])


def distribute_volumes(mesh: DfmMesh, porosity_cells, porosity_fracture=(),
                       dirichlet_nodes=(), omega_matrix=0.05,
                       omega_fracture=0.05) -> VolumeDistribution:
    """Split integrated porous (and rock) volume between cells, fracture
    faces, and their nodes.

    Each cell hands the fraction ``omega_matrix`` of its porous volume to
    every eligible node and keeps the rest; eligible means not a Dirichlet
    node and not lying on a fracture.  Fracture faces do the same with
    ``omega_fracture`` toward their non-Dirichlet nodes, and are the sole
    providers for nodes on fractures.  Dirichlet nodes receive nothing (the
    donor keeps the share).  Rock complements ``(1 - porosity) * volume``
    are distributed with the same fractions.
    """
    porosity_cells = np.broadcast_to(
        np.asarray(porosity_cells, dtype=float), (mesh.n_cells,)
    )
    porosity_fracture = np.broadcast_to(
        np.asarray(porosity_fracture, dtype=float), (mesh.n_fracture_faces,)
    )
    if np.any(porosity_cells <= 0) or np.any(porosity_cells >= 1):
        raise ValueError("cell porosity must lie in (0, 1)")
    if mesh.n_fracture_faces and (
        np.any(porosity_fracture <= 0) or np.any(porosity_fracture >= 1)
    ):
        raise ValueError("fracture porosity must lie in (0, 1)")

    is_dirichlet = np.zeros(mesh.n_nodes, dtype=bool)
    is_dirichlet[np.asarray(list(dirichlet_nodes), dtype=np.int64)] = True
    is_fracture_node = np.zeros(mesh.n_nodes, dtype=bool)
    is_fracture_node[mesh.fracture_nodes] = True

    pore_nodes = np.zeros(mesh.n_nodes)
    rock_nodes = np.zeros(mesh.n_nodes)
    pore_cells = np.empty(mesh.n_cells)
    rock_cells = np.empty(mesh.n_cells)
    for k in range(mesh.n_cells):
        pv = porosity_cells[k] * mesh.cell_volumes[k]
        rv = (1.0 - porosity_cells[k]) * mesh.cell_volumes[k]
        cn = mesh.cell_nodes[k]
        eligible = cn[~is_dirichlet[cn] & ~is_fracture_node[cn]]
        np.add.at(pore_nodes, eligible, omega_matrix * pv)
        np.add.at(rock_nodes, eligible, omega_matrix * rv)
        keep = 1.0 - omega_matrix * len(eligible)
        pore_cells[k] = keep * pv
        rock_cells[k] = keep * rv

    pore_fracture = np.zeros(mesh.n_fracture_faces)
    rock_fracture = np.zeros(mesh.n_fracture_faces)
    for j, f in enumerate(mesh.fracture_faces):
        volume = mesh.fracture_width[j] * mesh.face_areas[f]
        pv = porosity_fracture[j] * volume
        rv = (1.0 - porosity_fracture[j]) * volume
        loop = mesh.faces[f]
        eligible = loop[~is_dirichlet[loop]]
        np.add.at(pore_nodes, eligible, omega_fracture * pv)
        np.add.at(rock_nodes, eligible, omega_fracture * rv)
        keep = 1.0 - omega_fracture * len(eligible)
        pore_fracture[j] = keep * pv
        rock_fracture[j] = keep * rv

    if np.any(pore_cells <= 0) or (
        mesh.n_fracture_faces and np.any(pore_fracture <= 0)
    ):
        raise ValueError(
            "volume distribution weights leave a cell or fracture face "
            "with non-positive porous volume; reduce the node fractions"
        )
    return VolumeDistribution(
        pore_nodes=pore_nodes,
        pore_fracture=pore_fracture,
        pore_cells=pore_cells,
        rock_nodes=rock_nodes,
        rock_fracture=rock_fracture,
        rock_cells=rock_cells,
    )
