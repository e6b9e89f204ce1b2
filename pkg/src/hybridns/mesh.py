"""Matching triangular meshes with face topology and element geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Triangulation of a polygonal domain with full face topology.

    Faces are vertex pairs ``(a, b)`` with ``a < b``; the global face normal
    is the left-hand rotation of ``b - a`` turned clockwise, i.e.
    ``(t_y, -t_x)``.  ``element_face_signs[T, i]`` is ``+1`` when that global
    normal points out of ``T`` and ``-1`` otherwise.  Local face ``i`` of a
    triangle joins its vertices ``i`` and ``i + 1`` (mod 3).
    """

    vertices: np.ndarray            # (nv, 2)
    triangles: np.ndarray           # (ne, 3), counterclockwise
    faces: np.ndarray               # (nf, 2), sorted vertex pairs
    element_faces: np.ndarray       # (ne, 3) face ids
    element_face_signs: np.ndarray  # (ne, 3) in {-1, +1}
    face_elements: np.ndarray       # (nf, 2), second entry -1 on the boundary
    normals: np.ndarray = field(repr=False)        # (ne, 3, 2) outward unit n_TF
    face_lengths: np.ndarray = field(repr=False)   # (nf,)
    areas: np.ndarray = field(repr=False)          # (ne,)
    diameters: np.ndarray = field(repr=False)      # (ne,) h_T
    centroids: np.ndarray = field(repr=False)      # (ne, 2)
    face_distances: np.ndarray = field(repr=False)  # (ne, 3) d_TF

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_elements[:, 1] < 0)

    @property
    def is_boundary_face(self) -> np.ndarray:
        return self.face_elements[:, 1] < 0

    def element_vertices(self, t: int) -> np.ndarray:
        return self.vertices[self.triangles[t]]

    def face_vertices(self, f: int) -> np.ndarray:
        return self.vertices[self.faces[f]]

    def inradii(self) -> np.ndarray:
        perim = self.face_lengths[self.element_faces].sum(axis=1)
        return 2.0 * self.areas / perim


def from_arrays(vertices, triangles) -> Mesh:
    """Build a :class:`Mesh`, reorienting triangles counterclockwise."""
    vertices = np.asarray(vertices, dtype=float)
    tris = np.array(triangles, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (nv, 2) array")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError("triangles must be an (ne, 3) array")
    if tris.min() < 0 or tris.max() >= len(vertices):
        raise MeshError("triangle references a missing vertex")

    p = vertices[tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    flip = cross < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    areas = 0.5 * np.abs(cross)
    if np.any(areas <= 1e-14 * max(1.0, float(np.ptp(vertices)) ** 2)):
        raise MeshError("degenerate triangle with non-positive area")

    faces, element_faces, face_elements = face_topology(tris)

    p = vertices[tris]
    a = p
    b = np.roll(p, -1, axis=1)  # local face i joins vertex i and i+1
    edge = b - a
    lengths = np.hypot(edge[..., 0], edge[..., 1])
    # counterclockwise triangle: outward normal of edge (a -> b) is (t_y, -t_x)
    normals = np.stack([edge[..., 1], -edge[..., 0]], axis=-1) / lengths[..., None]

    fv = vertices[faces]
    ft = fv[:, 1] - fv[:, 0]
    face_lengths = np.hypot(ft[:, 0], ft[:, 1])
    global_normals = np.stack([ft[:, 1], -ft[:, 0]], axis=-1) / face_lengths[:, None]
    signs = np.sign(np.einsum("tid,tid->ti", normals, global_normals[element_faces])).astype(int)

    centroids = p.mean(axis=1)
    diameters = lengths.max(axis=1)
    face_distances = np.einsum("tid,tid->ti", a - centroids[:, None, :], normals)

    return Mesh(
        vertices=vertices,
        triangles=tris,
        faces=faces,
        element_faces=element_faces,
        element_face_signs=signs,
        face_elements=face_elements,
        normals=normals,
        face_lengths=face_lengths,
        areas=areas,
        diameters=diameters,
        centroids=centroids,
        face_distances=face_distances,
    )


def face_topology(triangles):
    """Deduplicated faces, element-to-face and face-to-element incidence.

    Raises :class:`MeshError` for faces shared by three or more elements.
    """
    tris = np.asarray(triangles)
    ne = len(tris)
    local = np.stack([tris, np.roll(tris, -1, axis=1)], axis=-1).reshape(-1, 2)
    local = np.sort(local, axis=1)
    faces, inverse, counts = np.unique(local, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if np.any(counts > 2):
        raise MeshError("non-manifold face shared by more than two elements")
    element_faces = inverse.reshape(ne, 3)

    face_elements = np.full((len(faces), 2), -1, dtype=np.int64)
    owner = np.repeat(np.arange(ne), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_faces = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_faces[1:] != sorted_faces[:-1]
    face_elements[sorted_faces[first], 0] = owner[order[first]]
    face_elements[sorted_faces[~first], 1] = owner[order[~first]]
    return faces, element_faces, face_elements


def build_structured_mesh(n: int, pattern: str = "diagonal") -> Mesh:
    """Uniform triangulation of the unit square with ``n`` cells per side.

    ``diagonal`` splits each cell along its lower-left to upper-right
    diagonal (``2 n^2`` triangles); ``crisscross`` adds the cell centre and
    splits into four (``4 n^2`` triangles).
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    if pattern == "diagonal":
        for j in range(n):
            for i in range(n):
                v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
    elif pattern == "crisscross":
        centres = []
        base = len(vertices)
        for j in range(n):
            for i in range(n):
                c = base + len(centres)
                centres.append(((x[i] + x[i + 1]) / 2, (x[j] + x[j + 1]) / 2))
                v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
                tris += [(v00, v10, c), (v10, v11, c), (v11, v01, c), (v01, v00, c)]
        vertices = np.vstack([vertices, np.array(centres)])
    else:
        raise MeshError(f"unknown pattern {pattern!r}")
    return from_arrays(vertices, np.array(tris))


def read_mesh(path) -> Mesh:
    """Read the plain-text ``ns-mesh 2d`` format (0-based triangle indices)."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != "ns-mesh 2d":
        raise MeshError("missing 'ns-mesh 2d' header")
    try:
        nv = int(lines[1])
        verts = np.array([[float(s) for s in ln.split()] for ln in lines[2:2 + nv]])
        nt = int(lines[2 + nv])
        tris = np.array([[int(s) for s in ln.split()] for ln in lines[3 + nv:3 + nv + nt]])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file: {exc}") from exc
    if verts.shape != (nv, 2) or tris.shape != (nt, 3):
        raise MeshError("vertex or triangle block has the wrong shape")
    return from_arrays(verts, tris)


def write_mesh(mesh: Mesh, path) -> None:
    out = ["ns-mesh 2d", str(len(mesh.vertices))]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    out.append(str(mesh.n_elements))
    out += [" ".join(str(int(i)) for i in t) for t in mesh.triangles]
    Path(path).write_text("\n".join(out) + "\n")
