"""Tetrahedral vessel meshes.

Meshes are linear tetrahedra with a triangulated boundary. Boundary
triangles carry integer labels: 0 is the vessel wall, 1 the inlet, and
2 and above are outlets. Boundary triangles are stored oriented so the
right-hand-rule normal points into the fluid.

File format is VTK legacy ASCII unstructured grids: tetrahedra first,
then boundary triangles, with a ``boundary_label`` integer cell-data
array (-1 on tetrahedra). Package metadata (for example the generated
pipe geometry) rides in the 256-character VTK title line as JSON and
survives a save/load round trip.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LabelingError, MeshError, ValidationError

__all__ = [
    "TetMesh",
    "CutPlane",
    "load_mesh",
    "save_mesh",
    "validate_mesh",
    "tet_volumes",
    "nodal_volumes",
    "wall_vertices",
    "wall_normals",
    "segment_labels",
    "segment_names",
    "generate_pipe_mesh",
    "generate_box_mesh",
]

WALL_LABEL = 0
INLET_LABEL = 1
FIRST_OUTLET_LABEL = 2

# Local vertex triples of the four outward-oriented faces of a
# positively oriented tetrahedron.
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


@dataclass
class TetMesh:
    """Tetrahedral mesh with labeled, inward-oriented boundary triangles.

    Attributes
    ----------
    vertices : (N, 3) float array, meters.
    tets : (M, 4) int array.
    boundary_faces : (B, 3) int array
        Right-hand-rule normals point into the fluid.
    boundary_labels : (B,) int array
        0 wall, 1 inlet, >= 2 outlets.
    metadata : dict
        Free-form; generators record their geometry here.
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    boundary_labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.boundary_faces = np.ascontiguousarray(self.boundary_faces,
                                                   dtype=np.int64)
        self.boundary_labels = np.ascontiguousarray(self.boundary_labels,
                                                    dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError(f"tets must be (M, 4), got {self.tets.shape}")
        if self.boundary_faces.shape[0] != self.boundary_labels.shape[0]:
            raise MeshError("one label per boundary face required")
        for name, conn in (("tets", self.tets), ("faces", self.boundary_faces)):
            if conn.size and (conn.min() < 0 or conn.max() >= len(self.vertices)):
                raise MeshError(f"{name} reference nonexistent vertices")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]


@dataclass(frozen=True)
class CutPlane:
    """Oriented plane given by a point on it and its normal."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def unit_normal(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValidationError("cut plane normal must be nonzero")
        return n / norm

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float)
                - np.asarray(self.point, dtype=float)) @ self.unit_normal()


# =========================================================================
# Core queries
# =========================================================================

def tet_volumes(mesh: TetMesh) -> np.ndarray:
    """Signed volumes of all tetrahedra."""
    v = mesh.vertices[mesh.tets]
    a, b, c = (v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0])
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def nodal_volumes(mesh: TetMesh) -> np.ndarray:
    """Lumped control volume per vertex: a quarter of each adjacent tet."""
    vol = tet_volumes(mesh)
    if np.any(vol <= 0):
        raise MeshError("nodal volumes require positively oriented tetrahedra")
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.tets.ravel(), np.repeat(vol / 4.0, 4))
    return out


def _boundary_of_tets(tets: np.ndarray):
    """Outward-oriented faces of the mesh boundary, with owning tets."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    owners = np.repeat(np.arange(len(tets)), 4)
    keys = np.sort(faces, axis=1)
    order = np.lexsort(keys.T)
    keys_sorted = keys[order]
    new_group = np.ones(len(keys_sorted), dtype=bool)
    new_group[1:] = np.any(keys_sorted[1:] != keys_sorted[:-1], axis=1)
    group_ids = np.cumsum(new_group) - 1
    counts = np.bincount(group_ids)
    singleton = counts[group_ids] == 1
    picked = order[singleton]
    if np.any(counts > 2):
        raise MeshError("non-manifold interior face (shared by > 2 tets)")
    return faces[picked], owners[picked]


def _orient_faces_inward(vertices, tets, faces, owners):
    """Flip stored face windings so right-hand normals point into the fluid."""
    tri = vertices[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroid = tri.mean(axis=1)
    opposite_sum = vertices[tets[owners]].sum(axis=1) - tri.sum(axis=1)
    inward = opposite_sum - centroid  # toward the tet's interior
    flip = np.einsum("ij,ij->i", normal, inward) < 0
    out = faces.copy()
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


def validate_mesh(mesh: TetMesh, repair: bool = True) -> TetMesh:
    """Check structural soundness; optionally repair inverted tetrahedra.

    Checks positive tet volumes (repaired by swapping two vertices when
    ``repair`` is true, with a warning), a closed manifold boundary that
    matches the stored boundary triangles, inward face orientation
    (always re-derived from the owning tetrahedra), and label sanity.
    Returns the mesh, modified in place.
    """
    vol = tet_volumes(mesh)
    scale = np.abs(vol).max() if len(vol) else 0.0
    if scale == 0.0:
        raise MeshError("mesh has no usable tetrahedra")
    degenerate = np.abs(vol) < 1e-12 * scale
    if np.any(degenerate):
        raise MeshError(f"{int(degenerate.sum())} degenerate tetrahedra")
    inverted = vol < 0
    if np.any(inverted):
        if not repair:
            raise MeshError(f"{int(inverted.sum())} inverted tetrahedra")
        warnings.warn(f"repaired {int(inverted.sum())} inverted tetrahedra "
                      "by vertex swap", stacklevel=2)
        flipped = mesh.tets[inverted][:, [0, 1, 3, 2]]
        mesh.tets[inverted] = flipped

    faces, owners = _boundary_of_tets(mesh.tets)
    derived = {tuple(f) for f in np.sort(faces, axis=1)}
    stored = {tuple(f) for f in np.sort(mesh.boundary_faces, axis=1)}
    if derived != stored:
        raise MeshError("stored boundary triangles do not match the "
                        "tetrahedral boundary")

    # Closed manifold boundary: every boundary edge borders exactly 2 faces.
    edges = np.sort(faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts != 2):
        raise MeshError("boundary is not a closed manifold surface")

    if np.any(mesh.boundary_labels < 0):
        raise MeshError("boundary labels must be nonnegative")

    # Re-key stored labels onto the derived (oriented) faces.
    label_of = {tuple(f): int(l) for f, l in
                zip(np.sort(mesh.boundary_faces, axis=1), mesh.boundary_labels)}
    oriented = _orient_faces_inward(mesh.vertices, mesh.tets, faces, owners)
    mesh.boundary_faces = oriented
    mesh.boundary_labels = np.array(
        [label_of[tuple(f)] for f in np.sort(oriented, axis=1)], dtype=np.int64)
    return mesh


def wall_vertices(mesh: TetMesh) -> np.ndarray:
    """Sorted indices of vertices lying on wall-labeled boundary faces."""
    on_wall = mesh.boundary_faces[mesh.boundary_labels == WALL_LABEL]
    return np.unique(on_wall)


def wall_normals(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit inward normals at wall vertices.

    Area-weighted average of the inward normals of adjacent wall faces.

    Returns
    -------
    indices : (W,) int array of wall vertex indices, sorted.
    normals : (W, 3) float array of unit inward normals.
    """
    faces = mesh.boundary_faces[mesh.boundary_labels == WALL_LABEL]
    if len(faces) == 0:
        raise MeshError("mesh has no wall faces")
    tri = mesh.vertices[faces]
    # Inward-oriented winding: the cross product is inward with twice the
    # triangle area as magnitude, so plain accumulation is area weighting.
    area_normal = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    accum = np.zeros((mesh.n_vertices, 3))
    np.add.at(accum, faces.ravel(), np.repeat(area_normal, 3, axis=0))
    indices = np.unique(faces)
    sums = accum[indices]
    norms = np.linalg.norm(sums, axis=1)
    mean_scale = norms.mean()
    if np.any(norms < 1e-12 * max(mean_scale, 1e-300)):
        bad = indices[norms < 1e-12 * mean_scale]
        raise MeshError(f"degenerate wall normal at vertices {bad[:5].tolist()}")
    return indices, sums / norms[:, None]


def segment_names(n_segments: int) -> tuple[str, ...]:
    """Anatomical names for the standard four-segment split, else generic."""
    if n_segments == 4:
        return ("AAo", "AArch", "pDAo", "dDAo")
    return tuple(f"segment_{i}" for i in range(n_segments))


def segment_labels(mesh: TetMesh, planes: Sequence[CutPlane],
                   exclude_mask: np.ndarray | None = None) -> np.ndarray:
    """Partition vertices into segments by ordered cut planes.

    A vertex belongs to the first plane (in the given order) whose
    signed distance is negative; vertices past every plane fall into the
    final segment, so ``k`` planes produce ``k + 1`` segments. Excluded
    vertices (branches, and so on) are labeled -1 and take part in no
    segment.

    Raises
    ------
    LabelingError
        If any segment ends up empty.
    """
    labels = np.full(mesh.n_vertices, len(planes), dtype=np.int64)
    assigned = np.zeros(mesh.n_vertices, dtype=bool)
    for i, plane in enumerate(planes):
        below = plane.signed_distance(mesh.vertices) < 0
        pick = below & ~assigned
        labels[pick] = i
        assigned |= below
    if exclude_mask is not None:
        exclude_mask = np.asarray(exclude_mask, dtype=bool)
        if exclude_mask.shape != (mesh.n_vertices,):
            raise ValidationError("exclude mask must be one flag per vertex")
        labels[exclude_mask] = -1
    for seg in range(len(planes) + 1):
        if not np.any(labels == seg):
            raise LabelingError(
                f"segment {seg} of {len(planes) + 1} is empty; check the "
                "cut plane order and orientation")
    return labels


# =========================================================================
# Generators
# =========================================================================

def _split_prisms(prisms: np.ndarray) -> np.ndarray:
    """Split triangular prisms into 3 tets each, conforming across faces.

    Uses the smallest-global-index rule, so the diagonal chosen on every
    shared quadrilateral face is the same from both sides.
    """
    rotations = np.array([
        [0, 1, 2, 3, 4, 5],
        [1, 2, 0, 4, 5, 3],
        [2, 0, 1, 5, 3, 4],
        [3, 5, 4, 0, 2, 1],
        [4, 3, 5, 1, 0, 2],
        [5, 4, 3, 2, 1, 0],
    ])
    argmin = np.argmin(prisms, axis=1)
    rot = rotations[argmin]
    p = np.take_along_axis(prisms, rot, axis=1)
    use_15 = (np.minimum(p[:, 1], p[:, 5])
              < np.minimum(p[:, 2], p[:, 4]))
    tets = np.empty((len(prisms), 3, 4), dtype=prisms.dtype)
    a = p[use_15]
    tets[use_15] = np.stack([a[:, [0, 1, 2, 5]],
                             a[:, [0, 1, 5, 4]],
                             a[:, [0, 4, 5, 3]]], axis=1)
    b = p[~use_15]
    tets[~use_15] = np.stack([b[:, [0, 1, 2, 4]],
                              b[:, [0, 4, 2, 5]],
                              b[:, [0, 4, 5, 3]]], axis=1)
    return tets.reshape(-1, 4)


def _fix_orientation(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = vertices[tets]
    vol = np.einsum("ij,ij->i", v[:, 1] - v[:, 0],
                    np.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]))
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets


def _disk_triangulation(arcs: int, rings: int, grading: float):
    """Vertices (2D) and triangles of a disk of unit radius."""
    x = np.arange(1, rings + 1) / rings
    radii = (1.0 + grading) * x - grading * x ** 2
    theta = 2.0 * np.pi * np.arange(arcs) / arcs
    pts = [np.zeros((1, 2))]
    for r in radii:
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    points = np.vstack(pts)

    def ring_index(j, k):
        return 1 + (j - 1) * arcs + (k % arcs)

    tris = []
    for k in range(arcs):
        tris.append([0, ring_index(1, k), ring_index(1, k + 1)])
    for j in range(1, rings):
        for k in range(arcs):
            a0, a1 = ring_index(j, k), ring_index(j, k + 1)
            b0, b1 = ring_index(j + 1, k), ring_index(j + 1, k + 1)
            tris.append([a0, a1, b1])
            tris.append([a0, b1, b0])
    return points, np.array(tris, dtype=np.int64)


def _finalize_generated(vertices, tets, classify, metadata) -> TetMesh:
    tets = _fix_orientation(vertices, tets)
    faces, owners = _boundary_of_tets(tets)
    faces = _orient_faces_inward(vertices, tets, faces, owners)
    labels = classify(vertices[faces].mean(axis=1))
    mesh = TetMesh(vertices=vertices, tets=tets, boundary_faces=faces,
                   boundary_labels=labels, metadata=metadata)
    return validate_mesh(mesh, repair=False)


def generate_pipe_mesh(radius: float, length: float, resolution: int = 2,
                       wall_grading: float = 0.5) -> TetMesh:
    """Structured tetrahedral mesh of a straight circular pipe.

    The pipe axis is z, spanning ``[0, length]``, centered on x = y = 0.
    The cross-section is a spider-web triangulation with ring spacing
    biased toward the wall (``wall_grading`` in [0, 1); 0 is uniform).
    Each resolution step doubles the angular, radial, and axial counts.
    Boundary labels: z = 0 disc is the inlet (1), z = length disc the
    outlet (2), the lateral surface the wall (0).
    """
    if radius <= 0 or length <= 0:
        raise ValidationError("pipe radius and length must be positive")
    if resolution < 0 or resolution > 6:
        raise ValidationError("pipe resolution must be in [0, 6]")
    if not (0 <= wall_grading < 1):
        raise ValidationError("wall grading must be in [0, 1)")
    arcs = 16 * 2 ** resolution
    rings = 2 * 2 ** resolution
    layers = 5 * 2 ** resolution

    disk, tris = _disk_triangulation(arcs, rings, wall_grading)
    per_layer = len(disk)
    z = np.linspace(0.0, length, layers + 1)
    vertices = np.empty((per_layer * (layers + 1), 3))
    for l, zl in enumerate(z):
        block = slice(l * per_layer, (l + 1) * per_layer)
        vertices[block, :2] = disk * radius
        vertices[block, 2] = zl

    bottom = np.repeat(np.arange(layers) * per_layer, len(tris))
    tri_tiled = np.tile(tris, (layers, 1))
    prisms = np.concatenate([tri_tiled + bottom[:, None],
                             tri_tiled + bottom[:, None] + per_layer], axis=1)
    tets = _split_prisms(prisms)

    ztol = 1e-9 * length

    def classify(centroids):
        labels = np.full(len(centroids), WALL_LABEL, dtype=np.int64)
        labels[centroids[:, 2] < ztol] = INLET_LABEL
        labels[centroids[:, 2] > length - ztol] = FIRST_OUTLET_LABEL
        return labels

    metadata = {"pipe": {"radius": float(radius), "length": float(length),
                         "resolution": int(resolution),
                         "wall_grading": float(wall_grading)}}
    return _finalize_generated(vertices, tets, classify, metadata)


def generate_box_mesh(size: Sequence[float], divisions: Sequence[int],
                      center: Sequence[float] = (0.0, 0.0, 0.0)) -> TetMesh:
    """Structured tetrahedral box, six tets per hexahedral cell.

    All six sides are labeled wall (0). Intended for phantoms and tests.
    """
    size = np.asarray(size, dtype=float)
    divisions = np.asarray(divisions, dtype=int)
    center = np.asarray(center, dtype=float)
    if np.any(size <= 0) or np.any(divisions < 1):
        raise ValidationError("box size must be positive, divisions >= 1")
    nx, ny, nz = divisions
    axes = [np.linspace(-s / 2, s / 2, d + 1) + c
            for s, d, c in zip(size, divisions, center)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([g.ravel() for g in grid])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                          indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    c = {(di, dj, dk): vid(i + di, j + dj, k + dk)
         for di in (0, 1) for dj in (0, 1) for dk in (0, 1)}
    # Six tets around the main diagonal (0,0,0) - (1,1,1); the pattern is
    # translation invariant, so faces of neighboring cells conform.
    paths = [
        ((1, 0, 0), (1, 1, 0)), ((1, 0, 0), (1, 0, 1)),
        ((0, 1, 0), (1, 1, 0)), ((0, 1, 0), (0, 1, 1)),
        ((0, 0, 1), (1, 0, 1)), ((0, 0, 1), (0, 1, 1)),
    ]
    tet_list = [np.stack([c[(0, 0, 0)], c[p0], c[p1], c[(1, 1, 1)]], axis=1)
                for p0, p1 in paths]
    tets = np.concatenate(tet_list, axis=0)

    def classify(centroids):
        return np.full(len(centroids), WALL_LABEL, dtype=np.int64)

    metadata = {"box": {"size": size.tolist(), "center": center.tolist(),
                        "divisions": divisions.tolist()}}
    return _finalize_generated(vertices, tets, classify, metadata)


# =========================================================================
# VTK legacy ASCII I/O
# =========================================================================

def _mesh_lines(mesh: TetMesh, extra_metadata: dict | None = None) -> list[str]:
    lines = ["# vtk DataFile Version 3.0"]
    metadata = dict(mesh.metadata)
    if extra_metadata:
        metadata.update(extra_metadata)
    title = "hemoflow " + json.dumps(metadata, separators=(",", ":"),
                                     sort_keys=True)
    if len(title) > 255:
        raise ValidationError("mesh metadata too large for the VTK title line")
    lines.append(title)
    lines.append("ASCII")
    lines.append("DATASET UNSTRUCTURED_GRID")
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in mesh.vertices)
    n_cells = mesh.n_tets + len(mesh.boundary_faces)
    total = 5 * mesh.n_tets + 4 * len(mesh.boundary_faces)
    lines.append(f"CELLS {n_cells} {total}")
    lines.extend("4 " + " ".join(map(str, t)) for t in mesh.tets)
    lines.extend("3 " + " ".join(map(str, f)) for f in mesh.boundary_faces)
    lines.append(f"CELL_TYPES {n_cells}")
    lines.extend(["10"] * mesh.n_tets)
    lines.extend(["5"] * len(mesh.boundary_faces))
    lines.append(f"CELL_DATA {n_cells}")
    lines.append("SCALARS boundary_label int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(["-1"] * mesh.n_tets)
    lines.extend(str(l) for l in mesh.boundary_labels)
    return lines


def save_mesh(mesh: TetMesh, path: str | Path) -> None:
    """Write a VTK legacy ASCII unstructured grid (see module docstring)."""
    Path(path).write_text("\n".join(_mesh_lines(mesh)) + "\n")


class _VtkTokens:
    """Whitespace-token stream over a VTK legacy ASCII file."""

    def __init__(self, text: str, path):
        body = text.split("\n", 2)
        if len(body) < 3:
            raise MeshError(f"{path}: truncated VTK file")
        self.title = body[1]
        self.tokens = body[2].split()
        self.pos = 0
        self.path = path

    def next(self) -> str:
        if self.pos >= len(self.tokens):
            raise MeshError(f"{self.path}: unexpected end of file")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, word: str):
        tok = self.next()
        if tok.upper() != word:
            raise MeshError(f"{self.path}: expected {word}, found {tok}")

    def ints(self, count: int) -> np.ndarray:
        end = self.pos + count
        if end > len(self.tokens):
            raise MeshError(f"{self.path}: unexpected end of file")
        out = np.array(self.tokens[self.pos:end], dtype=np.int64)
        self.pos = end
        return out

    def floats(self, count: int) -> np.ndarray:
        end = self.pos + count
        if end > len(self.tokens):
            raise MeshError(f"{self.path}: unexpected end of file")
        out = np.array(self.tokens[self.pos:end], dtype=np.float64)
        self.pos = end
        return out


def load_mesh(path: str | Path) -> TetMesh:
    """Read a VTK legacy ASCII unstructured grid written by this package.

    Tetrahedra (cell type 10) become the volume mesh; triangles (type 5)
    must carry a ``boundary_label`` cell-data array. The mesh is
    validated on load: inverted tetrahedra are repaired with a warning,
    the boundary must be closed and match the stored triangles, and the
    triangles are re-oriented inward regardless of stored winding.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    tk = _VtkTokens(text, path)
    metadata = {}
    if tk.title.startswith("hemoflow "):
        try:
            metadata = json.loads(tk.title[len("hemoflow "):])
        except json.JSONDecodeError:
            metadata = {}
    tk.expect("ASCII")
    tk.expect("DATASET")
    tk.expect("UNSTRUCTURED_GRID")
    tk.expect("POINTS")
    n_points = int(tk.next())
    tk.next()  # point scalar type
    vertices = tk.floats(3 * n_points).reshape(-1, 3)
    tk.expect("CELLS")
    n_cells = int(tk.next())
    total = int(tk.next())
    raw = tk.ints(total)
    cells = []
    pos = 0
    for _ in range(n_cells):
        count = int(raw[pos])
        cells.append(raw[pos + 1:pos + 1 + count])
        pos += count + 1
    if pos != total:
        raise MeshError(f"{path}: CELLS block size mismatch")
    tk.expect("CELL_TYPES")
    if int(tk.next()) != n_cells:
        raise MeshError(f"{path}: CELL_TYPES count mismatch")
    types = tk.ints(n_cells)

    tets = [c for c, t in zip(cells, types) if t == 10]
    tris = [c for c, t in zip(cells, types) if t == 5]
    if len(tets) + len(tris) != n_cells:
        bad = sorted(set(types) - {5, 10})
        raise MeshError(f"{path}: unsupported cell types {bad}")
    if not tets:
        raise MeshError(f"{path}: no tetrahedra found")

    labels = None
    section = None
    count = 0
    while tk.pos < len(tk.tokens):
        tok = tk.next().upper()
        if tok == "CELL_DATA":
            section, count = "cell", int(tk.next())
            if count != n_cells:
                raise MeshError(f"{path}: CELL_DATA count mismatch")
        elif tok == "POINT_DATA":
            section, count = "point", int(tk.next())
            if count != n_points:
                raise MeshError(f"{path}: POINT_DATA count mismatch")
        elif tok == "SCALARS" and section is not None:
            name = tk.next()
            tk.next()  # data type
            if tk.tokens[tk.pos].isdigit():
                tk.next()  # optional component count
            tk.expect("LOOKUP_TABLE")
            tk.next()
            if section == "cell" and name == "boundary_label":
                labels = tk.ints(count)
            else:
                tk.floats(count)
        elif tok == "VECTORS" and section is not None:
            tk.next()  # name
            tk.next()  # data type
            tk.floats(3 * count)
        else:
            raise MeshError(f"{path}: unsupported section {tok}")
    if labels is None:
        raise MeshError(f"{path}: missing boundary_label cell data")

    type_order = np.asarray(types)
    tri_labels = labels[type_order == 5]
    mesh = TetMesh(vertices=vertices,
                   tets=np.array(tets, dtype=np.int64).reshape(-1, 4),
                   boundary_faces=np.array(tris, dtype=np.int64).reshape(-1, 3),
                   boundary_labels=tri_labels,
                   metadata=metadata)
    return validate_mesh(mesh, repair=True)
