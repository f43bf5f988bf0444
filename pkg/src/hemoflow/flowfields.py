"""Finite-element velocity fields on vessel meshes.

A velocity field is a time series of per-vertex velocity vectors on a
tetrahedral mesh, interpreted as a piecewise-linear (P1) field. Fields
are built analytically (steady power-law pipe flow, pulsatile scaling
of a spatial profile) or loaded from disk.

Disk formats: a flat little-endian float64 binary (frames, vertices, 3)
with a JSON sidecar holding frame times, period, and vertex count, or
single-frame VTK legacy files carrying a ``velocity`` point-data vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, ValidationError
from .mesh import CutPlane, TetMesh, _mesh_lines, _VtkTokens
from .rheology import PowerLawParams

__all__ = [
    "FlowWaveform",
    "VelocityField",
    "poiseuille_power_law",
    "pulsatile_scale",
    "flow_rate",
    "save_velocity_series",
    "load_velocity_series",
    "save_velocity_frame_vtk",
    "load_velocity_frame_vtk",
]


@dataclass
class FlowWaveform:
    """Periodic scalar waveform sampled at increasing times within a period."""

    times: np.ndarray
    values: np.ndarray
    period: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValidationError("waveform times and values must be matching "
                                  "1-D arrays")
        if self.times.size < 2:
            raise ValidationError("waveform needs at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("waveform times must strictly increase")
        if not (self.period > 0) or self.times[-1] - self.times[0] >= self.period:
            raise ValidationError("waveform samples must span less than one period")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("waveform values must be finite")

    def value_at(self, t) -> np.ndarray:
        """Periodic linear interpolation."""
        tau = np.mod(np.asarray(t, dtype=float) - self.times[0], self.period)
        ext_t = np.append(self.times - self.times[0], self.period)
        ext_v = np.append(self.values, self.values[0])
        return np.interp(tau, ext_t, ext_v)


@dataclass
class VelocityField:
    """Per-vertex velocities over one or more frame times.

    ``values`` has shape (frames, vertices, 3) in m/s. ``period`` is the
    cardiac period for cyclic fields and None for steady ones.
    """

    times: np.ndarray
    values: np.ndarray
    period: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValidationError(
                f"velocity values must be (frames, vertices, 3), "
                f"got {self.values.shape}")
        if self.times.shape != (self.values.shape[0],):
            raise ValidationError("one frame time per velocity frame required")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValidationError("frame times must strictly increase")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("velocities must be finite")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[1]

    def frame_nearest(self, t: float) -> int:
        """Index of the frame whose time is closest to ``t`` (periodically)."""
        times = self.times
        if self.period is not None:
            delta = np.abs((times - t + self.period / 2) % self.period
                           - self.period / 2)
        else:
            delta = np.abs(times - t)
        return int(np.argmin(delta))


def poiseuille_power_law(mesh: TetMesh, params: PowerLawParams,
                         pressure_drop: float) -> VelocityField:
    """Steady axial power-law profile in a generated pipe.

    For a pipe of radius R and length L under a pressure drop dP, the
    fully developed axial velocity is

    ``u(r) = n/(n+1) * (dP / (2 m L))**(1/n) * (R**((n+1)/n) - r**((n+1)/n))``

    which satisfies the wall force balance ``m * |du/dr|**n = dP R / (2 L)``
    at r = R.

    Raises
    ------
    GeometryError
        The mesh was not produced by :func:`~hemoflow.mesh.generate_pipe_mesh`
        (no pipe geometry in its metadata).
    """
    info = mesh.metadata.get("pipe")
    if not info:
        raise GeometryError("mesh carries no pipe geometry; analytic pipe "
                            "profiles need a generated pipe mesh")
    if pressure_drop <= 0:
        raise ValidationError("pressure drop must be positive")
    radius, length = info["radius"], info["length"]
    r = np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1])
    # vertices within roundoff of the wall are wall: exact no slip
    r = np.where(r >= radius * (1.0 - 1e-12), radius, r)
    n, m = params.n, params.m
    exponent = (n + 1.0) / n
    scale = (n / (n + 1.0)) * (pressure_drop / (2.0 * m * length)) ** (1.0 / n)
    axial = scale * (radius ** exponent - r ** exponent)
    values = np.zeros((1, mesh.n_vertices, 3))
    values[0, :, 2] = axial
    return VelocityField(times=np.array([0.0]), values=values)


def pulsatile_scale(profile: VelocityField,
                    waveform: FlowWaveform) -> VelocityField:
    """Scale a steady spatial profile by a periodic peak-velocity waveform.

    The profile is normalized to unit peak magnitude, so the waveform
    values are the instantaneous peak velocities in m/s: the field is
    ``u(x, t) = w(t) * S(x) * e(x)`` with shape factor S in [0, 1].
    """
    if profile.n_frames != 1:
        raise ValidationError("pulsatile scaling expects a single-frame profile")
    peak = np.linalg.norm(profile.values[0], axis=1).max()
    if peak <= 0:
        raise ValidationError("profile has zero peak velocity")
    shape = profile.values[0] / peak
    values = waveform.values[:, None, None] * shape[None, :, :]
    return VelocityField(times=waveform.times.copy(), values=values,
                         period=waveform.period)


# =========================================================================
# Cross-section flow rate
# =========================================================================

_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _cut_tet_polygon(points, dist):
    """Intersection polygon of one tetrahedron with the plane d = 0."""
    crossings = []
    for i, j in _EDGES:
        if dist[i] * dist[j] < 0:
            t = dist[i] / (dist[i] - dist[j])
            crossings.append(points[i] + t * (points[j] - points[i]))
    if len(crossings) < 3:
        return None
    poly = np.array(crossings)
    center = poly.mean(axis=0)
    # order vertices around the centroid within the cut plane
    basis_u = poly[0] - center
    basis_u /= np.linalg.norm(basis_u)
    normal = np.cross(poly[1] - poly[0], poly[2] - poly[0])
    norm = np.linalg.norm(normal)
    if norm == 0:
        return None
    basis_v = np.cross(normal / norm, basis_u)
    angles = np.arctan2((poly - center) @ basis_v, (poly - center) @ basis_u)
    return poly[np.argsort(angles)]


def _barycentric(points, x):
    mat = np.column_stack([points[1] - points[0], points[2] - points[0],
                           points[3] - points[0]])
    lam = np.linalg.solve(mat, x - points[0])
    return np.array([1.0 - lam.sum(), *lam])


def flow_rate(field: VelocityField, mesh: TetMesh,
              plane: CutPlane) -> np.ndarray:
    """Volumetric flow through a plane cut, per frame.

    The plane is intersected with every tetrahedron it crosses; each
    intersection polygon is fan-triangulated and integrated with one
    velocity evaluation per sub-triangle centroid. The sign follows the
    plane normal.

    Raises
    ------
    GeometryError
        The plane does not intersect the mesh.
    """
    if field.n_vertices != mesh.n_vertices:
        raise ValidationError("field and mesh vertex counts differ")
    dist = plane.signed_distance(mesh.vertices)
    scale = np.abs(dist).max()
    if scale == 0:
        raise GeometryError("cut plane does not intersect the mesh")
    # Nudge the plane off any vertices it passes through exactly, so every
    # crossing is a clean sign change on an edge.
    while np.any(np.abs(dist) < 1e-12 * scale):
        dist = dist - 1e-9 * scale
    signs = dist[mesh.tets]
    mixed = np.logical_and(signs.min(axis=1) < 0, signs.max(axis=1) > 0)
    cut_tets = np.nonzero(mixed)[0]
    if cut_tets.size == 0:
        raise GeometryError("cut plane does not intersect the mesh")

    normal = plane.unit_normal()
    flows = np.zeros(field.n_frames)
    for t in cut_tets:
        conn = mesh.tets[t]
        pts = mesh.vertices[conn]
        poly = _cut_tet_polygon(pts, dist[conn])
        if poly is None:
            continue
        for k in range(1, len(poly) - 1):
            tri = (poly[0], poly[k], poly[k + 1])
            area_vec = 0.5 * np.cross(tri[1] - tri[0], tri[2] - tri[0])
            area = abs(area_vec @ normal)
            centroid = (tri[0] + tri[1] + tri[2]) / 3.0
            lam = _barycentric(pts, centroid)
            u = np.einsum("v,fvc->fc", lam, field.values[:, conn, :])
            flows += (u @ normal) * area
    return flows


# =========================================================================
# Persistence
# =========================================================================

_SERIES_FORMAT = "hemoflow-velocity-series"


def save_velocity_series(field: VelocityField, path: str | Path) -> None:
    """Write the field as raw float64 plus a JSON sidecar.

    ``path`` names the sidecar (conventionally ``.json``); the raw data
    lands next to it with a ``.bin`` suffix, little-endian C-order with
    shape (frames, vertices, 3).
    """
    path = Path(path)
    data_path = path.with_suffix(".bin")
    field.values.astype("<f8").tofile(data_path)
    sidecar = {
        "format": _SERIES_FORMAT,
        "n_frames": field.n_frames,
        "n_vertices": field.n_vertices,
        "times": field.times.tolist(),
        "period": field.period,
        "data_file": data_path.name,
    }
    path.write_text(json.dumps(sidecar, indent=2) + "\n")


def load_velocity_series(path: str | Path) -> VelocityField:
    """Read a field written by :func:`save_velocity_series`.

    Frames are sorted by their stored times.
    """
    path = Path(path)
    try:
        sidecar = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read velocity sidecar {path}: {exc}") from exc
    if sidecar.get("format") != _SERIES_FORMAT:
        raise ValidationError(f"{path}: not a velocity series sidecar")
    frames, vertices = int(sidecar["n_frames"]), int(sidecar["n_vertices"])
    data_path = path.parent / sidecar["data_file"]
    raw = np.fromfile(data_path, dtype="<f8")
    expected = frames * vertices * 3
    if raw.size != expected:
        raise ValidationError(
            f"{data_path}: holds {raw.size} values, sidecar implies {expected}")
    values = raw.reshape(frames, vertices, 3)
    times = np.asarray(sidecar["times"], dtype=float)
    order = np.argsort(times)
    return VelocityField(times=times[order], values=values[order],
                         period=sidecar.get("period"))


def save_velocity_frame_vtk(mesh: TetMesh, velocities: np.ndarray,
                            time: float, path: str | Path) -> None:
    """Write one frame as a VTK mesh with a ``velocity`` point vector."""
    velocities = np.asarray(velocities, dtype=float)
    if velocities.shape != (mesh.n_vertices, 3):
        raise ValidationError("one velocity vector per mesh vertex required")
    lines = _mesh_lines(mesh, extra_metadata={"frame_time": float(time)})
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    lines.append("VECTORS velocity double")
    lines.extend(" ".join(f"{x:.17g}" for x in row) for row in velocities)
    Path(path).write_text("\n".join(lines) + "\n")


def load_velocity_frame_vtk(path: str | Path) -> tuple[float, np.ndarray]:
    """Read the frame time and velocity vectors from a VTK frame file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    tk = _VtkTokens(text, path)
    time = 0.0
    if tk.title.startswith("hemoflow "):
        try:
            time = float(json.loads(tk.title[9:]).get("frame_time", 0.0))
        except json.JSONDecodeError:
            pass
    velocities = None
    n_points = None
    while tk.pos < len(tk.tokens):
        tok = tk.next().upper()
        if tok == "POINTS":
            n_points = int(tk.next())
            tk.next()
            tk.floats(3 * n_points)
        elif tok == "VECTORS":
            name = tk.next()
            tk.next()
            if n_points is None:
                raise ValidationError(f"{path}: VECTORS before POINTS")
            data = tk.floats(3 * n_points).reshape(-1, 3)
            if name == "velocity":
                velocities = data
    if velocities is None:
        raise ValidationError(f"{path}: no velocity point vectors found")
    return time, velocities
