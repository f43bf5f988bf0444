"""Viscosity-dependent hemodynamic biomarkers on tetrahedral meshes.

From a per-vertex velocity field this module recovers velocity
gradients (lumped L2 projection of the element gradients), evaluates
wall shear stress as the viscous traction 2 mu eps n at wall vertices,
the oscillatory shear index over a cardiac cycle, and the nodal rate of
viscous energy loss. Every quantity accepts either a constant Newtonian
viscosity (Pa s) or a power-law model evaluated at the local shear
rate, so model comparisons share identical velocity gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import GeometryError, ValidationError
from .flowfields import VelocityField
from .mesh import TetMesh, _mesh_lines, nodal_volumes, tet_volumes
from .rheology import SHEAR_RATE_FLOOR, PowerLawParams, apparent_viscosity

__all__ = [
    "recover_gradients",
    "shear_rate",
    "viscosity_at",
    "wss",
    "osi",
    "energy_loss_rate",
    "SegmentStats",
    "segment_stats",
    "compare_models",
    "interpolate_to_mesh",
    "export_fields_vtk",
    "write_stats_csv",
    "write_comparison_csv",
]


def recover_gradients(mesh: TetMesh, velocities: np.ndarray) -> np.ndarray:
    """Per-vertex velocity-gradient tensors, 1/s.

    Element gradients of the piecewise-linear field are constant per
    tetrahedron; they are projected onto the vertices with a lumped
    L2 (volume-weighted) average, which reproduces globally linear
    fields exactly. Returns shape (n_vertices, 3, 3) with entry [v, i, j]
    holding du_i/dx_j.
    """
    velocities = np.asarray(velocities, dtype=float)
    if velocities.shape != (mesh.n_vertices, 3):
        raise ValidationError("one velocity vector per mesh vertex required")
    corners = mesh.vertices[mesh.tets]
    edges = corners[:, 1:] - corners[:, :1]          # (T, 3, 3) rows
    du = velocities[mesh.tets]
    du = du[:, 1:] - du[:, :1]                       # (T, 3, 3)
    # rows of `edges` dot the gradient of component i to du[:, :, i]
    grad = np.linalg.solve(edges, du)                # (T, dx_j, u_i)
    grad = grad.transpose(0, 2, 1)                   # (T, u_i, dx_j)

    share = tet_volumes(mesh)[:, None, None] * grad / 4.0
    accum = np.zeros((mesh.n_vertices, 3, 3))
    for corner in range(4):
        np.add.at(accum, mesh.tets[:, corner], share)
    return accum / nodal_volumes(mesh)[:, None, None]


def shear_rate(gradients: np.ndarray) -> np.ndarray:
    """Scalar shear rate sqrt(2 eps:eps) of gradient tensors (..., 3, 3)."""
    gradients = np.asarray(gradients, dtype=float)
    strain = 0.5 * (gradients + np.swapaxes(gradients, -1, -2))
    return np.sqrt(2.0 * np.einsum("...ij,...ij->...", strain, strain))


def viscosity_at(viscosity, gradients: np.ndarray,
                 floor: float = SHEAR_RATE_FLOOR) -> np.ndarray:
    """Viscosity evaluated per gradient tensor.

    A float is broadcast (Newtonian); a power-law model is evaluated at
    the local shear rate with the low-shear floor.
    """
    rates = shear_rate(gradients)
    if isinstance(viscosity, PowerLawParams):
        return apparent_viscosity(viscosity, rates, floor=floor)
    mu = float(viscosity)
    if mu <= 0:
        raise ValidationError("viscosity must be positive")
    return np.full(rates.shape, mu)


def wss(gradients: np.ndarray, normals: np.ndarray,
        viscosity) -> tuple[np.ndarray, np.ndarray]:
    """Wall shear stress vectors t = 2 mu eps n and their magnitudes, Pa.

    ``gradients`` are the recovered tensors at the wall vertices and
    ``normals`` the matching unit inward wall normals.
    """
    gradients = np.asarray(gradients, dtype=float)
    normals = np.asarray(normals, dtype=float)
    if gradients.shape[-2:] != (3, 3) or normals.shape != gradients.shape[:-2] + (3,):
        raise ValidationError("need one 3x3 gradient and one normal per "
                              "wall vertex")
    lengths = np.linalg.norm(normals, axis=-1)
    if not np.allclose(lengths, 1.0, atol=1e-8):
        raise ValidationError("wall normals must be unit length")
    strain = 0.5 * (gradients + np.swapaxes(gradients, -1, -2))
    mu = viscosity_at(viscosity, gradients)
    traction = 2.0 * mu[..., None] * np.einsum("...ij,...j->...i",
                                               strain, normals)
    return traction, np.linalg.norm(traction, axis=-1)


def osi(tractions: np.ndarray, times: np.ndarray, period: float) -> np.ndarray:
    """Oscillatory shear index per wall vertex over one cardiac cycle.

    OSI = (1 - ||int t dt|| / int ||t|| dt) / 2, integrated with the
    trapezoid rule after closing the cycle periodically (the first frame
    is appended again at t = period). Vertices whose shear magnitude
    integrates to zero get OSI = 0: a vanishing history carries no
    directional information.
    """
    tractions = np.asarray(tractions, dtype=float)
    times = np.asarray(times, dtype=float)
    if tractions.ndim != 3 or tractions.shape[2] != 3:
        raise ValidationError("tractions must be (frames, vertices, 3)")
    if times.shape != (tractions.shape[0],) or times.size < 2:
        raise ValidationError("need one time per frame and at least 2 frames")
    if np.any(np.diff(times) <= 0):
        raise ValidationError("frame times must strictly increase")
    if not period > 0 or times[-1] - times[0] >= period:
        raise ValidationError("frames must span less than one period")

    closed_t = np.append(times, times[0] + period)
    closed_v = np.concatenate([tractions, tractions[:1]], axis=0)
    mean_vec = np.trapezoid(closed_v, closed_t, axis=0)
    numerator = np.linalg.norm(mean_vec, axis=-1)
    denominator = np.trapezoid(np.linalg.norm(closed_v, axis=-1),
                               closed_t, axis=0)
    out = np.zeros(tractions.shape[1])
    active = denominator > 0
    out[active] = 0.5 * (1.0 - numerator[active] / denominator[active])
    return np.clip(out, 0.0, 0.5)


def energy_loss_rate(gradients: np.ndarray, viscosity,
                     volumes: np.ndarray,
                     div_coefficient: float = 2.0 / 3.0) -> np.ndarray:
    """Nodal rate of viscous energy loss, microwatts.

    E(x) = 2 mu (eps - c (div u) I) : (eps - c (div u) I) V(x), with the
    dilatational coefficient c configurable (default 2/3; for the fields
    handled here div u is near zero, so the choice hardly matters).
    """
    gradients = np.asarray(gradients, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    if gradients.shape[:-2] != volumes.shape:
        raise ValidationError("need one nodal volume per gradient tensor")
    strain = 0.5 * (gradients + np.swapaxes(gradients, -1, -2))
    div = np.einsum("...ii->...", gradients)
    eye = np.eye(3)
    deviator = strain - div_coefficient * div[..., None, None] * eye
    mu = viscosity_at(viscosity, gradients)
    density = 2.0 * mu * np.einsum("...ij,...ij->...", deviator, deviator)
    return density * volumes * 1e6


# =========================================================================
# Aggregation and model comparison
# =========================================================================

@dataclass
class SegmentStats:
    """Per-segment mean and population standard deviation of one quantity.

    Segments with no vertices are reported as missing (None entries).
    ``cross_mean``/``cross_std`` summarize the available segment means
    (mean of means, std of means).
    """

    parameter: str
    segments: list
    counts: list
    means: list
    stds: list
    frame: int | None = None

    def as_rows(self):
        rows = []
        for name, count, mean, std in zip(self.segments, self.counts,
                                          self.means, self.stds):
            rows.append({"segment": name, "frame": self.frame,
                         "param": self.parameter, "count": count,
                         "mean": mean, "std": std})
        return rows

    @property
    def cross_mean(self):
        present = [m for m in self.means if m is not None]
        return float(np.mean(present)) if present else None

    @property
    def cross_std(self):
        present = [m for m in self.means if m is not None]
        return float(np.std(present)) if present else None


def segment_stats(values: np.ndarray, labels: np.ndarray,
                  names: Sequence[str], parameter: str = "value",
                  frame: int | None = None) -> SegmentStats:
    """Aggregate a per-vertex quantity over labeled segments.

    ``labels`` assigns each value a segment index (-1 excludes it);
    ``names[i]`` names segment i. Empty segments yield None statistics.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    if values.shape != labels.shape:
        raise ValidationError("values and labels must align")
    if labels.size and labels.max() >= len(names):
        raise ValidationError(f"label {labels.max()} has no segment name")
    counts, means, stds = [], [], []
    for seg in range(len(names)):
        picked = values[labels == seg]
        counts.append(int(picked.size))
        if picked.size == 0:
            means.append(None)
            stds.append(None)
        else:
            means.append(float(picked.mean()))
            stds.append(float(picked.std()))
    return SegmentStats(parameter=parameter, segments=list(names),
                        counts=counts, means=means, stds=stds, frame=frame)


def compare_models(reference: SegmentStats,
                   alternative: SegmentStats) -> list:
    """Relative and absolute differences of segment means.

    The relative difference is (alternative - reference)/reference x 100,
    so a positive sign means the alternative model overestimates. A zero
    or missing reference mean leaves the relative entry None (undefined).
    Includes a final cross-segment row labeled 'all'.
    """
    if reference.segments != alternative.segments:
        raise ValidationError("segment lists differ between models")
    rows = []
    pairs = list(zip(reference.segments, reference.means, alternative.means))
    pairs.append(("all", reference.cross_mean, alternative.cross_mean))
    for name, ref, alt in pairs:
        row = {"segment": name, "param": reference.parameter,
               "frame": reference.frame, "reference_mean": ref,
               "alternative_mean": alt, "absolute_difference": None,
               "relative_difference_pct": None}
        if ref is not None and alt is not None:
            row["absolute_difference"] = alt - ref
            if ref != 0:
                row["relative_difference_pct"] = (alt - ref) / ref * 100.0
        rows.append(row)
    return rows


# =========================================================================
# Voxel-to-mesh transfer
# =========================================================================

def interpolate_to_mesh(voxels, mesh: TetMesh) -> VelocityField:
    """Trilinear interpolation of decoded voxel velocities to vertices.

    ``voxels`` is a ReconstructedVelocity (or anything with ``velocity``,
    ``params`` and ``frame_time`` attributes). No smoothing is applied.

    Raises
    ------
    GeometryError
        Some mesh vertex lies outside the voxel grid.
    """
    axes = voxels.params.axis_coordinates()
    for dim, ax in enumerate(axes):
        lo, hi = mesh.vertices[:, dim].min(), mesh.vertices[:, dim].max()
        if lo < ax[0] - 1e-12 or hi > ax[-1] + 1e-12:
            raise GeometryError(
                f"mesh extent [{lo:.4g}, {hi:.4g}] exceeds the voxel grid "
                f"[{ax[0]:.4g}, {ax[-1]:.4g}] along axis {dim}")
    values = np.empty((1, mesh.n_vertices, 3))
    for component in range(3):
        interp = RegularGridInterpolator(
            axes, voxels.velocity[..., component], method="linear",
            bounds_error=False, fill_value=None)
        values[0, :, component] = interp(mesh.vertices)
    return VelocityField(times=np.array([voxels.frame_time]), values=values)


# =========================================================================
# Exports
# =========================================================================

def export_fields_vtk(mesh: TetMesh, point_data: dict,
                      path: str | Path) -> None:
    """Write the mesh plus named per-vertex fields as legacy VTK.

    Scalars have shape (n_vertices,), vectors (n_vertices, 3). Wall-only
    quantities must be scattered to full length by the caller (zeros off
    the wall are conventional).
    """
    lines = _mesh_lines(mesh)
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    for name, data in point_data.items():
        data = np.asarray(data, dtype=float)
        if data.shape == (mesh.n_vertices,):
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{x:.17g}" for x in data)
        elif data.shape == (mesh.n_vertices, 3):
            lines.append(f"VECTORS {name} double")
            lines.extend(" ".join(f"{x:.17g}" for x in row) for row in data)
        else:
            raise ValidationError(
                f"field {name!r} has shape {data.shape}; expected "
                f"({mesh.n_vertices},) or ({mesh.n_vertices}, 3)")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value):
    return "" if value is None else f"{value:.10g}"


def write_stats_csv(stats: Sequence[SegmentStats], path: str | Path) -> None:
    """Write segment statistics as CSV rows segment,frame,param,mean,std."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment", "frame", "param", "count", "mean", "std"])
        for block in stats:
            for row in block.as_rows():
                writer.writerow([row["segment"],
                                 "" if row["frame"] is None else row["frame"],
                                 row["param"], row["count"],
                                 _fmt(row["mean"]), _fmt(row["std"])])


def write_comparison_csv(rows: Sequence[dict], path: str | Path) -> None:
    """Write model-comparison rows produced by compare_models as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment", "frame", "param", "reference_mean",
                         "alternative_mean", "absolute_difference",
                         "relative_difference_pct"])
        for row in rows:
            writer.writerow([row["segment"],
                             "" if row["frame"] is None else row["frame"],
                             row["param"], _fmt(row["reference_mean"]),
                             _fmt(row["alternative_mean"]),
                             _fmt(row["absolute_difference"]),
                             _fmt(row["relative_difference_pct"])])
