"""Power-law blood rheology.

Fits shear-thinning power-law viscosity curves to viscometry samples,
interpolates fitted curves across hematocrit, and reduces a power-law
curve to the Newtonian viscosity that preserves the mean shear stress
over a shear-rate range.

Conventions
-----------
Viscosity is in Pa.s, shear rate in 1/s. A power-law curve is
``mu(g) = m * g**(n - 1)`` with consistency index ``m`` (Pa.s^n) and
power-law index ``n`` (dimensionless, ``n < 1`` is shear thinning).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ExtrapolationError,
    FitError,
    InsufficientDataError,
    ValidationError,
)

__all__ = [
    "SHEAR_RATE_FLOOR",
    "BASE_CURVES",
    "LITERATURE_NEWTONIAN",
    "ViscositySample",
    "PowerLawParams",
    "fit_power_law",
    "apparent_viscosity",
    "newtonian_equivalent",
    "interpolate_hct",
    "fit_for_hct",
    "default_shear_grid",
    "save_params",
    "load_params",
]

# Shear rates below this are clamped before evaluating mu = m * g**(n-1),
# which diverges at g = 0 for n < 1.
SHEAR_RATE_FLOOR = 0.1


@dataclass(frozen=True)
class ViscositySample:
    """One viscometry measurement, optionally carrying a fit weight."""

    shear_rate: float
    viscosity: float
    weight: float | None = None


@dataclass(frozen=True)
class PowerLawParams:
    """Power-law viscosity curve with optional fit diagnostics.

    Attributes
    ----------
    m : float
        Consistency index, Pa.s^n. Must be positive.
    n : float
        Power-law index. Must be positive; 1 recovers a Newtonian fluid.
    r_squared, rmse : float or None
        Goodness of fit in linear viscosity space, present on fitted
        curves and None on hand-built ones.
    """

    m: float
    n: float
    r_squared: float | None = None
    rmse: float | None = None

    def __post_init__(self):
        if not (self.m > 0 and np.isfinite(self.m)):
            raise ValidationError(f"consistency index must be positive, got {self.m}")
        if not (self.n > 0 and np.isfinite(self.n)):
            raise ValidationError(f"power-law index must be positive, got {self.n}")


# Fitted whole-blood power-law curves at five hematocrit levels (fraction of
# red cells by volume, in percent). These are the package's built-in base
# curves for hematocrit interpolation.
BASE_CURVES: dict[float, PowerLawParams] = {
    20.0: PowerLawParams(m=0.69e-2, n=0.71),
    32.5: PowerLawParams(m=1.73e-2, n=0.63),
    45.0: PowerLawParams(m=2.42e-2, n=0.72),
    57.5: PowerLawParams(m=4.19e-2, n=0.64),
    70.0: PowerLawParams(m=5.40e-2, n=0.63),
}

# Constant blood viscosities (Pa.s) commonly assumed in the literature when
# a Newtonian model is used outright.
LITERATURE_NEWTONIAN: tuple[float, ...] = (3.0e-3, 3.5e-3, 4.0e-3, 4.5e-3)


def default_shear_grid(low: float = 12.0, high: float = 123.0,
                       count: int = 12) -> np.ndarray:
    """Log-spaced shear-rate grid used when resampling viscosity curves."""
    if not (0 < low < high):
        raise ValidationError(f"invalid shear range [{low}, {high}]")
    return np.geomspace(low, high, count)


def _sample_arrays(samples: Sequence[ViscositySample]):
    g = np.array([s.shear_rate for s in samples], dtype=float)
    mu = np.array([s.viscosity for s in samples], dtype=float)
    w_given = [s.weight for s in samples]
    order = np.argsort(g)
    g, mu = g[order], mu[order]
    if any(w is not None for w in w_given):
        if any(w is None for w in w_given):
            raise ValidationError("either all samples carry weights or none do")
        w = np.array(w_given, dtype=float)[order]
        if np.any(w < 0):
            raise ValidationError("sample weights must be nonnegative")
    else:
        # Trapezoid spacing of the sorted shear rates, so unevenly sampled
        # curves are not dominated by densely sampled regions.
        w = np.empty_like(g)
        w[1:-1] = 0.5 * (g[2:] - g[:-2])
        w[0] = 0.5 * (g[1] - g[0])
        w[-1] = 0.5 * (g[-1] - g[-2])
    total = w.sum()
    if total <= 0:
        raise ValidationError("sample weights sum to zero")
    return g, mu, w / total


def fit_power_law(samples: Sequence[ViscositySample]) -> PowerLawParams:
    """Fit ``mu = m * g**(n-1)`` to viscometry samples.

    Weighted least squares in linear viscosity space. Weights default to
    the local shear-rate sample spacing; explicit per-sample weights
    override that. The fit is initialized from a log-log linear
    regression and refined with a damped Gauss-Newton iteration.

    Parameters
    ----------
    samples : sequence of ViscositySample
        At least three samples at distinct positive shear rates, with
        positive viscosities.

    Returns
    -------
    PowerLawParams
        Fitted curve with ``r_squared`` and ``rmse`` diagnostics
        (unweighted, linear viscosity space).

    Raises
    ------
    InsufficientDataError
        Fewer than three distinct shear rates.
    FitError
        The Gauss-Newton iteration failed to converge.
    """
    if len(samples) < 3:
        raise InsufficientDataError(
            f"need at least 3 samples to fit, got {len(samples)}")
    if len({s.shear_rate for s in samples}) < 3:
        raise InsufficientDataError("need at least 3 distinct shear rates")
    g, mu, w = _sample_arrays(samples)
    if np.any(g <= 0) or np.any(mu <= 0):
        raise ValidationError("shear rates and viscosities must be positive")

    # Log-log regression: log mu = log m + (n - 1) log g.
    slope, intercept = np.polyfit(np.log(g), np.log(mu), 1)
    m, n = float(np.exp(intercept)), float(1.0 + slope)
    if m <= 0 or n <= 0:
        raise FitError("log-log initialization produced non-positive parameters")

    sw = np.sqrt(w)

    def ssr(m_, n_):
        r = sw * (mu - m_ * g ** (n_ - 1.0))
        return float(r @ r)

    current = ssr(m, n)
    converged = False
    for iteration in range(100):
        basis = g ** (n - 1.0)
        resid = sw * (mu - m * basis)
        jac = np.column_stack([sw * basis, sw * m * basis * np.log(g)])
        step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        scale = 1.0
        for _ in range(40):
            m_new, n_new = m + scale * step[0], n + scale * step[1]
            if m_new > 0 and n_new > 0 and ssr(m_new, n_new) <= current + 1e-300:
                break
            scale *= 0.5
        else:
            converged = True  # no improving step exists: at a minimum
            break
        rel_step = scale * np.linalg.norm(step) / max(np.linalg.norm([m, n]), 1e-30)
        previous, current = current, ssr(m_new, n_new)
        m, n = float(m_new), float(n_new)
        if rel_step < 1e-13 or previous - current < 1e-16 * max(previous, 1e-30):
            converged = True
            break
    if not converged:
        raise FitError("power-law fit did not converge",
                       iterations=iteration + 1, residual=current)

    fitted = m * g ** (n - 1.0)
    ss_res = float(np.sum((mu - fitted) ** 2))
    ss_tot = float(np.sum((mu - mu.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    rmse = float(np.sqrt(ss_res / g.size))
    return PowerLawParams(m=m, n=n, r_squared=r_squared, rmse=rmse)


def apparent_viscosity(params: PowerLawParams, shear_rate,
                       floor: float = SHEAR_RATE_FLOOR):
    """Evaluate the power-law viscosity at one or many shear rates.

    Shear rates below ``floor`` are clamped to it, which regularizes the
    singularity of shear-thinning curves at zero shear.
    """
    if floor <= 0:
        raise ValidationError(f"shear-rate floor must be positive, got {floor}")
    g = np.asarray(shear_rate, dtype=float)
    if np.any(g < 0):
        raise ValidationError("shear rate must be nonnegative")
    mu = params.m * np.maximum(g, floor) ** (params.n - 1.0)
    return float(mu) if np.isscalar(shear_rate) else mu


def newtonian_equivalent(params: PowerLawParams,
                         shear_range: tuple[float, float]) -> float:
    """Newtonian viscosity preserving the mean shear stress over a range.

    Closed form of the shear-rate average of the power-law curve over
    ``shear_range = (g0, g1)``:

    ``mu_eq = m * (g1**n - g0**n) / (n * (g1 - g0))``

    ``g0 = 0`` is allowed for any positive power-law index.
    """
    g0, g1 = map(float, shear_range)
    if not (0 <= g0 < g1):
        raise ValidationError(f"invalid shear range [{g0}, {g1}]")
    return params.m * (g1 ** params.n - g0 ** params.n) / (params.n * (g1 - g0))


def _curve_items(curves) -> list[tuple[float, PowerLawParams]]:
    if isinstance(curves, Mapping):
        items = [(float(h), p) for h, p in curves.items()]
    else:
        items = [(float(h), p) for h, p in curves]
    items.sort(key=lambda hp: hp[0])
    if len(items) < 2:
        raise ValidationError("hematocrit interpolation needs at least two curves")
    hcts = [h for h, _ in items]
    if len(set(hcts)) != len(hcts):
        raise ValidationError("duplicate hematocrit levels in base curves")
    return items


def interpolate_hct(curves, target_hct: float,
                    shear_rates: Iterable[float] | None = None
                    ) -> list[ViscositySample]:
    """Synthesize viscosity samples at an intermediate hematocrit.

    Viscosity is interpolated linearly in hematocrit between the two
    bracketing fitted curves, evaluated at fixed shear rates. Targets
    outside the covered hematocrit range are rejected; blood rheology
    data does not support extrapolation.

    Parameters
    ----------
    curves : mapping or sequence
        ``{hct: PowerLawParams}`` or ``[(hct, PowerLawParams), ...]``.
    target_hct : float
        Hematocrit (percent) inside the covered range.
    shear_rates : iterable of float, optional
        Evaluation grid; defaults to :func:`default_shear_grid`.
    """
    items = _curve_items(curves)
    hcts = np.array([h for h, _ in items])
    target = float(target_hct)
    if target < hcts[0] or target > hcts[-1]:
        raise ExtrapolationError(
            f"hematocrit {target} outside fitted range [{hcts[0]}, {hcts[-1]}]")
    grid = (default_shear_grid() if shear_rates is None
            else np.asarray(list(shear_rates), dtype=float))
    if grid.size < 3 or np.any(grid <= 0):
        raise ValidationError("shear grid must hold at least 3 positive rates")

    hi = int(np.searchsorted(hcts, target, side="left"))
    if hcts[hi] == target:
        lo = hi
        t = 0.0
    else:
        lo = hi - 1
        t = (target - hcts[lo]) / (hcts[hi] - hcts[lo])
    mu_lo = apparent_viscosity(items[lo][1], grid)
    mu_hi = apparent_viscosity(items[hi][1], grid)
    mu = (1.0 - t) * mu_lo + t * mu_hi
    return [ViscositySample(float(g), float(v)) for g, v in zip(grid, mu)]


def fit_for_hct(target_hct: float, curves=None,
                shear_rates: Iterable[float] | None = None) -> PowerLawParams:
    """Power-law curve at an arbitrary hematocrit.

    Interpolates the base curves at fixed shear rates and refits a
    power law to the synthetic samples. At a hematocrit where a base
    curve exists this reproduces that curve.
    """
    samples = interpolate_hct(BASE_CURVES if curves is None else curves,
                              target_hct, shear_rates)
    return fit_power_law(samples)


def save_params(path: str | Path, curves: Mapping[float, PowerLawParams]) -> None:
    """Write fitted parameter sets to JSON, keyed by hematocrit."""
    records = []
    for hct in sorted(curves):
        p = curves[hct]
        records.append({"hct": float(hct), "m": p.m, "n": p.n,
                        "r_squared": p.r_squared, "rmse": p.rmse})
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_params(path: str | Path) -> dict[float, PowerLawParams]:
    """Read parameter sets written by :func:`save_params`."""
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read parameter file {path}: {exc}") from exc
    curves: dict[float, PowerLawParams] = {}
    for rec in records:
        try:
            curves[float(rec["hct"])] = PowerLawParams(
                m=float(rec["m"]), n=float(rec["n"]),
                r_squared=rec.get("r_squared"), rmse=rec.get("rmse"))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed parameter record {rec!r}") from exc
    return curves
