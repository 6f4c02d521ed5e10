"""Projection error under multiplicative scale perturbation.

A world point p is perturbed to (1+delta)·p, mapped into a second camera by
a rigid transform, and projected through a pinhole.  The induced horizontal
displacement has the exact rational form

    du = delta * f * (X2*Tz - Tx*Z2) / (Z2 * (Z2 + delta*(Z2 - Tz)))

and, under the boundary assumption X2 ~ c*Z2 with small delta, the
approximation ``du ~ delta * f * (c*Tz - Tx) / Z2`` whose 1/Z2 dependence is
the foreground-erosion effect: nearer points scatter further along the
epipolar direction.  Monte-Carlo dispersion studies quantify it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (BehindCameraError, ContractError, DegenerateGeometryError,
                     GeometryUnsuitableError, NumericError)


@dataclass
class RigidTransform:
    rotation: np.ndarray   # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {self.rotation.shape}")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ContractError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ContractError("rotation determinant is not +1 within 1e-9")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class PinholeCamera:
    focal: float

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError("focal length must be positive")


@dataclass
class ScalePerturbation:
    sigma: float
    delta: Optional[float] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("sigma must be nonnegative")


@dataclass
class EpipolarCoefficients:
    """a = X2 - Tx and b = Z2 - Tz (the rotated point), c = X2/Z2."""
    a_coef: float
    b_coef: float
    c_ratio: float


def transform_point(p: Sequence[float], rt: RigidTransform) -> np.ndarray:
    return rt.rotation @ np.asarray(p, dtype=np.float64).reshape(3) + rt.translation


def project(p2: Sequence[float], cam: PinholeCamera) -> tuple[float, float]:
    p2 = np.asarray(p2, dtype=np.float64).reshape(3)
    if p2[2] <= 0:
        raise BehindCameraError(f"point depth {p2[2]} is not positive")
    return float(cam.focal * p2[0] / p2[2]), float(cam.focal * p2[1] / p2[2])


def epipolar_coefficients(p: Sequence[float], rt: RigidTransform) -> EpipolarCoefficients:
    """Coefficients of the perturbed projection, taken from the unperturbed point."""
    p2 = transform_point(p, rt)
    rp = rt.rotation @ np.asarray(p, dtype=np.float64).reshape(3)
    if p2[2] <= 0:
        raise BehindCameraError("second-view depth is not positive")
    return EpipolarCoefficients(a_coef=float(rp[0]), b_coef=float(rp[2]),
                                c_ratio=float(p2[0] / p2[2]))


def delta_u_bruteforce(p: Sequence[float], rt: RigidTransform, f: float,
                       delta: float) -> float:
    """u((1+delta)p) - u(p), computed by two plain projections (oracle path)."""
    cam = PinholeCamera(f)
    u0, _ = project(transform_point(p, rt), cam)
    u1, _ = project(transform_point((1.0 + delta) * np.asarray(p, dtype=np.float64), rt), cam)
    return u1 - u0


def delta_u_closed_form(p: Sequence[float], rt: RigidTransform, f: float,
                        delta: float) -> float:
    """Exact rational form of the displacement; equals the brute-force path."""
    p2 = transform_point(p, rt)
    x2, z2 = p2[0], p2[2]
    tx, tz = rt.translation[0], rt.translation[2]
    denom = z2 * (z2 + delta * (z2 - tz))
    if denom == 0.0:
        raise DegenerateGeometryError("zero denominator in closed-form displacement")
    return float(delta * f * (x2 * tz - tx * z2) / denom)


def delta_u_approx(coeffs: EpipolarCoefficients, rt: RigidTransform, f: float,
                   delta: float, z2: float) -> float:
    """Small-delta, constant-lateral-ratio approximation with 1/Z2 decay."""
    if z2 <= 0:
        raise ContractError("z2 must be positive")
    tx, tz = rt.translation[0], rt.translation[2]
    return float(delta * f * (coeffs.c_ratio * tz - tx) / z2)


def dispersion_mc(p: Sequence[float], rt: RigidTransform, f: float, sigma: float,
                  n_samples: int, seed: int) -> dict:
    """Sample statistics of the displacement under delta ~ N(0, sigma^2).

    Samples whose perturbed depth is non-positive are rejected and counted;
    more than 50% rejections aborts (the geometry is unsuitable for the
    perturbation scale).
    """
    if n_samples < 2:
        raise ContractError("dispersion_mc needs n_samples >= 2")
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    p2 = transform_point(p, rt)
    x2, z2 = p2[0], p2[2]
    if z2 <= 0:
        raise BehindCameraError("unperturbed point is behind the camera")
    tx, tz = rt.translation[0], rt.translation[2]
    rng = np.random.default_rng(seed)
    deltas = rng.normal(0.0, sigma, size=n_samples) if sigma > 0 else np.zeros(n_samples)
    z2_pert = z2 + deltas * (z2 - tz)
    keep = z2_pert > 0
    n_rejected = int(n_samples - keep.sum())
    if n_rejected > 0.5 * n_samples:
        raise GeometryUnsuitableError(
            f"{n_rejected}/{n_samples} samples rejected (non-positive perturbed depth)")
    d = deltas[keep]
    du = d * f * (x2 * tz - tx * z2) / (z2 * (z2 + d * (z2 - tz)))
    if not np.isfinite(du).all():
        raise NumericError("non-finite displacement samples")
    return {
        "std_delta_u": float(du.std(ddof=1)),
        "mean_delta_u": float(du.mean()),
        "n_used": int(keep.sum()),
        "n_rejected": n_rejected,
    }


def fit_log_slope(depths: Sequence[float], stds: Sequence[float]) -> float:
    """Least-squares slope of log(std) against log(depth)."""
    depths = np.asarray(depths, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if (stds <= 0).any():
        raise DegenerateGeometryError("non-positive dispersion at some depth")
    slope, _ = np.polyfit(np.log(depths), np.log(stds), 1)
    return float(slope)


def depth_scaling_fit(depths: Sequence[float], c_ratio: float, rt: RigidTransform,
                      f: float, sigma: float, n_samples: int, seed: int) -> dict:
    """Monte-Carlo estimate of the dispersion-vs-depth power law.

    For each depth Z2 a point with lateral ratio X2 = c_ratio * Z2 is
    constructed in the second view, pulled back through the transform, and
    its dispersion is sampled; the fitted log-log slope is near -1 under the
    inverse-depth law.
    """
    depths = [float(z) for z in depths]
    if len(set(depths)) < 3:
        raise ContractError("need at least 3 distinct depths")
    if max(depths) / min(depths) < 4.0:
        raise ContractError("depth range must span at least 4x")
    stds = []
    rows = []
    for i, z2 in enumerate(depths):
        p2 = np.array([c_ratio * z2, 0.0, z2])
        p = rt.rotation.T @ (p2 - rt.translation)
        stats = dispersion_mc(p, rt, f, sigma, n_samples, seed + i)
        stds.append(stats["std_delta_u"])
        rows.append({"z2": z2, "sigma": sigma, "n": n_samples,
                     "std": stats["std_delta_u"], "mean": stats["mean_delta_u"],
                     "rejected": stats["n_rejected"]})
    return {"exponent": fit_log_slope(depths, stds), "rows": rows}


def exactness_sweep(n_cases: int = 10_000, seed: int = 0, tol: float = 1e-12) -> dict:
    """Compare the closed form against brute force on seeded valid geometries.

    Returns the worst relative gap over ``n_cases`` random (p, R, T, f,
    delta) with delta in (-0.2, 0.2); geometries whose depths are invalid are
    re-drawn.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_cases:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-0.4, 0.4)
        rot = _axis_angle(axis, angle)
        rt = RigidTransform(rot, rng.uniform(-0.5, 0.5, size=3))
        p = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(1.0, 8.0)])
        f = rng.uniform(0.5, 4.0)
        delta = rng.uniform(-0.2, 0.2)
        p2 = transform_point(p, rt)
        if p2[2] <= 1e-3 or p2[2] + delta * (p2[2] - rt.translation[2]) <= 1e-3:
            continue
        bf = delta_u_bruteforce(p, rt, f, delta)
        cf = delta_u_closed_form(p, rt, f, delta)
        gap = abs(cf - bf) / max(abs(cf), abs(bf), 1e-12)
        worst = max(worst, gap)
        checked += 1
    return {"worst_relative_gap": worst, "n_cases": checked, "passed": worst <= tol}


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    kx, ky, kz = axis
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)
