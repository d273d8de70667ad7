"""
BMO reference frame.

Fits the best-fit plane and ellipse to the Bruch's membrane opening points
and builds the normalized ONH coordinate system used by every geometric
measurement: origin at the BMO ellipse centre, x' nasal, y' superior and z'
along the inverted BMO normal so depths are positive posteriorly.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.config import CIRCLE_FALLBACK_TOL, COLLINEAR_EIGEN_RATIO
from src.errors import OnhError
from src.volume_io import LEFT, LabelVolume

# Relative RMS residual beyond which the circle fallback is rejected
CIRCLE_FALLBACK_MAX_RESIDUAL = 0.05


@dataclass(frozen=True)
class Ellipse:
    """Best-fit BMO ellipse, expressed in the plane basis (e1, e2)."""
    center: np.ndarray  # 3D point, um
    center_2d: Tuple[float, float]  # (u, v) in the plane basis, relative to the plane centroid
    a: float  # semi-major, um
    b: float  # semi-minor, um
    angle: float  # radians, major axis from e1 towards e2, in (-pi/2, pi/2]


@dataclass(frozen=True)
class OnhFrame:
    bmo_center: np.ndarray
    bmo_normal: np.ndarray  # anterior-pointing unit normal
    axis_nasal: np.ndarray
    axis_superior: np.ndarray
    bmo_radius: float  # um, sqrt(a*b)
    bmo_area: float  # mm^2
    ellipse: Ellipse
    laterality: str

    def to_dict(self) -> dict:
        return {
            "bmo_center_um": self.bmo_center.tolist(),
            "bmo_normal": self.bmo_normal.tolist(),
            "axis_nasal": self.axis_nasal.tolist(),
            "axis_superior": self.axis_superior.tolist(),
            "bmo_radius_um": self.bmo_radius,
            "bmo_area_mm2": self.bmo_area,
            "ellipse": {
                "a_um": self.ellipse.a,
                "b_um": self.ellipse.b,
                "angle_rad": self.ellipse.angle,
            },
            "laterality": self.laterality,
        }


def fit_bmo_plane(bmo_points) -> Tuple[np.ndarray, np.ndarray]:
    """
    Total least squares plane through the BMO points.

    Args:
        bmo_points: (N, 3) array-like in um, N >= 3

    Returns:
        (centroid, normal) with the normal oriented towards decreasing scan z

    Raises:
        OnhError: DEGENERATE_COLLINEAR for fewer than 3 points or points on a line
    """
    points = np.asarray(bmo_points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise OnhError("frame", "DEGENERATE_COLLINEAR",
                       "plane fit needs at least 3 points", field="bmo_points")
    centroid = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - centroid, full_matrices=False)
    eig = np.zeros(3)
    eig[:len(s)] = s ** 2
    if eig[1] < COLLINEAR_EIGEN_RATIO * eig[0] and eig[2] < COLLINEAR_EIGEN_RATIO * eig[0]:
        raise OnhError("frame", "DEGENERATE_COLLINEAR",
                       "BMO points are collinear", field="bmo_points")
    normal = vt[2] if vt.shape[0] == 3 else np.cross(vt[0], vt[1])
    normal = normal / np.linalg.norm(normal)
    if normal[2] > 0:
        normal = -normal
    return centroid, normal


def plane_basis(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    In-plane basis (e1, e2) with e1 the projection of scan x.

    (e1, e2, normal) is right-handed, so for an untilted plane e2 = -scan y.
    """
    normal = np.asarray(normal, dtype=float)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(normal @ ref) > 0.99:
        ref = np.array([0.0, -1.0, 0.0])
    e1 = ref - (ref @ normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def _direct_conic_fit(u: np.ndarray, v: np.ndarray):
    """Ellipse-specific direct least squares conic (Halir-Flusser); None if no ellipse."""
    d1 = np.column_stack((u * u, u * v, v * v))
    d2 = np.column_stack((u, v, np.ones_like(u)))
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        return None
    m = s1 + s2 @ t
    m = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])  # premultiply by inv(C1)
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4.0 * evecs[0] * evecs[2] - evecs[1] ** 2
    candidates = np.flatnonzero(cond > 0)
    if len(candidates) == 0:
        return None
    # smallest residual among elliptical eigenvectors
    best = candidates[np.argmin(np.abs(np.real(evals[candidates])))]
    a1 = evecs[:, best]
    return np.concatenate((a1, t @ a1))


def _general_to_standard(coef):
    """Centre, semi-axes and major-axis angle of A u^2 + B uv + C v^2 + D u + E v + F = 0."""
    A, B, C, D, E, F = [float(c) for c in coef]
    q = np.array([[A, B / 2], [B / 2, C]])
    if np.linalg.det(q) <= 0:
        return None
    u0, v0 = np.linalg.solve(q, [-D / 2, -E / 2])
    f0 = F + (D * u0 + E * v0) / 2
    evals, evecs = np.linalg.eigh(q)
    if f0 * evals[0] >= 0 or f0 * evals[1] >= 0:
        return None
    # eigh sorts ascending: the smaller eigenvalue belongs to the major axis
    if evals[0] < 0:
        evals, evecs = -evals[::-1], evecs[:, ::-1]
        f0 = -f0
    a = math.sqrt(-f0 / evals[0])
    b = math.sqrt(-f0 / evals[1])
    angle = math.atan2(evecs[1, 0], evecs[0, 0])
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    return u0, v0, a, b, angle


def _circle_fit(u: np.ndarray, v: np.ndarray):
    """Algebraic circle fit; returns (u0, v0, r, relative rms residual)."""
    design = np.column_stack((u, v, np.ones_like(u)))
    rhs = u * u + v * v
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    u0, v0 = sol[0] / 2, sol[1] / 2
    r2 = sol[2] + u0 * u0 + v0 * v0
    if r2 <= 0:
        return None
    r = math.sqrt(r2)
    resid = np.sqrt(np.mean((np.hypot(u - u0, v - v0) - r) ** 2)) / r
    return u0, v0, r, resid


def fit_bmo_ellipse(bmo_points, plane) -> Ellipse:
    """
    Direct least squares ellipse fit to BMO points projected on their plane.

    Coordinates are centred and scaled before the conic fit; a circle fit is
    used when the constrained fit has no elliptical solution but the points
    are close to a circle.

    Args:
        bmo_points: (N, 3) array-like in um, N >= 5
        plane: (centroid, normal) from fit_bmo_plane

    Returns:
        Ellipse with a >= b > 0

    Raises:
        OnhError: DEGENERATE_CONIC
    """
    points = np.asarray(bmo_points, dtype=float)
    if len(points) < 5:
        raise OnhError("frame", "DEGENERATE_CONIC",
                       f"ellipse fit needs at least 5 points, got {len(points)}", field="bmo_points")
    centroid, normal = plane
    e1, e2 = plane_basis(normal)
    rel = points - centroid
    u = rel @ e1
    v = rel @ e2
    mu, mv = u.mean(), v.mean()
    scale = float(np.sqrt(np.mean((u - mu) ** 2 + (v - mv) ** 2)))
    if scale <= 0:
        raise OnhError("frame", "DEGENERATE_CONIC", "BMO points coincide", field="bmo_points")
    us, vs = (u - mu) / scale, (v - mv) / scale

    standard = None
    coef = _direct_conic_fit(us, vs)
    if coef is not None:
        standard = _general_to_standard(coef)
    if standard is not None:
        u0, v0, a, b, angle = standard
    else:
        circle = _circle_fit(us, vs)
        if circle is None or circle[3] > CIRCLE_FALLBACK_MAX_RESIDUAL:
            raise OnhError("frame", "DEGENERATE_CONIC",
                           "no elliptical solution for the BMO points", field="bmo_points")
        u0, v0, a, _ = circle
        b, angle = a, 0.0

    if not (math.isfinite(a) and math.isfinite(b)) or b <= CIRCLE_FALLBACK_TOL:
        raise OnhError("frame", "DEGENERATE_CONIC",
                       "ellipse axes are not finite", field="bmo_points")
    cu = mu + u0 * scale
    cv = mv + v0 * scale
    return Ellipse(
        center=centroid + cu * e1 + cv * e2,
        center_2d=(float(cu), float(cv)),
        a=float(a * scale),
        b=float(b * scale),
        angle=float(angle),
    )


def build_frame(volume: LabelVolume) -> OnhFrame:
    """
    Normalized ONH frame of a volume.

    For LEFT eyes the nasal axis is mirrored so octants use the right-eye
    convention; the resulting basis is then a reflection of the right-eye one.

    Args:
        volume: Valid LabelVolume

    Returns:
        OnhFrame

    Raises:
        OnhError: DEGENERATE_COLLINEAR or DEGENERATE_CONIC from the fits
    """
    plane = fit_bmo_plane(volume.bmo_points)
    ellipse = fit_bmo_ellipse(volume.bmo_points, plane)
    _, normal = plane
    e1, e2 = plane_basis(normal)
    nasal = -e1 if volume.laterality == LEFT else e1
    return OnhFrame(
        bmo_center=ellipse.center,
        bmo_normal=normal,
        axis_nasal=nasal,
        axis_superior=e2,
        bmo_radius=math.sqrt(ellipse.a * ellipse.b),
        bmo_area=math.pi * ellipse.a * ellipse.b / 1e6,
        ellipse=ellipse,
        laterality=volume.laterality,
    )


def to_normalized(points, frame: OnhFrame) -> np.ndarray:
    """
    Map volume-frame points (um) to normalized ONH coordinates (um).

    Accepts a single point of shape (3,) or an (N, 3) array.
    """
    pts = np.asarray(points, dtype=float)
    rel = pts - frame.bmo_center
    basis = np.stack([frame.axis_nasal, frame.axis_superior, -frame.bmo_normal])
    return rel @ basis.T


def from_normalized(points, frame: OnhFrame) -> np.ndarray:
    """Inverse of to_normalized."""
    pts = np.asarray(points, dtype=float)
    basis = np.stack([frame.axis_nasal, frame.axis_superior, -frame.bmo_normal])
    return pts @ basis + frame.bmo_center


def ellipse_contains(x: np.ndarray, y: np.ndarray, frame: OnhFrame) -> np.ndarray:
    """True where normalized in-plane coordinates fall inside the BMO ellipse."""
    ell = frame.ellipse
    # The ellipse angle is measured in the unmirrored (e1, e2) basis.
    sign = -1.0 if frame.laterality == LEFT else 1.0
    u = sign * np.asarray(x, dtype=float)
    v = np.asarray(y, dtype=float)
    c, s = math.cos(ell.angle), math.sin(ell.angle)
    p = u * c + v * s
    q = -u * s + v * c
    return (p / ell.a) ** 2 + (q / ell.b) ** 2 < 1.0
