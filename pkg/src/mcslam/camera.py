"""Generic central fisheye camera with a polynomial (Scaramuzza-style) model.

Back-projection: a pixel ``m`` is mapped to sensor coordinates
``(u', v') = A^-1 (m - pp)`` and lifted to the ray ``(u', v', f(rho))`` with
``f(rho) = a0 + a1 rho + a2 rho^2 + a3 rho^3 + a4 rho^4`` (``a1 = 0``,
``a0 > 0`` so the optical axis is +z). Forward projection uses a fitted
inverse polynomial ``rho = g(theta)`` of the angle between the ray and the
optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import CalibrationError, DegeneratePoint, OutsideBoundary

N_LEVELS = 8
SCALE_FACTOR = 1.2


@dataclass(frozen=True)
class ImagePoint:
    u: float
    v: float
    octave: int = 0

    def __post_init__(self):
        if not 0 <= self.octave < N_LEVELS:
            raise ValueError(f"octave {self.octave} outside [0, {N_LEVELS})")

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


def _horner(coeffs: tuple, x: np.ndarray) -> np.ndarray:
    """Evaluate an ascending-order polynomial; lighter than polyval on small arrays."""
    out = np.full_like(x, coeffs[-1], dtype=float)
    for c in coeffs[-2::-1]:
        out *= x
        out += c
    return out


def _fit_inverse_poly(forward: np.ndarray, rho_max: float, tol: float = 0.01):
    rho = np.linspace(0.0, rho_max, 4000)
    theta = np.arctan2(rho, P.polyval(rho, forward))
    for deg in range(6, 13):
        V = np.stack([theta**k for k in range(1, deg + 1)], axis=1)
        coef, *_ = np.linalg.lstsq(V, rho, rcond=None)
        if np.abs(V @ coef - rho).max() < tol:
            return np.concatenate([[0.0], coef])
    raise CalibrationError(f"inverse polynomial fit did not reach {tol} px with degree <= 12")


@dataclass(frozen=True, eq=False)
class GenericCamera:
    forward_poly: np.ndarray
    principal_point: np.ndarray
    image_size: tuple[int, int]
    mirror_radius: float
    affine: np.ndarray = field(default_factory=lambda: np.eye(2))
    inverse_poly: np.ndarray | None = None

    def __post_init__(self):
        fwd = np.array(self.forward_poly, dtype=float).ravel()
        if fwd.size < 2 or fwd[0] <= 0:
            raise CalibrationError("forward_poly needs a0 > 0")
        A = np.array(self.affine, dtype=float).reshape(2, 2)
        if abs(A[1, 1] - 1.0) > 1e-12:
            raise CalibrationError("affine must have the form [[c, d], [e, 1]]")
        pp = np.array(self.principal_point, dtype=float).reshape(2)
        R = float(self.mirror_radius)
        if R <= 0:
            raise CalibrationError("mirror_radius must be positive")
        # Ray angle must strictly increase with image radius.
        rho = np.linspace(0.0, R, 2000)
        theta = np.arctan2(rho, P.polyval(rho, fwd))
        if np.any(np.diff(theta) <= 0):
            raise CalibrationError("ray angle is not monotonic over [0, mirror_radius]")
        inv = (_fit_inverse_poly(fwd, R) if self.inverse_poly is None
               else np.array(self.inverse_poly, dtype=float).ravel())
        for arr in (fwd, A, pp, inv):
            arr.flags.writeable = False
        object.__setattr__(self, "forward_poly", fwd)
        object.__setattr__(self, "affine", A)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "inverse_poly", inv)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        object.__setattr__(self, "mirror_radius", R)
        object.__setattr__(self, "_affine_inv", np.linalg.inv(A))
        object.__setattr__(self, "_dfwd", P.polyder(fwd))
        object.__setattr__(self, "_fwd_t", tuple(float(c) for c in fwd))
        object.__setattr__(self, "_dfwd_t", tuple(float(c) for c in P.polyder(fwd)))
        object.__setattr__(self, "_inv_t", tuple(float(c) for c in inv))
        object.__setattr__(self, "theta_max", float(theta[-1]))
        fit = float(np.abs(P.polyval(theta, inv) - rho).max())
        if fit > 0.05:
            raise CalibrationError(f"inverse polynomial misfits the forward model by {fit:.4f} px")
        resid = self.roundtrip_residual()
        if resid > 0.05:
            raise CalibrationError(f"project/unproject roundtrip residual {resid:.4f} px > 0.05 px")

    # batched core ---------------------------------------------------------

    def _rho(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Image radius for ray angle ``theta`` and its derivative.

        The inverse polynomial gives a starting value that Newton steps on the
        forward model refine, so projection inverts back-projection exactly.
        """
        fwd, dfwd = self._fwd_t, self._dfwd_t
        rho = _horner(self._inv_t, theta)
        # two Newton steps reach machine precision from the inverse-poly start
        for _ in range(2):
            f = _horner(fwd, rho)
            den = f - rho * _horner(dfwd, rho)
            n2 = rho * rho + f * f
            rho = rho - (np.arctan2(rho, f) - theta) * n2 / den
        f = _horner(fwd, rho)
        drho = (rho * rho + f * f) / (f - rho * _horner(dfwd, rho))
        return rho, drho

    def project_points(self, X: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to (N, 2) pixels, no boundary checks."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.hypot(X[:, 0], X[:, 1])
        theta = np.arctan2(r, X[:, 2])
        rho, _ = self._rho(theta)
        with np.errstate(invalid="ignore", divide="ignore"):
            k = np.where(r > 0, rho / np.where(r > 0, r, 1.0), 0.0)
        sensor = X[:, :2] * k[:, None]
        return sensor @ self.affine.T + self.principal_point

    def ray_angles(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.arctan2(np.hypot(X[:, 0], X[:, 1]), X[:, 2])

    def project_with_jacobian(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixels (N, 2) and d pixel / d point (N, 2, 3)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x, y, z = X[:, 0], X[:, 1], X[:, 2]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        n2 = r2 + z * z
        theta = np.arctan2(r, z)
        rho, drho = self._rho(theta)
        N = X.shape[0]
        Js = np.zeros((N, 2, 3))
        ok = r > 1e-12 * np.sqrt(n2)
        k = np.zeros(N)
        if np.any(ok):
            xo, yo, zo, ro, no2 = x[ok], y[ok], z[ok], r[ok], n2[ok]
            ko = rho[ok] / ro
            k[ok] = ko
            # d theta / d(x, y, z)
            dth = np.stack([zo * xo / (ro * no2), zo * yo / (ro * no2), -ro / no2], axis=1)
            # u' = k x with k = g(theta)/r
            dr = np.stack([xo / ro, yo / ro, np.zeros_like(ro)], axis=1)
            dk = (drho[ok][:, None] * dth - ko[:, None] * dr) / ro[:, None]
            J = np.zeros((ok.sum(), 2, 3))
            J[:, 0, :] = xo[:, None] * dk
            J[:, 1, :] = yo[:, None] * dk
            J[:, 0, 0] += ko
            J[:, 1, 1] += ko
            Js[ok] = J
        if np.any(~ok):
            # on-axis limit: u' = g'(0) x / z
            b1 = self.forward_poly[0]
            zz = z[~ok]
            Js[~ok, 0, 0] = b1 / zz
            Js[~ok, 1, 1] = b1 / zz
            Js[~ok, 0, 2] = -b1 * x[~ok] / zz**2
            Js[~ok, 1, 2] = -b1 * y[~ok] / zz**2
            k[~ok] = b1 / zz
        uv = (X[:, :2] * k[:, None]) @ self.affine.T + self.principal_point
        return uv, self.affine @ Js

    def unproject_points(self, uv: np.ndarray) -> np.ndarray:
        """Unit bearings (N, 3) for (N, 2) pixels; no boundary checks."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        s = (uv - self.principal_point) @ self._affine_inv.T
        rho = np.hypot(s[:, 0], s[:, 1])
        ray = np.column_stack([s, _horner(self._fwd_t, rho)])
        return ray / np.linalg.norm(ray, axis=1, keepdims=True)

    def in_boundary(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        w, h = self.image_size
        d = np.hypot(uv[:, 0] - self.principal_point[0], uv[:, 1] - self.principal_point[1])
        return ((d <= self.mirror_radius) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1))

    # single-point API -----------------------------------------------------

    def project(self, p_cam, octave: int = 0) -> ImagePoint:
        p = np.asarray(p_cam, dtype=float).reshape(3)
        if np.linalg.norm(p) < 1e-12:
            raise DegeneratePoint("point coincides with the projection center")
        u, v = self.project_points(p[None])[0]
        return ImagePoint(float(u), float(v), octave)

    def unproject(self, m) -> np.ndarray:
        uv = m.uv if isinstance(m, ImagePoint) else np.asarray(m, dtype=float)
        if np.linalg.norm(uv - self.principal_point) > self.mirror_radius + 1e-9:
            raise OutsideBoundary(f"pixel {uv.tolist()} lies outside the mirror radius")
        return self.unproject_points(uv[None])[0]

    def in_mirror_boundary(self, m) -> bool:
        uv = m.uv if isinstance(m, ImagePoint) else np.asarray(m, dtype=float)
        return bool(self.in_boundary(uv[None])[0])

    def roundtrip_residual(self, n: int = 50) -> float:
        """Max |project(unproject(m)) - m| over an n x n grid inside the mirror."""
        w, h = self.image_size
        g = np.stack(np.meshgrid(np.linspace(0, w - 1, n), np.linspace(0, h - 1, n)), -1).reshape(-1, 2)
        g = g[self.in_boundary(g)]
        return float(np.abs(self.project_points(self.unproject_points(g)) - g).max())

    def to_dict(self) -> dict:
        return {
            "forward_poly": self.forward_poly.tolist(),
            "inverse_poly": self.inverse_poly.tolist(),
            "principal_point": self.principal_point.tolist(),
            "affine": self.affine.tolist(),
            "image_size": list(self.image_size),
            "mirror_radius": self.mirror_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenericCamera":
        try:
            return cls(forward_poly=d["forward_poly"], principal_point=d["principal_point"],
                       image_size=tuple(d["image_size"]), mirror_radius=d["mirror_radius"],
                       affine=d.get("affine", np.eye(2)), inverse_poly=d.get("inverse_poly"))
        except KeyError as exc:
            raise CalibrationError(f"calibration is missing field {exc}") from None


def _fisheye_poly(a0: float, edge_radius: float, a3: float = 0.0, a4: float = 0.0) -> np.ndarray:
    """Forward polynomial with ``f(edge_radius) = 0`` (ray at 90 degrees there)."""
    a2 = -(a0 + a3 * edge_radius**3 + a4 * edge_radius**4) / edge_radius**2
    return np.array([a0, 0.0, a2, a3, a4])


def camera_c1() -> GenericCamera:
    """Canonical 800x800 fisheye with a 180 degree field of view."""
    return GenericCamera(forward_poly=_fisheye_poly(250.0, 390.0, a3=1e-7, a4=-2e-10),
                         principal_point=(400.0, 400.0), image_size=(800, 800),
                         mirror_radius=390.0)


def radius_for_angle(forward_poly: np.ndarray, theta: float, rho_max: float) -> float:
    """Image radius whose ray angle equals ``theta`` (bisection)."""
    lo, hi = 0.0, rho_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.arctan2(mid, P.polyval(mid, forward_poly)) < theta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
