"""Six-parameter affine motion models and the dense flow they induce.

Coordinates: x is the column, y the row, origin at the top-left pixel.  A
flow field holds the displacement over the whole (normalized) time window.
"""
from dataclasses import dataclass

import numpy as np

from .events import SensorGeometry
from .tensorio import load_tensor, save_tensor


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Row-major coefficients a1..a6 of the 2x3 matrix [[a1, a2, a3], [a4, a5, a6]]."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64).reshape(6)
        if not np.all(np.isfinite(c)):
            raise ValueError("affine coefficients must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(6))

    @classmethod
    def translation(cls, dx, dy):
        return cls([dx, 0.0, 0.0, dy, 0.0, 0.0])

    @property
    def matrix(self):
        return self.coeffs.reshape(2, 3)

    def __add__(self, other):
        return AffineParams(self.coeffs + other.coeffs)

    def __neg__(self):
        return AffineParams(-self.coeffs)

    def __eq__(self, other):
        return isinstance(other, AffineParams) and np.array_equal(self.coeffs, other.coeffs)

    def __repr__(self):
        return "AffineParams(" + ", ".join(f"{c:.6g}" for c in self.coeffs) + ")"

    def tolist(self):
        return [float(c) for c in self.coeffs]


@dataclass(frozen=True, eq=False)
class FlowField:
    geometry: SensorGeometry
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("u", "v"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != self.geometry.shape:
                raise ValueError(f"flow plane {name} has shape {a.shape}, expected {self.geometry.shape}")
            object.__setattr__(self, name, a)

    @classmethod
    def zeros(cls, geometry):
        return cls(geometry, np.zeros(geometry.shape), np.zeros(geometry.shape))

    @classmethod
    def from_planes(cls, planes):
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 2:
            raise ValueError(f"expected flow planes of shape (2, H, W), got {planes.shape}")
        return cls(SensorGeometry(planes.shape[2], planes.shape[1]), planes[0], planes[1])

    def planes(self):
        return np.stack([self.u, self.v])

    def magnitude(self):
        return np.hypot(self.u, self.v)


def pixel_grid(geometry):
    """Integer (x, y) coordinate images as float64, shape (H, W) each."""
    ys, xs = np.mgrid[0:geometry.height, 0:geometry.width]
    return xs.astype(np.float64), ys.astype(np.float64)


def affine_flow(params: AffineParams, geometry: SensorGeometry) -> FlowField:
    a1, a2, a3, a4, a5, a6 = params.coeffs
    xs, ys = pixel_grid(geometry)
    return FlowField(geometry, a1 + a2 * xs + a3 * ys, a4 + a5 * xs + a6 * ys)


def affine_flow_adjoint(grad_u, grad_v):
    """Pull a per-pixel flow gradient back onto the six coefficients."""
    H, W = grad_u.shape
    ys, xs = np.mgrid[0:H, 0:W]
    return np.array([grad_u.sum(), (grad_u * xs).sum(), (grad_u * ys).sum(),
                     grad_v.sum(), (grad_v * xs).sum(), (grad_v * ys).sum()])


def flow_linearity_check(a: AffineParams, b: AffineParams, geometry, tol=1e-12) -> bool:
    fa, fb, fab = affine_flow(a, geometry), affine_flow(b, geometry), affine_flow(a + b, geometry)
    return bool(np.all(np.abs(fab.u - fa.u - fb.u) <= tol) and np.all(np.abs(fab.v - fa.v - fb.v) <= tol))


def save_flow(flow: FlowField, path):
    save_tensor(flow.planes(), path)


def load_flow(path) -> FlowField:
    return FlowField.from_planes(load_tensor(path))
