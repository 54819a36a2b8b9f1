"""Primitive 3D brush strokes: unit-space SDFs and scene-space transforms.

Each primitive is a canonical shape in unit space, optionally carrying a few
basic shape parameters, placed into the scene by a translate/rotate/scale
transform.  The scene-space query inversely transforms the point into unit
space and evaluates the unit SDF there; with anisotropic scaling the result
is a pseudo-distance in unit units, so the renderer also receives the
smallest scale factor to convert boundary widths.

All SDF math goes through :mod:`strokefield.autodiff` ops so the same code
runs on plain arrays and on taped variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad

_SQRT3 = float(np.sqrt(3.0))
_NORM_GUARD = 1e-24  # keeps sqrt gradients finite at exact centers


class StrokeParamError(ValueError):
    """Basic shape parameter vector has the wrong length."""


class PrimitiveKind(Enum):
    SPHERE = "sphere"
    ELLIPSOID = "ellipsoid"
    AXIS_ALIGNED_CUBE = "axis_aligned_cube"
    ORIENTED_CUBE = "oriented_cube"
    AXIS_ALIGNED_BOX = "axis_aligned_box"
    ORIENTED_BOX = "oriented_box"
    ROUND_CUBE = "round_cube"
    ROUND_BOX = "round_box"
    LINE = "line"
    TRIPRISM = "triprism"
    OCTAHEDRON = "octahedron"
    TETRAHEDRON = "tetrahedron"


@dataclass(frozen=True)
class KindSpec:
    base: str  # unit SDF family
    n_basic: int  # number of basic shape parameters
    rotation: bool  # stroke uses the rotation component
    anisotropic: bool  # per-axis scale (otherwise a single uniform factor)


# One row per stroke type: which unit shape it uses and which transform
# components apply.  Translation is always used.
KIND_SPECS: dict[PrimitiveKind, KindSpec] = {
    PrimitiveKind.SPHERE: KindSpec("sphere", 0, False, False),
    PrimitiveKind.ELLIPSOID: KindSpec("sphere", 0, True, True),
    PrimitiveKind.AXIS_ALIGNED_CUBE: KindSpec("cube", 0, False, False),
    PrimitiveKind.ORIENTED_CUBE: KindSpec("cube", 0, True, False),
    PrimitiveKind.AXIS_ALIGNED_BOX: KindSpec("cube", 0, False, True),
    PrimitiveKind.ORIENTED_BOX: KindSpec("cube", 0, True, True),
    PrimitiveKind.ROUND_CUBE: KindSpec("round_cube", 1, True, False),
    PrimitiveKind.ROUND_BOX: KindSpec("round_cube", 1, True, True),
    PrimitiveKind.LINE: KindSpec("capsule", 2, True, False),
    PrimitiveKind.TRIPRISM: KindSpec("triprism", 1, True, False),
    PrimitiveKind.OCTAHEDRON: KindSpec("octahedron", 0, True, False),
    PrimitiveKind.TETRAHEDRON: KindSpec("tetrahedron", 0, True, False),
}

# Mid-range defaults used when a stroke is spawned during training.
DEFAULT_BASIC_PARAMS: dict[PrimitiveKind, tuple[float, ...]] = {
    PrimitiveKind.ROUND_CUBE: (0.25,),
    PrimitiveKind.ROUND_BOX: (0.25,),
    PrimitiveKind.LINE: (0.5, 0.25),
    PrimitiveKind.TRIPRISM: (0.5,),
}


@dataclass
class Transform:
    """Scene placement: M = T Rz Ry Rx S applied to unit-space points."""

    translation: np.ndarray
    rotation: np.ndarray  # Euler angles, radians
    scale: np.ndarray  # strictly positive, per-axis

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        s = np.asarray(self.scale, dtype=float)
        if s.ndim == 0:
            s = np.full(3, float(s))
        self.scale = s.reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be strictly positive, got {self.scale}")


@dataclass
class PrimitiveStroke:
    kind: PrimitiveKind
    basic_params: np.ndarray
    transform: Transform
    color: np.ndarray  # RGB in [0, 1]
    density: float

    def __post_init__(self):
        self.basic_params = np.asarray(self.basic_params, dtype=float).reshape(-1)
        spec = KIND_SPECS[self.kind]
        if self.basic_params.size != spec.n_basic:
            raise StrokeParamError(
                f"{self.kind.value} expects {spec.n_basic} basic params, "
                f"got {self.basic_params.size}"
            )
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color components must lie in [0, 1]")
        if self.density <= 0:
            raise ValueError("density must be positive")


# ---------------------------------------------------------------------------
# Unit-space SDFs (component form; works on Var or ndarray)
# ---------------------------------------------------------------------------


def _norm3(x, y, z):
    return ad.sqrt(ad.maximum(x * x + y * y + z * z, _NORM_GUARD))


def _sd_sphere(x, y, z, params):
    return _norm3(x, y, z) - 1.0


def _sd_cube(x, y, z, params):
    qx = ad.absolute(x) - 1.0
    qy = ad.absolute(y) - 1.0
    qz = ad.absolute(z) - 1.0
    inside = ad.minimum(ad.maximum(qx, ad.maximum(qy, qz)), 0.0)
    outside = _norm3(
        ad.maximum(qx, 0.0), ad.maximum(qy, 0.0), ad.maximum(qz, 0.0)
    )
    return inside + outside


def _sd_round_cube(x, y, z, params):
    # unit cube dilated by r (the cube row's q := |p| - 1 substitution)
    (r,) = params
    return _sd_cube(x, y, z, ()) - r


def _sd_octahedron(x, y, z, params):
    l1 = ad.absolute(x) + ad.absolute(y) + ad.absolute(z)
    return (l1 - 1.0) * (1.0 / _SQRT3)


def _sd_tetrahedron(x, y, z, params):
    # verbatim table form; unbounded along (1,-1,0), callers restrict domain
    w = ad.absolute(x + y)
    return (ad.maximum(w - z, w + z) - 1.0) * (1.0 / _SQRT3)


def _sd_triprism(x, y, z, params):
    (h,) = params
    cross = ad.maximum(ad.absolute(x) * (_SQRT3 / 2.0) + z * 0.5, -z) - 0.5
    return ad.maximum(ad.absolute(y) - h, cross)


def _sd_capsule(x, y, z, params):
    # segment along y in [-h, h]; radius tapers linearly from 0 at y=-h
    # to r_delta at y=+h (documented reading of the table row)
    h, r_delta = params
    yc = ad.minimum(ad.maximum(y, -h), h)
    dist = _norm3(x, y - yc, z)
    taper = ad.minimum(ad.maximum((y + h) / (h * 2.0), 0.0), 1.0)
    return dist - r_delta * taper


_UNIT_SDFS = {
    "sphere": _sd_sphere,
    "cube": _sd_cube,
    "round_cube": _sd_round_cube,
    "octahedron": _sd_octahedron,
    "tetrahedron": _sd_tetrahedron,
    "triprism": _sd_triprism,
    "capsule": _sd_capsule,
}


def unit_sdf_components(kind: PrimitiveKind, x, y, z, basic_params):
    """Unit SDF on separate coordinate components (taped or plain)."""
    spec = KIND_SPECS[kind]
    params = tuple(basic_params)
    if len(params) != spec.n_basic:
        raise StrokeParamError(
            f"{kind.value} expects {spec.n_basic} basic params, got {len(params)}"
        )
    return _UNIT_SDFS[spec.base](x, y, z, params)


def unit_sdf(kind: PrimitiveKind, p_hat: np.ndarray, basic_params=()) -> np.ndarray:
    """Signed distance of unit-space points ``p_hat`` (shape (..., 3))."""
    p = np.asarray(p_hat, dtype=float)
    out = unit_sdf_components(kind, p[..., 0], p[..., 1], p[..., 2], basic_params)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def rotation_matrix(rotation: np.ndarray) -> np.ndarray:
    """3x3 matrix for R = Rz Ry Rx with Euler angles (rx, ry, rz)."""
    rx, ry, rz = np.asarray(rotation, dtype=float)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )


def compose_transform(t, r, s) -> tuple[np.ndarray, np.ndarray]:
    """4x4 matrix M = T Rz Ry Rx S and its analytic inverse."""
    t = np.asarray(t, dtype=float).reshape(3)
    r = np.asarray(r, dtype=float).reshape(3)
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        s = np.full(3, float(s))
    s = s.reshape(3)
    if np.any(s <= 0):
        raise ValueError(f"scale must be strictly positive, got {s}")

    rot = rotation_matrix(r)
    m = np.eye(4)
    m[:3, :3] = rot * s[None, :]
    m[:3, 3] = t

    inv = np.eye(4)
    inv[:3, :3] = rot.T / s[:, None]
    inv[:3, 3] = -(rot.T @ t) / s
    return m, inv


def inverse_transform_components(px, py, pz, trans, rot_angles, scale):
    """Map scene points to unit space: S^-1 R^T (p - t), component-wise.

    ``trans``/``rot_angles``/``scale`` are triples of arrays (or Vars) that
    broadcast against the point components, so a whole batch of strokes can
    be transformed in one call.  ``rot_angles`` may be None for unrotated
    strokes.
    """
    tx, ty, tz = trans
    dx = px - tx
    dy = py - ty
    dz = pz - tz
    if rot_angles is not None:
        rx, ry, rz = rot_angles
        cx, sx = ad.cos(rx), ad.sin(rx)
        cy, sy = ad.cos(ry), ad.sin(ry)
        cz, sz = ad.cos(rz), ad.sin(rz)
        # rows of R^T are columns of R = Rz Ry Rx
        ux = cz * cy * dx + sz * cy * dy - sy * dz
        uy = (
            (cz * sy * sx - sz * cx) * dx
            + (sz * sy * sx + cz * cx) * dy
            + cy * sx * dz
        )
        uz = (
            (cz * sy * cx + sz * sx) * dx
            + (sz * sy * cx - cz * sx) * dy
            + cy * cx * dz
        )
    else:
        ux, uy, uz = dx, dy, dz
    sx_, sy_, sz_ = scale
    return ux / sx_, uy / sy_, uz / sz_


def primitive_sdf(stroke: PrimitiveStroke, p: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit-space SDF value at scene points ``p`` plus the scale correction.

    The correction is the smallest scale component; the renderer divides its
    boundary width by it when converting scene-space widths to unit space.
    """
    spec = KIND_SPECS[stroke.kind]
    p = np.asarray(p, dtype=float)
    tr = stroke.transform
    ux, uy, uz = inverse_transform_components(
        p[..., 0],
        p[..., 1],
        p[..., 2],
        tuple(tr.translation),
        tuple(tr.rotation) if spec.rotation else None,
        tuple(tr.scale),
    )
    sdf = unit_sdf_components(stroke.kind, ux, uy, uz, tuple(stroke.basic_params))
    return np.asarray(sdf), float(np.min(tr.scale))


def bounding_radius_unit(kind: PrimitiveKind, basic_params) -> float:
    """Circumscribed radius of the unit shape, or inf if unbounded."""
    spec = KIND_SPECS[kind]
    params = tuple(float(v) for v in basic_params)
    if spec.base == "sphere":
        return 1.0
    if spec.base == "cube":
        return _SQRT3
    if spec.base == "round_cube":
        return _SQRT3 + params[0]
    if spec.base == "octahedron":
        return 1.0
    if spec.base == "triprism":
        return float(np.sqrt(1.0 + params[0] ** 2))
    if spec.base == "capsule":
        return params[0] + params[1]
    return float("inf")  # tetrahedron's verbatim form is unbounded
