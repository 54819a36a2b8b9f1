"""Trainable error field: a positive voxel grid that locates bad regions.

The grid stores raw (unconstrained) values; queries interpolate the raw
values trilinearly between voxel centers and pass the result through
softplus, so e(x) >= 0 everywhere.  Outside the bounding box the field is
zero.  Rendering a ray through it uses the opacity form of the quadrature,
so E(r) in [0, 1).

New strokes are spawned at the highest-error location among M uniform
proposals; strokes whose density collapsed are recycled the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .geometry import (
    DEFAULT_BASIC_PARAMS,
    KIND_SPECS,
    PrimitiveKind,
    PrimitiveStroke,
    Transform,
)
from .splines import CONTROL_POINT_COUNT, SplineKind, SplineStroke

DEFAULT_RESOLUTION = (64, 64, 64)
DEFAULT_BBOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


@dataclass
class ErrorGrid:
    resolution: tuple[int, int, int] = DEFAULT_RESOLUTION
    bbox: np.ndarray = dc_field(default_factory=lambda: DEFAULT_BBOX.copy())
    values: np.ndarray | None = None  # raw, exposed through softplus
    amplification: float = 10.0  # k > 1, penalty factor for underestimates

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.bbox = np.asarray(self.bbox, dtype=float).reshape(2, 3)
        if self.values is None:
            # softplus(-4) ~ 0.018: start close to zero error everywhere
            self.values = np.full(self.resolution, -4.0)
        else:
            self.values = np.asarray(self.values, dtype=float).reshape(self.resolution)
        if self.amplification <= 1:
            raise ValueError("amplification k must be > 1")


def trilinear_weights(grid: ErrorGrid, x: np.ndarray):
    """Corner indices, weights, and inside-mask for trilinear interpolation.

    Returns (idx (P, 8) flat voxel indices, w (P, 8), inside (P,)).
    """
    pts = np.asarray(x).reshape(-1, 3)
    if pts.dtype not in (np.float32, np.float64):
        pts = pts.astype(np.float64)
    res = np.asarray(grid.resolution)
    lo = grid.bbox[0].astype(pts.dtype)
    hi = grid.bbox[1].astype(pts.dtype)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    cell = (hi - lo) / res
    u = (pts - lo) / cell - 0.5  # voxel-center coordinates
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    frac = np.clip(u - i0, 0.0, 1.0)  # clamped at the boundary layer

    nx, ny, nz = grid.resolution
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = np.array(
        [
            0,
            1,
            nz,
            nz + 1,
            ny * nz,
            ny * nz + 1,
            ny * nz + nz,
            ny * nz + nz + 1,
        ]
    )
    idx = base[:, None] + offs[None, :]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    w = np.stack(
        [
            (1 - fx) * (1 - fy) * (1 - fz),
            (1 - fx) * (1 - fy) * fz,
            (1 - fx) * fy * (1 - fz),
            (1 - fx) * fy * fz,
            fx * (1 - fy) * (1 - fz),
            fx * (1 - fy) * fz,
            fx * fy * (1 - fz),
            fx * fy * fz,
        ],
        axis=-1,
    )
    return idx, w, inside


def sample_error_raw(raw_flat, idx, w, inside):
    """e(x) from flat raw values (ndarray or Var) and precomputed weights."""
    corners = ad.gather(raw_flat, idx)
    interp = ad.asum(corners * w, axis=1)
    e = ad.softplus(interp)
    return ad.where(inside, e, np.zeros(inside.shape[0], dtype=w.dtype))


def sample_error(grid: ErrorGrid, x: np.ndarray) -> np.ndarray:
    """Nonnegative error value at scene points ``x`` (0 outside the bbox)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    idx, w, inside = trilinear_weights(grid, x)
    e = sample_error_raw(grid.values.reshape(-1), idx, w, inside)
    return float(e[0]) if single else np.asarray(e)


def render_error_samples(grid_or_raw, pts, widths_flat, n_rays, n_samples):
    """E(r) for pre-flattened ray samples; shared by tape and numpy paths."""
    if isinstance(grid_or_raw, ErrorGrid):
        idx, w, inside = trilinear_weights(grid_or_raw, pts)
        raw = grid_or_raw.values.reshape(-1)
    else:
        raw, (idx, w, inside) = grid_or_raw
    e = sample_error_raw(raw, idx, w, inside)
    optical = ad.reshape(e * widths_flat, (n_rays, n_samples))
    return 1.0 - ad.exp(-ad.asum(optical, axis=1))


def render_error(grid: ErrorGrid, ray, n_samples: int, jitter=None) -> float:
    """Error rendered along one ray with the opacity-form quadrature."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    from .fields import sample_ts

    ts, widths = sample_ts(
        np.array([ray.t_near]), np.array([ray.t_far]), n_samples, jitter
    )
    pts = ray.origin[None, :] + ts.reshape(-1, 1) * ray.direction[None, :]
    out = render_error_samples(grid, pts, widths.reshape(-1), 1, n_samples)
    return float(np.asarray(out)[0])


def error_losses(rendered_error, rendered_rgb, gt_rgb, k: float):
    """Asymmetric error-field loss and its residual d.

    d = E(r) - ||C(r) - C_gt(r)||_2; underestimates (d < 0) are amplified
    by k.  The rendered color is detached: only the grid adapts here.
    """
    if k <= 1:
        raise ValueError("amplification k must be > 1")
    if isinstance(gt_rgb, tuple):
        diff2 = sum((ad.detach(rendered_rgb[c]) - gt_rgb[c]) ** 2 for c in range(3))
    else:
        rgb = ad.detach(rendered_rgb)
        diff2 = np.sum((np.asarray(rgb) - np.asarray(gt_rgb)) ** 2, axis=-1)
    resid = np.sqrt(diff2)
    d = rendered_error - resid
    amp = np.where(ad.value(d) < 0, k, 1.0)
    return ad.absolute(d) * amp, d


def propose_position(grid: ErrorGrid, n_proposals: int, rng: np.random.Generator) -> np.ndarray:
    """Highest-error point among uniform samples in the bbox (first wins ties)."""
    if n_proposals < 1:
        raise ValueError("need at least one proposal sample")
    pts = rng.uniform(grid.bbox[0], grid.bbox[1], size=(n_proposals, 3))
    e = sample_error(grid, pts)
    return pts[int(np.argmax(e))]


def _uniform_in_ball(radius: float, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    v /= max(np.linalg.norm(v), 1e-12)
    return v * radius * rng.uniform() ** (1.0 / 3.0)


def initialize_stroke(
    kind,
    position: np.ndarray,
    size: float,
    rng: np.random.Generator,
    color=None,
    density: float = 5.0,
):
    """Fresh stroke at ``position`` with extent ``size``.

    Primitives translate to the position with scale = size and random
    rotation where the kind uses one; splines scatter their control points
    uniformly inside a ball of radius ``size`` around it.  ``color``
    defaults to mid-gray when the caller has no ground-truth estimate.
    """
    if size <= 0:
        raise ValueError("stroke size must be positive")
    position = np.asarray(position, dtype=float).reshape(3)
    color = np.full(3, 0.5) if color is None else np.asarray(color, dtype=float)
    color = np.clip(color, 0.0, 1.0)
    if isinstance(kind, SplineKind):
        n_ctrl = CONTROL_POINT_COUNT[kind]
        ctrl = np.stack([position + _uniform_in_ball(size, rng) for _ in range(n_ctrl)])
        return SplineStroke(kind, ctrl, size / 4.0, size / 4.0, color, density)
    spec = KIND_SPECS[kind]
    rotation = rng.uniform(0.0, 2.0 * np.pi, 3) if spec.rotation else np.zeros(3)
    basic = np.array(DEFAULT_BASIC_PARAMS.get(kind, ()), dtype=float)
    return PrimitiveStroke(
        kind,
        basic,
        Transform(position, rotation, np.full(3, size)),
        color,
        density,
    )


def recycle_dead_strokes(
    field,
    grid: ErrorGrid,
    density_threshold: float,
    min_age: int,
    rng: np.random.Generator,
    ages,
    size: float,
    n_proposals: int = 4096,
    color_fn=None,
    uniform: bool = False,
) -> tuple[object, list[int]]:
    """Replace aged strokes whose density fell below the threshold.

    Each dead stroke is re-seeded at an error-field proposal (or uniformly
    in the bbox when ``uniform``) keeping its kind.  Untouched strokes are
    carried over as the same objects.  Returns the updated field and the
    list of replaced indices.
    """
    if density_threshold <= 0 or min_age <= 0:
        raise ValueError("thresholds must be positive")
    ages = np.asarray(ages)
    replaced: list[int] = []
    new_strokes = list(field.strokes)
    for i, stroke in enumerate(field.strokes):
        if stroke.density < density_threshold and ages[i] >= min_age:
            if uniform:
                pos = rng.uniform(grid.bbox[0], grid.bbox[1])
            else:
                pos = propose_position(grid, n_proposals, rng)
            color = color_fn(pos) if color_fn is not None else None
            new_strokes[i] = initialize_stroke(
                stroke.kind, pos, size, rng, color=color
            )
            replaced.append(i)
    if not replaced:
        return field, []
    from .fields import StrokeField

    return StrokeField(new_strokes, field.region, field.background), replaced
