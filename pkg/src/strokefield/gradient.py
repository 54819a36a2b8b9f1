"""Flat parameter vectors, reparameterization, and training-loss gradients.

Every learnable scalar of a stroke field (plus the error grid) lives in one
flat vector of unconstrained reals.  Constrained quantities are mapped
through fixed bijections -- softplus for positive values, a logistic for
colors -- so no gradient step can leave the valid region.

The loss is evaluated twice over the same code: once on taped variables to
get analytic gradients, and once on plain arrays for finite-difference
verification.  Because both paths run the identical op sequence, the check
validates the chain rule and the renderer in one sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errorfield import ErrorGrid, error_losses, sample_error_raw, trilinear_weights
from .fields import (
    RegionConfig,
    StrokeField,
    StrokeGroup,
    composite,
    eval_field_alphas,
    groups_from_field,
    quadrature,
    sample_ts,
    _delta_scene,
)
from .geometry import (
    KIND_SPECS,
    PrimitiveKind,
    PrimitiveStroke,
    Transform,
    primitive_sdf,
)
from .splines import (
    CONTROL_POINT_COUNT,
    SplineKind,
    SplineStroke,
    curve_sdf,
    segment_margin,
)

SCALE_FLOOR = 1e-3
RADIUS_FLOOR = 1e-3
LINE_H_FLOOR = 1e-4


class NonFiniteError(RuntimeError):
    """A parameter slice or its gradient stopped being finite."""


def softplus_np(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.maximum(np.asarray(y, dtype=float), 1e-9)
    return y + np.log(-np.expm1(-y))


def logit(c):
    c = np.clip(np.asarray(c, dtype=float), 1e-7, 1.0 - 1e-7)
    return np.log(c) - np.log1p(-c)


def sigmoid_np(x):
    return ad.sigmoid(np.asarray(x, dtype=float))


_TRANSFORM_FORWARD = {
    "raw": lambda u: u,
    "softplus": ad.softplus,
    "softplus_scale": lambda u: ad.softplus(u) + SCALE_FLOOR,
    "softplus_radius": lambda u: ad.softplus(u) + RADIUS_FLOOR,
    "softplus_line_h": lambda u: ad.softplus(u) + LINE_H_FLOOR,
    "sigmoid": ad.sigmoid,
}

_TRANSFORM_INVERSE = {
    "raw": lambda y: np.asarray(y, dtype=float),
    "softplus": softplus_inv,
    "softplus_scale": lambda y: softplus_inv(np.asarray(y) - SCALE_FLOOR),
    "softplus_radius": lambda y: softplus_inv(np.asarray(y) - RADIUS_FLOOR),
    "softplus_line_h": lambda y: softplus_inv(np.asarray(y) - LINE_H_FLOOR),
    "sigmoid": logit,
}


def _basic_tags(kind: PrimitiveKind) -> tuple[str, ...]:
    if kind in (PrimitiveKind.ROUND_CUBE, PrimitiveKind.ROUND_BOX):
        return ("softplus_radius",)
    if kind is PrimitiveKind.TRIPRISM:
        return ("softplus_radius",)
    if kind is PrimitiveKind.LINE:
        return ("softplus_line_h", "softplus_radius")
    return ()


@dataclass
class SliceSpec:
    name: str
    start: int
    stop: int
    transform: str
    shape: bool  # feeds the SDF (subject to kink exclusions)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


@dataclass
class StrokeLayout:
    kind: object
    index: int  # painting order
    slices: dict[str, SliceSpec]

    def all_indices(self) -> np.ndarray:
        return np.concatenate([s.indices for s in self.slices.values()])

    def shape_indices(self) -> np.ndarray:
        idx = [s.indices for s in self.slices.values() if s.shape]
        return np.concatenate(idx) if idx else np.empty(0, dtype=int)


@dataclass
class ParamLayout:
    strokes: list[StrokeLayout]
    grid_slice: SliceSpec | None
    n_params: int

    def describe_index(self, i: int) -> str:
        for sl in self.strokes:
            for spec in sl.slices.values():
                if spec.start <= i < spec.stop:
                    return f"{spec.name}[{i - spec.start}]"
        if self.grid_slice is not None and self.grid_slice.start <= i < self.grid_slice.stop:
            return f"grid[{i - self.grid_slice.start}]"
        return f"param[{i}]"


def build_layout(strokes: list, grid: ErrorGrid | None) -> ParamLayout:
    """Assign flat-vector slices to every stroke and the error grid."""
    cursor = 0
    stroke_layouts = []

    def add(name, n, transform, shape):
        nonlocal cursor
        spec = SliceSpec(name, cursor, cursor + n, transform, shape)
        cursor += n
        return spec

    for i, stroke in enumerate(strokes):
        tag = f"stroke{i}"
        slices: dict[str, SliceSpec] = {}
        if isinstance(stroke, SplineStroke):
            k = CONTROL_POINT_COUNT[stroke.kind]
            slices["ctrl"] = add(f"{tag}.ctrl", 3 * k, "raw", True)
            slices["ra"] = add(f"{tag}.ra", 1, "softplus_radius", True)
            slices["rb"] = add(f"{tag}.rb", 1, "softplus_radius", True)
        else:
            spec = KIND_SPECS[stroke.kind]
            slices["trans"] = add(f"{tag}.trans", 3, "raw", True)
            if spec.rotation:
                slices["rot"] = add(f"{tag}.rot", 3, "raw", True)
            n_scale = 3 if spec.anisotropic else 1
            slices["scale"] = add(f"{tag}.scale", n_scale, "softplus_scale", True)
            tags = _basic_tags(stroke.kind)
            for j, t in enumerate(tags):
                slices[f"basic{j}"] = add(f"{tag}.basic{j}", 1, t, True)
        slices["color"] = add(f"{tag}.color", 3, "sigmoid", False)
        slices["density"] = add(f"{tag}.density", 1, "softplus", False)
        stroke_layouts.append(StrokeLayout(stroke.kind, i, slices))

    grid_slice = None
    if grid is not None:
        n = int(np.prod(grid.resolution))
        grid_slice = add("grid", n, "raw", False)
    return ParamLayout(stroke_layouts, grid_slice, cursor)


def pack(field: StrokeField, grid: ErrorGrid | None, layout: ParamLayout | None = None,
         dtype=np.float64) -> tuple[np.ndarray, ParamLayout]:
    """Field (and grid) values -> flat unconstrained vector."""
    if layout is None:
        layout = build_layout(field.strokes, grid)
    p = np.zeros(layout.n_params, dtype=dtype)
    for sl, stroke in zip(layout.strokes, field.strokes):
        sv = sl.slices
        if isinstance(stroke, SplineStroke):
            p[sv["ctrl"].start : sv["ctrl"].stop] = stroke.control_points.reshape(-1)
            p[sv["ra"].start] = _TRANSFORM_INVERSE["softplus_radius"](stroke.r_a)
            p[sv["rb"].start] = _TRANSFORM_INVERSE["softplus_radius"](stroke.r_b)
        else:
            spec = KIND_SPECS[stroke.kind]
            tr = stroke.transform
            p[sv["trans"].start : sv["trans"].stop] = tr.translation
            if spec.rotation:
                p[sv["rot"].start : sv["rot"].stop] = tr.rotation
            if spec.anisotropic:
                p[sv["scale"].start : sv["scale"].stop] = _TRANSFORM_INVERSE[
                    "softplus_scale"
                ](tr.scale)
            else:
                p[sv["scale"].start] = _TRANSFORM_INVERSE["softplus_scale"](tr.scale[0])
            for j, t in enumerate(_basic_tags(stroke.kind)):
                p[sv[f"basic{j}"].start] = _TRANSFORM_INVERSE[t](stroke.basic_params[j])
        p[sv["color"].start : sv["color"].stop] = logit(stroke.color)
        p[sv["density"].start] = softplus_inv(stroke.density)
    if layout.grid_slice is not None:
        p[layout.grid_slice.start : layout.grid_slice.stop] = grid.values.reshape(-1)
    return p, layout


def pack_stroke(stroke, sl: StrokeLayout, out: np.ndarray):
    """Write one stroke's values into its slices of ``out`` (used by recycle)."""
    lo = min(s.start for s in sl.slices.values())
    hi = max(s.stop for s in sl.slices.values())
    shifted = {
        k: SliceSpec(s.name, s.start - lo, s.stop - lo, s.transform, s.shape)
        for k, s in sl.slices.items()
    }
    sub_layout = ParamLayout([StrokeLayout(sl.kind, 0, shifted)], None, hi - lo)
    sub, _ = pack(StrokeField([stroke]), None, sub_layout, dtype=out.dtype)
    out[lo:hi] = sub


def unpack_field(
    params: np.ndarray,
    layout: ParamLayout,
    region: RegionConfig,
    background,
    grid_template: ErrorGrid | None = None,
) -> tuple[StrokeField, ErrorGrid | None]:
    """Flat vector -> concrete strokes (and error grid)."""
    params = np.asarray(params, dtype=float)
    strokes = []
    for sl in layout.strokes:
        sv = sl.slices
        color = sigmoid_np(params[sv["color"].start : sv["color"].stop])
        density = float(softplus_np(params[sv["density"].start]))
        if isinstance(sl.kind, SplineKind):
            ctrl = params[sv["ctrl"].start : sv["ctrl"].stop].reshape(-1, 3)
            ra = float(_apply_np("softplus_radius", params[sv["ra"].start]))
            rb = float(_apply_np("softplus_radius", params[sv["rb"].start]))
            strokes.append(SplineStroke(sl.kind, ctrl, ra, rb, color, density))
        else:
            spec = KIND_SPECS[sl.kind]
            trans = params[sv["trans"].start : sv["trans"].stop]
            rot = (
                params[sv["rot"].start : sv["rot"].stop]
                if spec.rotation
                else np.zeros(3)
            )
            raw_scale = params[sv["scale"].start : sv["scale"].stop]
            scale = _apply_np("softplus_scale", raw_scale)
            if not spec.anisotropic:
                scale = np.full(3, float(scale[0]))
            basic = np.array(
                [
                    _apply_np(t, params[sv[f"basic{j}"].start])
                    for j, t in enumerate(_basic_tags(sl.kind))
                ]
            )
            strokes.append(
                PrimitiveStroke(
                    sl.kind, basic, Transform(trans, rot, scale), color, density
                )
            )
    field = StrokeField(strokes, region, background)
    grid = None
    if layout.grid_slice is not None:
        tpl = grid_template if grid_template is not None else ErrorGrid()
        grid = ErrorGrid(
            tpl.resolution,
            tpl.bbox.copy(),
            params[layout.grid_slice.start : layout.grid_slice.stop].reshape(
                tpl.resolution
            ),
            tpl.amplification,
        )
    return field, grid


def _apply_np(tag: str, raw):
    return ad.value(_TRANSFORM_FORWARD[tag](np.asarray(raw, dtype=float)))


# ---------------------------------------------------------------------------
# Grouped unpacking for rendering (taped or plain)
# ---------------------------------------------------------------------------


def _group_index_map(layout: ParamLayout) -> list[dict]:
    """Per kind-group flat-vector index arrays for every component."""
    buckets: dict[object, list[StrokeLayout]] = {}
    for sl in layout.strokes:
        buckets.setdefault(sl.kind, []).append(sl)
    out = []
    for kind, sls in buckets.items():
        entry: dict = {
            "kind": kind,
            "indices": np.array([s.index for s in sls], dtype=np.int64),
            "color": [np.array([s.slices["color"].start + c for s in sls]) for c in range(3)],
            "density": np.array([s.slices["density"].start for s in sls]),
        }
        if isinstance(kind, SplineKind):
            k = CONTROL_POINT_COUNT[kind]
            entry["ctrl"] = [
                [np.array([s.slices["ctrl"].start + 3 * j + c for s in sls]) for c in range(3)]
                for j in range(k)
            ]
            entry["ra"] = np.array([s.slices["ra"].start for s in sls])
            entry["rb"] = np.array([s.slices["rb"].start for s in sls])
        else:
            spec = KIND_SPECS[kind]
            entry["trans"] = [np.array([s.slices["trans"].start + c for s in sls]) for c in range(3)]
            if spec.rotation:
                entry["rot"] = [np.array([s.slices["rot"].start + c for s in sls]) for c in range(3)]
            else:
                entry["rot"] = None
            if spec.anisotropic:
                entry["scale"] = [np.array([s.slices["scale"].start + c for s in sls]) for c in range(3)]
            else:
                entry["scale"] = [np.array([s.slices["scale"].start for s in sls])] * 3
            entry["basic"] = [
                np.array([s.slices[f"basic{j}"].start for s in sls])
                for j in range(len(_basic_tags(kind)))
            ]
        out.append(entry)
    return out


def unpack_groups(p, layout: ParamLayout, index_map=None):
    """Flat params (Var or ndarray) -> stroke groups plus field-wide arrays.

    Returns (groups, sigmas (N,), colors 3x(N,), grid_raw or None).
    """
    if index_map is None:
        index_map = _group_index_map(layout)
    n = len(layout.strokes)
    groups = []
    sigma_full = None
    color_full = [None, None, None]
    for entry in index_map:
        kind = entry["kind"]
        vals: dict = {}
        if isinstance(kind, SplineKind):
            vals["ctrl"] = [
                tuple(ad.gather(p, entry["ctrl"][j][c]) for c in range(3))
                for j in range(CONTROL_POINT_COUNT[kind])
            ]
            vals["r_a"] = _TRANSFORM_FORWARD["softplus_radius"](ad.gather(p, entry["ra"]))
            vals["r_b"] = _TRANSFORM_FORWARD["softplus_radius"](ad.gather(p, entry["rb"]))
        else:
            spec = KIND_SPECS[kind]
            vals["trans"] = tuple(ad.gather(p, entry["trans"][c]) for c in range(3))
            if entry["rot"] is not None:
                vals["rot"] = tuple(ad.gather(p, entry["rot"][c]) for c in range(3))
            else:
                vals["rot"] = None
            if spec.anisotropic:
                vals["scale"] = tuple(
                    _TRANSFORM_FORWARD["softplus_scale"](ad.gather(p, entry["scale"][c]))
                    for c in range(3)
                )
            else:
                s = _TRANSFORM_FORWARD["softplus_scale"](ad.gather(p, entry["scale"][0]))
                vals["scale"] = (s, s, s)
            tags = _basic_tags(kind)
            vals["basic"] = tuple(
                _TRANSFORM_FORWARD[t](ad.gather(p, entry["basic"][j]))
                for j, t in enumerate(tags)
            )
        sigma_g = ad.softplus(ad.gather(p, entry["density"]))
        color_g = [ad.sigmoid(ad.gather(p, entry["color"][c])) for c in range(3)]
        vals["sigma"] = sigma_g
        vals["color"] = tuple(color_g)
        groups.append(StrokeGroup(kind, entry["indices"], vals))

        sg = ad.scatter(sigma_g, entry["indices"], n)
        sigma_full = sg if sigma_full is None else sigma_full + sg
        for c in range(3):
            cg = ad.scatter(color_g[c], entry["indices"], n)
            color_full[c] = cg if color_full[c] is None else color_full[c] + cg

    grid_raw = None
    if layout.grid_slice is not None:
        grid_raw = p[layout.grid_slice.start : layout.grid_slice.stop]
    if sigma_full is None:
        sigma_full = np.zeros(0)
        color_full = [np.zeros(0)] * 3
    return groups, sigma_full, tuple(color_full), grid_raw


# ---------------------------------------------------------------------------
# Loss evaluation (shared by tape and finite differences)
# ---------------------------------------------------------------------------


@dataclass
class FieldTemplate:
    """Everything about the field except the learnable numbers."""

    layout: ParamLayout
    region: RegionConfig
    background: np.ndarray
    focal: float
    pixel_radius: float = 0.5
    segments: int = 32
    cull_cutoff: float | None = None
    grid_template: ErrorGrid | None = None
    index_map: list = None

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(3)
        if self.index_map is None:
            self.index_map = _group_index_map(self.layout)
        if self.layout.grid_slice is not None and self.grid_template is None:
            raise ValueError(
                "layout includes an error grid; pass grid_template with its "
                "resolution and bbox"
            )


@dataclass
class RayBatch:
    """A fixed bundle of rays with frozen stratified jitter."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    n_samples: int
    jitter: np.ndarray | None  # (R, S) in [0, 1); None = midpoints
    gt_rgb: np.ndarray  # (R, 3)
    gt_mask: np.ndarray | None = None  # (R,) binary


@dataclass
class GradResult:
    loss: float
    gradient: np.ndarray
    breakdown: dict


def _batch_geometry(template: FieldTemplate, batch: RayBatch, dtype):
    """Constant per-batch tensors: sample points, widths, trilinear weights."""
    ts, widths = sample_ts(batch.t_near, batch.t_far, batch.n_samples, batch.jitter)
    ts = ts.astype(dtype)
    widths = widths.astype(dtype)
    pts = (
        batch.origins[:, None, :].astype(dtype)
        + ts[..., None] * batch.directions[:, None, :].astype(dtype)
    ).reshape(-1, 3)
    delta_scene = _delta_scene(
        template.region, ts.reshape(-1), template.pixel_radius, template.focal
    ).astype(dtype)
    tri = None
    if template.layout.grid_slice is not None:
        grid = template.grid_template if template.grid_template is not None else ErrorGrid()
        tri = trilinear_weights(grid, pts)
    return ts, widths, pts, delta_scene, tri


def compute_loss(params, template: FieldTemplate, batch: RayBatch, config, frozen=None):
    """Total training loss (scalar Var or float) plus its term breakdown.

    ``config`` only needs the loss attributes of a TrainConfig: the lambda
    weights, charbonnier_eps, and err_amplify_k.

    ``frozen`` is a dict used by the finite-difference harness: gradients
    are defined with spline t* fixed and with the rendered color detached
    inside the error-field loss, so the differenced function must pin both
    at their base-point values ("tstar" and "err_resid" entries).
    """
    dtype = ad.value(params).dtype
    ts, widths, pts, delta_scene, tri = _batch_geometry(template, batch, dtype)
    n_rays, n_samples = ts.shape
    groups, sigmas, colors, grid_raw = unpack_groups(
        params, template.layout, template.index_map
    )
    n_strokes = len(template.layout.strokes)

    alphas = eval_field_alphas(
        groups,
        n_strokes,
        pts[:, 0],
        pts[:, 1],
        pts[:, 2],
        delta_scene,
        template.region,
        template.segments,
        template.cull_cutoff,
        None if frozen is None else frozen.setdefault("tstar", {}),
    )
    sigma, color, _ = composite(
        alphas, sigmas, colors, template.region, template.background
    )
    color_rs = tuple(ad.reshape(color[c], (n_rays, n_samples)) for c in range(3))
    ray_rgb, opacity = quadrature(
        ad.reshape(sigma, (n_rays, n_samples)), widths, color_rs, template.background
    )

    eps = config.charbonnier_eps
    gt = batch.gt_rgb.astype(dtype)
    col_sq = sum((ray_rgb[c] - gt[:, c]) ** 2 for c in range(3))
    l_color = ad.asum(ad.sqrt(col_sq + eps)) / n_rays

    terms = {"color": config.lambda_color * l_color}
    if batch.gt_mask is not None and config.lambda_mask > 0:
        m = batch.gt_mask.astype(dtype)
        l_mask = ad.asum(ad.sqrt((opacity - m) ** 2 + eps)) / n_rays
        terms["mask"] = config.lambda_mask * l_mask
    if n_strokes > 0 and config.lambda_den_reg > 0:
        terms["den_reg"] = config.lambda_den_reg * ad.asum(sigmas)
    if grid_raw is not None:
        idx, w, inside = tri
        e_samples = sample_error_raw(grid_raw, idx, w.astype(dtype), inside)
        e_optical = ad.reshape(e_samples * widths.reshape(-1), (n_rays, n_samples))
        ray_err = 1.0 - ad.exp(-ad.asum(e_optical, axis=1))
        if frozen is not None and "err_resid" in frozen:
            resid = frozen["err_resid"]
            d = ray_err - resid
            amp = np.where(ad.value(d) < 0, config.err_amplify_k, 1.0)
            l_err_vec = ad.absolute(d) * amp
        else:
            l_err_vec, _ = error_losses(
                ray_err,
                ray_rgb,
                tuple(gt[:, c] for c in range(3)),
                config.err_amplify_k,
            )
            if frozen is not None:
                rgb = np.stack([ad.value(ray_rgb[c]) for c in range(3)], axis=-1)
                frozen["err_resid"] = np.linalg.norm(rgb - gt, axis=-1)
        terms["err"] = config.lambda_err * (ad.asum(l_err_vec) / n_rays)
        terms["err_reg"] = config.lambda_err_reg * ad.asum(e_samples)

    total = None
    for t in terms.values():
        total = t if total is None else total + t
    breakdown = {k: float(ad.value(v)) for k, v in terms.items()}
    breakdown["total"] = float(ad.value(total))
    return total, breakdown, {"opacity": opacity, "rgb": ray_rgb}


def loss_and_gradients(
    params: np.ndarray, template: FieldTemplate, batch: RayBatch, config,
    frozen=None,
) -> GradResult:
    """Analytic gradient of the total loss for every learnable scalar."""
    params = np.asarray(params)
    bad = np.nonzero(~np.isfinite(params))[0]
    if bad.size:
        raise NonFiniteError(
            f"non-finite parameter at {template.layout.describe_index(int(bad[0]))}"
        )
    pvar = ad.Var(params)
    total, breakdown, _ = compute_loss(pvar, template, batch, config, frozen)
    if not np.isfinite(ad.value(total)):
        raise NonFiniteError("loss is non-finite")
    (grad,) = ad.backward(total, [pvar])
    bad = np.nonzero(~np.isfinite(grad))[0]
    if bad.size:
        raise NonFiniteError(
            f"non-finite gradient at {template.layout.describe_index(int(bad[0]))}"
        )
    return GradResult(float(ad.value(total)), grad, breakdown)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def central_differences(fn, params: np.ndarray, indices, h: float) -> np.ndarray:
    """(f(p+h) - f(p-h)) / 2h per index, with a scale-aware step."""
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        hi = h * (1.0 + abs(float(params[i])))
        p_plus = params.copy()
        p_plus[i] += hi
        p_minus = params.copy()
        p_minus[i] -= hi
        out[k] = (fn(p_plus) - fn(p_minus)) / (2.0 * hi)
    return out


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_index: int
    n_checked: int
    skipped: np.ndarray
    rel_errors: np.ndarray
    checked: np.ndarray


def _excluded_indices(
    params: np.ndarray, template: FieldTemplate, batch: RayBatch, h: float
) -> set[int]:
    """Indices too close to a non-smooth locus for finite differences.

    Covers: samples near a stroke's SDF kink band (|sdf| < 3h), near-ties of
    the Max-composition argmax, near-equal anisotropic scale components (the
    min() in the scale correction), near-ties between spline chord distances,
    and rays near the error-loss |d| kink.
    """
    layout = template.layout
    dtype = np.float64
    ts, widths, pts, delta_scene, tri = _batch_geometry(template, batch, dtype)
    field, grid = unpack_field(
        params, layout, template.region, template.background, template.grid_template
    )
    excluded: set[int] = set()
    sdf_rows = []
    for sl, stroke in zip(layout.strokes, field.strokes):
        if isinstance(stroke, SplineStroke):
            sdf = curve_sdf(stroke, pts, template.segments)
            margin = segment_margin(
                stroke.kind, stroke.control_points, template.segments, pts
            )
            if np.min(margin) < 10 * h:
                excluded.update(sl.shape_indices().tolist())
        else:
            sdf, _ = primitive_sdf(stroke, pts)
            spec = KIND_SPECS[stroke.kind]
            if spec.anisotropic:
                s = np.sort(stroke.transform.scale)
                if s[1] - s[0] < 3 * h:
                    excluded.update(sl.slices["scale"].indices.tolist())
        sdf_rows.append(np.asarray(sdf))
        if np.min(np.abs(sdf_rows[-1])) < 3 * h:
            excluded.update(sl.shape_indices().tolist())
    if template.region.composition == "max" and len(sdf_rows) > 1:
        alphas = eval_field_alphas(
            groups_from_field(field),
            len(field.strokes),
            pts[:, 0],
            pts[:, 1],
            pts[:, 2],
            delta_scene,
            template.region,
            template.segments,
            None,
        )
        top2 = np.sort(alphas, axis=0)[-2:, :]
        near = top2[1] - top2[0] < 3 * h
        if np.any(near):
            winners = np.unique(np.argmax(alphas, axis=0)[near])
            for wi in winners:
                excluded.update(layout.strokes[wi].all_indices().tolist())
    return excluded


def finite_diff_check(
    params: np.ndarray,
    template: FieldTemplate,
    batch: RayBatch,
    config,
    h: float = 1e-4,
    subset=None,
) -> FiniteDiffReport:
    """Compare analytic gradients against central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    Indices flagged near a non-smooth locus are skipped, not failed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = np.asarray(params, dtype=np.float64)
    template = FieldTemplate(
        template.layout,
        template.region,
        template.background,
        template.focal,
        template.pixel_radius,
        template.segments,
        None,  # culling changes support sets discontinuously; compare dense
        template.grid_template,
    )
    # gradients are defined at fixed spline t* (see spline design note); the
    # differenced function must hold the same t* or it measures the dropped
    # radius-taper sensitivity instead of the chain rule
    tstar = {}
    result = loss_and_gradients(params, template, batch, config, tstar_cache=tstar)
    indices = np.arange(len(params)) if subset is None else np.asarray(subset)
    excluded = _excluded_indices(params, template, batch, h)
    if grid_d_kink_rays(params, template, batch, config, h):
        if template.layout.grid_slice is not None:
            excluded.update(template.layout.grid_slice.indices.tolist())
    keep = np.array([i for i in indices if i not in excluded], dtype=int)
    skipped = np.array([i for i in indices if i in excluded], dtype=int)

    def fn(p):
        total, _, _ = compute_loss(p, template, batch, config, tstar_cache=tstar)
        return float(ad.value(total))

    numeric = central_differences(fn, params, keep, h)
    analytic = result.gradient[keep]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(keep[np.argmax(rel)]) if keep.size else -1
    return FiniteDiffReport(
        float(rel.max()) if keep.size else 0.0,
        worst,
        len(keep),
        skipped,
        rel,
        keep,
    )


def grid_d_kink_rays(params, template, batch, config, h) -> bool:
    """True when any ray's error-loss residual d sits within 3h of its kink."""
    if template.layout.grid_slice is None:
        return False
    _, _, extras = compute_loss(np.asarray(params, dtype=np.float64), template, batch, config)
    ts, widths, pts, _, tri = _batch_geometry(template, batch, np.float64)
    idx, w, inside = tri
    grid_raw = params[template.layout.grid_slice.start : template.layout.grid_slice.stop]
    e_samples = sample_error_raw(grid_raw, idx, w, inside)
    n_rays, n_samples = ts.shape
    ray_err = 1.0 - np.exp(-(e_samples * widths.reshape(-1)).reshape(n_rays, n_samples).sum(axis=1))
    rgb = np.stack([ad.value(extras["rgb"][c]) for c in range(3)], axis=-1)
    resid = np.linalg.norm(rgb - batch.gt_rgb, axis=-1)
    return bool(np.any(np.abs(ray_err - resid) < 3 * h))
