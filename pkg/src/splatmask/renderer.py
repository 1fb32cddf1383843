"""Differentiable Gaussian splatting in numpy.

Forward: each Gaussian's 3D covariance ``R S S^T R^T`` is projected to screen space with
the perspective Jacobian, turned into a per-pixel opacity ``o * exp(-q/2)`` and
alpha-blended front to back. Backward: hand-derived chain rule for every attackable
parameter class. Per-pixel work runs on flat arrays of (primitive, pixel) pairs inside
each splat's 3-sigma ellipse; every reduction is a sequential scatter-add or scan in a fixed
order, so results do not depend on threading.

The working dtype is configurable so the finite-difference oracle can run in extended
precision (``np.longdouble``) against the float64 analytic path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .camera import CameraView, Pose, quat_left_matrix, quat_to_matrix
from .scene import SCALE_FLOOR, Scene

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


class ParamClass(str, Enum):
    DC_COLOR = "dc_color"
    AC_COLOR = "ac_color"
    POSITION = "position"
    ROTATION = "rotation"
    SCALE = "scale"
    OPACITY = "opacity"


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderSettings:
    dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    t_min: float = 1e-4
    support_sigma: float = 3.0
    near: float = 1e-4
    view_dependent: bool = False
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


DEFAULT_SETTINGS = RenderSettings()


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(eq=False)
class SplatIntermediate:
    """Everything the backward pass needs from a forward call.

    Per visible primitive (sorted front to back; slot ``k`` holds primitive
    ``order[k]``): camera-space mean, 2D mean, 2D covariance, conic and color. Per
    (primitive, pixel) pair inside the primitive's screen-space support, grouped by
    pixel and front to back within a pixel: falloff, alpha, transmittance in front of
    the primitive and activity masks.
    """

    order: np.ndarray
    t_cam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    rotmat: np.ndarray
    quat_hat: np.ndarray
    colors: np.ndarray
    color_free: np.ndarray
    dirs: np.ndarray | None
    dir_norm: np.ndarray | None
    pair_slot: np.ndarray
    pair_pixel: np.ndarray
    seg_start: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    active: np.ndarray
    capped: np.ndarray
    t_before: np.ndarray
    t_final: np.ndarray
    weights: np.ndarray
    background: np.ndarray = field(repr=False)
    n_pixels: int = 0

    def state_signature(self) -> tuple:
        """Discrete state (sort order, supports and masks) used to detect boundary crossings."""
        return (
            self.order.tobytes(),
            self.pair_slot.tobytes(),
            self.pair_pixel.tobytes(),
            self.active.tobytes(),
            self.capped.tobytes(),
            self.color_free.tobytes(),
        )

    def contributions(self, row: int, col: int, width: int) -> list[tuple[int, float, float]]:
        """(primitive index, alpha, transmittance) records for one pixel, front to back."""
        p = row * width + col
        sel = np.nonzero((self.pair_pixel == p) & self.active)[0]
        return [(int(self.order[self.pair_slot[j]]), float(self.alpha[j]), float(self.t_before[j]))
                for j in sel]


def _stable_argsort(keys: np.ndarray, bound: int) -> np.ndarray:
    # numpy radix-sorts 16-bit keys, several times faster than merge sort on int64
    if bound <= 1 << 16:
        keys = keys.astype(np.uint16)
    return np.argsort(keys, kind="stable")


def _segmented_cumsum(x: np.ndarray, seg_start: np.ndarray, exclusive: bool) -> np.ndarray:
    """Cumulative sums restarting at every ``seg_start`` flag.

    The running total is reset at each segment boundary, so rounding error stays
    proportional to one segment's magnitude.
    """
    if x.size == 0:
        return x.copy()
    y = x.copy()
    starts = np.nonzero(seg_start)[0]
    seg_sum = np.add.reduceat(x, starts)
    y[starts[1:]] -= seg_sum[:-1]
    out = np.cumsum(y)
    if exclusive:
        out = out - x
    return out


# --------------------------------------------------------------------------- geometry


def build_covariance(rotation, scale) -> np.ndarray:
    """``R diag(s^2) R^T`` for a (normalized) quaternion; batched over leading axes."""
    q = np.asarray(rotation)
    s = np.asarray(scale)
    if q.ndim == 1:
        return build_covariance(q[None], s[None])[0]
    r = quats_to_matrices(q / np.linalg.norm(q, axis=-1, keepdims=True))
    return np.einsum("nij,nj,nkj->nik", r, s * s, r)


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    one = np.ones_like(w)
    return np.stack([
        np.stack([one - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), one - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), one - 2 * (x * x + y * y)], -1),
    ], axis=1)


def _rotmat_quat_grad(q: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. normalized quaternion components given dL/dR (N,3,3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_r
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def perspective_jacobian(mean_cam, focal: float) -> np.ndarray:
    t = np.asarray(mean_cam)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    zero = np.zeros_like(z)
    jac = np.stack([
        np.stack([focal / z, zero, -focal * x / (z * z)], -1),
        np.stack([zero, focal / z, -focal * y / (z * z)], -1),
    ], axis=1)
    return jac[0] if single else jac


def project_covariance(cov, mean_cam, view_rot, focal: float, dilation: float = 0.3, near: float = 1e-4):
    """Screen-space covariance ``J W cov W^T J^T + dilation * I``.

    Returns ``None`` when the mean lies at or behind the near plane (culled).
    """
    mean_cam = np.asarray(mean_cam, dtype=float)
    if mean_cam[2] <= near:
        return None
    jac = perspective_jacobian(mean_cam, focal)
    m = np.asarray(view_rot) @ np.asarray(cov) @ np.asarray(view_rot).T
    out = jac @ m @ jac.T + dilation * np.eye(2)
    return 0.5 * (out + out.T)


def sh_to_color(sh_dc):
    """RGB from DC coefficients: ``clamp(C0 * dc + 0.5, 0, 1)``."""
    return np.clip(SH_C0 * np.asarray(sh_dc) + 0.5, 0.0, 1.0)


# --------------------------------------------------------------------------- forward


def _posed_arrays(scene: Scene, pose: Pose | None, dt):
    means = scene.means.astype(dt)
    quats = scene.rotations.astype(dt)
    if pose is not None and not pose.is_identity:
        rp = quat_to_matrix(pose.rotation).astype(dt)
        means = means @ rp.T + np.asarray(pose.translation, dtype=dt)
        quats = quats @ quat_left_matrix(pose.rotation).astype(dt).T
    return means, quats


def render(scene: Scene, view: CameraView, pose: Pose | None = None,
           settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[Image, SplatIntermediate]:
    dt = settings.np_dtype
    h, w = view.height, view.width
    n = scene.n
    for name in ("means", "rotations", "scales", "opacities", "sh_dc", "sh_rest"):
        arr = getattr(scene, name).reshape(n, -1)
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise RenderError(f"primitive {int(np.argmax(bad))}: non-finite {name}")

    means_w, quats_w = _posed_arrays(scene, pose, dt)
    rc = view.rotation.astype(dt)
    t_cam = means_w @ rc.T + view.translation.astype(dt)
    depth = t_cam[:, 2]
    visible = np.nonzero(depth > settings.near)[0]
    order = visible[np.argsort(depth[visible], kind="stable")]

    t = t_cam[order]
    qn = np.linalg.norm(quats_w[order], axis=1, keepdims=True)
    q_hat = quats_w[order] / qn
    rotmat = quats_to_matrices(q_hat)
    s2 = scene.scales[order].astype(dt) ** 2
    cov3 = np.einsum("nij,nj,nkj->nik", rotmat, s2, rotmat)
    cov_cam = rc @ cov3 @ rc.T
    focal = dt.type(view.focal)
    jac = perspective_jacobian(t, focal)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation
    A, B, C = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=-1)
    # Half-extents of the axis-aligned box around the support ellipse q <= k^2.
    rx = settings.support_sigma * np.sqrt(A)
    ry = settings.support_sigma * np.sqrt(C)
    cx, cy = view.principal_point
    mean2d = np.stack([focal * t[:, 0] / t[:, 2] + cx, focal * t[:, 1] / t[:, 2] + cy], axis=-1)

    # Colors (per visible primitive).
    raw = SH_C0 * scene.sh_dc[order].astype(dt) + 0.5
    dirs = dir_norm = None
    if settings.view_dependent and scene.sh_bands > 1:
        v = means_w[order] - view.position.astype(dt)
        dir_norm = np.linalg.norm(v, axis=1, keepdims=True)
        dirs = v / dir_norm
        rest = scene.sh_rest[order].astype(dt)
        raw = raw + SH_C1 * (-dirs[:, 1:2] * rest[:, 0] + dirs[:, 2:3] * rest[:, 1] - dirs[:, 0:1] * rest[:, 2])
    colors = np.clip(raw, 0.0, 1.0)
    color_free = (raw > 0.0) & (raw < 1.0)

    # Sparse (primitive, pixel) pairs from the box around each support ellipse.
    n_pix = h * w
    m = len(order)
    u, v = mean2d[:, 0], mean2d[:, 1]
    x0 = np.maximum(np.ceil(u - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rx), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + ry), h - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    slot = np.repeat(np.arange(m), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]]) if m else np.zeros(0, np.int64)
    local = np.arange(slot.size) - np.repeat(first, counts)
    nx_rep = np.repeat(nx, counts)
    pcol = x0[slot] + local % np.maximum(nx_rep, 1)
    prow = y0[slot] + local // np.maximum(nx_rep, 1)
    pixel = prow * w + pcol

    dx = pcol.astype(dt) - u[slot]
    dy = prow.astype(dt) - v[slot]
    q = conic[slot, 0] * dx * dx + 2 * conic[slot, 1] * dx * dy + conic[slot, 2] * dy * dy
    opac = scene.opacities[order].astype(dt)
    # Keep pairs inside the support ellipse whose alpha clears the floor; the rest
    # never enter the blend, so they are dropped before grouping by pixel.
    keep = q <= settings.support_sigma ** 2
    keep[keep] = opac[slot[keep]] * np.exp(-0.5 * q[keep]) >= settings.alpha_min
    keep = np.nonzero(keep)[0]
    # Group by pixel; the stable sort keeps front-to-back order within a pixel.
    sel = keep[_stable_argsort(pixel[keep], n_pix)]
    slot, pixel, dx, dy = slot[sel], pixel[sel], dx[sel], dy[sel]
    gauss = np.exp(-0.5 * q[sel])
    alpha = opac[slot] * gauss
    seg_start = np.ones(slot.size, dtype=bool)
    seg_start[1:] = pixel[1:] != pixel[:-1]

    capped = alpha > settings.alpha_max
    alpha = np.where(capped, dt.type(settings.alpha_max), alpha)
    log_t = _segmented_cumsum(np.log1p(-alpha), seg_start, exclusive=True)
    t_before = np.exp(log_t)
    active = t_before >= settings.t_min
    alpha = np.where(active, alpha, 0)
    capped &= active
    weights = alpha * t_before
    t_final = np.exp(_accumulate(pixel, np.log1p(-alpha), n_pix, dt))
    bg = np.asarray(scene.background, dtype=dt)
    flat = np.empty((n_pix, 3), dtype=dt)
    for ch in range(3):
        flat[:, ch] = _accumulate(pixel, weights * colors[slot, ch], n_pix, dt) + t_final * bg[ch]
    pixels = np.clip(flat, 0.0, 1.0).reshape(h, w, 3)

    inter = SplatIntermediate(
        order=order, t_cam=t, mean2d=mean2d, cov2d=cov2d, conic=conic, jac=jac,
        cov_cam=cov_cam, rotmat=rotmat, quat_hat=q_hat, colors=colors, color_free=color_free,
        dirs=dirs, dir_norm=dir_norm, pair_slot=slot, pair_pixel=pixel, seg_start=seg_start,
        dx=dx, dy=dy, gauss=gauss, alpha=alpha, active=active, capped=capped,
        t_before=t_before, t_final=t_final, weights=weights, background=bg, n_pixels=n_pix,
    )
    return Image(pixels), inter


def _accumulate(index: np.ndarray, values: np.ndarray, length: int, dt) -> np.ndarray:
    """Sequential (hence deterministic) scatter-add."""
    if dt == np.float64:
        return np.bincount(index, weights=values, minlength=length)
    out = np.zeros(length, dtype=dt)
    np.add.at(out, index, values)
    return out


# --------------------------------------------------------------------------- backward


def render_backward(scene: Scene, view: CameraView, pose: Pose | None, inter: SplatIntermediate,
                    dl_dimage: np.ndarray, param_class, settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Analytic gradient of a scalar loss w.r.t. one parameter class.

    ``dl_dimage`` is (H, W, 3). The result has the shape of the scene attribute for the
    class (zeros for culled primitives). Per-primitive sums accumulate pairs in
    pixel-major order.
    """
    param_class = ParamClass(param_class)
    if param_class is ParamClass.AC_COLOR and scene.sh_bands < 2:
        raise ValueError("ac_color gradient requested on a scene with a single SH band")
    dt = inter.weights.dtype
    n = scene.n
    order = inter.order
    m = len(order)
    g_pix = np.asarray(dl_dimage, dtype=dt).reshape(-1, 3)

    out_shape = {
        ParamClass.DC_COLOR: (n, 3),
        ParamClass.AC_COLOR: scene.sh_rest.shape,
        ParamClass.POSITION: (n, 3),
        ParamClass.ROTATION: (n, 4),
        ParamClass.SCALE: (n, 3),
        ParamClass.OPACITY: (n,),
    }[param_class]
    out = np.zeros(out_shape, dtype=dt)
    if m == 0:
        return out
    slot, pixel = inter.pair_slot, inter.pair_pixel

    def per_slot(values):
        return _accumulate(slot, values, m, dt)

    g_pair = g_pix[pixel]  # (pairs, 3)
    g_color = np.stack([per_slot(inter.weights * g_pair[:, ch]) for ch in range(3)], axis=-1)
    g_raw = np.where(inter.color_free, g_color, 0)

    if param_class is ParamClass.DC_COLOR:
        out[order] = SH_C0 * g_raw
        return out
    if param_class is ParamClass.AC_COLOR:
        if inter.dirs is not None:
            d = inter.dirs
            out[order, 0] = -SH_C1 * d[:, 1:2] * g_raw
            out[order, 1] = SH_C1 * d[:, 2:3] * g_raw
            out[order, 2] = -SH_C1 * d[:, 0:1] * g_raw
        return out

    # dL/dalpha per pair: own contribution minus the attenuation of everything behind.
    cg = np.sum(inter.colors[slot] * g_pair, axis=1)
    wcg = inter.weights * cg
    behind = _segmented_cumsum(wcg[::-1], _segment_ends(inter.seg_start)[::-1], exclusive=True)[::-1]
    behind = behind + inter.t_final[pixel] * (g_pair @ inter.background)
    g_alpha = inter.t_before * cg - behind / (1 - inter.alpha)
    g_alpha = np.where(inter.active & ~inter.capped, g_alpha, 0)

    if param_class is ParamClass.OPACITY:
        out[order] = per_slot(g_alpha * inter.gauss)
        return out

    # alpha = o * exp(-q/2)  ->  dL/dq = -alpha/2 * dL/dalpha
    g_q = -0.5 * inter.alpha * g_alpha
    dx, dy = inter.dx, inter.dy
    ca, cb, cc = inter.conic[slot, 0], inter.conic[slot, 1], inter.conic[slot, 2]
    g_a = per_slot(g_q * dx * dx)
    g_b = per_slot(g_q * 2 * dx * dy)
    g_c = per_slot(g_q * dy * dy)
    g_u = per_slot(g_q * -2 * (ca * dx + cb * dy))
    g_v = per_slot(g_q * -2 * (cb * dx + cc * dy))

    conic_m = np.empty((m, 2, 2), dtype=dt)
    conic_m[:, 0, 0], conic_m[:, 0, 1], conic_m[:, 1, 0], conic_m[:, 1, 1] = (
        inter.conic[:, 0], inter.conic[:, 1], inter.conic[:, 1], inter.conic[:, 2])
    g_conic = np.empty_like(conic_m)
    g_conic[:, 0, 0], g_conic[:, 0, 1], g_conic[:, 1, 0], g_conic[:, 1, 1] = g_a, 0.5 * g_b, 0.5 * g_b, g_c
    g_cov2d = -conic_m @ g_conic @ conic_m
    jac = inter.jac
    g_cov_cam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac

    if param_class in (ParamClass.SCALE, ParamClass.ROTATION):
        rc = view.rotation.astype(dt)
        g_cov = rc.T @ g_cov_cam @ rc
        rotmat = inter.rotmat
        s = scene.scales[order].astype(dt)
        if param_class is ParamClass.SCALE:
            inner = np.einsum("nji,njk,nki->ni", rotmat, g_cov, rotmat)
            out[order] = 2 * s * inner
            return out
        g_rot = 2 * g_cov @ rotmat * (s * s)[:, None, :]
        g_qhat = _rotmat_quat_grad(inter.quat_hat, g_rot)
        q_hat = inter.quat_hat
        g_qraw = g_qhat - q_hat * np.sum(q_hat * g_qhat, axis=1, keepdims=True)
        g_qraw /= np.linalg.norm(scene.rotations[order].astype(dt), axis=1, keepdims=True)
        if pose is not None and not pose.is_identity:
            g_qraw = g_qraw @ quat_left_matrix(pose.rotation).astype(dt)
        out[order] = g_qraw
        return out

    # Position: through the 2D mean, the Jacobian and (optionally) the SH direction.
    t = inter.t_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    f = dt.type(view.focal)
    g_jac = 2 * g_cov2d @ jac @ inter.cov_cam
    g_t = np.einsum("nji,nj->ni", jac, np.stack([g_u, g_v], axis=-1))
    gz2 = -f / (z * z)
    g_t[:, 0] += g_jac[:, 0, 2] * gz2
    g_t[:, 1] += g_jac[:, 1, 2] * gz2
    g_t[:, 2] += (g_jac[:, 0, 0] + g_jac[:, 1, 1]) * gz2 + (
        g_jac[:, 0, 2] * 2 * f * x + g_jac[:, 1, 2] * 2 * f * y) / (z * z * z)
    g_world = g_t @ view.rotation.astype(dt)
    if inter.dirs is not None:
        rest = scene.sh_rest[order].astype(dt)
        g_dir = SH_C1 * np.stack([
            -np.sum(g_raw * rest[:, 2], axis=1),
            -np.sum(g_raw * rest[:, 0], axis=1),
            np.sum(g_raw * rest[:, 1], axis=1),
        ], axis=-1)
        d = inter.dirs
        g_world += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / inter.dir_norm
    if pose is not None and not pose.is_identity:
        g_world = g_world @ quat_to_matrix(pose.rotation).astype(dt)
    out[order] = g_world
    return out


def _segment_ends(seg_start: np.ndarray) -> np.ndarray:
    ends = np.zeros_like(seg_start)
    if seg_start.size:
        ends[:-1] = seg_start[1:]
        ends[-1] = True
    return ends


# --------------------------------------------------------------------------- parameter access

_ATTR = {
    ParamClass.DC_COLOR: "sh_dc",
    ParamClass.AC_COLOR: "sh_rest",
    ParamClass.POSITION: "means",
    ParamClass.ROTATION: "rotations",
    ParamClass.SCALE: "scales",
    ParamClass.OPACITY: "opacities",
}


def param_attr(param_class) -> str:
    return _ATTR[ParamClass(param_class)]


def get_params(scene: Scene, param_class) -> np.ndarray:
    param_class = ParamClass(param_class)
    if param_class is ParamClass.AC_COLOR and scene.sh_bands < 2:
        raise ValueError("scene has no AC coefficients (sh_bands = 1)")
    return np.array(getattr(scene, _ATTR[param_class]), dtype=np.float64)


def set_params(scene: Scene, param_class, values) -> Scene:
    """Replace one parameter class wholesale, skipping quaternion-norm validation.

    The renderer normalizes quaternions itself, so finite-difference probes and attack
    iterates may carry slightly non-unit rotations.
    """
    param_class = ParamClass(param_class)
    attr = _ATTR[param_class]
    kwargs = {
        a: getattr(scene, a)
        for a in ("means", "rotations", "scales", "opacities", "sh_dc", "sh_rest",
                  "regions", "sh_bands", "background", "schema_version")
    }
    kwargs[attr] = np.asarray(values, dtype=np.float64).reshape(getattr(scene, attr).shape)
    return Scene(**kwargs, _validated=True)


def apply_param_constraints(scene: Scene, param_class=None) -> Scene:
    """Project parameters back onto their valid sets.

    Opacity is clipped to [0, 1], scales floored at 1e-6 and quaternions renormalized.
    Colors are left alone.
    """
    opac = np.clip(scene.opacities, 0.0, 1.0)
    scales = np.maximum(scene.scales, SCALE_FLOOR)
    q = scene.rotations
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 0):
        q = q / norms
    changed = (
        not np.array_equal(opac, scene.opacities)
        or not np.array_equal(scales, scene.scales)
        or q is not scene.rotations
    )
    if not changed:
        return scene
    return scene.replace(opacities=opac, scales=scales, rotations=q)


# --------------------------------------------------------------------------- finite differences


def fd_gradient(scene: Scene, view: CameraView, pose: Pose | None, loss_fn, param_class,
                h: float = 1e-4, settings: RenderSettings | None = None, indices=None,
                return_mask: bool = False):
    """Central-difference gradient of ``loss_fn(image_pixels)`` w.r.t. a parameter class.

    The step for coordinate ``x`` is ``h * max(1, |x|)``. With ``return_mask`` a boolean
    array marks coordinates whose stencil crossed no discrete boundary (sort order, alpha
    cutoffs or caps, color clamps), where finite differences are meaningful.
    ``indices`` restricts the probe to a subset of flat coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if settings is None:
        settings = RenderSettings(dtype="longdouble")
    base = get_params(scene, param_class)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    mask = np.zeros(flat.shape, dtype=bool)
    coords = range(flat.size) if indices is None else indices
    _, inter0 = render(scene, view, pose, settings)
    sig0 = inter0.state_signature()
    for j in coords:
        step = h * max(1.0, abs(flat[j]))
        vals = []
        ok = True
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[j] = flat[j] + sgn * step
            img, inter = render(set_params(scene, param_class, probe), view, pose, settings)
            vals.append(loss_fn(img.pixels))
            ok = ok and inter.state_signature() == sig0
        # Use the realized step: flat[j] +- step may round.
        grad[j] = float((vals[0] - vals[1]) / ((flat[j] + step) - (flat[j] - step)))
        mask[j] = ok
    grad = grad.reshape(base.shape)
    if return_mask:
        return grad, mask.reshape(base.shape)
    return grad
