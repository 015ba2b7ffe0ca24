"""Splat projection, depth-ordered alpha compositing and its analytic adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster
from .dropout import DropoutMask
from .errors import ShapeError
from .scene import COLOR, LOG_SCALE, OPACITY, POS, ROT, Camera, GaussianField, GaussianPrimitive, sigmoid

# screen-space dilation added to the projected covariance diagonal (pixels^2)
COV2D_DILATION = 0.3
ALPHA_MAX = _raster.ALPHA_MAX
T_EPS = _raster.T_EPS
# Mahalanobis^2 bound matching the kernel's power cutoff; used for the per-pixel box test
_BOX_M2 = -2.0 * _raster.POWER_CUTOFF


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(..., 4)`` in (w, x, y, z) order."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a unit quaternion given the gradient ``g`` w.r.t. its rotation matrix."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape)
    out[..., 0] = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                       - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    out[..., 1] = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
                       - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    out[..., 2] = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
                       + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    out[..., 3] = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
                       - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return out


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


@dataclass
class Projection:
    """Screen-space splats for one view, depth sorted, plus the intermediates the adjoint needs."""

    index: np.ndarray      # (K,) source rows in the field
    depth: np.ndarray
    means2d: np.ndarray    # (K, 2)
    cov2d: np.ndarray      # (K, 2, 2), dilated
    conics: np.ndarray     # (K, 3) entries (a, b, c) of the inverse covariance
    opacity: np.ndarray    # (K,) activated and compensated
    colors: np.ndarray     # (K, 3)
    bbox: np.ndarray       # (K, 4) xmin, xmax, ymin, ymax
    # intermediates
    t_cam: np.ndarray
    quat: np.ndarray
    qnorm: np.ndarray
    rotmat: np.ndarray
    scale: np.ndarray
    jw: np.ndarray         # (K, 2, 3) projection Jacobian times camera rotation
    cov3d: np.ndarray
    opacity_scale: float = 1.0

    def __len__(self) -> int:
        return self.index.shape[0]


def project(params: np.ndarray, cam: Camera, keep: np.ndarray | None = None,
            opacity_scale: float = 1.0) -> Projection:
    """Project the kept primitives of ``params`` into ``cam``; drop culled ones; sort by depth."""
    n = params.shape[0]
    idx = np.arange(n) if keep is None else np.flatnonzero(keep)
    p = params[idx]
    w_rot = cam.rotation
    t_cam = p[:, POS] @ w_rot.T + cam.translation
    in_front = t_cam[:, 2] > cam.near
    idx, p, t_cam = idx[in_front], p[in_front], t_cam[in_front]

    fx, fy = cam.focal
    cx, cy = cam.principal
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    means = np.stack([fx * tx / tz + cx, fy * ty / tz + cy], axis=1)

    qnorm = np.linalg.norm(p[:, ROT], axis=1)
    quat = p[:, ROT] / qnorm[:, None]
    rotmat = quat_to_rotmat(quat)
    scale = np.exp(p[:, LOG_SCALE])
    m = rotmat * scale[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / tz**2
    jw = jac @ w_rot
    cov2d = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    # trace/det form of the larger eigenvalue
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r3 = 3.0 * np.sqrt(lam_max)
    on_screen = ((means[:, 0] + r3 >= 0) & (means[:, 0] - r3 <= cam.width)
                 & (means[:, 1] + r3 >= 0) & (means[:, 1] - r3 <= cam.height))

    sel = on_screen
    order = np.lexsort((idx[sel], tz[sel]))
    pick = np.flatnonzero(sel)[order]

    a, b, c, det = a[pick], b[pick], c[pick], det[pick]
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    means = means[pick]
    hx = np.sqrt(_BOX_M2 * a)
    hy = np.sqrt(_BOX_M2 * c)
    bbox = np.stack([means[:, 0] - hx, means[:, 0] + hx, means[:, 1] - hy, means[:, 1] + hy], axis=1)
    pp = p[pick]
    return Projection(
        index=idx[pick], depth=tz[pick], means2d=means, cov2d=cov2d[pick], conics=conics,
        opacity=sigmoid(pp[:, OPACITY]) * opacity_scale, colors=sigmoid(pp[:, COLOR]), bbox=bbox,
        t_cam=t_cam[pick], quat=quat[pick], qnorm=qnorm[pick], rotmat=rotmat[pick],
        scale=scale[pick], jw=jw[pick], cov3d=cov3d[pick], opacity_scale=opacity_scale,
    )


def project_gaussian(g: GaussianPrimitive, cam: Camera) -> Projected2D | None:
    """Screen-space splat for one primitive, or None when it is culled."""
    proj = project(g.to_row()[None, :], cam)
    if len(proj) == 0:
        return None
    return Projected2D(proj.means2d[0].copy(), proj.cov2d[0].copy(), float(proj.depth[0]), 0)


def composite(pixel, splats, opacities, colors, background) -> np.ndarray:
    """Reference front-to-back compositing of one pixel over depth-sorted ``splats``.

    Exhaustive traversal in plain Python; the raster kernels are checked against it.
    """
    px, py = float(pixel[0]), float(pixel[1])
    out = np.zeros(3)
    t = 1.0
    for s, a, col in zip(splats, opacities, colors):
        d = np.array([px, py]) - s.mean2d
        cov = s.cov2d
        eig = np.linalg.eigvalsh(cov)
        assert eig[0] >= COV2D_DILATION - 1e-9, "cov2d below dilation floor"
        alpha = min(ALPHA_MAX, a * np.exp(-0.5 * d @ np.linalg.solve(cov, d)))
        out += np.asarray(col) * alpha * t
        t *= 1.0 - alpha
    return out + t * np.asarray(background, dtype=np.float64)


def _check_mask(fld: GaussianField, mask) -> np.ndarray | None:
    if mask is None:
        return None
    keep = mask.keep if isinstance(mask, DropoutMask) else np.asarray(mask, dtype=bool)
    if keep.shape != (len(fld),):
        raise ShapeError(f"mask length {keep.shape} does not match field size {len(fld)}")
    return keep


def _raster_args(proj: Projection):
    return (np.ascontiguousarray(proj.means2d), np.ascontiguousarray(proj.conics),
            np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.colors),
            np.ascontiguousarray(proj.bbox))


def render(fld: GaussianField, mask, cam: Camera, background=(0.0, 0.0, 0.0), *,
           opacity_scale: float = 1.0, parallel: bool = False, t_eps: float = T_EPS,
           return_transmittance: bool = False):
    """Render ``fld`` (restricted to ``mask``; None keeps everything) into an H x W x 3 image."""
    keep = _check_mask(fld, mask)
    bg = np.asarray(background, dtype=np.float64)
    proj = project(fld.params, cam, keep, opacity_scale)
    fwd = _raster.forward_parallel if parallel else _raster.forward_serial
    img, trans = fwd(*_raster_args(proj), cam.height, cam.width, bg, t_eps)
    return (img, trans) if return_transmittance else img


def render_backward(fld: GaussianField, mask, cam: Camera, background, upstream: np.ndarray, *,
                    opacity_scale: float = 1.0, parallel: bool = False, t_eps: float = T_EPS) -> None:
    """Accumulate d(sum(upstream * render))/d(params) into ``fld.grads``."""
    keep = _check_mask(fld, mask)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"upstream shape {upstream.shape} != {(cam.height, cam.width, 3)}")
    if not np.any(upstream):
        return
    bg = np.asarray(background, dtype=np.float64)
    proj = project(fld.params, cam, keep, opacity_scale)
    if len(proj) == 0:
        return
    bwd = _raster.backward_parallel if parallel else _raster.backward_serial
    acc = bwd(*_raster_args(proj), cam.height, cam.width, bg, t_eps, upstream)
    fld.grads[proj.index] += splat_vjp(proj, _raster.reduce_rows(acc), cam, fld.params[proj.index])


def splat_vjp(proj: Projection, g: np.ndarray, cam: Camera, rows: np.ndarray) -> np.ndarray:
    """Chain per-splat screen-space gradients ``g`` (K, 9) back to raw parameters (K, 14)."""
    k = len(proj)
    out = np.zeros((k, 14))
    g_mean = g[:, 0:2]
    g_conic = g[:, 2:5]
    g_opac = g[:, 5]
    g_col = g[:, 6:9]

    col = proj.colors
    out[:, COLOR] = g_col * col * (1.0 - col)
    base_opac = sigmoid(rows[:, OPACITY])
    out[:, OPACITY] = g_opac * proj.opacity_scale * base_opac * (1.0 - base_opac)

    # conic (a, b, c) -> full symmetric 2x2 gradient -> covariance gradient
    q = np.empty((k, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (proj.conics[:, 0], proj.conics[:, 1],
                                                      proj.conics[:, 1], proj.conics[:, 2])
    gq = np.empty((k, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -q @ gq @ q

    jw = proj.jw
    g_cov3d = np.swapaxes(jw, 1, 2) @ g_cov2d @ jw
    g_jw = 2.0 * g_cov2d @ jw @ proj.cov3d
    g_jac = g_jw @ cam.rotation.T

    fx, fy = cam.focal
    tx, ty, tz = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    g_t = np.zeros((k, 3))
    g_t[:, 0] = g_mean[:, 0] * fx / tz
    g_t[:, 1] = g_mean[:, 1] * fy / tz
    g_t[:, 2] = -(g_mean[:, 0] * fx * tx + g_mean[:, 1] * fy * ty) / tz**2
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (g_jac[:, 0, 0] * (-fx / tz**2) + g_jac[:, 0, 2] * (2 * fx * tx / tz**3)
                  + g_jac[:, 1, 1] * (-fy / tz**2) + g_jac[:, 1, 2] * (2 * fy * ty / tz**3))
    out[:, POS] = g_t @ cam.rotation

    # cov3d = M M^T with M = R diag(s)
    m = proj.rotmat * proj.scale[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_rot = g_m * proj.scale[:, None, :]
    g_scale = np.einsum("kij,kij->kj", g_m, proj.rotmat)
    out[:, LOG_SCALE] = g_scale * proj.scale

    g_qhat = _rotmat_vjp(proj.quat, g_rot)
    radial = np.sum(g_qhat * proj.quat, axis=1, keepdims=True)
    out[:, ROT] = (g_qhat - proj.quat * radial) / proj.qnorm[:, None]
    return out
