"""Differentiable image formation: perspective camera, soft rasterization,
UV texturing, plus a hard z-buffer rasterizer for ground-truth rendering.

The soft rasterizer follows the sigmoid-coverage / depth-softmax blending
scheme: per-pixel face occupancy is sigmoid(sign * d^2 / sigma) with d the
signed screen-space distance to the face, silhouettes compose occupancies
multiplicatively, and color/depth are softmax blends sharpened by gamma with
a background term.  Faces are pre-culled per pixel tile to the k_faces
nearest candidates; this is an approximation knob, exact when k_faces >= F.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RenderConfig
from .mesh import TriMesh

_EPS = 1e-8

# count of vertices clamped to the near plane since process start
near_clamp_count = 0


@dataclass
class CameraPose:
    """Euler-angle camera: rotation in degrees, translation in object units.

    Fields may be floats or scalar Tensors; Tensors keep the pose on the
    gradient tape.
    """

    azimuth: object = 0.0
    elevation: object = 0.0
    roll: object = 0.0
    translation: object = None

    def __post_init__(self):
        self.azimuth = ad.as_tensor(self.azimuth)
        self.elevation = ad.as_tensor(self.elevation)
        self.roll = ad.as_tensor(self.roll)
        if self.translation is None:
            self.translation = np.zeros(3, dtype=np.float32)
        self.translation = ad.as_tensor(self.translation)

    def as_floats(self) -> np.ndarray:
        return np.concatenate([
            np.atleast_1d(self.azimuth.data).ravel(),
            np.atleast_1d(self.elevation.data).ravel(),
            np.atleast_1d(self.roll.data).ravel(),
            self.translation.data.ravel(),
        ]).astype(np.float64)


@dataclass
class RenderOutput:
    rgb: Tensor          # (3, H, W) in [0, 1]
    silhouette: Tensor   # (H, W) in [0, 1]
    depth: Tensor        # (H, W) camera-space depth, background = far


def _scalar(t: Tensor) -> Tensor:
    return ad.reshape(t, (1,))


def euler_matrix_deg(azimuth, elevation, roll) -> Tensor:
    """R = Rz(roll) @ Rx(elev) @ Ry(azim); angles in degrees.

    Azimuth rotates about the vertical (y) axis, elevation pitches about x,
    roll spins about the view axis.
    """
    rad = math.pi / 180.0
    a = _scalar(ad.as_tensor(azimuth)) * rad
    e = _scalar(ad.as_tensor(elevation)) * rad
    r = _scalar(ad.as_tensor(roll)) * rad
    sa, ca = ad.sin(a), ad.cos(a)
    se, ce = ad.sin(e), ad.cos(e)
    sr, cr = ad.sin(r), ad.cos(r)
    zero = Tensor(np.zeros(1, dtype=a.dtype))
    one = Tensor(np.ones(1, dtype=a.dtype))
    ry = ad.reshape(ad.concat([ca, zero, sa, zero, one, zero, -sa, zero, ca]),
                    (3, 3))
    rx = ad.reshape(ad.concat([one, zero, zero, zero, ce, -se, zero, se, ce]),
                    (3, 3))
    rz = ad.reshape(ad.concat([cr, -sr, zero, sr, cr, zero, zero, zero, one]),
                    (3, 3))
    return ad.matmul(rz, ad.matmul(rx, ry))


def euler_matrices_deg(angles: Tensor) -> Tensor:
    """Batch version: (K, 3) degree angles -> (K, 3, 3) rotation matrices."""
    rad = math.pi / 180.0
    a = angles[:, 0] * rad
    e = angles[:, 1] * rad
    r = angles[:, 2] * rad
    sa, ca = ad.sin(a), ad.cos(a)
    se, ce = ad.sin(e), ad.cos(e)
    sr, cr = ad.sin(r), ad.cos(r)
    # Rz(r) @ Rx(e) @ Ry(a), expanded per element
    m00 = cr * ca - sr * se * sa
    m01 = -sr * ce
    m02 = cr * sa + sr * se * ca
    m10 = sr * ca + cr * se * sa
    m11 = cr * ce
    m12 = sr * sa - cr * se * ca
    m20 = -ce * sa
    m21 = se
    m22 = ce * ca
    flat = ad.stack([m00, m01, m02, m10, m11, m12, m20, m21, m22], axis=1)
    return ad.reshape(flat, (angles.shape[0], 3, 3))


def view_project(S, pose: CameraPose, height: int, width: int,
                 cfg: RenderConfig) -> tuple[Tensor, Tensor]:
    """Perspective projection to pixel coordinates plus camera-space depth.

    The camera sits at a fixed distance along the view axis; pose translation
    is applied in the camera frame.  Vertices in front of the near plane are
    clamped to it (counted in ``near_clamp_count``).
    """
    global near_clamp_count
    S = ad.as_tensor(S)
    R = euler_matrix_deg(pose.azimuth, pose.elevation, pose.roll)
    cam = ad.matmul(S, ad.transpose(R))
    offset = ad.reshape(pose.translation, (1, 3)) + Tensor(
        np.array([[0.0, 0.0, cfg.distance]], dtype=np.float32))
    cam = cam + offset
    z = cam[:, 2]
    n_clamped = int((z.data < cfg.near).sum())
    if n_clamped:
        near_clamp_count += n_clamped
    z_safe = ad.maximum(z, float(cfg.near))
    focal = 1.0 / math.tan(math.radians(cfg.fov_deg) / 2.0)
    ndc_x = cam[:, 0] * focal / z_safe
    ndc_y = cam[:, 1] * focal / z_safe
    px = (ndc_x + 1.0) * (width / 2.0) - 0.5
    py = (1.0 - ndc_y) * (height / 2.0) - 0.5
    return ad.stack([px, py], axis=1), z_safe


def _pixel_centers(height: int, width: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float32),
                         np.arange(width, dtype=np.float32), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)  # (P, 2) as (x, y)


def _candidate_faces(screen_np, z_np, faces, height, width, k_faces, tile,
                     pad_px):
    """Per-pixel candidate face indices (-1 padded), grouped by pixel tile.

    Faces overlapping a tile's padded bounding box are candidates for all of
    its pixels; if more than k_faces overlap, the nearest by mean depth win.
    """
    fx = screen_np[faces, 0]
    fy = screen_np[faces, 1]
    zmean = z_np[faces].mean(axis=1)
    min_x, max_x = fx.min(axis=1), fx.max(axis=1)
    min_y, max_y = fy.min(axis=1), fy.max(axis=1)
    finite = np.isfinite(min_x) & np.isfinite(min_y) & \
        np.isfinite(max_x) & np.isfinite(max_y)

    n_ty = (height + tile - 1) // tile
    n_tx = (width + tile - 1) // tile
    cand = np.full((height, width, k_faces), -1, dtype=np.int64)
    for ti in range(n_ty):
        y0, y1 = ti * tile, min((ti + 1) * tile, height)
        for tj in range(n_tx):
            x0, x1 = tj * tile, min((tj + 1) * tile, width)
            hit = finite & (max_x >= x0 - pad_px) & (min_x <= x1 - 1 + pad_px) \
                & (max_y >= y0 - pad_px) & (min_y <= y1 - 1 + pad_px)
            idx = np.flatnonzero(hit)
            if len(idx) > k_faces:
                keep = np.argpartition(zmean[idx], k_faces)[:k_faces]
                idx = idx[np.sort(keep)]
            cand[y0:y1, x0:x1, :len(idx)] = idx
    return cand.reshape(-1, k_faces)


def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


def _edge_distance_sq(corners: Tensor, pix: np.ndarray) -> Tensor:
    """Fused min squared distance from pixel centers to the 3 face edges.

    corners: (P, K, 3, 2) screen coordinates; pix: (P, 2) constant centers.
    Backward uses the closed form dd2/dA = -2(1-t) d, dd2/dB = -2t d for the
    nearest edge, valid in both the clamped and interior-projection cases.
    """
    c = corners.data
    a = c
    b = c[:, :, (1, 2, 0), :]
    v = b - a
    w = pix[:, None, None, :] - a
    vv = (v * v).sum(-1)
    wv = (w * v).sum(-1)
    t = np.clip(wv / (vv + _EPS), 0.0, 1.0)
    d = w - t[..., None] * v
    d2all = (d * d).sum(-1)                         # (P, K, 3)
    choose = np.argmin(d2all, axis=-1)              # (P, K)
    d2 = np.take_along_axis(d2all, choose[..., None], axis=-1)[..., 0]

    def bw(g):
        t_ch = np.take_along_axis(t, choose[..., None], -1)[..., 0]
        d_ch = np.take_along_axis(d, choose[..., None, None], 2)[:, :, 0, :]
        ga = (-2.0 * (1.0 - t_ch) * g)[..., None] * d_ch
        gb = (-2.0 * t_ch * g)[..., None] * d_ch
        gc = np.zeros_like(c)
        for e in range(3):
            mask = (choose == e)[..., None]
            gc[:, :, e, :] += np.where(mask, ga, 0.0)
            gc[:, :, (e + 1) % 3, :] += np.where(mask, gb, 0.0)
        return (gc,)

    return ad._record(Tensor(d2), (corners,), bw)


def soft_rasterize(mesh: TriMesh, screen: Tensor, depth: Tensor,
                   texture, cfg: RenderConfig, height: int, width: int,
                   with_rgb: bool = True,
                   silhouette_only: bool = False) -> RenderOutput:
    """Differentiably rasterize projected faces into rgb/silhouette/depth.

    ``texture`` is a (3, uv_h, uv_w) Tensor or None (background color is used
    for rgb).  Everything downstream of the candidate culling is on the tape.
    With ``silhouette_only``, rgb and depth are background constants.
    """
    faces = mesh.faces
    n_pix = height * width
    bg_rgb = np.full((n_pix, 3), cfg.background, dtype=np.float32)
    bg_out = RenderOutput(
        rgb=Tensor(bg_rgb.T.reshape(3, height, width).copy()),
        silhouette=Tensor(np.zeros((height, width), dtype=np.float32)),
        depth=Tensor(np.full((height, width), cfg.far, dtype=np.float32)),
    )
    if len(faces) == 0:
        return bg_out

    sigma_px2 = cfg.sigma * (width / 2.0) ** 2  # sigma is in NDC^2 units
    pad_px = 3.0 * math.sqrt(sigma_px2) + 1.0
    k = min(cfg.k_faces, len(faces))
    cand = _candidate_faces(screen.data, depth.data, faces, height, width,
                            k, cfg.tile, pad_px)
    valid_np = cand >= 0
    safe = np.where(valid_np, cand, 0)
    valid = Tensor(valid_np.astype(screen.dtype))

    corners = ad.gather(ad.gather(screen, faces), safe)   # (P, K, 3, 2)
    pix = _pixel_centers(height, width).astype(screen.dtype)

    d2 = _edge_distance_sq(corners, pix)                  # (P, K)

    # inside test on values only; the sign is piecewise constant
    c_np = corners.data
    w0, w1, w2 = _bary_crosses(c_np, pix)
    inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | \
             ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
    sign = Tensor(np.where(inside, 1.0, -1.0).astype(screen.dtype))

    score = sign * d2 * (1.0 / sigma_px2)          # (P, K)
    sil_flat = 1.0 - ad.exp(-ad.reduce_sum(ad.softplus(score) * valid, axis=1))
    if silhouette_only:
        bg_out.silhouette = ad.reshape(sil_flat, (height, width))
        return bg_out

    zcorn = ad.gather(ad.gather(depth, faces), safe)      # (P, K, 3)
    pix_x = Tensor(pix[:, 0:1])
    pix_y = Tensor(pix[:, 1:2])
    cx = [corners[:, :, i, 0] for i in range(3)]
    cy = [corners[:, :, i, 1] for i in range(3)]

    # barycentric coordinates from signed sub-areas, clipped and renormalized
    wb = []
    for e in range(3):
        o = (e + 1) % 3, (e + 2) % 3  # edge opposite corner e
        wb.append(_cross2(cx[o[1]] - cx[o[0]], cy[o[1]] - cy[o[0]],
                          pix_x - cx[o[0]], pix_y - cy[o[0]]))
    area = wb[0] + wb[1] + wb[2]
    area_sign = np.where(area.data >= 0, 1.0, -1.0).astype(screen.dtype)
    area_safe = area + Tensor(area_sign * _EPS)
    bary = [ad.clip(w / area_safe, 0.0, 1.0) for w in wb]
    bsum = bary[0] + bary[1] + bary[2] + _EPS
    bary = [b / bsum for b in bary]

    z_int = (bary[0] * zcorn[:, :, 0] + bary[1] * zcorn[:, :, 1]
             + bary[2] * zcorn[:, :, 2])           # (P, K)
    nearness = ad.clip((cfg.far - z_int) * (1.0 / (cfg.far - cfg.near)), 0.0, 1.0)

    # log-space blend: logit = log(coverage) + nearness/gamma, max-shifted so
    # the dominant term (or the background, logit 0) is always exp(0) = 1
    log_prob = -ad.softplus(-score)
    logits = log_prob + nearness * (1.0 / cfg.gamma)
    logits = logits + Tensor((valid_np.astype(screen.dtype) - 1.0) * 1e9)
    m = np.maximum(logits.data.max(axis=1, keepdims=True), 0.0)
    wexp = ad.exp(logits - Tensor(m))
    w_bg = np.exp(0.0 - m[:, 0]).astype(screen.dtype)  # (P,)
    denom = ad.reduce_sum(wexp, axis=1) + Tensor(w_bg)

    depth_flat = (ad.reduce_sum(wexp * z_int, axis=1)
                  + Tensor(w_bg * cfg.far)) / denom

    if with_rgb and texture is not None:
        colors = _sample_texture(mesh, texture, safe, bary)   # (P, K, 3)
        w3 = ad.reshape(wexp, (n_pix, k, 1))
        rgb_flat = (ad.reduce_sum(w3 * colors, axis=1)
                    + Tensor(w_bg[:, None] * bg_rgb)) / ad.reshape(
                        denom, (n_pix, 1))
    else:
        rgb_flat = Tensor(bg_rgb)

    return RenderOutput(
        rgb=ad.reshape(ad.transpose(rgb_flat), (3, height, width)),
        silhouette=ad.reshape(sil_flat, (height, width)),
        depth=ad.reshape(depth_flat, (height, width)),
    )


def _bary_crosses(c_np, pix):
    """Signed sub-areas for the inside test, on raw values."""
    px = pix[:, 0:1]
    py = pix[:, 1:2]
    out = []
    for e in range(3):
        o1, o2 = (e + 1) % 3, (e + 2) % 3
        ax, ay = c_np[:, :, o1, 0], c_np[:, :, o1, 1]
        bx, by = c_np[:, :, o2, 0], c_np[:, :, o2, 1]
        out.append(_cross2(bx - ax, by - ay, px - ax, py - ay))
    return out


def _sample_texture(mesh: TriMesh, texture: Tensor, cand, bary):
    """Bilinear texture lookup at barycentric-interpolated UVs.

    u wraps around the seam, v clamps at the poles.  Integer cell indices are
    taken off-tape; the fractional lerp weights stay differentiable.
    """
    _, th, tw = texture.shape
    uvf = mesh.uv_table[mesh.face_uv]          # (F, 3, 2) constant
    uv_pk = uvf[cand]                          # (P, K, 3, 2) constant
    u = (bary[0] * Tensor(uv_pk[:, :, 0, 0]) + bary[1] * Tensor(uv_pk[:, :, 1, 0])
         + bary[2] * Tensor(uv_pk[:, :, 2, 0]))
    v = (bary[0] * Tensor(uv_pk[:, :, 0, 1]) + bary[1] * Tensor(uv_pk[:, :, 1, 1])
         + bary[2] * Tensor(uv_pk[:, :, 2, 1]))

    upx = u * float(tw) - 0.5
    vpx = v * float(th) - 0.5
    iu = np.floor(upx.data)
    iv = np.floor(vpx.data)
    fu = upx - Tensor(iu)
    fv = vpx - Tensor(iv)
    ju0 = np.mod(iu.astype(np.int64), tw)
    ju1 = np.mod(ju0 + 1, tw)
    jv0 = np.clip(iv.astype(np.int64), 0, th - 1)
    jv1 = np.clip(jv0 + 1, 0, th - 1)

    rows = ad.transpose(ad.reshape(texture, (3, th * tw)))  # (th*tw, 3)
    p, k = cand.shape

    def corner(jv, ju):
        return ad.gather(rows, jv * tw + ju)  # (P, K, 3)

    fu3 = ad.reshape(fu, (p, k, 1))
    fv3 = ad.reshape(fv, (p, k, 1))
    one = 1.0
    return ((one - fu3) * (one - fv3) * corner(jv0, ju0)
            + fu3 * (one - fv3) * corner(jv0, ju1)
            + (one - fu3) * fv3 * corner(jv1, ju0)
            + fu3 * fv3 * corner(jv1, ju1))


def render(S, texture, pose: CameraPose, mesh: TriMesh, cfg: RenderConfig,
           height: int, width: int, with_rgb: bool = True) -> RenderOutput:
    """Full image formation: project then soft-rasterize."""
    screen, depth = view_project(S, pose, height, width, cfg)
    return soft_rasterize(mesh, screen, depth, texture, cfg, height, width,
                          with_rgb=with_rgb)


def hard_rasterize(screen_np, z_np, faces, height, width, far,
                   vertex_colors=None, background=0.5):
    """Non-differentiable z-buffer rasterizer (ground truth and eval only).

    Returns (rgb (3,H,W), mask (H,W), depth (H,W), face_id (H,W)).
    """
    zbuf = np.full((height, width), far, dtype=np.float64)
    fid = np.full((height, width), -1, dtype=np.int64)
    bary_buf = np.zeros((height, width, 3), dtype=np.float64)
    sx = screen_np[:, 0].astype(np.float64)
    sy = screen_np[:, 1].astype(np.float64)
    z64 = z_np.astype(np.float64)
    for f_idx, (a, b, c) in enumerate(faces):
        xs = sx[[a, b, c]]
        ys = sy[[a, b, c]]
        x0 = max(int(np.floor(xs.min())), 0)
        x1 = min(int(np.ceil(xs.max())) + 1, width)
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        area2 = _cross2(xs[1] - xs[0], ys[1] - ys[0], xs[2] - xs[0], ys[2] - ys[0])
        if abs(area2) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1, dtype=np.float64),
                             np.arange(y0, y1, dtype=np.float64))
        w0 = _cross2(xs[2] - xs[1], ys[2] - ys[1], gx - xs[1], gy - ys[1])
        w1 = _cross2(xs[0] - xs[2], ys[0] - ys[2], gx - xs[2], gy - ys[2])
        w2 = _cross2(xs[1] - xs[0], ys[1] - ys[0], gx - xs[0], gy - ys[0])
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | \
                 ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        b0, b1, b2 = w0 / area2, w1 / area2, w2 / area2
        zi = b0 * z64[a] + b1 * z64[b] + b2 * z64[c]
        win = zbuf[y0:y1, x0:x1]
        upd = inside & (zi < win)
        win[upd] = zi[upd]
        fid[y0:y1, x0:x1][upd] = f_idx
        for bi, bv in enumerate((b0, b1, b2)):
            bary_buf[y0:y1, x0:x1, bi][upd] = bv[upd]
    mask = (fid >= 0).astype(np.float32)
    rgb = np.full((3, height, width), background, dtype=np.float32)
    if vertex_colors is not None:
        hit = fid >= 0
        fcol = np.asarray(vertex_colors, dtype=np.float64)[faces]  # (F,3c,3)
        cols = (bary_buf[hit][:, :, None] * fcol[fid[hit]]).sum(axis=1)
        rgb[:, hit] = cols.T.astype(np.float32)
    return rgb, mask, zbuf.astype(np.float32), fid
