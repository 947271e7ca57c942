"""Learnable heads: image encoder, deformation field, articulation,
texture decoder, and multi-hypothesis pose.

All parameters live in one ParamStore so checkpointing and Adam treat the
model uniformly.  Weight init is Kaiming-uniform for conv/linear weights and
zeros for biases, except the optional azimuth spread on the pose heads.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .mesh import TriMesh, SymmetryMap, icosphere, symmetry_pairs
from .optim import ParamStore
from .render import CameraPose, euler_matrices_deg
from .skinning import Articulation, identity_articulation

SCALE_CLAMP = 0.7          # part scale = exp(clamp(raw, +-0.7)), about [0.5, 2]
ROTATION_RANGE_DEG = 45.0  # per-part Euler angle bound
TRANSLATION_RANGE = 0.3    # per-part translation bound
AZIM_RANGE = 180.0
ELEV_RANGE = (-15.0, 30.0)
ROLL_RANGE = 30.0
CAM_TRANS_RANGE = 0.5


def _kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng, dtype=np.float32, zero_init: bool = False,
                 init_scale: float = 1.0):
        # regressor output layers start at (or near) zero so the model begins
        # at the canonical sphere / near-uniform parts / identity transforms;
        # articulation heads keep a small random component to break the
        # part-symmetry saddle at uniform assignments
        if zero_init:
            w = np.zeros((n_out, n_in))
        else:
            w = _kaiming_uniform(rng, (n_out, n_in), n_in) * init_scale
        self.w = store.add(f"{name}.w", w.astype(dtype))
        self.b = store.add(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(self.w)) + self.b


class Conv3x3:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng, dtype=np.float32):
        self.k = store.add(f"{name}.k",
                           _kaiming_uniform(rng, (c_out, c_in, 3, 3),
                                            c_in * 9).astype(dtype))
        self.b = store.add(f"{name}.b", np.zeros((c_out, 1, 1), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.k) + self.b


class Encoder:
    """Reduced residual conv net: 4 stride-2 stages, global average pool.

    The pooled channel count equals feature_dim, so the pooled vector is the
    global image feature directly.
    """

    def __init__(self, store, name, feature_dim, rng, dtype=np.float32):
        self.feature_dim = feature_dim
        widths = [max(feature_dim // 8, 4), max(feature_dim // 4, 8),
                  max(feature_dim // 2, 8), feature_dim]
        self.stem = Conv3x3(store, f"{name}.stem", 3, widths[0], rng, dtype)
        self.stage_in = []
        self.blocks = []
        c_prev = widths[0]
        for i, c in enumerate(widths):
            self.stage_in.append(Conv3x3(store, f"{name}.s{i}.in", c_prev, c,
                                         rng, dtype))
            self.blocks.append((Conv3x3(store, f"{name}.s{i}.a", c, c, rng, dtype),
                                Conv3x3(store, f"{name}.s{i}.b", c, c, rng, dtype)))
            c_prev = c

    def __call__(self, image: Tensor) -> Tensor:
        x = ad.relu(self.stem(image))
        for conv_in, (conv_a, conv_b) in zip(self.stage_in, self.blocks):
            x = ad.avgpool2(x)
            x = ad.relu(conv_in(x))
            y = conv_b(ad.relu(conv_a(x)))
            x = ad.relu(x + y)
        pooled = ad.reduce_mean(ad.reshape(x, (x.shape[0], -1)), axis=1)
        return ad.reshape(pooled, (1, self.feature_dim))


class PointTrunk:
    """Shared shape for the deformation/articulation trunks: a point embed
    plus a feature embed, summed, then two hidden layers."""

    def __init__(self, store, name, feature_dim, rng, dtype=np.float32):
        self.point = Linear(store, f"{name}.point", 3, feature_dim, rng, dtype)
        self.feat = Linear(store, f"{name}.feat", feature_dim, feature_dim,
                           rng, dtype)
        self.h1 = Linear(store, f"{name}.h1", feature_dim, 128, rng, dtype)
        self.h2 = Linear(store, f"{name}.h2", 128, 128, rng, dtype)

    def __call__(self, points: Tensor, phi: Tensor) -> Tensor:
        h = ad.relu(self.point(points) + self.feat(phi))
        return ad.relu(self.h2(ad.relu(self.h1(h))))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of a (c, h, w) tensor.

    The sampling grid is static, so corner indices and lerp weights are
    constants; gradients flow through the gathered texels.
    """
    c, h, w = x.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    rows = ad.transpose(ad.reshape(x, (c, h * w)))   # (h*w, c)

    def grab(yi, xi):
        idx = (yi[:, None] * w + xi[None, :]).reshape(-1)
        return ad.gather(rows, idx)                  # (out_h*out_w, c)

    w00 = ((1 - fy) * (1 - fx)).reshape(-1, 1).astype(np.float32)
    w01 = ((1 - fy) * fx).reshape(-1, 1).astype(np.float32)
    w10 = (fy * (1 - fx)).reshape(-1, 1).astype(np.float32)
    w11 = (fy * fx).reshape(-1, 1).astype(np.float32)
    out = (Tensor(w00) * grab(y0, x0) + Tensor(w01) * grab(y0, x1)
           + Tensor(w10) * grab(y1, x0) + Tensor(w11) * grab(y1, x1))
    return ad.reshape(ad.transpose(out), (c, out_h, out_w))


class SaorModel:
    """All five heads plus the canonical sphere template and symmetry map."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.store = ParamStore()
        self.mesh: TriMesh = icosphere(cfg.subdivisions)
        self.sym: SymmetryMap = symmetry_pairs(self.mesh)
        self.articulation_enabled = cfg.articulation_enabled
        rng = np.random.default_rng(seed)
        d = cfg.feature_dim

        self.encoder = Encoder(self.store, "enc", d, rng, dtype)

        self.deform_trunk = PointTrunk(self.store, "def", d, rng, dtype)
        self.deform_out = Linear(self.store, "def.out", 128, 3, rng, dtype,
                                 zero_init=True)

        self.art_trunk = PointTrunk(self.store, "art", d, rng, dtype)
        self.art_assign = Linear(self.store, "art.assign", 128, cfg.num_parts,
                                 rng, dtype, init_scale=1e-3)
        self.art_parts = [Linear(self.store, f"art.part{k}", d, 9, rng, dtype,
                                 init_scale=1e-3)
                          for k in range(cfg.num_parts)]

        self.tex_fc = Linear(self.store, "tex.fc", d, d, rng, dtype)
        self.tex_convs = []
        ch = d
        size = 4
        i = 0
        while size < cfg.texture_res:
            nxt = max(ch // 2, 8)
            self.tex_convs.append(Conv3x3(self.store, f"tex.c{i}", ch, nxt,
                                          rng, dtype))
            ch = nxt
            size *= 2
            i += 1
        self.tex_out = Conv3x3(self.store, "tex.out", ch, 3, rng, dtype)

        self.pose_trunk = Linear(self.store, "pose.trunk", d, 128, rng, dtype)
        self.pose_heads = [Linear(self.store, f"pose.h{c}", 128, 6, rng,
                                  dtype, zero_init=True)
                           for c in range(cfg.num_cameras)]
        self.pose_score = Linear(self.store, "pose.score", 128,
                                 cfg.num_cameras, rng, dtype)
        if cfg.pose_azimuth_spread:
            # seed each hypothesis looking from a different side so the score
            # head has genuinely distinct viewpoints to select between
            c = cfg.num_cameras
            offsets = -AZIM_RANGE + (np.arange(c) + 0.5) * (2 * AZIM_RANGE / c)
            for k, off in enumerate(offsets):
                b = self.pose_heads[k].b
                b.data = b.data.copy()
                b.data[0] = np.arctanh(np.clip(off / AZIM_RANGE, -0.995, 0.995))

        # deformation is predicted for the non-negative-z vertex set and
        # mirrored onto the rest; equator rows get their z-displacement zeroed
        pos = self.sym.positive
        self._pos_idx = pos
        self._pos_coords = Tensor(self.mesh.vertices[pos].astype(dtype))
        eq_mask = np.ones((len(pos), 3), dtype=dtype)
        eq_mask[np.isin(pos, self.sym.equator), 2] = 0.0
        self._eq_mask = Tensor(eq_mask)
        strict = ~np.isin(pos, self.sym.equator)
        self._strict_rows = np.flatnonzero(strict)
        self._neg_idx = self.sym.mirror[pos[strict]]
        self._canonical = Tensor(self.mesh.vertices.astype(dtype))
        self._all_coords = Tensor(self.mesh.vertices.astype(dtype))

    # ------------------------------------------------------------------ heads

    def encode(self, image) -> Tensor:
        """Image (3, s, s) in [0, 1] -> global feature (1, feature_dim)."""
        image = ad.as_tensor(image)
        s = self.cfg.image_size
        if image.shape != (3, s, s):
            raise ad.ShapeError(f"encode expects (3, {s}, {s}) input, "
                                f"got {image.shape}")
        return self.encoder(image)

    def deform(self, phi: Tensor) -> Tensor:
        """Symmetric per-vertex displacement of the canonical sphere."""
        h = self.deform_trunk(self._pos_coords, phi)
        d = self.deform_out(h) * self._eq_mask
        n = self.mesh.n_vertices
        full = ad.scatter_rows(self._pos_idx, d, n)
        flip = Tensor(np.array([1.0, 1.0, -1.0], dtype=self.dtype))
        full = full + ad.scatter_rows(self._neg_idx,
                                      d[self._strict_rows] * flip, n)
        return self._canonical + full

    def articulation_params(self, phi: Tensor) -> Articulation:
        """Soft part assignment and decoded per-part transforms.

        When articulation is gated off, returns uniform weights and identity
        transforms built from constants so no articulation parameter touches
        the tape.
        """
        if not self.articulation_enabled:
            return identity_articulation(self.mesh.n_vertices,
                                         self.cfg.num_parts)
        h = self.art_trunk(self._all_coords, phi)
        weights = ad.softmax(self.art_assign(h), axis=1)
        raw = ad.concat([head(phi) for head in self.art_parts], axis=0)  # (K,9)
        scales = ad.exp(ad.clip(raw[:, 0:3], -SCALE_CLAMP, SCALE_CLAMP))
        angles = ad.tanh(raw[:, 3:6]) * ROTATION_RANGE_DEG
        rotations = euler_matrices_deg(angles)
        translations = ad.tanh(raw[:, 6:9]) * TRANSLATION_RANGE
        return Articulation(weights=weights, scales=scales,
                            rotations=rotations, translations=translations)

    def texture(self, phi: Tensor) -> Tensor:
        """UV texture image (3, uv_height, uv_width) in [0, 1]."""
        x = ad.reshape(self.tex_fc(phi), (self.cfg.feature_dim, 1, 1))
        x = ad.upsample_nearest2(ad.upsample_nearest2(x))  # (d, 4, 4)
        for conv in self.tex_convs:
            x = ad.relu(conv(ad.upsample_nearest2(x)))
        x = ad.sigmoid(self.tex_out(x))
        if x.shape[1:] != (self.cfg.uv_height, self.cfg.uv_width):
            x = bilinear_resize(x, self.cfg.uv_height, self.cfg.uv_width)
        return x

    def pose(self, phi: Tensor):
        """Multi-hypothesis camera: returns (chosen pose, (C, 6) decoded
        hypotheses, (C,) scores)."""
        h = ad.relu(self.pose_trunk(phi))
        raws = ad.concat([head(h) for head in self.pose_heads], axis=0)  # (C,6)
        azim = ad.tanh(raws[:, 0:1]) * AZIM_RANGE
        e_mid = (ELEV_RANGE[0] + ELEV_RANGE[1]) / 2.0
        e_half = (ELEV_RANGE[1] - ELEV_RANGE[0]) / 2.0
        elev = ad.tanh(raws[:, 1:2]) * e_half + e_mid
        roll = ad.tanh(raws[:, 2:3]) * ROLL_RANGE
        trans = ad.tanh(raws[:, 3:6]) * CAM_TRANS_RANGE
        decoded = ad.concat([azim, elev, roll, trans], axis=1)  # (C, 6)
        alpha = ad.reshape(ad.softmax(self.pose_score(h), axis=1), (-1,))
        best = int(np.argmax(alpha.data))
        pose = CameraPose(
            azimuth=ad.reshape(decoded[best, 0:1], ()),
            elevation=ad.reshape(decoded[best, 1:2], ()),
            roll=ad.reshape(decoded[best, 2:3], ()),
            translation=decoded[best, 3:6],
        )
        return pose, decoded, alpha

    def hypothesis_pose(self, decoded: Tensor, index: int) -> CameraPose:
        return CameraPose(
            azimuth=ad.reshape(decoded[index, 0:1], ()),
            elevation=ad.reshape(decoded[index, 1:2], ()),
            roll=ad.reshape(decoded[index, 2:3], ()),
            translation=decoded[index, 3:6],
        )
