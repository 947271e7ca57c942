"""Evaluation: keypoint transfer with PCK, mask IoU, and the procedural
quadruped dataset used for small-scale end-to-end runs.

The synthetic generator builds an ellipsoid body with four closed cylinder
legs (swing angles shared within the front and hind pairs, so the mesh stays
bilaterally symmetric about the xy-plane), renders ground truth with the hard
rasterizer, and emits images, masks, PFM depth, keypoint sidecars, and a
standard manifest with the generating pose recorded per sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RenderConfig
from .data import (write_image, write_pfm, write_manifest, write_keypoints,
                   read_manifest)
from .mesh import icosphere
from .render import CameraPose, hard_rasterize, view_project

TRANSFER_RADIUS_PX = 10.0
VISIBILITY_TOL = 0.05


# ------------------------------------------------------------------- metrics

def mask_iou(mask_a, mask_b, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded masks; two empties give 1.0."""
    a = np.asarray(mask_a) > threshold
    b = np.asarray(mask_b) > threshold
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pck(predicted, ground_truth, bbox_size: float,
        threshold: float = 0.1) -> float:
    """Fraction of predictions within threshold * bbox_size of ground truth.

    ``predicted`` entries may be None (untransferable; counted as misses).
    Raises if there are no evaluable pairs.
    """
    if len(predicted) != len(ground_truth):
        raise ValueError("prediction/ground-truth lengths differ")
    if len(predicted) == 0:
        raise ValueError("no evaluable keypoint pairs")
    radius = threshold * bbox_size
    hits = 0
    for p, g in zip(predicted, ground_truth):
        if p is None:
            continue
        if math.hypot(p[0] - g[0], p[1] - g[1]) <= radius:
            hits += 1
    return hits / len(predicted)


def mask_bbox_size(mask) -> float:
    """max(width, height) of the tight bbox of a binary mask."""
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if len(xs) == 0:
        return 0.0
    return float(max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1))


# -------------------------------------------------------- keypoint transfer

def project_with_visibility(vertices, pose: CameraPose, faces, size: int,
                            cfg: RenderConfig):
    """Pixel positions of all vertices plus hard z-buffer visibility flags."""
    with ad.no_grad():
        screen, depth = view_project(ad.as_tensor(vertices), pose, size, size,
                                     cfg)
    screen_np, z_np = screen.data, depth.data
    _, _, zbuf, _ = hard_rasterize(screen_np, z_np, faces, size, size, cfg.far)
    px = np.clip(np.rint(screen_np[:, 0]).astype(int), 0, size - 1)
    py = np.clip(np.rint(screen_np[:, 1]).astype(int), 0, size - 1)
    on_screen = ((screen_np[:, 0] >= -0.5) & (screen_np[:, 0] < size - 0.5)
                 & (screen_np[:, 1] >= -0.5) & (screen_np[:, 1] < size - 0.5))
    visible = on_screen & (z_np <= zbuf[py, px] + VISIBILITY_TOL)
    return screen_np, visible


def transfer_keypoints(source_points, src_vertices, src_pose,
                       tgt_vertices, tgt_pose, faces, size: int,
                       cfg: RenderConfig):
    """Map source keypoints to the target image via nearest visible vertex.

    For each visible source point, the nearest visible projected vertex
    (within 10 px) is looked up and its index re-projected in the target
    view.  Points with no vertex in range come back as None (a miss).
    """
    src_px, src_vis = project_with_visibility(src_vertices, src_pose, faces,
                                              size, cfg)
    tgt_px, _ = project_with_visibility(tgt_vertices, tgt_pose, faces, size,
                                        cfg)
    vis_idx = np.flatnonzero(src_vis)
    out = []
    for p in source_points:
        if p is None:
            out.append(None)
            continue
        if len(vis_idx) == 0:
            out.append(None)
            continue
        d = np.hypot(src_px[vis_idx, 0] - p[0], src_px[vis_idx, 1] - p[1])
        j = int(np.argmin(d))
        if d[j] > TRANSFER_RADIUS_PX:
            out.append(None)
            continue
        v = vis_idx[j]
        out.append((float(tgt_px[v, 0]), float(tgt_px[v, 1])))
    return out


# ------------------------------------------------------- synthetic quadruped

@dataclass
class SyntheticSpec:
    """Procedural quadruped: ellipsoid body plus four closed leg cylinders."""

    body_radii: tuple = (0.55, 0.32, 0.26)  # along x (length), y, z (width)
    leg_radius: float = 0.07
    leg_length: float = 0.40
    leg_x: float = 0.30        # fore/hind attachment offset
    leg_z: float = 0.16        # left/right attachment offset
    leg_y: float = -0.12       # hip height
    swing_deg: float = 25.0    # max pair swing about z
    azimuth_range: tuple = (-180.0, 180.0)
    elev_range: tuple = (0.0, 15.0)
    texture_pattern: int = 0
    image_size: int = 64

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @staticmethod
    def load(path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text())
        spec = SyntheticSpec(**raw)
        spec.body_radii = tuple(spec.body_radii)
        spec.azimuth_range = tuple(spec.azimuth_range)
        spec.elev_range = tuple(spec.elev_range)
        return spec


def _cylinder(radius, length, segments=10):
    """Closed cylinder along -y from the origin: side quads plus fan caps."""
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([np.cos(ang) * radius, np.zeros(segments),
                     np.sin(ang) * radius], axis=1)
    top = ring.copy()
    bot = ring + np.array([0.0, -length, 0.0])
    verts = np.concatenate([top, bot,
                            [[0.0, 0.0, 0.0]], [[0.0, -length, 0.0]]])
    i_top_c, i_bot_c = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([i, segments + i, segments + j])
        faces.append([i, segments + j, j])
        faces.append([i_top_c, j, i])                     # top cap
        faces.append([i_bot_c, segments + i, segments + j])  # bottom cap
    return verts.astype(np.float64), np.asarray(faces, dtype=np.int64)


@dataclass
class QuadrupedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray                    # (N, 3) in [0, 1]
    keypoint_vertices: dict = field(default_factory=dict)  # name -> index


def build_quadruped(spec: SyntheticSpec, swing_front_deg: float,
                    swing_hind_deg: float) -> QuadrupedMesh:
    """Assemble the articulated quadruped for one sample.

    Front and hind leg pairs share their swing angle so the mesh remains
    exactly symmetric about the xy-plane.
    """
    body = icosphere(2)
    bv = body.vertices.astype(np.float64) * np.asarray(spec.body_radii)
    verts = [bv]
    faces = [body.faces.copy()]
    colors = [_body_colors(spec, bv)]
    kp = {
        "nose": int(np.argmax(bv[:, 0])),
        "tail": int(np.argmin(bv[:, 0])),
    }
    offset = len(bv)
    leg_defs = [
        ("leg_tip_fl", +spec.leg_x, +spec.leg_z, swing_front_deg),
        ("leg_tip_fr", +spec.leg_x, -spec.leg_z, swing_front_deg),
        ("leg_tip_bl", -spec.leg_x, +spec.leg_z, swing_hind_deg),
        ("leg_tip_br", -spec.leg_x, -spec.leg_z, swing_hind_deg),
    ]
    segments = 10
    for name, lx, lz, swing in leg_defs:
        lv, lf = _cylinder(spec.leg_radius, spec.leg_length, segments)
        a = math.radians(swing)
        rot = np.array([[math.cos(a), -math.sin(a), 0.0],
                        [math.sin(a), math.cos(a), 0.0],
                        [0.0, 0.0, 1.0]])
        lv = lv @ rot.T + np.array([lx, spec.leg_y, lz])
        verts.append(lv)
        faces.append(lf + offset)
        colors.append(np.full((len(lv), 3), (0.35, 0.22, 0.12)))
        kp[name] = offset + 2 * segments + 1  # bottom cap center vertex
        offset += len(lv)
    return QuadrupedMesh(
        vertices=np.concatenate(verts).astype(np.float32),
        faces=np.concatenate(faces),
        colors=np.concatenate(colors).astype(np.float32),
        keypoint_vertices=kp,
    )


def _body_colors(spec: SyntheticSpec, bv: np.ndarray) -> np.ndarray:
    base = np.array([0.72, 0.5, 0.28])
    colors = np.tile(base, (len(bv), 1))
    if spec.texture_pattern == 1:
        stripes = 0.5 + 0.5 * np.sin(bv[:, 0] / spec.body_radii[0] * 3 * np.pi)
        colors = colors * (0.7 + 0.3 * stripes[:, None])
    # brighter head end gives the texture head an orientation cue
    head = np.clip(bv[:, 0] / spec.body_radii[0], 0, 1)[:, None]
    colors = np.clip(colors + 0.2 * head, 0.0, 1.0)
    return colors


def generate_synthetic(spec: SyntheticSpec, count: int, seed: int,
                       out_dir) -> Path:
    """Render the synthetic dataset and write a standard manifest.

    Returns the manifest path.  Every record carries the generating camera
    and swing angles under "gt" so oracle evaluations can rebuild the exact
    mesh and pose.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rcfg = RenderConfig()
    size = spec.image_size
    records = []
    spec.save(out / "synthetic_spec.json")
    for i in range(count):
        swing_f = float(rng.uniform(-spec.swing_deg, spec.swing_deg))
        swing_h = float(rng.uniform(-spec.swing_deg, spec.swing_deg))
        azim = float(rng.uniform(*spec.azimuth_range))
        elev = float(rng.uniform(*spec.elev_range))
        quad = build_quadruped(spec, swing_f, swing_h)
        pose = CameraPose(azimuth=azim, elevation=elev, roll=0.0)
        with ad.no_grad():
            screen, depth = view_project(Tensor(quad.vertices), pose, size,
                                         size, rcfg)
        rgb, mask, zbuf, _ = hard_rasterize(
            screen.data, depth.data, quad.faces, size, size, rcfg.far,
            vertex_colors=quad.colors, background=rcfg.background)
        if mask.sum() == 0:
            raise RuntimeError(f"synthetic sample {i} rendered an empty mask")

        ys, xs = np.nonzero(mask > 0.5)
        bbox = [int(xs.min()), int(ys.min()),
                int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]

        kp_rows = []
        px, vis = project_with_visibility(quad.vertices, pose, quad.faces,
                                          size, rcfg)
        for name, v in quad.keypoint_vertices.items():
            kp_rows.append({"name": name, "x": float(px[v, 0]),
                            "y": float(px[v, 1]), "visible": bool(vis[v])})

        stem = f"sample_{i:05d}"
        write_image(out / f"{stem}.png", rgb)
        write_image(out / f"{stem}_mask.png", mask)
        write_pfm(out / f"{stem}_depth.pfm", zbuf)
        write_keypoints(out / f"{stem}_kp.jsonl", kp_rows)
        records.append({
            "image": f"{stem}.png",
            "mask": f"{stem}_mask.png",
            "depth": f"{stem}_depth.pfm",
            "bbox": bbox,
            "confidence": 1.0,
            "keypoints": f"{stem}_kp.jsonl",
            "gt": {"azimuth": azim, "elevation": elev, "roll": 0.0,
                   "swing_front": swing_f, "swing_hind": swing_h},
        })
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def oracle_pair_pck(dataset_dir, pair_indices, threshold: float = 0.1):
    """PCK across sample pairs using ground-truth meshes and poses.

    Exercises the transfer machinery end to end with predictions replaced by
    the generating geometry; returns (pck value, per-pair details).
    """
    root = Path(dataset_dir)
    spec = SyntheticSpec.load(root / "synthetic_spec.json")
    records = read_manifest(root / "manifest.jsonl")
    rcfg = RenderConfig()
    size = spec.image_size

    def mesh_pose(rec):
        gt = rec["gt"]
        quad = build_quadruped(spec, gt["swing_front"], gt["swing_hind"])
        pose = CameraPose(azimuth=gt["azimuth"], elevation=gt["elevation"],
                          roll=gt["roll"])
        return quad, pose

    from .data import read_mask
    total, hits, details = 0, 0, []
    for si, ti in pair_indices:
        src_quad, src_pose = mesh_pose(records[si])
        tgt_quad, tgt_pose = mesh_pose(records[ti])
        src_kp = {p["name"]: p for p in _kp_rows(root, records[si])}
        tgt_kp = {p["name"]: p for p in _kp_rows(root, records[ti])}
        names = [n for n in src_kp
                 if src_kp[n]["visible"] and n in tgt_kp]
        pts = [(src_kp[n]["x"], src_kp[n]["y"]) for n in names]
        pred = transfer_keypoints(pts, src_quad.vertices, src_pose,
                                  tgt_quad.vertices, tgt_pose,
                                  tgt_quad.faces, size, rcfg)
        gts = [(tgt_kp[n]["x"], tgt_kp[n]["y"]) for n in names]
        # normalization uses the target ground-truth mask bbox, per pair
        bbox_size = mask_bbox_size(read_mask(root / records[ti]["mask"]))
        frac = pck(pred, gts, bbox_size, threshold)
        hits += round(frac * len(pred))
        total += len(pred)
        details.append({"source": si, "target": ti, "n_points": len(names),
                        "pck": frac})
    value = hits / total if total else 0.0
    return value, details


def _kp_rows(root: Path, rec: dict):
    from .data import read_keypoints
    return read_keypoints(root / rec["keypoints"])
