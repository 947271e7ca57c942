"""Dataset ingestion and preparation: manifest I/O, detection filtering,
crop/resize loading, silhouette clustering with a diagonal Gaussian mixture,
and the cluster-balanced batch sampler.

Detector, segmenter, and depth networks run upstream; this module ingests
their outputs from a JSON-lines manifest with one record per sample:
{"image": path, "mask": path, "depth": path, "bbox": [x, y, w, h],
 "confidence": float, "keypoints": optional sidecar path, ...}.
Masks are 8-bit PNG, depth maps are little-endian PFM, keypoints are a
per-image JSON-lines sidecar of {"name", "x", "y", "visible"}.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger("saor")

MIN_CONFIDENCE = 0.8
MIN_BBOX_SIDE = 32
MIN_BBOX_MAX_SIDE = 128
MIN_BORDER_MARGIN = 10
CROP_PAD_FRACTION = 0.1
CLUSTER_GRID = 32          # masks are clustered as 32x32 = 1024-d vectors
NUM_CLUSTERS = 10


class DataError(RuntimeError):
    """Unreadable files or inconsistent sample modalities."""


def worker_lanes() -> int:
    """Worker-lane cap from SAOR_THREADS (default 1, i.e. synchronous)."""
    try:
        return max(1, int(os.environ.get("SAOR_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------- files

def read_image(path) -> np.ndarray:
    """PNG/JPEG to float32 (3, h, w) in [0, 1]."""
    try:
        img = Image.open(path).convert("RGB")
    except OSError as err:
        raise DataError(f"unreadable image {path}: {err}") from err
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, arr):
    """Float array in [0, 1], (3, h, w) or (h, w), to 8-bit PNG."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_mask(path) -> np.ndarray:
    """8-bit PNG to float32 (h, w) in [0, 1]."""
    try:
        img = Image.open(path).convert("L")
    except OSError as err:
        raise DataError(f"unreadable mask {path}: {err}") from err
    return np.asarray(img, dtype=np.float32) / 255.0


def write_pfm(path, data: np.ndarray):
    """Grayscale PFM, little-endian, rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise DataError(f"{path}: not a grayscale PFM (header {header!r})")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float32)


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{ln}: bad manifest record: {err}") from err
    return records


def write_manifest(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_keypoints(path) -> list[dict]:
    points = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                points.append(json.loads(line))
    return points


def write_keypoints(path, points):
    with open(path, "w") as f:
        for p in points:
            f.write(json.dumps(p) + "\n")


# ------------------------------------------------------------- preprocessing

@dataclass
class DetectionMeta:
    """Upstream detector output for one candidate object."""

    bbox: tuple          # (x, y, w, h) pixels
    confidence: float
    image_size: tuple    # (width, height)


def filter_detection(meta: DetectionMeta):
    """Apply the ingestion filters; returns (keep, reason).

    Rejects when confidence < 0.8, the minimum bbox side is under 32 px, the
    maximum side is under 128 px, or any border margin is <= 10 px.
    """
    x, y, w, h = meta.bbox
    img_w, img_h = meta.image_size
    if meta.confidence < MIN_CONFIDENCE:
        return False, "confidence"
    if min(w, h) < MIN_BBOX_SIDE:
        return False, "min_side"
    if max(w, h) < MIN_BBOX_MAX_SIDE:
        return False, "max_side"
    margins = (x, y, img_w - (x + w), img_h - (y + h))
    if min(margins) <= MIN_BORDER_MARGIN:
        return False, "margin"
    return True, "ok"


def bilinear_resize_np(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (h, w) or (c, h, w), pixel-center aligned."""
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    p00 = arr[:, y0[:, None], x0[None, :]]
    p01 = arr[:, y0[:, None], x1[None, :]]
    p10 = arr[:, y1[:, None], x0[None, :]]
    p11 = arr[:, y1[:, None], x1[None, :]]
    out = ((1 - fy) * (1 - fx) * p00 + (1 - fy) * fx * p01
           + fy * (1 - fx) * p10 + fy * fx * p11)
    out = out.astype(arr.dtype, copy=False)
    return out[0] if squeeze else out


@dataclass
class Keypoint:
    name: str
    x: float
    y: float
    visible: bool = True


@dataclass
class SampleRecord:
    """One training example in crop space."""

    image: np.ndarray            # (3, s, s) in [0, 1]
    mask: np.ndarray             # (s, s) in {0, 1}
    depth: np.ndarray            # (s, s) relative depth
    keypoints: list = field(default_factory=list)
    cluster_id: int = -1
    source: str = ""
    usable: bool = True
    crop: tuple = None           # (x0, y0, side) in source pixels
    meta: dict = field(default_factory=dict)


def compute_crop(bbox, pad_fraction: float = CROP_PAD_FRACTION):
    """Square crop window around a bbox with fractional padding per side."""
    x, y, w, h = bbox
    side = max(w, h) * (1.0 + 2.0 * pad_fraction)
    cx, cy = x + w / 2.0, y + h / 2.0
    return cx - side / 2.0, cy - side / 2.0, side


def _crop_canvas(arr, x0, y0, side):
    """Extract a square crop, zero-padding outside the source extent."""
    is_3d = arr.ndim == 3
    h, w = arr.shape[-2:]
    ix0, iy0 = int(np.floor(x0)), int(np.floor(y0))
    s = int(np.ceil(side))
    out_shape = (arr.shape[0], s, s) if is_3d else (s, s)
    out = np.zeros(out_shape, dtype=arr.dtype)
    sx0, sy0 = max(ix0, 0), max(iy0, 0)
    sx1, sy1 = min(ix0 + s, w), min(iy0 + s, h)
    if sx0 < sx1 and sy0 < sy1:
        out[..., sy0 - iy0:sy1 - iy0, sx0 - ix0:sx1 - ix0] = \
            arr[..., sy0:sy1, sx0:sx1]
    return out, float(ix0), float(iy0), float(s)


def transform_keypoint(x, y, crop, out_size: int):
    """Source-pixel keypoint to crop-space pixel coordinates."""
    x0, y0, side = crop
    scale = out_size / side
    return (x - x0) * scale, (y - y0) * scale


def untransform_keypoint(x, y, crop, out_size: int):
    x0, y0, side = crop
    scale = out_size / side
    return x / scale + x0, y / scale + y0


def load_sample(record: dict, image_size: int, base_dir=".") -> SampleRecord:
    """Load one manifest record: square crop + bilinear resize of all
    modalities, mask binarized at 0.5, keypoints mapped into crop space."""
    base = Path(base_dir)
    image = read_image(base / record["image"])
    mask = read_mask(base / record["mask"])
    depth = read_pfm(base / record["depth"])
    if image.shape[1:] != mask.shape or mask.shape != depth.shape:
        raise DataError(
            f"{record['image']}: modality shapes differ "
            f"(image {image.shape[1:]}, mask {mask.shape}, depth {depth.shape})")

    x0, y0, side = compute_crop(record["bbox"])
    img_c, cx0, cy0, cside = _crop_canvas(image, x0, y0, side)
    mask_c, _, _, _ = _crop_canvas(mask, x0, y0, side)
    depth_c, _, _, _ = _crop_canvas(depth, x0, y0, side)
    crop = (cx0, cy0, cside)

    s = image_size
    img_r = bilinear_resize_np(img_c, s, s)
    mask_r = (bilinear_resize_np(mask_c, s, s) >= 0.5).astype(np.float32)
    depth_r = bilinear_resize_np(depth_c, s, s)

    keypoints = []
    if record.get("keypoints"):
        for p in read_keypoints(base / record["keypoints"]):
            kx, ky = transform_keypoint(p["x"], p["y"], crop, s)
            vis = bool(p.get("visible", True)) and 0 <= kx < s and 0 <= ky < s
            keypoints.append(Keypoint(p.get("name", ""), kx, ky, vis))

    usable = bool(mask_r.sum() > 0)
    if not usable:
        log.warning("sample %s has an empty mask after cropping",
                    record.get("image"))
    return SampleRecord(image=img_r, mask=mask_r, depth=depth_r,
                        keypoints=keypoints,
                        cluster_id=int(record.get("cluster_id", -1)),
                        source=str(record.get("image", "")),
                        usable=usable, crop=crop, meta=dict(record))


def load_records(manifest_path, image_size: int,
                 base_dir=None) -> list[SampleRecord]:
    """Load every manifest record, using up to SAOR_THREADS decode lanes.

    Results are collected in manifest order regardless of lane count, so the
    output is deterministic.
    """
    manifest_path = Path(manifest_path)
    base = Path(base_dir) if base_dir is not None else manifest_path.parent
    records = read_manifest(manifest_path)
    lanes = worker_lanes()
    if lanes <= 1:
        return [load_sample(r, image_size, base) for r in records]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=lanes) as pool:
        return list(pool.map(lambda r: load_sample(r, image_size, base),
                             records))


# ----------------------------------------------------------------- GMM + EM

@dataclass
class ClusterModel:
    """Diagonal-covariance Gaussian mixture over flattened 32x32 masks."""

    means: np.ndarray       # (k, d)
    variances: np.ndarray   # (k, d), floored
    weights: np.ndarray     # (k,), sums to 1
    log_likelihoods: np.ndarray = None  # per-EM-iteration history

    @property
    def n_components(self) -> int:
        return len(self.weights)


VARIANCE_FLOOR = 1e-6


def _mask_vectors(masks) -> np.ndarray:
    rows = [bilinear_resize_np(np.asarray(m, dtype=np.float64),
                               CLUSTER_GRID, CLUSTER_GRID).ravel()
            for m in masks]
    return np.stack(rows, axis=0)


def _log_gaussian(x, means, variances):
    """(n, d) x (k, d) -> (n, k) diagonal Gaussian log densities."""
    const = -0.5 * np.log(2.0 * np.pi * variances).sum(axis=1)  # (k,)
    diff = x[:, None, :] - means[None, :, :]
    quad = -0.5 * (diff * diff / variances[None, :, :]).sum(axis=2)
    return const[None, :] + quad


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=probs)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers, axis=0)


def fit_gmm(masks, k: int = NUM_CLUSTERS, seed: int = 0,
            max_iter: int = 200, tol: float = 1e-4) -> ClusterModel:
    """EM for a diagonal-covariance mixture, k-means++ initialized.

    Runs until the log-likelihood improves by less than tol or max_iter
    iterations; the per-iteration history is kept on the model.
    """
    x = _mask_vectors(masks)
    n, d = x.shape
    if n < k:
        raise DataError(f"need at least {k} masks to fit {k} components, got {n}")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(x, k, rng)
    variances = np.maximum(x.var(axis=0, keepdims=True), VARIANCE_FLOOR)
    variances = np.repeat(variances, k, axis=0)
    weights = np.full(k, 1.0 / k)

    history = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        logp = _log_gaussian(x, means, variances) + np.log(weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
        ll = float(lse.sum())
        history.append(ll)
        resp = np.exp(logp - lse[:, None])          # (n, k)
        nk = resp.sum(axis=0) + 1e-12
        means = (resp.T @ x) / nk[:, None]
        ex2 = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(ex2 - means * means, VARIANCE_FLOOR)
        weights = nk / nk.sum()
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return ClusterModel(means=means, variances=variances, weights=weights,
                        log_likelihoods=np.asarray(history))


def assign_clusters(model: ClusterModel, masks) -> np.ndarray:
    """Max-responsibility component index per mask."""
    x = _mask_vectors(masks)
    logp = _log_gaussian(x, model.means, model.variances) \
        + np.log(model.weights)[None, :]
    return np.argmax(logp, axis=1)


# ------------------------------------------------------------------ sampler

def balanced_batches(cluster_ids, batch_size: int, seed_or_rng,
                     n_clusters: int = None):
    """Infinite stream of index batches drawn near-uniformly across clusters.

    Each batch takes floor or ceil of batch_size / n_clusters indices per
    cluster (the remainder rotates randomly).  Underfull clusters sample with
    replacement; empty clusters donate their quota round-robin to the rest.
    Deterministic for a given seed.
    """
    ids = np.asarray(cluster_ids)
    if n_clusters is None:
        n_clusters = int(ids.max()) + 1
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    members = [np.flatnonzero(ids == c) for c in range(n_clusters)]
    nonempty = [c for c in range(n_clusters) if len(members[c])]
    if not nonempty:
        raise DataError("no cluster has any members")
    empty = [c for c in range(n_clusters) if not len(members[c])]
    if empty:
        log.info("balanced_batches: clusters %s are empty; redistributing",
                 empty)

    base, rem = divmod(batch_size, n_clusters)
    while True:
        quotas = np.full(n_clusters, base, dtype=np.int64)
        if rem:
            quotas[rng.choice(n_clusters, size=rem, replace=False)] += 1
        # donate quotas of empty clusters round-robin to non-empty ones
        spare = int(quotas[empty].sum()) if empty else 0
        for c in empty:
            quotas[c] = 0
        i = 0
        while spare > 0:
            quotas[nonempty[i % len(nonempty)]] += 1
            spare -= 1
            i += 1
        picks = []
        for c in range(n_clusters):
            q = int(quotas[c])
            if q == 0:
                continue
            pool = members[c]
            replace = len(pool) < q
            picks.append(rng.choice(pool, size=q, replace=replace))
        batch = np.concatenate(picks)
        rng.shuffle(batch)
        yield batch
