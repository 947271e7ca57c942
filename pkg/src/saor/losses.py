"""Training objectives: appearance, mask, depth, swap, part balance,
smoothness, normal consistency, pose score, and their weighted total.

Reductions default to per-pixel means; ``reduction="sum"`` restores plain
summation.  Every term is >= 0 and exactly 0 at its fixed point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossWeights
from .mesh import TriMesh, FaceAdjacency, face_normals
from .optim import ParamStore

log = logging.getLogger("saor")

_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or infinite; carries the term name."""


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.reduce_mean(x)
    if reduction == "sum":
        return ad.reduce_sum(x)
    raise ValueError(f"unknown reduction {reduction!r}")


def l_rgb(image, rendered, reduction: str = "mean") -> Tensor:
    """Per-pixel Euclidean distance across channels, reduced over pixels."""
    image, rendered = ad.as_tensor(image), ad.as_tensor(rendered)
    if image.shape != rendered.shape:
        raise ad.ShapeError(f"image shapes differ: {image.shape} "
                            f"vs {rendered.shape}")
    diff = image - rendered
    per_pixel = ad.sqrt(ad.reduce_sum(diff * diff, axis=0))
    return _reduce(per_pixel, reduction)


def l_mask(mask, rendered_mask, reduction: str = "mean") -> Tensor:
    """Squared silhouette difference, reduced over pixels."""
    mask, rendered_mask = ad.as_tensor(mask), ad.as_tensor(rendered_mask)
    if mask.shape != rendered_mask.shape:
        raise ad.ShapeError(f"mask shapes differ: {mask.shape} "
                            f"vs {rendered_mask.shape}")
    diff = mask - rendered_mask
    return _reduce(diff * diff, reduction)


def depth_alignment(depth_gt, depth_pred, mask_np):
    """Least-squares (a, b) with a * pred + b closest to gt over the mask."""
    m = Tensor(mask_np.astype(depth_pred.dtype))
    n = float(mask_np.sum())
    sx = ad.reduce_sum(m * depth_pred)
    sy = ad.reduce_sum(m * depth_gt)
    sxx = ad.reduce_sum(m * depth_pred * depth_pred)
    sxy = ad.reduce_sum(m * depth_pred * depth_gt)
    denom = n * sxx - sx * sx + _EPS
    a = (n * sxy - sx * sy) / denom
    b = (sy - a * sx) * (1.0 / n)
    return a, b


def l_depth(depth_gt, depth_pred, mask) -> Tensor:
    """Scale/shift-invariant depth loss over the masked region.

    Solves the least-squares (a, b) aligning the prediction to the target,
    then returns the mean squared residual.  An empty mask contributes 0.
    """
    depth_gt = ad.as_tensor(depth_gt)
    depth_pred = ad.as_tensor(depth_pred)
    m_np = (mask.data if isinstance(mask, Tensor) else np.asarray(mask)) > 0.5
    n = float(m_np.sum())
    if n == 0:
        log.warning("l_depth: empty mask, contributing 0")
        return Tensor(np.zeros((), dtype=depth_pred.dtype))
    a, b = depth_alignment(depth_gt, depth_pred, m_np)
    m = Tensor(m_np.astype(depth_pred.dtype))
    resid = m * (a * depth_pred + b - depth_gt)
    return ad.reduce_sum(resid * resid) * (1.0 / n)


def l_swap(image, mask, swap_rgb_render, swap_sil_render,
           weight_swap: float = 1.0, reduction: str = "mean") -> Tensor:
    """weight_swap * mask term + rgb term, against the recipient's targets."""
    return (weight_swap * l_mask(mask, swap_sil_render, reduction)
            + l_rgb(image, swap_rgb_render, reduction))


def l_part(weights: Tensor) -> Tensor:
    """Equal-part-size penalty: sum_k |colsum_k - N/K|."""
    n, k = weights.shape
    colsum = ad.reduce_sum(weights, axis=0)
    return ad.reduce_sum(ad.absolute(colsum - n / k))


def l_smooth(laplacian, positions: Tensor) -> Tensor:
    """Mean row norm of L @ positions (uniform graph Laplacian)."""
    ls = ad.sparse_matmul(laplacian, positions)
    return ad.reduce_mean(ad.sqrt(ad.reduce_sum(ls * ls, axis=1)))


def l_normal(adjacency: FaceAdjacency, normals: Tensor) -> Tensor:
    """Mean (1 - cos) between normals of edge-adjacent faces."""
    ni = ad.gather(normals, adjacency.pairs[:, 0])
    nj = ad.gather(normals, adjacency.pairs[:, 1])
    dot = ad.reduce_sum(ni * nj, axis=1)
    norm_i = ad.sqrt(ad.reduce_sum(ni * ni, axis=1))
    norm_j = ad.sqrt(ad.reduce_sum(nj * nj, axis=1))
    cos = dot / (norm_i * norm_j + _EPS)
    return ad.reduce_mean(1.0 - cos)


def l_pose_score(alpha: Tensor, per_hypothesis_loss,
                 temperature: float = 0.1) -> Tensor:
    """Cross-entropy from hypothesis scores to the softmin of their losses.

    ``per_hypothesis_loss`` must be detached (plain array); only the score
    head receives gradient.
    """
    losses = np.asarray(per_hypothesis_loss, dtype=np.float64)
    logits = -losses / temperature
    logits -= logits.max()
    target = np.exp(logits)
    target /= target.sum()
    target_t = Tensor(target.astype(alpha.dtype))
    return -ad.reduce_sum(target_t * ad.log(alpha + 1e-12))


class PerceptualPyramid:
    """Frozen random conv pyramid used as the perceptual feature extractor.

    Three conv/relu/pool levels with weights drawn once at init and never
    trained; features are compared with mean squared error per level.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, store: ParamStore, seed: int = 0, name: str = "percp"):
        rng = np.random.default_rng(seed)
        self.kernels = []
        c_in = 3
        for i, c_out in enumerate(self.CHANNELS):
            bound = np.sqrt(6.0 / (c_in * 9))
            k = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
            self.kernels.append(store.add(f"{name}.k{i}",
                                          k.astype(np.float32),
                                          requires_grad=False))
            c_in = c_out

    def features(self, image: Tensor) -> list[Tensor]:
        feats = []
        x = ad.as_tensor(image)
        for k in self.kernels:
            x = ad.relu(ad.conv2d(x, k))
            feats.append(x)
            x = ad.avgpool2(x)
        return feats


def l_percp(image, rendered, extractor) -> Tensor:
    """Mean squared feature distance across the extractor's levels.

    A missing extractor disables the term (exact 0).
    """
    if extractor is None:
        return Tensor(np.zeros((), dtype=np.float32))
    fa = extractor.features(ad.as_tensor(image))
    fb = extractor.features(ad.as_tensor(rendered))
    total = None
    for a, b in zip(fa, fb):
        d = a - b
        term = ad.reduce_mean(d * d)
        total = term if total is None else total + term
    return total * (1.0 / len(fa))


@dataclass
class LossTerms:
    """Raw (unweighted) scalar terms for one step; Tensors or None."""

    rgb: Tensor = None
    percp: Tensor = None
    mask: Tensor = None
    depth: Tensor = None
    swap_mask: Tensor = None
    swap_rgb: Tensor = None
    part: Tensor = None
    smooth: Tensor = None
    normal: Tensor = None
    pose: Tensor = None


REPORT_FIELDS = ("rgb", "percp", "mask", "depth", "swap", "part", "smooth",
                 "normal", "pose", "total")


@dataclass
class LossReport:
    """Weighted contributions per term plus their total, as plain floats."""

    values: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        return ",".join(f"{self.values[k]:.8g}" for k in REPORT_FIELDS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(REPORT_FIELDS)


def total_loss(terms: LossTerms, weights: LossWeights):
    """Weighted combination of all terms.

    appearance = w_rgb * rgb + w_percp * percp; the swap term is
    w_swap * swap_mask + swap_rgb; regularization adds part, smoothness, and
    normal consistency with their weights.  Returns (total Tensor,
    LossReport).  Raises NonFiniteLossError naming the first bad term.
    """
    zero = Tensor(np.zeros((), dtype=np.float32))

    def term(t):
        return zero if t is None else t

    weighted = {
        "rgb": weights.rgb * term(terms.rgb),
        "percp": weights.percp * term(terms.percp),
        "mask": weights.mask * term(terms.mask),
        "depth": weights.depth * term(terms.depth),
        "swap": weights.swap * term(terms.swap_mask) + term(terms.swap_rgb),
        "part": weights.part * term(terms.part),
        "smooth": weights.smooth * term(terms.smooth),
        "normal": weights.normal * term(terms.normal),
        "pose": weights.pose * term(terms.pose),
    }
    total = None
    report = LossReport()
    for name, t in weighted.items():
        val = t.item()
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss term {name!r} is {val}")
        report.values[name] = val
        total = t if total is None else total + t
    report.values["total"] = total.item()
    return total, report


def shape_regularizers(mesh: TriMesh, laplacian, adjacency: FaceAdjacency,
                       positions: Tensor):
    """Convenience: (smooth, normal) regularizers for a deformed shape."""
    return (l_smooth(laplacian, positions),
            l_normal(adjacency, face_normals(mesh, positions)))
