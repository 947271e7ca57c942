"""Skeleton-free linear blend skinning over soft part assignments.

Parts are defined by a per-vertex soft assignment matrix; each part carries a
scale, rotation, and translation applied about the part's weighted centroid.
The blend subtracts the part center but does not re-add it; any global offset
this induces is absorbed by the camera translation downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class DegeneratePartError(ValueError):
    """A part's total assignment mass collapsed below the usable floor."""


@dataclass
class Articulation:
    """Soft part assignment plus per-part scale/rotation/translation.

    weights: (N, K) rows summing to 1.
    scales: (K, 3) positive elementwise factors.
    rotations: (K, 3, 3) rotation matrices.
    translations: (K, 3).
    """

    weights: Tensor
    scales: Tensor
    rotations: Tensor
    translations: Tensor

    @property
    def num_parts(self) -> int:
        return self.weights.shape[1]


def identity_articulation(n_vertices: int, num_parts: int) -> Articulation:
    """Uniform assignment with identity transforms (articulation gated off)."""
    k = num_parts
    return Articulation(
        weights=Tensor(np.full((n_vertices, k), 1.0 / k, dtype=np.float32)),
        scales=Tensor(np.ones((k, 3), dtype=np.float32)),
        rotations=Tensor(np.broadcast_to(np.eye(3, dtype=np.float32),
                                         (k, 3, 3)).copy()),
        translations=Tensor(np.zeros((k, 3), dtype=np.float32)),
    )


def part_centers(deformed: Tensor, weights: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-part weighted centroids c_k = sum_i w_ik s'_i / sum_i w_ik."""
    colsum_data = weights.data.sum(axis=0)
    if np.any(colsum_data <= eps):
        k = int(np.argmin(colsum_data))
        raise DegeneratePartError(
            f"part {k} has assignment mass {colsum_data[k]:.3g} <= {eps}")
    colsum = ad.reduce_sum(weights, axis=0, keepdims=True)      # (1, K)
    totals = ad.matmul(ad.transpose(weights), deformed)         # (K, 3)
    return totals / ad.transpose(colsum)                        # (K, 3)


def lbs_apply(deformed: Tensor, art: Articulation) -> Tensor:
    """Blend per-part rigid+scale transforms about part centers.

    s_i = sum_k w_ik * z_k . (r_k (s'_i - c_k) + t_k), with the center
    subtracted but not re-added.
    """
    centers = part_centers(deformed, art.weights)
    out = None
    for k in range(art.num_parts):
        c_k = centers[k:k + 1, :]                  # (1, 3)
        r_k = art.rotations[k]                     # (3, 3)
        t_k = art.translations[k:k + 1, :]         # (1, 3)
        z_k = art.scales[k:k + 1, :]               # (1, 3)
        local = ad.matmul(deformed - c_k, ad.transpose(r_k)) + t_k
        term = art.weights[:, k:k + 1] * (z_k * local)
        out = term if out is None else out + term
    return out


def swap_shape(donor_deformed: Tensor, art: Articulation) -> Tensor:
    """Apply a recipient's articulation to a donor's deformed shape.

    Part centers are recomputed from the donor vertices under the recipient's
    assignment weights, then the recipient's transforms are blended in.
    """
    n = donor_deformed.shape[0]
    if n != art.weights.shape[0]:
        raise ValueError(f"topology mismatch: shape has {n} vertices, "
                         f"articulation covers {art.weights.shape[0]}")
    return lbs_apply(donor_deformed, art)


def hard_parts(weights) -> np.ndarray:
    """Argmax part label per vertex; ties break to the lowest part index."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return np.argmax(w, axis=1)
