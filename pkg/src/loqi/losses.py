"""Distillation losses: inter-channel correlation matching between latent
codes, descriptor MSE, a weakly supervised triplet hinge, and their
weighted composite.

All functions operate on torch tensors and stay differentiable in the
student-side inputs. Latent codes are channels-first (c, w, h);
descriptors are 1D vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e5   # descriptor MSE weight
    beta: float = 1e4    # triplet weight
    margin_m: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.margin_m <= 0:
            raise ValidationError("margin must be positive")


def _as_latent(z) -> torch.Tensor:
    t = torch.as_tensor(z)
    if t.ndim != 3:
        raise ValidationError(f"latent code must be 3D (c, w, h), got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValidationError("latent code contains non-finite values")
    return t


def compute_icc(z) -> torch.Tensor:
    """Normalized inter-channel correlation matrix of a latent code.

    Spatial dims are flattened to rows of length w*h, each row is
    scaled to unit L2 norm (all-zero rows stay zero), and the resulting
    Gram matrix is divided by its Frobenius norm.
    """
    t = _as_latent(z).to(torch.get_default_dtype())
    c = t.shape[0]
    p = t.reshape(c, -1)
    norms = p.norm(dim=1, keepdim=True)
    if (norms == 0).all():
        raise ValidationError("all-zero latent code has no defined correlation")
    p_hat = p / norms.clamp_min(torch.finfo(p.dtype).tiny)
    corr = p_hat @ p_hat.T
    return corr / corr.norm()


def ickd_loss(z_l, z_h) -> torch.Tensor:
    """Frobenius distance between student and teacher correlation matrices.

    Spatial dimensions may differ between the two latents; channel
    counts must match.
    """
    t_l, t_h = _as_latent(z_l), _as_latent(z_h)
    if t_l.shape[0] != t_h.shape[0]:
        raise ValidationError(
            f"channel mismatch: student has {t_l.shape[0]}, teacher has {t_h.shape[0]}")
    return (compute_icc(t_l) - compute_icc(t_h)).norm()


def _as_descriptor(v) -> torch.Tensor:
    t = torch.as_tensor(v)
    if t.ndim != 1:
        raise ValidationError(f"descriptor must be 1D, got shape {tuple(t.shape)}")
    return t


def mse_loss(v_l, v_h) -> torch.Tensor:
    """Squared L2 distance between descriptors (summed, not averaged)."""
    a, b = _as_descriptor(v_l), _as_descriptor(v_h)
    if a.shape != b.shape:
        raise ValidationError(f"descriptor length mismatch: {a.shape[0]} vs {b.shape[0]}")
    d = a - b.to(a.dtype)
    return (d * d).sum()


def _sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a - b
    return (d * d).sum()


def select_hardest_positive(v_query, positives) -> tuple[int, float]:
    """Index and squared distance of the positive closest to the query.

    Ties break toward the lowest index.
    """
    q = _as_descriptor(v_query)
    if len(positives) == 0:
        raise ValidationError("need at least one positive")
    dists = [float(_sq_dist(q, _as_descriptor(p))) for p in positives]
    idx = min(range(len(dists)), key=lambda i: dists[i])
    return idx, dists[idx]


def triplet_loss(v_query, positives, negatives, margin_m: float = 0.1) -> torch.Tensor:
    """Weakly supervised triplet hinge, summed over all negatives.

    For the closest positive p* by current squared descriptor distance,
    each negative n_j contributes max(d2(q, p*) - d2(q, n_j) + m, 0).
    """
    q = _as_descriptor(v_query)
    if len(positives) == 0 or len(negatives) == 0:
        raise ValidationError("need at least one positive and one negative")
    if margin_m <= 0:
        raise ValidationError("margin must be positive")
    pos_d2 = torch.stack([_sq_dist(q, _as_descriptor(p)) for p in positives])
    best = pos_d2.min()
    total = q.new_zeros(())
    for n in negatives:
        total = total + torch.clamp(best - _sq_dist(q, _as_descriptor(n)) + margin_m, min=0.0)
    return total


def composite_loss(l1, l2, l3, weights: LossWeights) -> torch.Tensor:
    """l1 + alpha * l2 + beta * l3."""
    terms = [torch.as_tensor(x, dtype=torch.get_default_dtype()) for x in (l1, l2, l3)]
    if not all(torch.isfinite(t).all() for t in terms):
        raise ValidationError("non-finite loss component")
    return terms[0] + weights.alpha * terms[1] + weights.beta * terms[2]
