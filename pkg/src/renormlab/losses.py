"""Uncertainty-weighted distillation and pointmap objectives.

Both losses share the form ``beta * err^2 - lambda * log(beta)`` averaged
over valid elements, where ``beta`` is a learned positive confidence.  The
pointmap term is gated by the sample's multi-view flag.  Teacher depth
arrives affine-ambiguous (scale and shift unknown) and is aligned to a
shift-free, unit-mean-scale target before supervision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ContractError, DegenerateSupervisionError

CONFIDENCE_LINKS = ("exp", "one_plus_exp")


@dataclass
class LossConfig:
    lambda_reg: float = 0.2
    confidence_link: str = "exp"

    def __post_init__(self):
        if self.lambda_reg <= 0:
            raise ContractError("lambda_reg must be positive")
        if self.confidence_link not in CONFIDENCE_LINKS:
            raise ContractError(f"unknown confidence link {self.confidence_link!r}")


@dataclass
class SupervisionTarget:
    """Targets for one image: aligned teacher depth, optional gt pointmap."""
    teacher_depth: Optional[np.ndarray] = None
    gt_pointmap: Optional[np.ndarray] = None
    is_multiview: bool = False
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.is_multiview and self.gt_pointmap is None:
            raise ContractError("multi-view target without gt pointmap")


def confidence_from_raw(raw: tc.Tensor, cfg: LossConfig) -> tc.Tensor:
    """Map unconstrained head output to strictly positive confidence."""
    if cfg.confidence_link == "exp":
        return tc.exp(raw)
    return tc.add(tc.exp(raw), 1.0)


def _mask_tensor(mask: Optional[np.ndarray], shape) -> tuple[tc.Tensor, int]:
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateSupervisionError("empty valid mask")
    return tc.Tensor(mask.astype(np.float64)), count


def distill_loss(pred_depth: tc.Tensor, target: SupervisionTarget,
                 beta: tc.Tensor, cfg: LossConfig) -> tc.Tensor:
    """Mean over valid elements of ``beta * (D - D_hat)^2 - lambda * log(beta)``."""
    teacher = target.teacher_depth
    if teacher is None:
        raise ContractError("distill_loss without teacher depth")
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.shape != pred_depth.shape or beta.shape != pred_depth.shape:
        raise ContractError(
            f"shape mismatch: pred {pred_depth.shape}, teacher {teacher.shape}, "
            f"beta {beta.shape}")
    mask_t, count = _mask_tensor(target.valid_mask, pred_depth.shape)
    err = tc.square(tc.sub(pred_depth, tc.Tensor(teacher)))
    per_elem = tc.sub(tc.mul(beta, err), tc.mul(tc.log(beta), cfg.lambda_reg))
    return tc.mul(tc.sum_(tc.mul(per_elem, mask_t)), 1.0 / count)


def pointmap_loss(pred: tc.Tensor, target: SupervisionTarget,
                  beta: tc.Tensor, cfg: LossConfig) -> tc.Tensor:
    """Gated pointmap term: zero unless the sample is multi-view.

    ``pred`` and the gt pointmap are (points, 3); the error is the squared
    Euclidean distance per 3-vector, confidence-weighted per point.
    """
    if not target.is_multiview:
        return tc.Tensor(np.asarray(0.0))
    if target.gt_pointmap is None:
        raise ContractError("multi-view sample without gt pointmap")
    gt = np.asarray(target.gt_pointmap, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ContractError(f"pointmap shapes disagree: {pred.shape} vs {gt.shape}")
    n_points = pred.shape[0]
    if beta.shape != (n_points, 1):
        raise ContractError(f"beta shape {beta.shape} != ({n_points}, 1)")
    mask = target.valid_mask
    if mask is not None and mask.shape == (n_points,):
        mask = mask.reshape(n_points, 1)
    mask_t, count = _mask_tensor(mask, (n_points, 1))
    sq_dist = tc.sum_(tc.square(tc.sub(pred, tc.Tensor(gt))), axis=1, keepdims=True)
    per_point = tc.sub(tc.mul(beta, sq_dist), tc.mul(tc.log(beta), cfg.lambda_reg))
    return tc.mul(tc.sum_(tc.mul(per_point, mask_t)), 1.0 / count)


def total_objective(distill_terms: Sequence[Optional[tc.Tensor]],
                    pointmap_terms: Sequence[Optional[tc.Tensor]],
                    n_images: int) -> tc.Tensor:
    """Average of per-image distill + pointmap terms over ``n_images``."""
    if n_images < 1:
        raise ContractError("total_objective over zero images")
    acc: Optional[tc.Tensor] = None
    for term in list(distill_terms) + list(pointmap_terms):
        if term is None:
            continue
        acc = term if acc is None else tc.add(acc, term)
    if acc is None:
        return tc.Tensor(np.asarray(0.0))
    return tc.mul(acc, 1.0 / n_images)


def align_teacher_depth(teacher: np.ndarray, mask: Optional[np.ndarray] = None,
                        reference: Optional[np.ndarray] = None,
                        affine: Optional[tuple[float, float]] = None) -> np.ndarray:
    """Remove the teacher's additive shift, then rescale to unit mean magnitude.

    The shift estimate is, in order of preference: the recorded generative
    shift when ``affine=(a, b)`` is supplied (exact inversion), the median of
    ``teacher - reference`` when a reference depth is supplied, else zero.
    """
    teacher = np.asarray(getattr(teacher, "array", teacher), dtype=np.float64)
    valid = np.ones(teacher.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DegenerateSupervisionError("empty valid mask")
    vals = teacher[valid]
    if vals.std() == 0.0:
        raise DegenerateSupervisionError("constant teacher depth carries no signal")
    if affine is not None:
        shift = float(affine[1])
    elif reference is not None:
        ref = np.asarray(getattr(reference, "array", reference), dtype=np.float64)
        shift = float(np.median(vals - ref[valid]))
    else:
        shift = 0.0
    shifted = teacher - shift
    scale = float(np.abs(shifted[valid]).mean())
    if scale < 1e-12:
        raise DegenerateSupervisionError("zero mean magnitude after shift removal")
    return shifted / scale
