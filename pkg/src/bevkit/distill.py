"""Masked distillation loss kernels over dense BEV tensor dumps.

Everything here computes values only (no gradients, no training loop):
per-element loss maps between student and teacher tensors, application of
a smoothed occupancy mask broadcast over the channel dimension, and the
weighted feature/response/total reductions. Inputs are plain float arrays
as produced by :mod:`bevkit.scene_io.read_tensor`; teacher maps are
treated as constants.

Reductions are deterministic: numpy's fixed pairwise summation order makes
repeated runs bit-identical for a given configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .occupancy import SmoothingConfig, smooth_mask

EPS = 1e-7  # probability clamp before logarithms


@dataclass(frozen=True)
class PredictionMaps:
    """Dense per-anchor head outputs on the BEV grid.

    ``cls`` holds post-sigmoid scores (W, H, A*K), ``loc`` regression
    values (W, H, A*R), ``dir`` two direction-bin logits per anchor
    (W, H, A*2).
    """

    cls: np.ndarray
    loc: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        base = self.cls.shape[:2]
        if self.loc.shape[:2] != base or self.dir.shape[:2] != base:
            raise ValueError(
                f"heads disagree on grid shape: cls {self.cls.shape}, "
                f"loc {self.loc.shape}, dir {self.dir.shape}"
            )
        if self.dir.shape[2] % 2 != 0:
            raise ValueError(f"dir channels must be 2 per anchor, got {self.dir.shape[2]}")

    @property
    def anchors(self) -> int:
        return self.dir.shape[2] // 2


@dataclass(frozen=True)
class LossConfig:
    """Loss shape parameters and weighting coefficients.

    ``reduction`` selects how masked per-element maps collapse to a
    scalar: ``"literal"`` is the squared Frobenius norm of the masked map;
    ``"masked_mean"`` divides the masked sum by the broadcast mask mass.
    """

    qfl_beta: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    head_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    top_weights: tuple[float, float] = (1.0, 1.0)
    reduction: str = "literal"

    def __post_init__(self):
        if self.qfl_beta < 0:
            raise ValueError(f"qfl_beta must be >= 0, got {self.qfl_beta}")
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        weights = (*self.head_weights, *self.top_weights)
        if not all(np.isfinite(w) and w >= 0 for w in weights):
            raise ValueError(f"weights must be finite and non-negative, got {weights}")
        if self.reduction not in ("literal", "masked_mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def _check_dims(student: np.ndarray, teacher: np.ndarray, what: str):
    if student.shape != teacher.shape:
        raise ValueError(
            f"{what}: student {student.shape} and teacher {teacher.shape} differ"
        )


def mse_map(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """Per-element squared error (s - t)^2."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    _check_dims(student, teacher, "mse_map")
    return (student - teacher) ** 2


def qfl_map(student_scores, teacher_scores, beta: float = 2.0) -> np.ndarray:
    """Quality-focal per-element map with the teacher score as soft target.

    |y - s|^beta * BCE(y, s) with the student score clamped to
    [EPS, 1 - EPS]; zero wherever student equals teacher (for beta > 0).
    """
    y = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    _check_dims(s, y, "qfl_map")
    s = np.clip(s, EPS, 1.0 - EPS)
    bce = -((1.0 - y) * np.log(1.0 - s) + y * np.log(s))
    return np.abs(y - s) ** beta * bce


def smooth_l1_map(student_reg, teacher_reg, beta: float = 1.0 / 9.0) -> np.ndarray:
    """Huber-style map: 0.5 d^2/beta below beta, |d| - beta/2 above."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    s = np.asarray(student_reg, dtype=np.float64)
    t = np.asarray(teacher_reg, dtype=np.float64)
    _check_dims(s, t, "smooth_l1_map")
    d = np.abs(s - t)
    return np.where(d < beta, 0.5 * d**2 / beta, d - 0.5 * beta)


def _softmax_pairs(logits: np.ndarray) -> np.ndarray:
    """Softmax over the trailing 2-bin axis of a (W, H, A, 2) view."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def ce_map(student_dir_logits, teacher_dir_logits) -> np.ndarray:
    """Per-anchor cross entropy between 2-bin direction distributions.

    Teacher logits define the target distribution p, student logits the
    predicted q (clamped at EPS); output shape is (W, H, A).
    """
    s = np.asarray(student_dir_logits, dtype=np.float64)
    t = np.asarray(teacher_dir_logits, dtype=np.float64)
    _check_dims(s, t, "ce_map")
    if s.ndim != 3 or s.shape[2] % 2 != 0:
        raise ValueError(f"expected (W, H, 2A) logits, got shape {s.shape}")
    anchors = s.shape[2] // 2
    p = _softmax_pairs(t.reshape(*t.shape[:2], anchors, 2))
    q = _softmax_pairs(s.reshape(*s.shape[:2], anchors, 2))
    return -(p * np.log(np.clip(q, EPS, None))).sum(axis=-1)


def apply_mask_reduce(loss_map: np.ndarray, soft_mask: np.ndarray, mode: str) -> float:
    """Weight a loss map by a broadcast BEV mask and reduce to a scalar.

    ``literal`` returns the squared Frobenius norm of the masked map;
    ``masked_mean`` the masked sum over the broadcast mask mass.
    """
    loss_map = np.asarray(loss_map, dtype=np.float64)
    soft_mask = np.asarray(soft_mask, dtype=np.float64)
    if loss_map.ndim == 2:
        loss_map = loss_map[:, :, None]
    if loss_map.shape[:2] != soft_mask.shape:
        raise ValueError(
            f"mask {soft_mask.shape} does not match loss map {loss_map.shape[:2]}"
        )
    masked = soft_mask[:, :, None] * loss_map
    if mode == "literal":
        return float((masked**2).sum())
    if mode == "masked_mean":
        denom = soft_mask.sum() * loss_map.shape[2]
        return float(masked.sum() / max(denom, EPS))
    raise ValueError(f"unknown reduction {mode!r}")


def feat_kd_loss(
    student: np.ndarray,
    teacher: np.ndarray,
    binary_mask: np.ndarray,
    smoothing_cfg: SmoothingConfig,
    loss_cfg: LossConfig,
) -> float:
    """Occupancy-guided feature distillation: masked, reduced MSE map."""
    soft = smooth_mask(binary_mask, smoothing_cfg)
    return apply_mask_reduce(mse_map(student, teacher), soft, loss_cfg.reduction)


def resp_kd_loss(
    student: PredictionMaps,
    teacher: PredictionMaps,
    binary_mask: np.ndarray,
    smoothing_cfg: SmoothingConfig,
    loss_cfg: LossConfig,
) -> tuple[float, dict[str, float]]:
    """Occupancy-guided response distillation over the three heads.

    Classification uses the quality-focal map, localisation smooth-L1,
    direction per-anchor cross entropy; each is reduced with the same
    smoothed mask and combined with the configured head weights.
    """
    soft = smooth_mask(binary_mask, smoothing_cfg)
    cls_kd = apply_mask_reduce(
        qfl_map(student.cls, teacher.cls, loss_cfg.qfl_beta), soft, loss_cfg.reduction
    )
    loc_kd = apply_mask_reduce(
        smooth_l1_map(student.loc, teacher.loc, loss_cfg.smooth_l1_beta),
        soft,
        loss_cfg.reduction,
    )
    dir_kd = apply_mask_reduce(
        ce_map(student.dir, teacher.dir), soft, loss_cfg.reduction
    )
    w_cls, w_loc, w_dir = loss_cfg.head_weights
    total = w_cls * cls_kd + w_loc * loc_kd + w_dir * dir_kd
    return total, {"cls_kd": cls_kd, "loc_kd": loc_kd, "dir_kd": dir_kd}


def total_kd_loss(feat_loss: float, resp_loss: float, loss_cfg: LossConfig) -> float:
    """Weighted sum of the feature and response components."""
    lam_feat, lam_resp = loss_cfg.top_weights
    return lam_feat * feat_loss + lam_resp * resp_loss
