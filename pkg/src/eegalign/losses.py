"""EEG/image alignment losses with closed-form gradients.

Every loss is evaluated in float64 on numpy arrays. The ``*_grad`` variants
return the value together with the gradient with respect to the EEG
embedding matrix, so any training backend can plug them in (the trainer
wraps them in a ``torch.autograd.Function``). Image embeddings are treated as
fixed targets and receive no gradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, EmptyBatchError, LabelError, ParameterError
from .types import (
    NORM_EPS,
    EmbeddingBatch,
    LossBreakdown,
    SimilarityMatrix,
    cosine_similarity_matrix,
    unit_rows,
)

LOGIT_SCALE_MIN = 1.0
LOGIT_SCALE_MAX = 100.0


class LossMode(str, enum.Enum):
    ALIGNMENT = "alignment"
    CAPTION = "caption"


class GeometricTemplate(str, enum.Enum):
    MIN_KERNEL = "min_kernel"
    MAX_KERNEL = "max_kernel"


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.5
    alpha4: float = 0.1
    temperature: float = 0.07
    kernel_t: float = 2.0
    learn_temperature: bool = True
    geometric_template: GeometricTemplate = GeometricTemplate.MIN_KERNEL

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "temperature", "kernel_t"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.kernel_t <= 0:
            raise ParameterError(f"kernel_t must be > 0, got {self.kernel_t}")
        object.__setattr__(self, "geometric_template", GeometricTemplate(self.geometric_template))

    @property
    def alphas(self) -> tuple[float, float, float, float]:
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometric_template"] = self.geometric_template.value
        return d


def _vectors(x) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        x = x.vectors
    return np.asarray(x, dtype=np.float64)


def _labels(x, fallback: int) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        return x.class_ids
    return np.arange(fallback)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def _normalize_backward(grad_u: np.ndarray, u: np.ndarray, norms: np.ndarray, raw_norms: np.ndarray, eps: float) -> np.ndarray:
    """Pull a gradient w.r.t. unit rows back to the raw rows."""
    radial = np.sum(u * grad_u, axis=1, keepdims=True)
    out = (grad_u - u * radial) / norms[:, None]
    guarded = raw_norms <= eps
    if np.any(guarded):
        # The guard divides by a constant, so the Jacobian is just 1/eps.
        out[guarded] = grad_u[guarded] / eps
    return out


# -- mean squared error -------------------------------------------------------


def mse_loss_grad(eeg, target) -> tuple[float, np.ndarray]:
    pred = _vectors(eeg)
    z = _vectors(target)
    _check_same_shape(pred, z)
    n = pred.shape[0]
    resid = pred - z
    value = float(np.sum(resid * resid) / n)
    return value, 2.0 * resid / n


def mse_loss(eeg, target) -> float:
    """Mean over rows of the squared L2 residual between prediction and target."""
    return mse_loss_grad(eeg, target)[0]


# -- symmetric InfoNCE -------------------------------------------------------


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def contrastive_softmax(eeg, image, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (EEG->image) and column-wise (image->EEG) softmax matrices."""
    e = _vectors(eeg)
    v = _vectors(image)
    _check_same_shape(e, v)
    ue, _ = unit_rows(e)
    uv, _ = unit_rows(v)
    logits = (ue @ uv.T) / temperature
    return np.exp(_log_softmax(logits, 1)), np.exp(_log_softmax(logits, 0))


def contrastive_loss_grad(eeg, image, temperature: float, eps: float = NORM_EPS) -> tuple[float, np.ndarray, float]:
    """Symmetric InfoNCE over cosine logits scaled by ``1 / temperature``.

    Returns ``(loss, d loss / d eeg, d loss / d logit_scale)`` where
    ``logit_scale = 1 / temperature``.
    """
    e = _vectors(eeg)
    v = _vectors(image)
    if e.shape[0] == 0:
        raise EmptyBatchError("contrastive loss needs at least one pair")
    _check_same_shape(e, v)
    if not temperature > 0 or not math.isfinite(temperature):
        raise ParameterError(f"temperature must be a positive finite number, got {temperature}")
    b = e.shape[0]
    scale = 1.0 / temperature
    ue, ne = unit_rows(e, eps)
    uv, _ = unit_rows(v, eps)
    cos = ue @ uv.T
    logits = scale * cos
    log_p_row = _log_softmax(logits, 1)
    log_p_col = _log_softmax(logits, 0)
    diag = np.arange(b)
    value = -0.5 * (np.mean(log_p_row[diag, diag]) + np.mean(log_p_col[diag, diag]))
    eye = np.eye(b)
    d_logits = (np.exp(log_p_row) - eye + np.exp(log_p_col) - eye) / (2.0 * b)
    d_scale = float(np.sum(d_logits * cos))
    d_ue = scale * d_logits @ uv
    grad = _normalize_backward(d_ue, ue, ne, np.linalg.norm(e, axis=1), eps)
    return float(value), grad, d_scale


def contrastive_loss(eeg, image, temperature: float) -> float:
    return contrastive_loss_grad(eeg, image, temperature)[0]


# -- semantic (similarity-structure) consistency -------------------------------


def semantic_loss(image_sim: SimilarityMatrix, eeg_sim: SimilarityMatrix) -> float:
    """Squared Frobenius distance between the two similarity matrices over B^2."""
    a = image_sim.values if isinstance(image_sim, SimilarityMatrix) else np.asarray(image_sim, dtype=np.float64)
    b = eeg_sim.values if isinstance(eeg_sim, SimilarityMatrix) else np.asarray(eeg_sim, dtype=np.float64)
    _check_same_shape(a, b)
    n = a.shape[0]
    diff = a - b
    return float(np.sum(diff * diff) / (n * n))


def semantic_loss_grad(eeg, image, eps: float = NORM_EPS) -> tuple[float, np.ndarray]:
    e = _vectors(eeg)
    v = _vectors(image)
    if e.shape[0] != v.shape[0]:
        raise DimensionError(f"batch sizes differ: {e.shape[0]} vs {v.shape[0]}")
    b = e.shape[0]
    ue, ne = unit_rows(e, eps)
    uv, _ = unit_rows(v, eps)
    diff = ue @ ue.T - uv @ uv.T
    value = float(np.sum(diff * diff) / (b * b))
    d_m = 2.0 * diff / (b * b)
    d_ue = 2.0 * d_m @ ue
    return value, _normalize_backward(d_ue, ue, ne, np.linalg.norm(e, axis=1), eps)


def semantic_loss_from_batches(eeg: EmbeddingBatch, image: EmbeddingBatch) -> float:
    return semantic_loss(cosine_similarity_matrix(image), cosine_similarity_matrix(eeg))


# -- geometric (Gaussian-kernel) consistency -----------------------------------


def gaussian_kernel(a, b, t: float = 2.0) -> float:
    """exp(-t * ||a - b||), a similarity in (0, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"vector dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    if not t > 0:
        raise ParameterError(f"kernel rate t must be > 0, got {t}")
    return float(np.exp(-t * np.linalg.norm(a - b)))


def _geometric_parts(eeg, image, t: float):
    e = _vectors(eeg)
    v = _vectors(image)
    if e.shape[0] != v.shape[0]:
        raise DimensionError(f"batch sizes differ: {e.shape[0]} vs {v.shape[0]}")
    if e.shape[1] != v.shape[1]:
        raise DimensionError(f"embedding dimensions differ: {e.shape[1]} vs {v.shape[1]}")
    if not t > 0:
        raise ParameterError(f"kernel rate t must be > 0, got {t}")
    ye = _labels(eeg, e.shape[0])
    yv = _labels(image, v.shape[0])
    if ye.shape != yv.shape or np.any(ye != yv):
        raise LabelError("EEG and image class_id vectors are not row-aligned")
    diff = e[:, None, :] - v[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    kernel = np.exp(-t * dist)
    same = ye[:, None] == yv[None, :]
    return diff, dist, kernel, same, ye


def _template_index(kernel: np.ndarray, members: np.ndarray, template: GeometricTemplate) -> tuple[int, int]:
    """Flat-order-first (i, j) position of the extremal kernel among ``members``."""
    masked = np.where(members, kernel, np.inf if template is GeometricTemplate.MIN_KERNEL else -np.inf)
    flat = np.argmin(masked) if template is GeometricTemplate.MIN_KERNEL else np.argmax(masked)
    return np.unravel_index(flat, kernel.shape)


def geometric_summands(eeg, image, t: float = 2.0, template: GeometricTemplate = GeometricTemplate.MIN_KERNEL) -> np.ndarray:
    """Per-pair terms of the geometric loss; zero for cross-class pairs.

    ``min_kernel`` gives ``G - min_k G``, ``max_kernel`` gives ``max_k G - G``.
    """
    template = GeometricTemplate(template)
    _, _, kernel, same, ye = _geometric_parts(eeg, image, t)
    out = np.zeros_like(kernel)
    for k in np.unique(ye):
        members = same & (ye[:, None] == k)
        ref = kernel[_template_index(kernel, members, template)]
        if template is GeometricTemplate.MIN_KERNEL:
            out[members] = kernel[members] - ref
        else:
            out[members] = ref - kernel[members]
    return out


def geometric_loss_grad(eeg, image, t: float = 2.0, template: GeometricTemplate = GeometricTemplate.MIN_KERNEL) -> tuple[float, np.ndarray]:
    template = GeometricTemplate(template)
    diff, dist, kernel, same, ye = _geometric_parts(eeg, image, t)
    sign = 1.0 if template is GeometricTemplate.MIN_KERNEL else -1.0
    coef = np.zeros_like(kernel)
    value = 0.0
    for k in np.unique(ye):
        members = same & (ye[:, None] == k)
        n_k = int(np.count_nonzero(members))
        idx = _template_index(kernel, members, template)
        value += sign * (float(np.sum(kernel[members])) - n_k * kernel[idx])
        coef[members] += sign
        coef[idx] -= sign * n_k
    # dG/de_i = -t G (e_i - v_j) / ||e_i - v_j||, taken as 0 at coincident points.
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(dist > 0, -t * kernel * coef / dist, 0.0)
    grad = np.einsum("ij,ijd->id", scale, diff)
    return float(value), grad


def geometric_loss(eeg, image, t: float = 2.0, template: GeometricTemplate = GeometricTemplate.MIN_KERNEL) -> float:
    return geometric_loss_grad(eeg, image, t, template)[0]


# -- weighted total ------------------------------------------------------------


@dataclass
class LossEvaluation:
    """Breakdown plus gradients for one batch, as consumed by the trainer."""

    breakdown: LossBreakdown
    grad: np.ndarray
    grad_logit_scale: float
    term_grads: dict

    def term_grad_norms(self) -> dict:
        return {name: float(np.linalg.norm(g)) for name, g in self.term_grads.items()}


def total_loss_grad(eeg, image, weights: LossWeights, mode: LossMode = LossMode.ALIGNMENT) -> LossEvaluation:
    mode = LossMode(mode)
    e = _vectors(eeg)
    a1, a2, a3, a4 = weights.alphas
    mse, g_mse = mse_loss_grad(e, image)
    zero = np.zeros_like(e)
    if mode is LossMode.CAPTION:
        breakdown = LossBreakdown(mse, 0.0, 0.0, 0.0, weights.alphas, a1 * mse)
        grads = {"mse": a1 * g_mse, "contrastive": zero, "semantic": zero, "geometric": zero}
        return LossEvaluation(breakdown, a1 * g_mse, 0.0, grads)
    con, g_con, g_scale = contrastive_loss_grad(eeg, image, weights.temperature)
    sem, g_sem = semantic_loss_grad(e, image)
    geo, g_geo = geometric_loss_grad(eeg, image, weights.kernel_t, weights.geometric_template)
    breakdown = LossBreakdown(mse, con, sem, geo, weights.alphas)
    grads = {"mse": a1 * g_mse, "contrastive": a2 * g_con, "semantic": a3 * g_sem, "geometric": a4 * g_geo}
    grad = grads["mse"] + grads["contrastive"] + grads["semantic"] + grads["geometric"]
    return LossEvaluation(breakdown, grad, a2 * g_scale, grads)


def total_loss(eeg, image, weights: LossWeights, mode: LossMode = LossMode.ALIGNMENT) -> LossBreakdown:
    """Weighted combination of the four terms.

    In caption mode only the MSE term is evaluated; the others are reported
    as exactly zero.
    """
    return total_loss_grad(eeg, image, weights, mode).breakdown
