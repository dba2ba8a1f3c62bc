"""Cross-entropy on clean and adversarial batches plus CAM entropy terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError
from .model import Branch, CamMap, EgaModel, ForwardOutput, compute_cam

P_FLOOR = 1e-6
DEGENERATE_RANGE = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_clean: float = 1.0
    lambda_adv: float = 0.01

    def __post_init__(self):
        if self.lambda_clean < 0 or self.lambda_adv < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")

    def validate(self) -> "LossWeights":
        """Clean CAMs must be weighted strictly more than adversarial ones."""
        if not self.lambda_clean > self.lambda_adv:
            raise ConfigError(
                f"lambda_clean ({self.lambda_clean}) must be greater than lambda_adv ({self.lambda_adv})")
        return self

    @property
    def active(self) -> bool:
        return self.lambda_clean > 0 or self.lambda_adv > 0


# (lambda_clean, lambda_adv) pairs of the ablation grid; the first is the default
LAMBDA_GRID = ((1.0, 0.01), (0.1, 0.01), (0.01, 0.002), (0.001, 0.0002), (3.0, 1.0))


@dataclass
class LossBreakdown:
    clean_ce: float
    adv_ce: float
    ent_clean: float
    ent_adv: float
    total: float
    drift_down_clean: float = 0.0
    drift_down_adv: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def cam_to_probability(cam, extrema: Optional[Tuple[np.ndarray, np.ndarray]] = None
                       ) -> Tuple[Tensor, np.ndarray]:
    """Per-map min-max scaling into (0, 1), clamped to [1e-6, 1 - 1e-6].

    Returns the probability tensor (same shape as the CAM values) and a
    boolean flag per map marking degenerate (near-constant) maps. The
    extrema are constants for differentiation; ``extrema`` pins them to
    given per-map (min, max) arrays instead of reading them off the map.
    """
    values = getattr(cam, "values", cam)
    if not isinstance(values, Tensor):
        values = Tensor(np.asarray(values))
    squeeze = values.ndim == 2
    if squeeze:
        values = values.reshape(1, *values.shape)
    v = values.data
    if np.isnan(v).any():
        raise NumericError("CAM contains NaN")
    if extrema is None:
        lo = v.min(axis=(1, 2), keepdims=True)
        hi = v.max(axis=(1, 2), keepdims=True)
    else:
        lo, hi = (np.asarray(e, dtype=v.dtype).reshape(-1, 1, 1) for e in extrema)
    span = hi - lo
    degenerate = (span < DEGENERATE_RANGE).reshape(-1)
    scale = np.where(span < DEGENERATE_RANGE, 0.0, 1.0 / np.where(span == 0, 1, span)).astype(v.dtype)
    p = ad.clamp(ad.mul(ad.sub(values, lo.astype(v.dtype)), scale), P_FLOOR, 1 - P_FLOOR)
    if squeeze:
        p = p.reshape(p.shape[1:])
    return p, degenerate


def entropy_per_map(cam) -> Tensor:
    """-sum P log P over pixels, one value per map; degenerate maps give 0."""
    p, degenerate = cam_to_probability(cam)
    if p.ndim == 2:
        p = p.reshape(1, *p.shape)
    terms = ad.mul(p, ad.log(p))
    keep = (~degenerate).astype(p.dtype)
    return ad.mul(ad.tsum(terms, axis=(1, 2)), -keep)


def entropy_loss(cam) -> Tensor:
    """Pixel-summed entropy of each map, averaged over the batch."""
    return ad.mean(entropy_per_map(cam))


def drift_down_fraction(cam) -> float:
    """Share of pixels in non-degenerate maps sitting below P = 1/e.

    Minimizing -P log P pushes those pixels toward 0 and the rest toward 1.
    """
    values = getattr(cam, "values", cam)
    p, degenerate = cam_to_probability(np.asarray(getattr(values, "data", values)))
    pd = p.data.reshape(len(degenerate), -1)[~degenerate]
    return float((pd < np.exp(-1)).mean()) if pd.size else 0.0


def _branch_terms(model: EgaModel, batch, labels, branch: Branch, weight: float):
    out: ForwardOutput = model.forward(batch, branch, "train")
    ce = ad.softmax_cross_entropy(out.logits, labels)
    cam = compute_cam(out, model, labels)
    if weight > 0:
        ent = entropy_loss(cam)
    else:
        # value only; keeps the graph identical to the plain cross-entropy one
        ent = Tensor(entropy_loss(CamMap(Tensor(cam.values.data), cam.class_index)).data)
    return ce, ent, drift_down_fraction(cam)


def ega_loss(model: EgaModel, clean_batch, adv_batch, labels, weights: LossWeights
             ) -> Tuple[Tensor, LossBreakdown]:
    """Combined objective for one mini-batch.

    ``adv_batch=None`` drops the adversarial terms (clean-only training).
    The clean batch runs through the main branch, the adversarial one
    through the auxiliary branch, both in train mode.
    """
    labels = np.asarray(labels)
    n = len(getattr(clean_batch, "data", clean_batch))
    if labels.shape != (n,) or (adv_batch is not None and len(getattr(adv_batch, "data", adv_batch)) != n):
        raise ContractError("clean batch, adversarial batch and labels must have the same length")
    ce_c, ent_c, drift_c = _branch_terms(model, clean_batch, labels, Branch.MAIN, weights.lambda_clean)
    total = ce_c
    ce_a_val = ent_a_val = drift_a = 0.0
    if adv_batch is not None:
        ce_a, ent_a, drift_a = _branch_terms(model, adv_batch, labels, Branch.AUX, weights.lambda_adv)
        total = ad.add(total, ce_a)
        ce_a_val, ent_a_val = ce_a.item(), ent_a.item()
    if weights.lambda_clean > 0:
        total = ad.add(total, ad.mul(ent_c, weights.lambda_clean))
    if adv_batch is not None and weights.lambda_adv > 0:
        total = ad.add(total, ad.mul(ent_a, weights.lambda_adv))
    ce_c_val, ent_c_val = ce_c.item(), ent_c.item()
    reported = ce_c_val + ce_a_val + weights.lambda_clean * ent_c_val
    if adv_batch is not None:
        reported += weights.lambda_adv * ent_a_val
    breakdown = LossBreakdown(
        clean_ce=ce_c_val, adv_ce=ce_a_val, ent_clean=ent_c_val, ent_adv=ent_a_val,
        total=reported, drift_down_clean=drift_c, drift_down_adv=drift_a)
    return total, breakdown
