"""Training objectives: supervised dual-head CE plus self-training terms.

Pseudo-labels always come from the weak view and are treated as constants;
gradients flow only through the strong view's forward pass. The subclass head
participates three ways: a supervised CE against taxonomy assignments, its own
self-training term, and as a guide that picks which class a confident
unlabelled pixel should be pushed toward. An entropy gate can veto that
guidance pixelwise whenever the subclass head is less certain than the class
head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .clustering import Taxonomy
from .errors import ConfigurationError, DataError
from .grids import FeatureGrid, LabelGrid, ProbGrid
from .netcore import GradientSet, LossValue, ModelParams, ce_loss_and_grad, forward

UNLABELLED_MODES = ("none", "plain", "guided", "gated")
GATE_FALLBACKS = ("ignore", "original")

# entropy differences below this are treated as ties (gate stays closed), so
# that permuted-but-equal distributions are not split by summation ulp noise
GATE_TIE_TOL = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Confidence threshold and term weights for the combined objective."""

    gamma: float = 0.75
    lambda_u: float = 1.0
    lambda_sub: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie strictly in (0, 1), got {self.gamma}")
        if self.lambda_u < 0 or self.lambda_sub < 0:
            raise ConfigurationError("loss weights must be non-negative")


def select(probs: ProbGrid, gamma: float) -> LabelGrid:
    """Argmax label where the winning probability strictly exceeds gamma,
    IGNORE elsewhere. Argmax ties resolve to the lowest index."""
    a = np.argmax(probs.data, axis=-1)
    conf = np.take_along_axis(probs.data, a[..., None], axis=-1)[..., 0]
    out = np.where(conf > gamma, a, probs.classes)
    return LabelGrid(out.astype(np.int64), probs.classes)


def class_mass(probs_sub: ProbGrid, taxonomy: Taxonomy) -> ProbGrid:
    """Collapse subclass probabilities onto their parent classes."""
    if probs_sub.classes != taxonomy.num_subclasses:
        raise DataError(f"got {probs_sub.classes} subclass probs for a taxonomy "
                        f"of {taxonomy.num_subclasses}")
    member = np.zeros((taxonomy.num_subclasses, taxonomy.num_classes))
    member[np.arange(taxonomy.num_subclasses), taxonomy.parents] = 1.0
    return ProbGrid(probs_sub.data @ member)


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy (nats) over the last axis; 0 log 0 = 0."""
    return -xlogy(probs, probs).sum(axis=-1)


def subclass_guided_select(probs_cls: ProbGrid, probs_sub: ProbGrid,
                           taxonomy: Taxonomy, gamma: float) -> LabelGrid:
    """Pseudo-label via the subclass head's favourite: the winning subclass
    names a parent class, which is kept iff the class head gives it strictly
    more than gamma. The class head's own argmax is never consulted, which is
    what lets rare classes win pixels a plain argmax would hand to the
    dominant class."""
    if probs_cls.classes != taxonomy.num_classes:
        raise DataError("class prob width does not match taxonomy")
    parent = taxonomy.parents[np.argmax(probs_sub.data, axis=-1)]
    conf = np.take_along_axis(probs_cls.data, parent[..., None], axis=-1)[..., 0]
    out = np.where(conf > gamma, parent, probs_cls.classes)
    return LabelGrid(out.astype(np.int64), probs_cls.classes)


def entropy_gated_select(probs_cls: ProbGrid, probs_sub: ProbGrid, taxonomy: Taxonomy,
                         gamma: float, fallback: str = "ignore"):
    """Entropy-vetoed selection from the collapsed subclass distribution.

    A pixel's gate is open only when the collapsed subclass distribution is
    strictly lower-entropy than the class distribution; ties (differences
    within GATE_TIE_TOL) keep it closed. Open pixels take the collapsed
    distribution's argmax class, kept iff the class head gives it strictly
    more than gamma. Note the candidate differs from the ungated guided
    selector: collapsing first favours classes with broad subclass support,
    while the guided route lets a single sharp subclass speak for its parent.
    Closed pixels become IGNORE, or fall back to plain confident selection
    with fallback="original". Returns (labels, open_mask).
    """
    if fallback not in GATE_FALLBACKS:
        raise ConfigurationError(f"fallback must be one of {GATE_FALLBACKS}, got {fallback!r}")
    mapped = class_mass(probs_sub, taxonomy)
    cand = np.argmax(mapped.data, axis=-1)
    conf = np.take_along_axis(probs_cls.data, cand[..., None], axis=-1)[..., 0]
    open_labels = np.where(conf > gamma, cand, probs_cls.classes).astype(np.int64)
    open_mask = entropy_map(mapped.data) < entropy_map(probs_cls.data) - GATE_TIE_TOL
    if fallback == "ignore":
        alt = np.full_like(open_labels, probs_cls.classes)
    else:
        alt = select(probs_cls, gamma).data
    out = np.where(open_mask, open_labels, alt)
    return LabelGrid(out, probs_cls.classes), open_mask


def supervised_loss(params: ModelParams, grid: FeatureGrid, labels: LabelGrid,
                    sub_labels: LabelGrid | None, weights: LossWeights):
    """Class-head CE plus lambda_sub-weighted subclass-head CE on one view."""
    loss_c, grads = ce_loss_and_grad(params, grid, labels, "cls")
    value = loss_c.value
    if sub_labels is not None:
        loss_s, g_s = ce_loss_and_grad(params, grid, sub_labels, "sub",
                                       weight=weights.lambda_sub)
        grads.add_(g_s)
        value += loss_s.value
    return LossValue(value, loss_c.pixels), grads


def selftrain_class_loss(params: ModelParams, grid_weak: FeatureGrid, grid_strong: FeatureGrid,
                         taxonomy: Taxonomy | None, weights: LossWeights, mode: str,
                         gate_fallback: str = "ignore"):
    """Class-head CE on the strong view against weak-view pseudo-labels.

    mode picks the selector: "plain" thresholds the class head's argmax,
    "guided" routes through the subclass head, "gated" additionally applies
    the entropy veto. Returns (loss, grads, info) where info carries
    pseudo-label coverage and, for "gated", the open-gate fraction.
    """
    if mode not in ("plain", "guided", "gated"):
        raise ConfigurationError(f"unknown self-training mode {mode!r}")
    if mode != "plain" and taxonomy is None:
        raise ConfigurationError(f"mode {mode!r} needs a taxonomy")
    probs_w = forward(params, grid_weak, "cls")
    info = {"gate_open_fraction": float("nan")}
    if mode == "plain":
        pseudo = select(probs_w, weights.gamma)
    else:
        probs_sub_w = forward(params, grid_weak, "sub")
        if mode == "guided":
            pseudo = subclass_guided_select(probs_w, probs_sub_w, taxonomy, weights.gamma)
        else:
            pseudo, open_mask = entropy_gated_select(probs_w, probs_sub_w, taxonomy,
                                                     weights.gamma, gate_fallback)
            info["gate_open_fraction"] = float(open_mask.mean())
    info["pseudo_coverage"] = pseudo.coverage()
    loss, grads = ce_loss_and_grad(params, grid_strong, pseudo, "cls", weight=weights.lambda_u)
    return loss, grads, info


def selftrain_sub_loss(params: ModelParams, grid_weak: FeatureGrid,
                       grid_strong: FeatureGrid, weights: LossWeights):
    """Subclass-head CE on the strong view against its own confident
    weak-view argmax, weighted by lambda_u * lambda_sub."""
    probs_sub_w = forward(params, grid_weak, "sub")
    pseudo = select(probs_sub_w, weights.gamma)
    return ce_loss_and_grad(params, grid_strong, pseudo, "sub",
                            weight=weights.lambda_u * weights.lambda_sub)


def total_objective(params: ModelParams, labelled, unlabelled, taxonomy: Taxonomy | None,
                    weights: LossWeights, *, sub_supervised: bool = False,
                    unlabelled_mode: str = "none", sub_selftrain: bool = False,
                    gate_fallback: str = "ignore"):
    """One optimization step's loss surface.

    labelled is (grid, labels, sub_labels-or-None); unlabelled is
    (grid_weak, grid_strong) or None. No ground truth for unlabelled data is
    accepted anywhere here, by construction. Returns (loss, grads, parts)
    where parts holds the weighted contribution of each term plus gate and
    coverage diagnostics (nan when the relevant term is off).
    """
    if unlabelled_mode not in UNLABELLED_MODES:
        raise ConfigurationError(f"unlabelled_mode must be one of {UNLABELLED_MODES}")
    grid_l, labels_l, sub_labels_l = labelled
    if sub_supervised and sub_labels_l is None:
        raise ConfigurationError("sub_supervised needs subclass labels for the labelled view")
    if sub_selftrain and taxonomy is None:
        raise ConfigurationError("subclass self-training needs a taxonomy")
    if unlabelled is None and (unlabelled_mode != "none" or sub_selftrain):
        raise ConfigurationError("unlabelled terms requested without an unlabelled batch")

    loss_sup, grads = supervised_loss(params, grid_l, labels_l,
                                      sub_labels_l if sub_supervised else None, weights)
    parts = {
        "loss_sup": loss_sup.value,
        "loss_st": 0.0,
        "loss_st_sub": 0.0,
        "gate_open_fraction": float("nan"),
        "pseudo_coverage": float("nan"),
    }
    total = loss_sup.value
    pixels = loss_sup.pixels
    if unlabelled is not None and unlabelled_mode != "none":
        grid_w, grid_s = unlabelled
        loss_st, g_st, info = selftrain_class_loss(params, grid_w, grid_s, taxonomy,
                                                   weights, unlabelled_mode, gate_fallback)
        grads.add_(g_st)
        total += loss_st.value
        pixels += loss_st.pixels
        parts["loss_st"] = loss_st.value
        parts.update(info)
    if unlabelled is not None and sub_selftrain:
        grid_w, grid_s = unlabelled
        loss_ss, g_ss = selftrain_sub_loss(params, grid_w, grid_s, weights)
        grads.add_(g_ss)
        total += loss_ss.value
        pixels += loss_ss.pixels
        parts["loss_st_sub"] = loss_ss.value
    return LossValue(total, pixels), grads, parts
