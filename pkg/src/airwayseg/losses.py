"""Segmentation losses with analytic gradients.

Every loss consumes two aligned probability volumes: ``y`` holds the
one-hot reference labels and ``p`` the predicted per-class
probabilities. The binary formulas are applied per class channel and
averaged over the included channels: foreground channels by default
(a single-channel volume is treated as one foreground channel), all
channels when ``include_background`` is set.

Gradients are taken with respect to the predicted probabilities, not
pre-softmax scores; probabilities are clamped to ``[EPSILON, 1-EPSILON]``
before logarithms and the log-derivatives are evaluated at the clamped
point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volgrid import ProbVolume

__all__ = [
    "EPSILON",
    "LossValue",
    "ScheduleState",
    "FdResult",
    "cross_entropy",
    "soft_dice",
    "dice_ce_loss",
    "top50_cross_entropy",
    "alpha_schedule",
    "wdice_top50",
    "finite_difference_gradient",
]

EPSILON = 1e-7


@dataclass(frozen=True)
class LossValue:
    """A loss evaluation: scalar value plus optional d(loss)/d(p) grid."""

    value: float
    gradient: np.ndarray | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"loss value must be finite, got {self.value!r}")
        if self.gradient is not None:
            g = np.asarray(self.gradient)
            if not np.isfinite(g).all():
                raise ValueError("loss gradient contains non-finite entries")
            g.flags.writeable = False
            object.__setattr__(self, "gradient", g)


@dataclass(frozen=True)
class ScheduleState:
    """Training progress used to schedule the composite loss weight."""

    epoch: int
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs <= 0:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if not 0 <= self.epoch <= self.total_epochs:
            raise ValueError(f"epoch {self.epoch} outside [0, {self.total_epochs}]")


def alpha_schedule(state: ScheduleState) -> float:
    """Weight ramp: the fraction of training completed, in [0, 1]."""
    return state.epoch / state.total_epochs


def _check_pair(y: ProbVolume, p: ProbVolume):
    if y.data.shape != p.data.shape:
        raise ValueError(f"y and p have mismatched shapes {y.data.shape} vs {p.data.shape}")


def _flat_channels(arr4: np.ndarray) -> np.ndarray:
    # (C, nx, ny, nz) -> (C, N) rows in x-fastest linear order
    c = arr4.shape[0]
    return arr4.transpose(0, 3, 2, 1).reshape(c, -1)


def _unflat_channels(flat: np.ndarray, dims: tuple) -> np.ndarray:
    nx, ny, nz = dims
    return flat.reshape(flat.shape[0], nz, ny, nx).transpose(0, 3, 2, 1)


def _included_channels(num_classes: int, include_background: bool) -> tuple:
    if num_classes == 1:
        return (0,)
    if include_background:
        return tuple(range(num_classes))
    return tuple(range(1, num_classes))


def _channel_mean(values: list) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def _ce_pixel_terms(yf: np.ndarray, pf: np.ndarray):
    pc = np.clip(pf, EPSILON, 1.0 - EPSILON)
    terms = -(yf * np.log(pc) + (1.0 - yf) * np.log(1.0 - pc))
    return terms, pc


def _ce_pixel_grad(yf: np.ndarray, pc: np.ndarray) -> np.ndarray:
    return -yf / pc + (1.0 - yf) / (1.0 - pc)


def cross_entropy(y: ProbVolume, p: ProbVolume, want_gradient: bool = False,
                  include_background: bool = False) -> LossValue:
    """Binary cross-entropy per channel, averaged over included channels."""
    _check_pair(y, p)
    yf = _flat_channels(y.data)
    pf = _flat_channels(p.data)
    included = _included_channels(p.num_classes, include_background)
    n = yf.shape[1]
    terms, pc = _ce_pixel_terms(yf, pf)
    per_channel = [float(terms[c].sum()) / n for c in included]
    value = _channel_mean(per_channel)
    gradient = None
    if want_gradient:
        gflat = np.zeros_like(pf)
        scale = 1.0 / (n * len(included))
        d = _ce_pixel_grad(yf, pc)
        for c in included:
            gflat[c] = d[c] * scale
        gradient = _unflat_channels(gflat, p.dims)
    notes = {"per_channel": {c: per_channel[i] for i, c in enumerate(included)}}
    return LossValue(value, gradient, notes)


def soft_dice(y: ProbVolume, p: ProbVolume, want_gradient: bool = False,
              include_background: bool = False) -> LossValue:
    """Soft Dice coefficient, mean over included non-empty channels.

    A channel where both y and p sum to zero carries no overlap signal and
    is excluded from the mean; the exclusion is recorded in ``notes``. If
    every included channel is empty the coefficient is undefined.
    """
    _check_pair(y, p)
    yf = _flat_channels(y.data)
    pf = _flat_channels(p.data)
    included = _included_channels(p.num_classes, include_background)
    per_channel = {}
    excluded = []
    stats = {}
    for c in included:
        sy = float(yf[c].sum())
        sp = float(pf[c].sum())
        inter = float((yf[c] * pf[c]).sum())
        if sy + sp == 0.0:
            excluded.append(c)
            continue
        per_channel[c] = 2.0 * inter / (sy + sp)
        stats[c] = (sy + sp, inter)
    if not per_channel:
        raise ValueError("undefined Dice: every included channel is empty in both volumes")
    value = _channel_mean(list(per_channel.values()))
    gradient = None
    if want_gradient:
        gflat = np.zeros_like(pf)
        m = len(per_channel)
        for c, (denom, inter) in stats.items():
            gflat[c] = 2.0 * (yf[c] * denom - inter) / (denom * denom * m)
        gradient = _unflat_channels(gflat, p.dims)
    notes = {"per_channel": per_channel, "excluded_channels": excluded}
    return LossValue(value, gradient, notes)


def dice_ce_loss(y: ProbVolume, p: ProbVolume, want_gradient: bool = False,
                 include_background: bool = False, dice_as_loss: bool = True) -> LossValue:
    """Composite objective: cross-entropy plus the Dice term.

    With ``dice_as_loss`` (default) the Dice term enters as ``1 - Dice``
    so better overlap lowers the objective; disabling the flag adds the
    raw coefficient instead.
    """
    ce = cross_entropy(y, p, want_gradient, include_background)
    sd = soft_dice(y, p, want_gradient, include_background)
    if dice_as_loss:
        value = ce.value + (1.0 - sd.value)
        gradient = None if not want_gradient else ce.gradient - sd.gradient
    else:
        value = ce.value + sd.value
        gradient = None if not want_gradient else ce.gradient + sd.gradient
    notes = {
        "cross_entropy": ce.value,
        "soft_dice": sd.value,
        "dice_as_loss": dice_as_loss,
        "excluded_channels": sd.notes["excluded_channels"],
    }
    return LossValue(value, gradient, notes)


def top50_cross_entropy(y: ProbVolume, p: ProbVolume, k_fraction: float = 0.5,
                        want_gradient: bool = False, include_background: bool = False,
                        normalize_by_selected: bool = False) -> LossValue:
    """Cross-entropy over the hardest ``k_fraction`` of pixels per channel.

    Per channel the ceil(k*N) largest per-pixel terms are kept; ties at
    the selection threshold break toward the smallest linear voxel index
    (x-fastest order) so the selection is deterministic. The sum is
    divided by the full pixel count N by default; ``normalize_by_selected``
    divides by the selected count instead.
    """
    if not 0.0 < k_fraction <= 1.0:
        raise ValueError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    _check_pair(y, p)
    yf = _flat_channels(y.data)
    pf = _flat_channels(p.data)
    included = _included_channels(p.num_classes, include_background)
    n = yf.shape[1]
    m_sel = int(math.ceil(k_fraction * n))
    m_sel = min(max(m_sel, 1), n)
    terms, pc = _ce_pixel_terms(yf, pf)
    denom = float(m_sel) if normalize_by_selected else float(n)
    per_channel = []
    thresholds = {}
    gaps = {}
    selections = {}
    for c in included:
        row = terms[c]
        order = np.argsort(-row, kind="stable")
        sel = np.sort(order[:m_sel])
        per_channel.append(float(row[sel].sum()) / denom)
        thresholds[c] = float(row[order[m_sel - 1]])
        gaps[c] = float(row[order[m_sel - 1]] - row[order[m_sel]]) if m_sel < n else math.inf
        selections[c] = sel
    value = _channel_mean(per_channel)
    gradient = None
    if want_gradient:
        gflat = np.zeros_like(pf)
        scale = 1.0 / (denom * len(included))
        d = _ce_pixel_grad(yf, pc)
        for c in included:
            sel = selections[c]
            gflat[c][sel] = d[c][sel] * scale
        gradient = _unflat_channels(gflat, p.dims)
    notes = {
        "per_channel": {c: per_channel[i] for i, c in enumerate(included)},
        "selection_threshold": thresholds,
        "selection_gap": gaps,
        "selected_count": m_sel,
    }
    return LossValue(value, gradient, notes)


def wdice_top50(y: ProbVolume, p: ProbVolume, alpha: float, want_gradient: bool = False,
                k_fraction: float = 0.5, include_background: bool = False,
                dice_as_loss: bool = True, normalize_by_selected: bool = False) -> LossValue:
    """Scheduled blend ``(1-alpha) * DiceTerm + alpha * Top50``.

    The Dice term is ``1 - Dice`` under the default sign convention
    (``dice_as_loss``), the raw coefficient otherwise. ``alpha`` typically
    comes from :func:`alpha_schedule`.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    sd = soft_dice(y, p, want_gradient, include_background)
    t50 = top50_cross_entropy(y, p, k_fraction, want_gradient,
                              include_background, normalize_by_selected)
    dice_term = (1.0 - sd.value) if dice_as_loss else sd.value
    value = (1.0 - alpha) * dice_term + alpha * t50.value
    gradient = None
    if want_gradient:
        dice_grad = -sd.gradient if dice_as_loss else sd.gradient
        gradient = (1.0 - alpha) * dice_grad + alpha * t50.gradient
    notes = {
        "alpha": alpha,
        "dice_term": dice_term,
        "top50": t50.value,
        "dice_as_loss": dice_as_loss,
        "excluded_channels": sd.notes["excluded_channels"],
        "selection_gap": t50.notes["selection_gap"],
    }
    return LossValue(value, gradient, notes)


_LOSS_REGISTRY = {
    "ce": cross_entropy,
    "cross_entropy": cross_entropy,
    "dice": soft_dice,
    "soft_dice": soft_dice,
    "dice_ce": dice_ce_loss,
    "top50": top50_cross_entropy,
    "wdice_top50": wdice_top50,
}


@dataclass(frozen=True)
class FdResult:
    """Central-difference gradient plus a tally of clamped perturbations."""

    gradient: np.ndarray
    clamped_entries: int


def finite_difference_gradient(loss_id: str, y: ProbVolume, p: ProbVolume,
                               h: float = 1e-5, **loss_kwargs) -> FdResult:
    """Numerical gradient oracle: (L(p + h e_i) - L(p - h e_i)) / 2h.

    Perturbed probabilities that leave [0, 1] are clamped back and the
    entry counted, since the loss domain ends there. Intended for tests
    and the ``loss-check`` command, not production use.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-8, 1e-3], got {h}")
    try:
        loss_fn = _LOSS_REGISTRY[loss_id]
    except KeyError:
        raise ValueError(f"unknown loss id {loss_id!r}; known: {sorted(set(_LOSS_REGISTRY))}")

    def value_at(arr: np.ndarray) -> float:
        vol = ProbVolume(arr.copy(), p.spacing, normalized=False)
        return loss_fn(y, vol, want_gradient=False, **loss_kwargs).value

    work = p.data.copy()
    grad = np.zeros_like(work)
    clamped = 0
    for idx in np.ndindex(*work.shape):
        orig = float(work[idx])
        hi = orig + h
        lo = orig - h
        if hi > 1.0:
            hi = 1.0
            clamped += 1
        if lo < 0.0:
            lo = 0.0
            clamped += 1
        work[idx] = hi
        l_plus = value_at(work)
        work[idx] = lo
        l_minus = value_at(work)
        work[idx] = orig
        grad[idx] = (l_plus - l_minus) / (2.0 * h)
    return FdResult(gradient=grad, clamped_entries=clamped)
