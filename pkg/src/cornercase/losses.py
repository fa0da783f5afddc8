"""Box, classification and token-span losses with analytic gradients.

Gradients are taken with respect to the *prediction*: the predicted box's
corner coordinates ``(x1, y1, x2, y2)`` in pixels, the probability ``p`` for
focal loss, or the logit vector for the soft-token loss.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .datamodel import ImageRecord
from .geometry import BBox, giou

PROB_EPS = 1e-7
DEFAULT_TOKEN_LENGTH = 256


class NonDifferentiableError(ValueError):
    """The loss has a kink at (or too close to) the requested point."""


@dataclass(frozen=True, slots=True)
class LossWeights:
    lambda1: float = 2.0  # GIoU
    lambda2: float = 5.0  # L1

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)):
            raise ValueError("loss weights must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("loss weights must not both be zero")


@dataclass(frozen=True, slots=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.gamma >= 0.0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True, slots=True)
class TokenSpan:
    start: int
    end: int
    length: int

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end <= self.length:
            raise ValueError(f"invalid token span [{self.start}, {self.end}) for length {self.length}")

    @classmethod
    def no_object(cls, length: int = DEFAULT_TOKEN_LENGTH) -> TokenSpan:
        """Target for unmatched predictions: the last token position."""
        return cls(length - 1, length, length)


# -- box losses ----------------------------------------------------------


def giou_loss(b: BBox, bhat: BBox) -> float:
    return 1.0 - giou(b, bhat)


def _norm_cxcywh(box: BBox, norm: ImageRecord) -> np.ndarray:
    cx, cy, w, h = box.to_cxcywh()
    return np.array([cx / norm.width, cy / norm.height, w / norm.width, h / norm.height])


def l1_box(b: BBox, bhat: BBox, norm: ImageRecord) -> float:
    """L1 distance in normalized center-size coordinates."""
    return float(np.abs(_norm_cxcywh(b, norm) - _norm_cxcywh(bhat, norm)).sum())


def box_loss(b: BBox, bhat: BBox, w: LossWeights, norm: ImageRecord) -> float:
    return w.lambda1 * giou_loss(b, bhat) + w.lambda2 * l1_box(b, bhat, norm)


def giou_loss_grad(b: BBox, bhat: BBox) -> np.ndarray:
    """d giou_loss / d (bhat.x1, bhat.y1, bhat.x2, bhat.y2).

    Where a max/min is tied (shared edges) the derivative is one-sided; use
    ``giou_kink_distance`` to stay away from those loci.
    """
    px1, py1, px2, py2 = bhat.as_tuple()
    gx1, gy1, gx2, gy2 = b.as_tuple()
    pw, ph = px2 - px1, py2 - py1

    iw = min(gx2, px2) - max(gx1, px1)
    ih = min(gy2, py2) - max(gy1, py1)
    overlap = iw > 0 and ih > 0
    inter = iw * ih if overlap else 0.0
    union = (gx2 - gx1) * (gy2 - gy1) + pw * ph - inter
    cw = max(gx2, px2) - min(gx1, px1)
    ch = max(gy2, py2) - min(gy1, py1)
    hull = cw * ch

    d_area = np.array([-ph, -pw, ph, pw])
    if overlap:
        d_iw = np.array([-1.0 if px1 > gx1 else 0.0, 0.0, 1.0 if px2 < gx2 else 0.0, 0.0])
        d_ih = np.array([0.0, -1.0 if py1 > gy1 else 0.0, 0.0, 1.0 if py2 < gy2 else 0.0])
        d_inter = ih * d_iw + iw * d_ih
    else:
        d_inter = np.zeros(4)
    d_union = d_area - d_inter
    d_cw = np.array([-1.0 if px1 < gx1 else 0.0, 0.0, 1.0 if px2 > gx2 else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if py1 < gy1 else 0.0, 0.0, 1.0 if py2 > gy2 else 0.0])
    d_hull = ch * d_cw + cw * d_ch

    # giou = inter/union - 1 + union/hull
    d_giou = (d_inter * union - inter * d_union) / union**2 + (d_union * hull - union * d_hull) / hull**2
    return -d_giou


def giou_kink_distance(b: BBox, bhat: BBox) -> float:
    """Distance (in pixels) from ``bhat`` to the nearest non-smooth locus of giou_loss."""
    gaps = [
        bhat.x1 - b.x1, bhat.y1 - b.y1, bhat.x2 - b.x2, bhat.y2 - b.y2,
        min(b.x2, bhat.x2) - max(b.x1, bhat.x1),
        min(b.y2, bhat.y2) - max(b.y1, bhat.y1),
    ]
    return min(abs(g) for g in gaps)


# d(cx, cy, w, h) / d(x1, y1, x2, y2), before dividing by the image size
_CXCYWH_JACOBIAN = np.array(
    [
        [0.5, 0.0, 0.5, 0.0],
        [0.0, 0.5, 0.0, 0.5],
        [-1.0, 0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0, 1.0],
    ]
)


def _l1_diffs(b: BBox, bhat: BBox, norm: ImageRecord) -> np.ndarray:
    return _norm_cxcywh(bhat, norm) - _norm_cxcywh(b, norm)


def l1_box_grad(b: BBox, bhat: BBox, norm: ImageRecord) -> np.ndarray:
    diffs = _l1_diffs(b, bhat, norm)
    if np.any(diffs == 0.0):
        raise NonDifferentiableError("l1_box has a kink: a center-size coordinate difference is exactly 0")
    scale = np.array([norm.width, norm.height, norm.width, norm.height], dtype=float)
    return (np.sign(diffs) / scale) @ _CXCYWH_JACOBIAN


def l1_kink_distance(b: BBox, bhat: BBox, norm: ImageRecord) -> float:
    """Pixel-scale distance to the nearest L1 kink (one pixel step moves a center by half a pixel)."""
    diffs = np.abs(_l1_diffs(b, bhat, norm))
    scale = np.array([norm.width, norm.height, norm.width, norm.height], dtype=float)
    return float(np.min(diffs * scale))


def box_loss_grad(b: BBox, bhat: BBox, w: LossWeights, norm: ImageRecord) -> np.ndarray:
    return w.lambda1 * giou_loss_grad(b, bhat) + w.lambda2 * l1_box_grad(b, bhat, norm)


# -- classification losses -----------------------------------------------


def prob_from_logit(z: float, eps: float = PROB_EPS) -> float:
    p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return min(max(p, eps), 1.0 - eps)


def _check_prob(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p!r}")


def focal_loss(p: float, y: int, fp: FocalParams = FocalParams()) -> float:
    """Binary focal loss ``-alpha_t (1 - p_t)^gamma ln(p_t)``."""
    _check_prob(p)
    if y == 1:
        return -fp.alpha * (1.0 - p) ** fp.gamma * math.log(p)
    if y == 0:
        return -(1.0 - fp.alpha) * p**fp.gamma * math.log(1.0 - p)
    raise ValueError(f"label must be 0 or 1, got {y!r}")


def focal_loss_grad(p: float, y: int, fp: FocalParams = FocalParams()) -> float:
    _check_prob(p)
    a, g = fp.alpha, fp.gamma
    if y == 1:
        q = 1.0 - p
        dmod = -g * q ** (g - 1.0) if g else 0.0
        return -a * (dmod * math.log(p) + q**g / p)
    if y == 0:
        dmod = g * p ** (g - 1.0) if g else 0.0
        return -(1.0 - a) * (dmod * math.log(1.0 - p) - p**g / (1.0 - p))
    raise ValueError(f"label must be 0 or 1, got {y!r}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def soft_token_target(span: TokenSpan) -> np.ndarray:
    t = np.zeros(span.length)
    t[span.start : span.end] = 1.0 / (span.end - span.start)
    return t


def soft_token_loss(logits: Sequence[float], span: TokenSpan) -> float:
    """Cross-entropy of softmax(logits) against the uniform distribution over ``span``."""
    z = np.asarray(logits, dtype=float)
    if z.shape != (span.length,):
        raise ValueError(f"expected {span.length} logits, got shape {z.shape}")
    return float(-np.mean(_log_softmax(z)[span.start : span.end]))


def soft_token_loss_grad(logits: Sequence[float], span: TokenSpan) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if z.shape != (span.length,):
        raise ValueError(f"expected {span.length} logits, got shape {z.shape}")
    return np.exp(_log_softmax(z)) - soft_token_target(span)


def auxiliary_loss(block_losses: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Reduce per-decoder-block losses; uniform unit weights unless given."""
    vals = np.asarray(block_losses, dtype=float)
    if weights is None:
        return float(vals.sum())
    ws = np.asarray(weights, dtype=float)
    if ws.shape != vals.shape:
        raise ValueError("one weight per block loss required")
    return float(ws @ vals)


def student_objective(cls_loss: float, box_term: float, cls_weight: float = 1.0) -> float:
    return cls_weight * cls_loss + box_term


# -- gradient plumbing ---------------------------------------------------


@dataclass(frozen=True)
class Objective:
    """A scalar loss over a flat parameter vector, with its analytic gradient.

    ``kink_distance`` returns how far the point is from the nearest
    non-smooth locus (infinite for smooth losses).
    """

    name: str
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    kink_distance: Callable[[np.ndarray], float] = lambda x: math.inf
    in_domain: Callable[[np.ndarray], bool] = lambda x: True


def make_objective(loss: str, **ctx) -> Objective:
    """Bind the fixed arguments of a loss so it becomes a function of the prediction only.

    ``giou`` / ``l1`` / ``box`` need ``target`` (BBox) and, for the last two,
    ``norm`` (ImageRecord) and optionally ``weights``; ``focal`` takes ``y``
    and ``params``; ``soft_token`` takes ``span``.
    """
    if loss in ("giou", "giou_loss"):
        target = ctx["target"]
        return Objective(
            "giou",
            lambda x: giou_loss(target, BBox(*x)),
            lambda x: giou_loss_grad(target, BBox(*x)),
            lambda x: giou_kink_distance(target, BBox(*x)),
            _valid_box,
        )
    if loss in ("l1", "l1_box"):
        target, norm = ctx["target"], ctx["norm"]
        return Objective(
            "l1",
            lambda x: l1_box(target, BBox(*x), norm),
            lambda x: l1_box_grad(target, BBox(*x), norm),
            lambda x: l1_kink_distance(target, BBox(*x), norm),
            _valid_box,
        )
    if loss in ("box", "box_loss"):
        target, norm = ctx["target"], ctx["norm"]
        w = ctx.get("weights", LossWeights())
        return Objective(
            "box",
            lambda x: box_loss(target, BBox(*x), w, norm),
            lambda x: box_loss_grad(target, BBox(*x), w, norm),
            lambda x: min(giou_kink_distance(target, BBox(*x)), l1_kink_distance(target, BBox(*x), norm)),
            _valid_box,
        )
    if loss in ("focal", "focal_loss"):
        y = ctx["y"]
        fp = ctx.get("params", FocalParams())
        return Objective(
            "focal",
            lambda x: focal_loss(float(x[0]), y, fp),
            lambda x: np.array([focal_loss_grad(float(x[0]), y, fp)]),
            lambda x: min(float(x[0]), 1.0 - float(x[0])),
        )
    if loss in ("soft_token", "soft-token", "soft_token_loss"):
        span = ctx["span"]
        return Objective(
            "soft_token",
            lambda x: soft_token_loss(x, span),
            lambda x: soft_token_loss_grad(x, span),
        )
    raise ValueError(f"unknown loss {loss!r}")


def _valid_box(x: np.ndarray) -> bool:
    return bool(x[2] > x[0] and x[3] > x[1])


def _as_objective(loss: str | Objective, ctx) -> Objective:
    return loss if isinstance(loss, Objective) else make_objective(loss, **ctx)


def grad(loss: str | Objective, point: Sequence[float], **ctx) -> np.ndarray:
    """Analytic gradient of ``loss`` at ``point``; see ``make_objective`` for ``ctx``."""
    obj = _as_objective(loss, ctx)
    x = np.asarray(point, dtype=float)
    if obj.kink_distance(x) == 0.0:
        raise NonDifferentiableError(f"{obj.name} is not differentiable at {x.tolist()}")
    return obj.gradient(x)


def central_difference(obj: Objective, x: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        out[i] = (obj.value(hi) - obj.value(lo)) / (2.0 * eps)
    return out


def grad_check(loss: str | Objective, point: Sequence[float], eps: float = 1e-5, **ctx) -> float:
    """Max relative error between analytic and central-difference gradients.

    Refuses points closer than ``10 * eps`` to a non-smooth locus.
    """
    obj = _as_objective(loss, ctx)
    x = np.asarray(point, dtype=float)
    dist = obj.kink_distance(x)
    if dist < 10.0 * eps:
        raise NonDifferentiableError(
            f"{obj.name}: point is {dist:.3g} from a non-smooth locus (need >= {10.0 * eps:.3g})"
        )
    for i in range(x.size):
        for sign in (1.0, -1.0):
            probe = x.copy()
            probe[i] += sign * eps
            if not obj.in_domain(probe):
                raise NonDifferentiableError(f"{obj.name}: finite-difference probe leaves the domain")
    analytic = obj.gradient(x)
    numeric = central_difference(obj, x, eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


LOSS_NAMES = ("giou", "l1", "box", "focal", "soft_token")


def sample_trial(loss: str, rng: np.random.Generator, min_gap: float = 1e-3) -> tuple[Objective, np.ndarray]:
    """A random objective of kind ``loss`` and a point at least ``min_gap`` from any kink."""
    loss = loss.replace("-", "_")
    if loss in ("giou", "l1", "box"):
        norm = ImageRecord(1, 640, 480)
        while True:
            x, y = rng.uniform(0, 400, 2)
            w, h = rng.uniform(5, 150, 2)
            target = BBox(x, y, x + w, y + h)
            point = np.array(target.as_tuple()) + rng.uniform(-40, 40, 4)
            if not _valid_box(point) or min(point[2] - point[0], point[3] - point[1]) < 1.0:
                continue
            weights = LossWeights(*rng.uniform(0.5, 5.0, 2))
            obj = make_objective(loss, target=target, norm=norm, weights=weights)
            if obj.kink_distance(point) >= min_gap:
                return obj, point
    if loss == "focal":
        fp = FocalParams(alpha=float(rng.uniform(0, 1)), gamma=float(rng.uniform(0, 4)))
        obj = make_objective("focal", y=int(rng.integers(0, 2)), params=fp)
        return obj, np.array([rng.uniform(0.01, 0.99)])
    if loss == "soft_token":
        length = int(rng.integers(2, 33))
        start = int(rng.integers(0, length))
        end = int(rng.integers(start + 1, length + 1))
        obj = make_objective("soft_token", span=TokenSpan(start, end, length))
        return obj, rng.normal(0.0, 2.0, length)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_NAMES}")
