"""Loss terms of the adaptation objective.

Every function returns a scalar Tensor in "minimize" convention. The
discriminator side of an adversarial term is the negated log-likelihood
(log mode) or the least-squares target form (mse mode); the generator side
is the non-saturating / least-squares counterpart.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TERMS = ("dgan_t", "dgan_s", "jgan_t", "jgan_s", "cyc", "clc", "dsp")


def _check_scores(*scores):
    for s in scores:
        if s.ndim != 2 or s.shape[1] != 1:
            raise ad.ShapeError(f"scores must have shape (n, 1), got {s.shape}")
        if s.shape[0] == 0:
            raise ValueError("empty batch")


def _check_mode(mode, side):
    if mode not in ("log", "mse"):
        raise ValueError(f"unknown adversarial mode {mode!r}")
    if side not in ("discriminator", "generator"):
        raise ValueError(f"unknown side {side!r}")


def _log_sigmoid(x):
    return ad.log(ad.sigmoid(x))


def _log_one_minus_sigmoid(x):
    return ad.log(ad.sigmoid(-x))


def _real_term(scores, mode):
    # per-sample cost of calling a real sample real
    if mode == "mse":
        return ad.square(scores - 1.0)
    return -_log_sigmoid(scores)


def _fake_term(scores, mode):
    if mode == "mse":
        return ad.square(scores)
    return -_log_one_minus_sigmoid(scores)


def _fooled_term(scores, mode):
    if mode == "mse":
        return ad.square(scores - 1.0)
    return -_log_sigmoid(scores)


def _weighted_mean(per_sample, weights):
    if weights is None:
        return ad.reduce_mean(per_sample)
    w = Tensor(np.asarray(weights, dtype=np.float64).reshape(per_sample.shape))
    return ad.scalar_mul(ad.reduce_sum(ad.mul(per_sample, w)), 1.0 / per_sample.shape[0])


def adv_loss(scores_real, scores_fake, mode="mse", side="discriminator"):
    """Marginal adversarial loss.

    discriminator: mse ``mean[(real-1)^2] + mean[fake^2]``;
    log ``-(mean[log s(real)] + mean[log(1 - s(fake))])``.
    generator: mse ``mean[(fake-1)^2]``; log ``-mean[log s(fake)]``.
    ``scores_real`` is ignored on the generator side and may be None.
    """
    _check_mode(mode, side)
    if side == "generator":
        _check_scores(scores_fake)
        return ad.reduce_mean(_fooled_term(scores_fake, mode))
    _check_scores(scores_real, scores_fake)
    return ad.reduce_mean(_real_term(scores_real, mode)) + ad.reduce_mean(_fake_term(scores_fake, mode))


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def classifier_ce(logits, labels):
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"classifier_ce: labels shape {labels.shape} vs logits {logits.shape}")
    if n == 0:
        raise ValueError("classifier_ce: empty batch")
    if (labels < 0).any() or (labels >= c).any():
        raise ValueError(f"classifier_ce: label outside [0, {c})")
    mask = Tensor(one_hot(labels, c))
    return -ad.scalar_mul(ad.reduce_sum(ad.mul(ad.log_softmax(logits), mask)), 1.0 / n)


def cycle_loss(x, x_roundtrip):
    """Mean absolute difference over all elements."""
    if x.shape != x_roundtrip.shape:
        raise ad.ShapeError(f"cycle_loss: shape mismatch {x.shape} vs {x_roundtrip.shape}")
    return ad.reduce_mean(ad.abs(x_roundtrip - x))


def dsp_loss(generated, labels, mode="literal", margin=1.0):
    """Structure-preserving loss over ordered pairs ``i != j``.

    Mean over pairs of ``W_ij * d_ij`` with Euclidean ``d``; ``W = +1`` for
    same-class pairs and ``-1`` otherwise. Margin mode replaces the
    different-class term with ``-min(d, margin)``. ``generated`` is flattened
    per sample; pass trunk features to measure distance in that space.
    """
    labels = np.asarray(labels)
    n = generated.shape[0]
    if n < 2:
        raise ValueError("dsp_loss: needs at least two samples")
    if labels.shape != (n,):
        raise ad.ShapeError(f"dsp_loss: labels shape {labels.shape} vs batch {generated.shape}")
    if mode not in ("literal", "margin"):
        raise ValueError(f"dsp_loss: unknown mode {mode!r}")
    if mode == "margin" and not margin > 0:
        raise ValueError("dsp_loss: margin must be positive")
    flat = generated if generated.ndim == 2 else ad.reshape(generated, (n, -1))
    dist = ad.sqrt(ad.pairwise_sq_dist(flat))
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    pairs = n * (n - 1)
    if mode == "literal":
        w = np.where(same, 1.0, -1.0) * off_diag
        return ad.scalar_mul(ad.reduce_sum(ad.mul(dist, Tensor(w))), 1.0 / pairs)
    pull = Tensor((same & off_diag).astype(np.float64))
    push = Tensor((~same).astype(np.float64))
    total = ad.mul(dist, pull) - ad.mul(ad.clamp_max(dist, margin), push)
    return ad.scalar_mul(ad.reduce_sum(total), 1.0 / pairs)


def clc_loss(pred_t, pred_s):
    """Mean over samples of the L1 distance between two probability rows."""
    if pred_t.shape != pred_s.shape:
        raise ad.ShapeError(f"clc_loss: shape mismatch {pred_t.shape} vs {pred_s.shape}")
    return ad.scalar_mul(ad.reduce_sum(ad.abs(pred_t - pred_s)), 1.0 / pred_t.shape[0])


def entropy(probs):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def confidence_weight(probs, n_classes=None, tol=1e-6):
    """``1 - H(p) / ln C`` for one probability vector or a batch of rows."""
    p = np.asarray(probs, dtype=np.float64)
    c = p.shape[-1] if n_classes is None else n_classes
    if p.shape[-1] != c or c < 2:
        raise ValueError(f"confidence_weight: need C == len(probs) >= 2, got C={c}, len={p.shape[-1]}")
    if (p < 0).any() or (np.abs(p.sum(axis=-1) - 1.0) > tol).any():
        raise ValueError("confidence_weight: not a probability vector")
    gamma = 1.0 - entropy(p) / np.log(c)
    return np.clip(gamma, 0.0, 1.0)


def jag_loss(j_real, j_fake, gammas, domain="target", mode="mse", side="discriminator"):
    """Joint adversarial loss with confidence weights on the pseudo-labelled side.

    target domain: ``gammas`` weight the real pairs (target sample with its
    pseudo-label); source domain: they weight the fake pairs (translated
    target sample with its pseudo-label). Weighted means divide by n.
    ``j_real`` is unused on the generator side and may be None.
    """
    _check_mode(mode, side)
    if domain not in ("target", "source"):
        raise ValueError(f"jag_loss: unknown domain {domain!r}")
    g = None if gammas is None else np.asarray(gammas, dtype=np.float64).ravel()
    if g is not None and ((g < 0).any() or (g > 1).any()):
        raise ValueError("jag_loss: gamma outside [0, 1]")
    real_w = g if domain == "target" else None
    fake_w = g if domain == "source" else None
    if side == "generator":
        _check_scores(j_fake)
        return _weighted_mean(_fooled_term(j_fake, mode), fake_w)
    _check_scores(j_real, j_fake)
    return _weighted_mean(_real_term(j_real, mode), real_w) + _weighted_mean(_fake_term(j_fake, mode), fake_w)


@dataclass
class LossBreakdown:
    dgan_t: float = 0.0
    dgan_s: float = 0.0
    jgan_t: float = 0.0
    jgan_s: float = 0.0
    cyc: float = 0.0
    clc: float = 0.0
    dsp: float = 0.0
    total: float = 0.0
    lambdas: tuple = field(default=(1.0, 1.0, 1.0))

    def terms(self):
        return {k: getattr(self, k) for k in TERMS}


def weighted_total(parts, lambdas):
    l1, l2, l3 = lambdas
    return (parts["dgan_t"] + parts["dgan_s"] + parts["jgan_t"] + parts["jgan_s"]
            + l1 * parts["cyc"] + l2 * parts["clc"] + l3 * parts["dsp"])


def total_objective(parts, lambda1, lambda2, lambda3):
    """Combine the seven term values (floats or scalar Tensors)."""
    lambdas = (float(lambda1), float(lambda2), float(lambda3))
    if min(lambdas) < 0:
        raise ValueError("total_objective: lambdas must be nonnegative")
    missing = set(TERMS) - set(parts)
    if missing:
        raise KeyError(f"total_objective: missing terms {sorted(missing)}")
    vals = {k: float(v.data) if isinstance(v, Tensor) else float(v) for k, v in parts.items()}
    return LossBreakdown(**{k: vals[k] for k in TERMS}, total=weighted_total(vals, lambdas), lambdas=lambdas)
