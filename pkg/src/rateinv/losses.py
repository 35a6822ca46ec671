"""Training objectives: additive-margin softmax over speaker cosines,
rate cross-entropy, the squared-cosine adversarial loss, and their weighted
total. Each loss has a value-and-gradient companion used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    am_scale: float = 30.0
    am_margin: float = 0.2
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.am_scale <= 0:
            raise ValueError("am_scale must be positive")
        if not 0.0 <= self.am_margin < 1.0:
            raise ValueError("am_margin must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _floored_unit(x: np.ndarray, eps: float):
    norm = float(np.linalg.norm(x))
    scale = max(norm, eps)
    return x / scale, norm, scale


def cosine_adversarial_loss(u: np.ndarray, v: np.ndarray, epsilon: float = 1e-8) -> float:
    """Squared cosine of the two mapped branches; always in [0, 1].

    Norms are floored at epsilon so zero vectors score 0 with a defined
    gradient instead of raising.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"branch shapes differ: {u.shape} vs {v.shape}")
    un, _, _ = _floored_unit(u, epsilon)
    vn, _, _ = _floored_unit(v, epsilon)
    return float(np.dot(un, vn) ** 2)


def cosine_adversarial_grad(u: np.ndarray, v: np.ndarray, epsilon: float = 1e-8):
    """Loss plus gradients with respect to both input vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    un, unorm, uscale = _floored_unit(u, epsilon)
    vn, vnorm, vscale = _floored_unit(v, epsilon)
    c = float(np.dot(un, vn))
    loss = c * c
    if unorm >= uscale:
        dc_du = (vn - c * un) / uscale
    else:
        dc_du = vn / uscale
    if vnorm >= vscale:
        dc_dv = (un - c * vn) / vscale
    else:
        dc_dv = un / vscale
    return loss, 2.0 * c * dc_du, 2.0 * c * dc_dv


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def am_softmax_loss(cosines: np.ndarray, label: int, s: float = 30.0, m: float = 0.2) -> float:
    """Additive-margin softmax: margin m subtracted from the true-class cosine,
    everything scaled by s, then cross-entropy."""
    loss, _ = am_softmax_grad(cosines, label, s, m)
    return loss


def am_softmax_grad(cosines: np.ndarray, label: int, s: float = 30.0, m: float = 0.2):
    cosines = np.asarray(cosines, dtype=np.float64)
    if not 0 <= label < cosines.size:
        raise ValueError(f"label {label} out of range for {cosines.size} classes")
    logits = s * cosines
    logits[label] = s * (cosines[label] - m)
    logp = _log_softmax(logits)
    loss = -float(logp[label])
    dlogits = np.exp(logp)
    dlogits[label] -= 1.0
    return loss, s * dlogits


def rate_ce_loss(logits: np.ndarray, label: int) -> float:
    """Plain stabilized softmax cross-entropy over the rate classes."""
    loss, _ = rate_ce_grad(logits, label)
    return loss


def rate_ce_grad(logits: np.ndarray, label: int):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    logp = _log_softmax(logits)
    loss = -float(logp[label])
    dlogits = np.exp(logp)
    dlogits[label] -= 1.0
    return loss, dlogits


def total_loss(l_id: float, l_rate: float, l_cos: float, cfg: LossConfig = LossConfig()) -> float:
    """Weighted multi-task objective: l_id + lambda1*l_rate + lambda2*l_cos."""
    return float(l_id + cfg.lambda1 * l_rate + cfg.lambda2 * l_cos)
