"""Outer optimizers for the minimization half of adversarial training.

All variants share one momentum buffer update, theta <- theta - lr * v, and
differ only in how the raw gradient information becomes the momentum
increment:

  msgd   increment = mean batch gradient
  mgnc   increment = clip_transform(mean batch gradient, alpha)
  sngm   increment = summed batch gradient / its norm
  engm   increment = mean of per-example rows, each capped at norm alpha
  fengm  increment = mean of per-example rows, each rescaled to norm alpha

Steps mutate ``state`` and ``params`` in place and return ``params``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ad import NonFiniteError

log = logging.getLogger(__name__)

KINDS = ("msgd", "mgnc", "sngm", "engm", "fengm")


@dataclass
class OptimState:
    kind: str
    v: np.ndarray  # momentum buffer, length P
    beta: float = 0.9
    lr: float = 0.1
    alpha: float = 5.0  # norm threshold; unused by msgd
    step: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"momentum modulus must be in [0, 1), got {self.beta}")
        if not self.lr >= 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.kind != "msgd" and not self.alpha > 0.0:
            raise ValueError(f"norm threshold must be positive, got {self.alpha}")


def make_state(kind, num_params, beta=0.9, lr=0.1, alpha=5.0):
    return OptimState(kind=kind, v=np.zeros(num_params), beta=beta, lr=lr,
                      alpha=alpha)


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs",
                           tuple(int(e) for e in self.decay_epochs))
        if not self.initial > 0:
            raise ValueError(f"initial learning rate must be positive, got {self.initial}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if any(a >= b for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.decay_epochs}")


def lr_at(schedule, epoch):
    """Learning rate in effect at ``epoch``: decayed once per passed milestone."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    passed = sum(1 for m in schedule.decay_epochs if m <= epoch)
    return schedule.initial * schedule.decay_factor ** passed


def clip_transform(a, alpha):
    """Norm-cap a vector: min(alpha/||a||, 1) * a. Zero maps to zero.

    Keeps direction, bounds the norm at alpha, and (applied i.i.d.) bounds
    the variance of the transformed samples by 4*alpha^2.
    """
    if not alpha > 0:
        raise ValueError(f"norm threshold must be positive, got {alpha}")
    a = np.asarray(a, dtype=np.float64)
    norm = float(np.linalg.norm(a))
    if norm <= alpha:
        return a.copy()
    return (alpha / norm) * a


def engm_weights(norms, alpha):
    """Per-example cap weights w_i = min(alpha/||g_i||, 1); zero norm -> 1."""
    norms = np.asarray(norms, dtype=np.float64)
    w = np.ones_like(norms)
    big = norms > alpha
    w[big] = alpha / norms[big]
    return w


def _advance(state, increment, params):
    state.v *= state.beta
    state.v += increment
    params.data -= state.lr * state.v
    state.step += 1
    return params


def msgd_step(state, batch_grad, params):
    """v <- beta*v + g; theta <- theta - lr*v."""
    batch_grad = np.asarray(batch_grad, dtype=np.float64)
    if not np.isfinite(batch_grad).all():
        raise NonFiniteError("non-finite batch gradient passed to optimizer")
    return _advance(state, batch_grad, params)


def mgnc_step(state, batch_grad, params):
    """msgd_step on the norm-capped batch gradient."""
    batch_grad = np.asarray(batch_grad, dtype=np.float64)
    if not np.isfinite(batch_grad).all():
        raise NonFiniteError("non-finite batch gradient passed to optimizer")
    return _advance(state, clip_transform(batch_grad, state.alpha), params)


def sngm_step(state, summed_grad, params):
    """Momentum on the unit-normalized summed mini-batch gradient.

    The increment direction is scale invariant, so sum vs mean only matters
    for the (flagged) zero-gradient edge case, where the update degrades to
    momentum decay alone.
    """
    g = np.asarray(summed_grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite summed gradient passed to optimizer")
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        log.warning("zero summed gradient at step %d; momentum-only update",
                    state.step)
        return _advance(state, np.zeros_like(g), params)
    return _advance(state, g / norm, params)


def engm_step(state, peg, params):
    """Per-example norm capping: mean of min(alpha/||g_i||, 1) * g_i rows."""
    peg = np.asarray(peg, dtype=np.float64)
    _check_rows(peg)
    norms = np.linalg.norm(peg, axis=1)
    w = engm_weights(norms, state.alpha)
    return _advance(state, (w / peg.shape[0]) @ peg, params)


def fengm_step(state, peg, params):
    """Per-example norm equalization: every nonzero row rescaled to norm alpha."""
    peg = np.asarray(peg, dtype=np.float64)
    _check_rows(peg)
    norms = np.linalg.norm(peg, axis=1)
    nz = norms > 0.0
    if not nz.any():
        log.warning("all-zero gradient rows at step %d; zero increment",
                    state.step)
        return _advance(state, np.zeros(peg.shape[1]), params)
    scale = np.zeros_like(norms)
    scale[nz] = state.alpha / norms[nz]
    return _advance(state, (scale / peg.shape[0]) @ peg, params)


def _check_rows(peg):
    if peg.ndim != 2 or peg.shape[0] < 1:
        raise ValueError(f"per-example gradients must be (B, P) with B >= 1, "
                         f"got shape {peg.shape}")
    finite = np.isfinite(peg).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"non-finite gradient row for example {bad}",
                             example=bad)


STEP_FUNCS = {
    "msgd": msgd_step,
    "mgnc": mgnc_step,
    "sngm": sngm_step,
    "engm": engm_step,
    "fengm": fengm_step,
}
