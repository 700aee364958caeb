"""Approximate per-example gradient normalization at near-MSGD cost.

Per-example parameter-gradient norms are expensive; their correlation with
input-gradient norms (which cost one extra backward pass for the whole
batch) lets a linear model n_theta ~ gamma1 * n_x + gamma0 stand in for
them. The coefficients are refit every tau steps from one exact norm
computation and smoothed with a moving average. Weights derived from the
estimated norms then reweight the batch loss, and plain momentum SGD takes
the step. Naive mode freezes gamma at (0, 1) and never refits; its alpha
absorbs the missing slope.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ad, attacks, optim

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class GammaState:
    gamma0: float = 0.0
    gamma1: float = 1.0
    beta_gamma: float = 0.7
    tau: int = 50
    naive: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta_gamma < 1.0:
            raise ValueError(
                f"moving-average modulus must be in [0, 1), got {self.beta_gamma}")
        if self.tau < 1:
            raise ValueError(f"refresh interval must be >= 1, got {self.tau}")


@dataclass(frozen=True)
class LinFit:
    slope: float
    intercept: float
    degenerate: bool


def linreg(xs, ys):
    """Ordinary least squares fit ys ~ slope * xs + intercept.

    Zero variance in xs yields slope 0, intercept mean(ys), and the
    degenerate flag instead of an error.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise ValueError(f"{xs.shape[0]} xs vs {ys.shape[0]} ys")
    if xs.shape[0] < 2:
        raise ValueError(f"regression needs at least 2 points, got {xs.shape[0]}")
    xm, ym = xs.mean(), ys.mean()
    dx = xs - xm
    var = float(dx @ dx)
    if var == 0.0:
        return LinFit(slope=0.0, intercept=float(ym), degenerate=True)
    slope = float(dx @ (ys - ym)) / var
    return LinFit(slope=slope, intercept=float(ym - slope * xm),
                  degenerate=False)


def gamma_update(state, slope, intercept):
    """Moving-average blend of fresh regression coefficients into the state."""
    b = state.beta_gamma
    state.gamma1 = b * state.gamma1 + (1.0 - b) * slope
    state.gamma0 = b * state.gamma0 + (1.0 - b) * intercept
    return state


def estimate_weights(input_grad_norms, state, alpha):
    """Cap weights from estimated parameter-gradient norms.

    w_i = min(alpha / max(gamma1 * n_i + gamma0, 1e-12), 1). The floor keeps
    a negative or zero estimate (possible with a negative intercept) from
    flipping the weight's sign; such examples get weight 1.
    """
    if not alpha > 0:
        raise ValueError(f"norm threshold must be positive, got {alpha}")
    norms = np.asarray(input_grad_norms, dtype=np.float64)
    est = state.gamma1 * norms + state.gamma0
    if (est <= 0.0).any():
        log.warning("non-positive estimated norm for %d example(s); clamped",
                    int((est <= 0.0).sum()))
    est = np.maximum(est, NORM_FLOOR)
    return np.minimum(alpha / est, 1.0)


def weight_error(exact_w, est_w):
    """Mean absolute weight estimation error, in percent."""
    exact_w = np.asarray(exact_w, dtype=np.float64).reshape(-1)
    est_w = np.asarray(est_w, dtype=np.float64).reshape(-1)
    if exact_w.shape != est_w.shape:
        raise ValueError(
            f"{exact_w.shape[0]} exact weights vs {est_w.shape[0]} estimates")
    return float(np.abs(exact_w - est_w).mean() * 100.0)


@dataclass
class StepDiagnostics:
    gamma1: float
    gamma0: float
    refreshed: bool
    degenerate: bool
    weight_err_pct: float | None
    weights: np.ndarray
    x_adv: np.ndarray


def input_grad_norms(graph, params, x, labels):
    g = ad.input_grads(graph, params, x, labels)
    return np.linalg.norm(g.reshape(g.shape[0], -1), axis=1)


def fast_engm_train_step(model, params, optim_state, gstate, batch, labels,
                         attack_cfg, alpha, weight_decay=0.0, rng=None,
                         norm_fn=None):
    """One training step of the approximate pipeline.

    Attack, then one backward pass for input-gradient norms; every tau steps
    (never in naive mode) one more pass for exact per-example norms feeding
    the regression refresh; then a single weighted backward pass drives a
    momentum-SGD update on (1/B) * sum_i w_i * L_i. ``norm_fn`` overrides the
    input-norm computation (used to verify the estimator against an oracle).
    """
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if attack_cfg is not None and attack_cfg.epsilon > 0:
        x_adv = attacks.pgd(model, params, batch, labels, attack_cfg, rng=rng)
    else:
        x_adv = batch
    graph = model.graph

    if norm_fn is None:
        n_input = input_grad_norms(graph, params, x_adv, labels)
    else:
        n_input = np.asarray(norm_fn(graph, params, x_adv, labels),
                             dtype=np.float64)

    refreshed = (not gstate.naive) and optim_state.step % gstate.tau == 0
    degenerate = False
    weight_err = None
    exact_norms = None
    if refreshed:
        exact_norms = ad.per_example_grad_norms(graph, params, x_adv, labels)
        fit = linreg(n_input, exact_norms)
        degenerate = fit.degenerate
        gamma_update(gstate, fit.slope, fit.intercept)

    w = estimate_weights(n_input, gstate, alpha)
    if refreshed:
        weight_err = weight_error(optim.engm_weights(exact_norms, alpha), w)

    grad = ad.backward_batch(graph, params, x_adv, labels, weights=w)
    if weight_decay:
        grad = grad + weight_decay * params.data
    optim.msgd_step(optim_state, grad, params)
    diag = StepDiagnostics(gamma1=gstate.gamma1, gamma0=gstate.gamma0,
                           refreshed=refreshed, degenerate=degenerate,
                           weight_err_pct=weight_err, weights=w, x_adv=x_adv)
    return params, optim_state, gstate, diag
