"""White-box attacks and geometric probes.

PGD (linf and l2 balls) supplies the inner maximization during training and
evaluation; DeepFool measures distance to the nearest decision boundary; the
landscape grid samples the loss surface on a plane spanned by an adversarial
direction and a random orthonormalized one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import ad

EVAL_EPSILON = 8.0 / 255.0
EVAL_STEPS = 20
EVAL_STEP_SIZE = 8.0 / 2550.0

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8.0 / 255.0
    steps: int = 10
    step_size: float = 2.0 / 255.0
    loss: str = "cross_entropy"
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown attack norm {self.norm!r}; expected {NORMS}")
        if not self.epsilon >= 0:
            raise ValueError(f"perturbation budget must be nonnegative, got {self.epsilon}")
        if not self.steps >= 1:
            raise ValueError(f"attack needs at least one step, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.loss not in ad.LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")


def project_l2(delta, epsilon):
    """Project per-example rows of ``delta`` into the l2 ball of radius epsilon.

    Feasible rows are returned exactly as-is, so projection is idempotent.
    """
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.ones_like(norms)
    over = norms > epsilon
    scale[over] = epsilon / norms[over]
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def _project(delta, epsilon, norm):
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    return project_l2(delta, epsilon)


def _random_start(rng, shape, epsilon, norm):
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    b = shape[0]
    d = int(np.prod(shape[1:]))
    direction = rng.normal(size=(b, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-30)
    radius = epsilon * rng.uniform(size=(b, 1)) ** (1.0 / d)
    return (direction * radius).reshape(shape)


def pgd(model, params, x, y, cfg, rng=None):
    """Projected gradient ascent on the attack loss inside the epsilon ball.

    Returns the highest-loss iterate seen, the clean input included, so the
    result never has lower loss than ``x`` when random_start is off. Iterates
    are clamped to [0,1] and projected to the ball after every step.
    """
    graph = model.graph_for(cfg.loss)
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if cfg.epsilon == 0.0:
        return x0.copy()
    if cfg.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        delta = _random_start(rng, x0.shape, cfg.epsilon, cfg.norm)
        x_adv = np.clip(x0 + delta, 0.0, 1.0)
    else:
        x_adv = x0.copy()

    best_x = x0.copy()
    best_loss, _ = ad.forward(graph, params, x0, y)
    expand = (-1,) + (1,) * (x0.ndim - 1)

    def consider(candidate, losses):
        nonlocal best_loss
        better = losses > best_loss
        if better.any():
            best_x[better] = candidate[better]
            best_loss = np.maximum(best_loss, losses)

    for _ in range(cfg.steps):
        losses, g = ad.loss_and_input_grads(graph, params, x_adv, y)
        consider(x_adv, losses)
        if cfg.norm == "linf":
            x_adv = x_adv + cfg.step_size * np.sign(g)
        else:
            flat = g.reshape(g.shape[0], -1)
            norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-30)
            x_adv = x_adv + cfg.step_size * g / norms.reshape(expand)
        delta = _project(x_adv - x0, cfg.epsilon, cfg.norm)
        x_adv = np.clip(x0 + delta, 0.0, 1.0)
    final_losses, _ = ad.forward(graph, params, x_adv, y)
    consider(x_adv, final_losses)
    return best_x


def pgd_eval_attack(model, params, x, y):
    """The fixed evaluation attack: 20-step linf PGD at 8/255 with margin loss."""
    cfg = AttackConfig(norm="linf", epsilon=EVAL_EPSILON, steps=EVAL_STEPS,
                       step_size=EVAL_STEP_SIZE, loss="margin",
                       random_start=False)
    return pgd(model, params, x, y, cfg)


def robust_accuracy(model, params, x, y, attack=pgd_eval_attack,
                    batch_size=256):
    """Accuracy on attacked inputs, processed in batches."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    correct = 0
    for lo in range(0, x.shape[0], batch_size):
        xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
        x_adv = attack(model, params, xb, yb)
        _, logits = ad.forward(model.graph, params, x_adv, yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / x.shape[0]


@dataclass(frozen=True)
class DeepFoolResult:
    x_star: np.ndarray
    distance: float
    converged: bool
    iterations: int


def deepfool(model, params, x, label=None, max_iter=50, overshoot=0.02):
    """Iterative minimal-perturbation search via local linearization.

    Walks toward the nearest decision boundary of the current prediction,
    overshooting slightly to cross it. With ``label`` given, an input the
    model already misclassifies is returned untouched at distance zero.
    No [0,1] clamping: the distance measures raw input-space geometry.
    """
    if max_iter < 1:
        raise ValueError(f"need at least one iteration, got {max_iter}")
    graph = model.graph
    x0 = np.asarray(x, dtype=np.float64)
    _, logits = ad.forward(graph, params, x0[None], [0])
    k0 = int(logits[0].argmax())
    if label is not None and k0 != int(label):
        return DeepFoolResult(x_star=x0.copy(), distance=0.0, converged=True,
                              iterations=0)
    r_total = np.zeros_like(x0)
    factor = 1.0 + overshoot
    iterations = 0
    for it in range(max_iter):
        xi = x0 + factor * r_total
        _, logits = ad.forward(graph, params, xi[None], [0])
        if int(logits[0].argmax()) != k0:
            break
        iterations = it + 1
        jac = ad.logit_input_jacobian(graph, params, xi)
        f = logits[0]
        w = (jac - jac[k0]).reshape(jac.shape[0], -1)
        fdiff = f - f[k0]
        wnorms = np.linalg.norm(w, axis=1)
        ratios = np.full_like(fdiff, np.inf)
        ok = wnorms > 0
        ok[k0] = False
        ratios[ok] = np.abs(fdiff[ok]) / wnorms[ok]
        l = int(np.argmin(ratios))
        if not np.isfinite(ratios[l]):
            break  # degenerate jacobian: no direction moves the margin
        step = (np.abs(fdiff[l]) + 1e-4) / wnorms[l] ** 2
        r_total += (step * w[l]).reshape(x0.shape)
    x_star = x0 + factor * r_total
    _, logits = ad.forward(graph, params, x_star[None], [0])
    converged = int(logits[0].argmax()) != k0
    return DeepFoolResult(x_star=x_star,
                          distance=float(np.linalg.norm(x_star - x0)),
                          converged=converged, iterations=iterations)


@dataclass(frozen=True)
class RhoResult:
    """Mean boundary distance over converged examples plus bookkeeping."""

    rho: float
    converged_frac: float
    n_total: int
    n_converged: int


def rho_metric(model, params, x, y, max_iter=50, overshoot=0.02):
    """Mean l2 DeepFool distance over examples whose search converged."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("boundary-distance metric needs a nonempty dataset")
    distances = []
    for i in range(x.shape[0]):
        res = deepfool(model, params, x[i], label=int(y[i]),
                       max_iter=max_iter, overshoot=overshoot)
        if res.converged:
            distances.append(res.distance)
    if not distances:
        raise ValueError("no example converged; boundary distance undefined")
    return RhoResult(rho=float(np.mean(distances)),
                     converged_frac=len(distances) / x.shape[0],
                     n_total=int(x.shape[0]), n_converged=len(distances))


@dataclass(frozen=True)
class Landscape:
    a_offsets: np.ndarray  # along the adversarial direction
    b_offsets: np.ndarray  # along the random orthonormal direction
    grid: np.ndarray       # grid[i, j] = loss at x + a_i*u + b_j*r


def orthonormal_pair(adv_dir, rng=None):
    """Unit adv direction plus a random direction Gram-Schmidt'd against it."""
    adv_dir = np.asarray(adv_dir, dtype=np.float64)
    nrm = float(np.linalg.norm(adv_dir))
    if nrm == 0.0:
        raise ValueError("adversarial direction must be nonzero")
    u = adv_dir / nrm
    if rng is None:
        rng = np.random.default_rng(0)
    while True:
        raw = rng.normal(size=u.shape)
        r = raw - float(np.vdot(raw, u)) * u
        rn = float(np.linalg.norm(r))
        if rn > 1e-8:
            break
    return u, r / rn


def loss_landscape(model, params, x, y, adv_dir, grid_n=21, extent=8.0 / 255.0,
                   loss="cross_entropy", rng=None):
    """Loss surface on the plane spanned by adv_dir and a random direction.

    The random direction is Gram-Schmidt orthonormalized against the unit
    adversarial direction, so the two axes are exactly orthogonal.
    """
    if grid_n < 2:
        raise ValueError(f"grid needs at least 2 points per side, got {grid_n}")
    u, r = orthonormal_pair(adv_dir, rng)
    graph = model.graph_for(loss)
    x = np.asarray(x, dtype=np.float64)
    a = np.linspace(-extent, extent, grid_n)
    b = np.linspace(-extent, extent, grid_n)
    pts = (x[None, None] + a[:, None].reshape((grid_n, 1) + (1,) * x.ndim) * u
           + b[None, :].reshape((1, grid_n) + (1,) * x.ndim) * r)
    flat = pts.reshape((grid_n * grid_n,) + x.shape)
    labels = np.full(grid_n * grid_n, int(y), dtype=np.int64)
    losses, _ = ad.forward(graph, params, flat, labels)
    return Landscape(a_offsets=a, b_offsets=b,
                     grid=losses.reshape(grid_n, grid_n))


def write_landscape_csv(path, landscape):
    """Header row of b offsets, first column of a offsets, losses in cells."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [f"{v:.17g}" for v in landscape.b_offsets])
        for i, av in enumerate(landscape.a_offsets):
            writer.writerow([f"{av:.17g}"]
                            + [f"{v:.17g}" for v in landscape.grid[i]])
