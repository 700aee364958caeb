"""Training loop, evaluation, sweeps, and checkpoint I/O.

One run: load and split data, build the model, then per epoch attack each
mini-batch (unless the budget is zero), feed the optimizer whatever gradient
form it needs, and score the validation split with the fixed evaluation
attack. The best-by-validation and final parameters are both kept, along
with a per-epoch statistics history measured on a fixed probe subset of the
training data.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import ad, attacks, fast_engm, models, optim, stats
from .config import FAST_KINDS, config_with
from .data import (Dataset, DataFormatError, ensure_digits_idx, load_cifar_bin,
                   load_idx, split, synth_dataset)

log = logging.getLogger(__name__)

SWEEPABLE = {
    "alpha": "optimizer.alpha",
    "tau": "fast.tau",
    "epsilon": "attack.epsilon",
    "weight_decay": "optimizer.weight_decay",
    "optimizer": "optimizer.kind",
}


class TrainError(RuntimeError):
    """A component failure wrapped with epoch/batch context."""


@dataclass
class RunResult:
    best_params: ad.ParamVector
    last_params: ad.ParamVector
    history: list
    best_epoch: int
    summary: dict


def load_splits(cfg):
    """Train/val/test Datasets for a config, shaped for its model."""
    total = cfg.train_n + cfg.val_n + cfg.test_n
    if cfg.dataset_kind == "synthetic-blobs":
        ds = synth_dataset("blobs", total, noise=cfg.dataset_noise, seed=cfg.seed)
    elif cfg.dataset_kind == "synthetic-moons":
        ds = synth_dataset("moons", total, noise=cfg.dataset_noise, seed=cfg.seed)
    elif cfg.dataset_kind == "idx-dir":
        ds = load_idx(cfg.dataset_path)
    else:
        ds = load_cifar_bin(cfg.dataset_path, total)
    parts = split(ds, cfg.train_n, cfg.val_n, cfg.test_n)
    return tuple(_shape_for(part, cfg.model) for part in parts)


def _shape_for(dataset, spec):
    want = spec.input_shape
    have = dataset.x.shape[1:]
    if have == want:
        return dataset
    if int(np.prod(have)) != int(np.prod(want)):
        raise DataFormatError(
            f"dataset examples have shape {have}, model wants {want}")
    return Dataset(dataset.x.reshape((-1,) + want), dataset.y)


def _batch_gradient(graph, params, x, y, weight_decay):
    g = ad.backward_batch(graph, params, x, y)
    if weight_decay:
        g += weight_decay * params.data
    return g


def _train_batch(model, params, state, gstate, xb, yb, cfg, rng):
    """Attack + gradient + optimizer step for one mini-batch."""
    kind = cfg.opt_kind
    if kind in FAST_KINDS:
        fast_engm.fast_engm_train_step(
            model, params, state, gstate, xb, yb, cfg.attack, cfg.alpha,
            weight_decay=cfg.weight_decay, rng=rng)
        return
    if cfg.attack.epsilon > 0:
        x_adv = attacks.pgd(model, params, xb, yb, cfg.attack, rng=rng)
    else:
        x_adv = xb
    graph = model.graph
    if kind in ("msgd", "mgnc"):
        g = _batch_gradient(graph, params, x_adv, yb, cfg.weight_decay)
        optim.STEP_FUNCS[kind](state, g, params)
    elif kind == "sngm":
        b = xb.shape[0]
        summed = ad.backward_batch(graph, params, x_adv, yb,
                                   weights=np.full(b, float(b)))
        if cfg.weight_decay:
            summed += b * cfg.weight_decay * params.data
        optim.sngm_step(state, summed, params)
    else:  # engm, fengm
        peg = ad.per_example_grads(graph, params, x_adv, yb)
        if cfg.weight_decay:
            peg += cfg.weight_decay * params.data
        optim.STEP_FUNCS[kind](state, peg, params)


def probe_stats(model, params, probe, cfg, epoch, gstate=None):
    """Gradient statistics on the fixed probe subset, re-attacked each epoch.

    Returns (mu, sigma2, pearson_r, weight_err_pct, gamma0, gamma1). The
    norms come from the squared-norm backward path, so no (B, P) matrix is
    built. Weight estimation error compares the cap weights from exact norms
    against those from the linear estimate (the run's own coefficients for
    the fast optimizers, a fresh fit for the rest).
    """
    x, y = probe.x, probe.y
    if cfg.attack.epsilon > 0:
        rng = np.random.default_rng([cfg.seed, 7710, epoch])
        x = attacks.pgd(model, params, x, y, cfg.attack, rng=rng)
    graph = model.graph
    param_norms = ad.per_example_grad_norms(graph, params, x, y)
    input_norms = fast_engm.input_grad_norms(graph, params, x, y)
    mean_row = ad.backward_batch(graph, params, x, y)
    mu = float(param_norms.mean())
    sigma2 = stats.grad_sigma2_from_moments(param_norms, mean_row)
    try:
        r = stats.pearson(input_norms, param_norms)
    except ValueError:
        r = None

    if gstate is not None:
        g0, g1 = gstate.gamma0, gstate.gamma1
    else:
        fit = fast_engm.linreg(input_norms, param_norms)
        g0, g1 = fit.intercept, fit.slope
    est_state = fast_engm.GammaState(gamma0=g0, gamma1=g1,
                                     beta_gamma=cfg.beta_gamma, tau=cfg.tau)
    est_w = fast_engm.estimate_weights(input_norms, est_state, cfg.alpha)
    exact_w = optim.engm_weights(param_norms, cfg.alpha)
    err = fast_engm.weight_error(exact_w, est_w)
    return mu, sigma2, r, err, g0, g1


def evaluate(model, params, dataset, attack_cfg=None, batch_size=256):
    """(natural accuracy, robust accuracy) on a dataset.

    ``attack_cfg`` None means the fixed evaluation attack; epsilon 0 in a
    given config degenerates robust to natural accuracy.
    """
    if len(dataset) == 0:
        raise ValueError("evaluation needs a nonempty dataset")
    x, y = dataset.x, dataset.y
    nat_correct = 0
    rob_correct = 0
    for lo in range(0, len(dataset), batch_size):
        xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
        _, logits = ad.forward(model.graph, params, xb, yb)
        nat_correct += int((logits.argmax(axis=1) == yb).sum())
        if attack_cfg is None:
            x_adv = attacks.pgd_eval_attack(model, params, xb, yb)
        elif attack_cfg.epsilon == 0:
            x_adv = xb
        else:
            x_adv = attacks.pgd(model, params, xb, yb, attack_cfg)
        _, logits = ad.forward(model.graph, params, x_adv, yb)
        rob_correct += int((logits.argmax(axis=1) == yb).sum())
    n = len(dataset)
    return nat_correct / n, rob_correct / n


def train(cfg):
    """Run the full training protocol for one config."""
    train_ds, val_ds, test_ds = load_splits(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, attack_seed = ss.spawn(3)
    model = models.build_model(cfg.model, rng=np.random.default_rng(init_seed))
    params = model.params
    shuffle_rng = np.random.default_rng(shuffle_seed)
    attack_rng = np.random.default_rng(attack_seed)

    probe_n = min(cfg.probe_n, len(train_ds))
    probe = Dataset(train_ds.x[:probe_n], train_ds.y[:probe_n])

    inner_kind = "msgd" if cfg.opt_kind in FAST_KINDS else cfg.opt_kind
    state = optim.make_state(inner_kind, params.size, beta=cfg.beta,
                             lr=cfg.schedule.initial, alpha=cfg.alpha)
    gstate = None
    if cfg.opt_kind in FAST_KINDS:
        gstate = fast_engm.GammaState(beta_gamma=cfg.beta_gamma, tau=cfg.tau,
                                      naive=cfg.naive)

    history = []
    best_rob = -1.0
    best_epoch = -1
    best_params = params.copy()
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        state.lr = optim.lr_at(cfg.schedule, epoch)
        perm = shuffle_rng.permutation(n)
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo:lo + cfg.batch_size]
            try:
                _train_batch(model, params, state, gstate,
                             train_ds.x[idx], train_ds.y[idx], cfg, attack_rng)
            except Exception as exc:
                raise TrainError(
                    f"epoch {epoch} batch {bi}: {exc}") from exc
        try:
            mu, sigma2, r, werr, g0, g1 = probe_stats(
                model, params, probe, cfg, epoch, gstate=gstate)
        except Exception as exc:
            raise TrainError(f"epoch {epoch} probe stats: {exc}") from exc
        if cfg.val_n > 0:
            nat_acc, rob_acc = evaluate(model, params, val_ds)
        else:
            nat_acc, rob_acc = float("nan"), float("nan")
        history.append(stats.EpochStats(
            epoch=epoch, mu=mu, sigma2=sigma2, pearson_r=r,
            weight_err_pct=werr, nat_acc=nat_acc, rob_acc=rob_acc,
            lr=state.lr, gamma0=g0, gamma1=g1))
        if cfg.val_n > 0 and rob_acc > best_rob:
            best_rob = rob_acc
            best_epoch = epoch
            best_params = params.copy()
        log.info("epoch %d: mu=%.4g sigma2=%.4g nat=%.4f rob=%.4f",
                 epoch, mu, sigma2, nat_acc, rob_acc)
    if best_epoch < 0:  # no validation split: final params are "best"
        best_epoch = cfg.epochs - 1
        best_params = params.copy()
        best_rob = float("nan")

    last_rob = history[-1].rob_acc
    summary = {
        "optimizer": cfg.opt_kind,
        "alpha": cfg.alpha,
        "epsilon": cfg.attack.epsilon,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "best_epoch": best_epoch,
        "natural_acc": history[best_epoch].nat_acc,
        "best_rob_acc": best_rob,
        "last_rob_acc": last_rob,
        "overfitting_pct": (stats.overfitting_pct(best_rob, last_rob)
                            if best_rob and best_rob > 0 else None),
        "mean_mu": float(np.mean([h.mu for h in history])),
        "mean_sigma2": float(np.mean([h.sigma2 for h in history])),
        "max_sigma2": float(np.max([h.sigma2 for h in history])),
        "rho": None,
    }
    if len(test_ds) > 0:
        test_nat, test_rob = evaluate(model, best_params, test_ds)
        summary["test_natural_acc"] = test_nat
        summary["test_rob_acc"] = test_rob

    result = RunResult(best_params=best_params, last_params=params.copy(),
                       history=history, best_epoch=best_epoch,
                       summary=summary)
    if cfg.out_dir:
        write_run_outputs(cfg.out_dir, result)
    return result


def write_run_outputs(out_dir, result):
    os.makedirs(out_dir, exist_ok=True)
    stats.emit_csv(result.history, os.path.join(out_dir, "history.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_checkpoint(os.path.join(out_dir, "best.ckpt"), result.best_params)
    save_checkpoint(os.path.join(out_dir, "last.ckpt"), result.last_params)


def sweep(base_cfg, parameter, values):
    """One independent run per value of one swept configuration key.

    Emits per-run outputs under out_dir/<param>=<value>/ plus a combined CSV
    (swept value as the leading column) and a JSON summary map.
    """
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; "
                         f"choose from {sorted(SWEEPABLE)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    key = SWEEPABLE[parameter]
    results = {}
    for value in values:
        run_dir = os.path.join(base_cfg.out_dir, f"{parameter}={value}")
        cfg = config_with(base_cfg, {key: value, "out_dir": run_dir})
        results[value] = train(cfg)

    os.makedirs(base_cfg.out_dir, exist_ok=True)
    combined = os.path.join(base_cfg.out_dir, "sweep.csv")
    with open(combined, "w") as fh:
        fh.write(",".join((parameter,) + stats.FIELD_NAMES) + "\n")
        for value, res in results.items():
            for h in res.history:
                row = [str(value)] + [
                    stats._format(getattr(h, name)) for name in stats.FIELD_NAMES]
                fh.write(",".join(row) + "\n")
    with open(os.path.join(base_cfg.out_dir, "sweep_summary.json"), "w") as fh:
        json.dump({str(v): r.summary for v, r in results.items()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    return results


CKPT_TAG = "ckpt1"


def save_checkpoint(path, params):
    """Manifest line, little-endian u64 count, raw little-endian float64s."""
    segs = " ".join(
        f"{name}:{off}:{'x'.join(str(d) for d in shape) if shape else '-'}"
        for name, off, shape in params.layout)
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_TAG} {segs}\n".encode("ascii"))
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        manifest = fh.readline()
        if not manifest.endswith(b"\n"):
            raise DataFormatError(f"{path}: missing checkpoint manifest line")
        parts = manifest.decode("ascii", errors="replace").strip().split(" ")
        if parts[0] != CKPT_TAG:
            raise DataFormatError(
                f"{path}: bad checkpoint tag {parts[0]!r}, expected {CKPT_TAG!r}")
        layout = []
        for seg in parts[1:]:
            try:
                name, off, shape_s = seg.rsplit(":", 2)
                shape = (() if shape_s == "-" else
                         tuple(int(d) for d in shape_s.split("x")))
                layout.append((name, int(off), shape))
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}: bad manifest segment {seg!r}") from exc
        raw = fh.read(8)
        if len(raw) != 8:
            raise DataFormatError(f"{path}: truncated value count")
        (count,) = struct.unpack("<Q", raw)
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise DataFormatError(
                f"{path}: expected {8 * count} payload bytes, "
                f"found {len(payload)}")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        return ad.ParamVector(values, tuple(layout))
    except ad.ShapeError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def prepare_dataset_dir(cfg):
    """Materialize the default procedural IDX data if the path is missing.

    Only fires for idx-dir configs whose directory does not exist; real
    datasets at existing paths are never touched.
    """
    if cfg.dataset_kind == "idx-dir" and cfg.dataset_path \
            and not os.path.isdir(cfg.dataset_path):
        total = cfg.train_n + cfg.val_n + cfg.test_n
        ensure_digits_idx(cfg.dataset_path, total, seed=cfg.seed)
