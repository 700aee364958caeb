"""Gradient-population statistics and per-epoch experiment records.

The estimators work on per-example gradient rows (or just their norms, via
the moments identity) and feed a flat CSV schema that downstream plotting
reads back losslessly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np


@dataclass
class EpochStats:
    epoch: int
    mu: float
    sigma2: float
    pearson_r: float | None
    weight_err_pct: float | None
    nat_acc: float
    rob_acc: float
    lr: float
    gamma0: float | None
    gamma1: float | None


FIELD_NAMES = tuple(f.name for f in fields(EpochStats))


def grad_mu(peg):
    """Mean L2 norm over per-example gradient rows."""
    peg = np.asarray(peg, dtype=np.float64)
    if peg.ndim != 2 or peg.shape[0] < 1:
        raise ValueError(f"need a (B, P) matrix with B >= 1, got {peg.shape}")
    return float(np.linalg.norm(peg, axis=1).mean())


def grad_sigma2(peg):
    """Mean squared deviation of gradient rows from their mean row."""
    peg = np.asarray(peg, dtype=np.float64)
    if peg.ndim != 2 or peg.shape[0] < 2:
        raise ValueError(f"variance needs at least 2 rows, got {peg.shape}")
    centered = peg - peg.mean(axis=0)
    return float(np.einsum("ij,ij->", centered, centered) / peg.shape[0])


def grad_sigma2_from_moments(norms, mean_row):
    """Same statistic from per-row norms and the mean row.

    (1/B) sum ||g_i - gbar||^2 = mean(||g_i||^2) - ||gbar||^2; lets the
    caller skip materializing B x P when only norms were computed.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape[0] < 2:
        raise ValueError(f"variance needs at least 2 rows, got {norms.shape[0]}")
    value = float((norms ** 2).mean() - mean_row @ mean_row)
    return max(value, 0.0)  # roundoff can push tiny values negative


def pearson(xs, ys):
    """Sample Pearson correlation; zero variance in either input is an error."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise ValueError(f"{xs.shape[0]} xs vs {ys.shape[0]} ys")
    if xs.shape[0] < 2:
        raise ValueError(f"correlation needs at least 2 points, got {xs.shape[0]}")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    vx, vy = float(dx @ dx), float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("correlation undefined: zero variance input")
    return float(dx @ dy / np.sqrt(vx * vy))


def overfitting_pct(best_rob, last_rob):
    """Relative robustness drop from the best to the final epoch, percent."""
    if not best_rob > 0:
        raise ValueError(f"best robust accuracy must be positive, got {best_rob}")
    return 100.0 * (best_rob - last_rob) / best_rob


def _format(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def emit_csv(stats_list, path):
    """One header row then one row per epoch, floats at full precision."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(FIELD_NAMES)
            for st in stats_list:
                writer.writerow([_format(getattr(st, name))
                                 for name in FIELD_NAMES])
    except OSError as exc:
        raise OSError(f"cannot write stats CSV at {path}: {exc}") from exc


def read_csv(path):
    """Inverse of emit_csv; empty cells become None."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FIELD_NAMES:
            raise ValueError(f"unexpected stats CSV header in {path}: {header}")
        for row in reader:
            vals = dict(zip(FIELD_NAMES, row))
            out.append(EpochStats(
                epoch=int(vals["epoch"]),
                mu=float(vals["mu"]),
                sigma2=float(vals["sigma2"]),
                pearson_r=None if vals["pearson_r"] == "" else float(vals["pearson_r"]),
                weight_err_pct=(None if vals["weight_err_pct"] == ""
                                else float(vals["weight_err_pct"])),
                nat_acc=float(vals["nat_acc"]),
                rob_acc=float(vals["rob_acc"]),
                lr=float(vals["lr"]),
                gamma0=None if vals["gamma0"] == "" else float(vals["gamma0"]),
                gamma1=None if vals["gamma1"] == "" else float(vals["gamma1"]),
            ))
    return out
