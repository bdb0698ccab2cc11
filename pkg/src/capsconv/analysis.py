"""Trained-model diagnostics: filter correlation, input-gradient attacks,
and train/test gap extraction from metric logs.

Everything here is read-only over trained parameters; outputs are plain
value grids and JSON so plotting can stay external.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .activations import MarginLossConfig
from .model import ModelConfig
from .tensor_core import ShapeError
from .training import EvalResult, batch_loss_and_grads, evaluate


# ---------------------------------------------------------------------------
# kernel structure

def flatten_layer_filters(kernel) -> np.ndarray:
    """Kernel -> (kh*kw, everything-else) matrix, one row per spatial tap."""
    k = np.asarray(kernel)
    if k.ndim != 7:
        raise ShapeError(f"expected a 7-axis kernel, got {k.ndim} axes")
    return k.reshape(k.shape[0] * k.shape[1], -1)


@dataclass
class CorrelationMatrix:
    values: np.ndarray        # (rows, rows) Pearson coefficients
    labels: list              # one name per row
    degenerate: np.ndarray    # rows with zero variance, coefficients zeroed

    @property
    def size(self) -> int:
        return self.values.shape[0]


def correlation_matrix(matrix, labels=None) -> CorrelationMatrix:
    """Pearson coefficients between the rows of a matrix.

    A zero-variance row has no defined coefficient; its entries are set to
    0 and the row is flagged, keeping the matrix finite. The diagonal is
    forced to exactly 1 either way.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got {x.ndim} axes")
    if x.shape[1] < 2:
        raise ValueError("need at least two columns to correlate")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    degenerate = norms == 0.0
    unit = centered / np.where(degenerate, 1.0, norms)[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.fill_diagonal(corr, 1.0)
    if labels is None:
        labels = [str(i) for i in range(x.shape[0])]
    elif len(labels) != x.shape[0]:
        raise ValueError("one label per row")
    return CorrelationMatrix(corr, list(labels), degenerate)


def kernel_correlation(kernel) -> CorrelationMatrix:
    """Spatial-tap correlation of one layer kernel, taps labeled 'i,j'."""
    k = np.asarray(kernel)
    if k.ndim != 7:
        raise ShapeError(f"expected a 7-axis kernel, got {k.ndim} axes")
    labels = [f"{i},{j}" for i in range(k.shape[0]) for j in range(k.shape[1])]
    return correlation_matrix(flatten_layer_filters(k), labels)


def write_matrix_csv(path, matrix) -> None:
    """Plain numeric value grid, one CSV row per matrix row."""
    m = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(m):
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# input-gradient (FGSM) probing

@dataclass(frozen=True)
class FgsmConfig:
    epsilon: float
    samples: int | None = None  # None: attack the whole provided set

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.samples is not None and self.samples < 1:
            raise ValueError("samples must be positive")


def fgsm_attack(config: ModelConfig, kernels, images, labels, epsilon: float,
                loss_cfg: MarginLossConfig | None = None, threads: int = 1,
                batch: int = 256) -> np.ndarray:
    """images + epsilon * sign(dL/dx), clipped back to the unit pixel range.

    epsilon 0 is the identity probe; images are expected in [0, 1].
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if loss_cfg is None:
        loss_cfg = config.loss
    images = np.asarray(images, dtype=np.float64)
    adv = images.copy()
    if epsilon == 0:
        return adv
    n = images.shape[0]
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        _, _, _, dx = batch_loss_and_grads(config, kernels, images[sl],
                                           labels[sl], loss_cfg,
                                           threads=threads,
                                           need_input_grad=True)
        if config.capsule.n == 1:
            g = dx[:, 0, :, :, 0, 0, 0]
        else:
            g = dx[:, 0, :, :, 0, 0, :]
        adv[sl] = np.clip(images[sl] + epsilon * np.sign(g), 0.0, 1.0)
    return adv


@dataclass
class AttackPoint:
    epsilon: float
    samples: int
    clean_accuracy: float
    adversarial_accuracy: float

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "samples": self.samples,
                "clean_accuracy": self.clean_accuracy,
                "adversarial_accuracy": self.adversarial_accuracy}


DEFAULT_EPSILONS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


def fgsm_curve(config: ModelConfig, kernels, images, labels,
               epsilons=DEFAULT_EPSILONS,
               loss_cfg: MarginLossConfig | None = None,
               threads: int = 1) -> list[AttackPoint]:
    """Accuracy under the sign attack across an epsilon grid."""
    if loss_cfg is None:
        loss_cfg = config.loss
    clean = evaluate(config, kernels, images, labels, loss_cfg,
                     threads=threads)
    points = []
    for eps in epsilons:
        adv = fgsm_attack(config, kernels, images, labels, eps,
                          loss_cfg=loss_cfg, threads=threads)
        hit: EvalResult = evaluate(config, kernels, adv, labels, loss_cfg,
                                   threads=threads)
        points.append(AttackPoint(float(eps), int(images.shape[0]),
                                  clean.accuracy, hit.accuracy))
    return points


# ---------------------------------------------------------------------------
# metric-log extraction

def read_metric_log(path) -> dict:
    """metrics.csv -> {split: (iterations, loss, accuracy)} float arrays."""
    rows: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            split = row["split"]
            it, lo, acc = rows.setdefault(split, ([], [], []))
            it.append(int(row["iteration"]))
            lo.append(float(row["loss"]))
            acc.append(float(row["accuracy"]))
    return {split: tuple(np.asarray(col, dtype=np.float64) for col in cols)
            for split, cols in rows.items()}


def generalization_gap(log, window: int = 5):
    """Signed (train - test) loss series at test iterations.

    `log` is a metrics path or an already-parsed log dict. Train loss is
    interpolated onto test iterations when they do not line up exactly.
    Returns (series, terminal_mean) where series is a list of
    (iteration, train_loss, test_loss, gap) tuples and terminal_mean
    averages the last `window` gaps.
    """
    if not isinstance(log, dict):
        log = read_metric_log(log)
    if "train" not in log or "test" not in log:
        raise ValueError("log must contain train and test rows")
    train_it, train_loss, _ = log["train"]
    test_it, test_loss, _ = log["test"]
    if train_it.size == 0 or test_it.size == 0:
        raise ValueError("empty metric log")
    train_at = np.interp(test_it, train_it, train_loss)
    gap = train_at - test_loss
    series = [(int(i), float(tr), float(te), float(g))
              for i, tr, te, g in zip(test_it, train_at, test_loss, gap)]
    terminal = float(np.mean(gap[-max(1, window):]))
    return series, terminal
