"""Training-iteration timing across batch sizes and thread counts.

Times the real update path (loss + gradients + optimizer step) on synthetic
data shaped like the config's input, with warmup iterations excluded and
BLAS pinned to one thread so the harness's own chunk threading is the only
parallelism being measured. Reported unit is seconds per 100 iterations;
wall-clock numbers are hardware-bound, only their shape is checkable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .conv import single_thread_blas
from .model import ModelConfig, init_kernels
from .training import Adam, batch_loss_and_grads, child_rng, derive_seed

DEFAULT_BATCHES = (50, 100, 150, 200)


@dataclass
class BenchResult:
    batch: int
    threads: int
    iterations: int
    seconds: float

    @property
    def per_100(self) -> float:
        return self.seconds / self.iterations * 100.0

    def __str__(self):
        return (f"batch {self.batch:>4}  threads {self.threads}  "
                f"{self.per_100:9.2f} s / 100 iterations")


def synthetic_batch(config: ModelConfig, batch: int, seed: int = 0):
    """Random unit-range images and labels matching the config's input."""
    rng = child_rng(seed, "bench-data")
    shape = (batch, config.height, config.width)
    if config.capsule.n == 3:
        shape += (3,)
    images = rng.random(shape)
    labels = rng.integers(0, config.classes, size=batch)
    return images, labels


def time_iterations(config: ModelConfig, batch: int, iters: int = 5,
                    threads: int = 1, seed: int = 0,
                    warmup: int = 1) -> BenchResult:
    """Wall-clock one training loop segment; warmup iterations untimed."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    images, labels = synthetic_batch(config, batch, seed)
    kernels = init_kernels(config, derive_seed(seed, "init"))
    opt = Adam(kernels)
    t0 = 0.0
    with single_thread_blas():
        for it in range(warmup + iters):
            if it == warmup:
                t0 = time.perf_counter()
            _, grads, _, _ = batch_loss_and_grads(
                config, kernels, images, labels, config.loss, threads=threads)
            opt.step(kernels, grads, lr=1e-3)
    return BenchResult(batch, threads, iters, time.perf_counter() - t0)


def sweep(config: ModelConfig, batches=DEFAULT_BATCHES, iters: int = 5,
          threads=(1,), seed: int = 0) -> list[BenchResult]:
    results = []
    for t in threads:
        for b in batches:
            results.append(time_iterations(config, b, iters=iters,
                                           threads=t, seed=seed))
    return results


def linearity_deviation(results) -> float:
    """Max relative deviation from a through-origin linear time-vs-batch fit."""
    pts = [(r.batch, r.per_100) for r in results]
    if len(pts) < 2:
        raise ValueError("need at least two batch sizes")
    xs = np.array([p[0] for p in pts], dtype=np.float64)
    ys = np.array([p[1] for p in pts], dtype=np.float64)
    c = float((xs * ys).sum() / (xs * xs).sum())
    return float(np.max(np.abs(ys - c * xs) / (c * xs)))


def endpoint_ratio_deviation(results) -> float:
    """|time ratio / batch ratio - 1| between the smallest and largest batch."""
    lo = min(results, key=lambda r: r.batch)
    hi = max(results, key=lambda r: r.batch)
    if lo.batch == hi.batch:
        raise ValueError("need at least two batch sizes")
    return abs((hi.per_100 / lo.per_100) / (hi.batch / lo.batch) - 1.0)


def thread_speedup(single: BenchResult, multi: BenchResult) -> float:
    if single.batch != multi.batch:
        raise ValueError("speedup compares equal batch sizes")
    return single.per_100 / multi.per_100
