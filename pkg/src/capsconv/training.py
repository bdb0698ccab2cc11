"""Deterministic minibatch training: schedules, optimizers, loop, evaluation.

Every random choice in a run is a pure function of (seed, role, index): the
epoch permutation, the per-iteration augmentation, the whitening sample, and
the weight init each get their own derived stream. Combined with pinned BLAS
threads and fixed-order gradient merges, two runs with the same seed and
thread count produce bitwise-identical checkpoints and metric files, and a
resumed run is indistinguishable from an uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .activations import (
    MarginLossConfig,
    class_scores,
    margin_loss,
    margin_loss_backward,
    predict,
)
from .conv import map_batch_chunks, single_thread_blas
from .data import (
    center_crop,
    fit_zca,
    gcn,
    load_cifar10,
    load_mnist,
    random_crop,
    random_shift,
    to_unit,
)
from .model import (
    ConfigError,
    ModelConfig,
    config_hash,
    forward_features,
    format_config_text,
    images_to_feature_map,
    init_kernels,
    load_checkpoint,
    model_backward,
    save_checkpoint,
)


class NumericError(ArithmeticError):
    """Loss or weights left the representable range mid-run."""


# ---------------------------------------------------------------------------
# deterministic randomness

def derive_seed(seed: int, role: str, index: int = 0) -> int:
    """Stable 63-bit child seed for one named random role of a run."""
    digest = hashlib.sha256(f"{seed}/{role}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def child_rng(seed: int, role: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, role, index))


def batch_indices(n: int, batch: int, seed: int, iteration: int) -> np.ndarray:
    """Row indices of one minibatch, purely from (seed, iteration).

    Epochs are seeded shuffles of the whole set; the tail shorter than a full
    batch is dropped so every iteration maps to one fixed slice.
    """
    per_epoch = n // batch
    if per_epoch < 1:
        raise ConfigError(f"batch {batch} exceeds dataset size {n}")
    epoch, pos = divmod(iteration, per_epoch)
    perm = child_rng(seed, "perm", epoch).permutation(n)
    return perm[pos * batch:(pos + 1) * batch]


def lr_at(base: float, factor: float, every: int, iteration: int) -> float:
    """Stepwise schedule: base * factor^(iteration // every)."""
    return base * factor ** (iteration // every)


# ---------------------------------------------------------------------------
# optimizers

class Adam:
    """Adam with bias correction; denominator sqrt(v_hat) + eps."""

    name = "adam"

    def __init__(self, kernels, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(k) for k in kernels]
        self.v = [np.zeros_like(k) for k in kernels]

    def step(self, kernels, grads, lr: float):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for k, g, m, v in zip(kernels, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            k -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"name": self.name, "step": self.step_count,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": self.m, "v": self.v}

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls([], beta1=state["beta1"], beta2=state["beta2"],
                  eps=state["eps"])
        opt.step_count = int(state["step"])
        opt.m = list(state["m"])
        opt.v = list(state["v"])
        return opt


class MomentumSGD:
    """Classical momentum: velocity = mu * velocity + grad."""

    name = "sgd"

    def __init__(self, kernels, momentum=0.9):
        self.momentum = momentum
        self.step_count = 0
        self.vel = [np.zeros_like(k) for k in kernels]

    def step(self, kernels, grads, lr: float):
        self.step_count += 1
        for k, g, v in zip(kernels, grads, self.vel):
            v *= self.momentum
            v += g
            k -= lr * v

    def state(self) -> dict:
        return {"name": self.name, "step": self.step_count,
                "momentum": self.momentum, "vel": self.vel}

    @classmethod
    def from_state(cls, state: dict) -> "MomentumSGD":
        opt = cls([], momentum=state["momentum"])
        opt.step_count = int(state["step"])
        opt.vel = list(state["vel"])
        return opt


def make_optimizer(name: str, kernels, momentum: float = 0.9):
    if name == "adam":
        return Adam(kernels)
    if name == "sgd":
        return MomentumSGD(kernels, momentum=momentum)
    raise ConfigError(f"unknown optimizer {name!r}; have adam, sgd")


def optimizer_from_state(state: dict):
    if state["name"] == "adam":
        return Adam.from_state(state)
    if state["name"] == "sgd":
        return MomentumSGD.from_state(state)
    raise ConfigError(f"checkpoint has unknown optimizer {state['name']!r}")


# ---------------------------------------------------------------------------
# run configuration and data pipelines

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 128
    base_lr: float = 0.002
    lr_decay: float = 0.5
    decay_every: int = 4000
    optimizer: str = "adam"
    momentum: float = 0.9
    # None: use the margin bounds the model config carries
    loss: MarginLossConfig | None = None
    seed: int = 0
    threads: int = 1
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_batch: int = 256

    @classmethod
    def mnist(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def cifar(cls, **overrides) -> "TrainConfig":
        base = cls(iterations=50000, batch_size=256, base_lr=0.001,
                   decay_every=10000)
        return replace(base, **overrides)


@dataclass
class Pipeline:
    """Preprocessed arrays plus the per-batch augmentation policy."""

    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    augment: str = "none"          # none | shift | crop
    max_shift: int = 2
    crop_size: int | None = None   # eval uses the center window

    def __post_init__(self):
        if self.augment not in ("none", "shift", "crop"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")

    @property
    def train_size(self) -> int:
        return int(self.train_labels.shape[0])

    def train_batch(self, idx: np.ndarray, rng: np.random.Generator):
        imgs = self.train_images[idx]
        if self.augment == "shift":
            return random_shift(imgs, rng, self.max_shift)
        if self.augment == "crop":
            return random_crop(imgs, self.crop_size, rng)
        return imgs

    def eval_set(self):
        imgs = self.test_images
        if self.crop_size is not None:
            imgs = center_crop(imgs, self.crop_size)
        return imgs, self.test_labels


def mnist_pipeline(data_dir: str) -> Pipeline:
    """Unit-scaled pixels; training batches get random +-2 pixel shifts."""
    train_i, train_l = load_mnist(data_dir, "train")
    test_i, test_l = load_mnist(data_dir, "test")
    return Pipeline("mnist", to_unit(train_i), train_l.astype(np.int64),
                    to_unit(test_i), test_l.astype(np.int64), augment="shift")


def cifar_pipeline(data_dir: str, seed: int) -> Pipeline:
    """Contrast-normalize, whiten on a seeded 10000-image sample, crop to 24.

    The whitening sample depends only on the run seed, so rebuilding the
    pipeline with a checkpoint's stored seed reproduces the exact transform.
    """
    train_i, train_l = load_cifar10(data_dir, "train")
    test_i, test_l = load_cifar10(data_dir, "test")
    train_g = gcn(train_i)
    test_g = gcn(test_i)
    whitener = fit_zca(train_g, sample=10000, rng=child_rng(seed, "zca"))
    train = whitener.apply(train_g).astype(np.float32)
    test = whitener.apply(test_g).astype(np.float32)
    return Pipeline("cifar10", train, train_l.astype(np.int64),
                    test, test_l.astype(np.int64), augment="crop",
                    crop_size=24)


def build_pipeline(dataset: str, data_dir: str, seed: int) -> Pipeline:
    if dataset == "mnist":
        return mnist_pipeline(data_dir)
    if dataset == "cifar10":
        return cifar_pipeline(data_dir, seed)
    raise ConfigError(f"unknown dataset {dataset!r}; have mnist, cifar10")


# ---------------------------------------------------------------------------
# loss/gradient evaluation, thread-parallel over the batch axis

CHUNK_ROWS = 64  # packed conv intermediates stay cache-sized up to here


def batch_loss_and_grads(config: ModelConfig, kernels, images, labels,
                         loss_cfg: MarginLossConfig, threads: int = 1,
                         need_input_grad: bool = False):
    """Mean margin loss, kernel gradients, correct count, optional input grad.

    The batch is split into contiguous chunks, each running the whole
    forward/backward; per-chunk gradients are pre-scaled by chunk/batch so
    their fixed-order sum equals the full-batch gradient. Chunk rows are
    capped even single-threaded: the packed conv intermediates for a huge
    batch fall out of cache and cost measurably more than chunked passes.
    """
    total = images.shape[0]

    def work(sl):
        imgs, labs = images[sl], labels[sl]
        x = images_to_feature_map(imgs)
        out, cache = forward_features(config, kernels, x, keep=True)
        scores = class_scores(out)
        chunk = imgs.shape[0]
        loss_sum = margin_loss(scores, labs, loss_cfg) * chunk
        dscores = margin_loss_backward(scores, labs, loss_cfg) * (chunk / total)
        kgrads, dx = model_backward(config, kernels, cache, dscores,
                                    need_input_grad=need_input_grad)
        correct = int((predict(scores) == labs).sum())
        return loss_sum, kgrads, correct, dx

    results = map_batch_chunks(work, total, threads, cap=CHUNK_ROWS)
    loss = sum(r[0] for r in results) / total
    grads = [g.copy() for g in results[0][1]]
    for r in results[1:]:
        for acc, g in zip(grads, r[1]):
            acc += g
    correct = sum(r[2] for r in results)
    input_grad = None
    if need_input_grad:
        input_grad = np.concatenate([r[3] for r in results], axis=0)
    return float(loss), grads, correct, input_grad


@dataclass
class EvalResult:
    loss: float
    accuracy: float

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy


def evaluate(config: ModelConfig, kernels, images, labels,
             loss_cfg: MarginLossConfig = MarginLossConfig(),
             threads: int = 1, batch: int = 256) -> EvalResult:
    """Forward-only pass over a whole split in fixed-size slices."""
    n = images.shape[0]
    slices = [slice(s, min(s + batch, n)) for s in range(0, n, batch)]

    def work(sl):
        x = images_to_feature_map(images[sl])
        out, _ = forward_features(config, kernels, x)
        scores = class_scores(out)
        return (margin_loss(scores, labels[sl], loss_cfg) * (sl.stop - sl.start),
                int((predict(scores) == labels[sl]).sum()))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, slices))
    else:
        results = [work(sl) for sl in slices]
    loss = sum(r[0] for r in results) / n
    correct = sum(r[1] for r in results)
    return EvalResult(loss=float(loss), accuracy=correct / n)


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainResult:
    iteration: int
    kernels: list
    final_eval: EvalResult
    out_dir: str
    metrics_path: str
    checkpoint_path: str


def _metric_row(writer, iteration, split, loss, accuracy, lr):
    writer.writerow([iteration, split, repr(float(loss)),
                     repr(float(accuracy)), repr(float(lr))])


def source_hash() -> str:
    """Content hash over this package's source files, for run manifests."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            h.update(name.encode())
            with open(os.path.join(pkg_dir, name), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def train(config: ModelConfig, tcfg: TrainConfig, pipeline: Pipeline,
          out_dir: str, resume_from: str | None = None,
          log=None, command: str | None = None) -> TrainResult:
    """Run (or resume) one training job; artifacts land under out_dir.

    Writes metrics.csv (deterministic), timings.csv (wall clock, best effort),
    run.json, periodic ck_NNNNNNN.bin checkpoints, and final.bin.
    """
    os.makedirs(out_dir, exist_ok=True)
    seed = tcfg.seed
    loss_cfg = tcfg.loss if tcfg.loss is not None else config.loss

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if config_hash(ck.config) != config_hash(config):
            raise ConfigError("checkpoint was written for a different model")
        if ck.seed != seed:
            raise ConfigError(
                f"checkpoint seed {ck.seed} != run seed {seed}; the data "
                f"schedule would diverge")
        kernels = [k.copy() for k in ck.kernels]
        optimizer = (optimizer_from_state(ck.opt_state) if ck.opt_state
                     else make_optimizer(tcfg.optimizer, kernels, tcfg.momentum))
        start = ck.iteration
    else:
        kernels = init_kernels(config, derive_seed(seed, "init"))
        optimizer = make_optimizer(tcfg.optimizer, kernels, tcfg.momentum)
        start = 0
    if start > tcfg.iterations:
        raise ConfigError(
            f"checkpoint is at iteration {start}, past the requested "
            f"{tcfg.iterations}")

    train_dict = {k: (v if not isinstance(v, MarginLossConfig) else vars(v))
                  for k, v in vars(tcfg).items()}
    content = format_config_text(config) + json.dumps(train_dict, sort_keys=True)
    manifest = {
        "command": command,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "code_hash": source_hash(),
        "content_hash": hashlib.sha256(content.encode()).hexdigest(),
        "model": format_config_text(config),
        "model_hash": config_hash(config),
        "dataset": pipeline.name,
        "train": train_dict,
        "loss": vars(loss_cfg),
        "train_size": pipeline.train_size,
        "test_size": int(pipeline.test_labels.shape[0]),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    metrics_path = os.path.join(out_dir, "metrics.csv")
    timings_path = os.path.join(out_dir, "timings.csv")
    fresh = start == 0 or not os.path.exists(metrics_path)
    metrics_f = open(metrics_path, "w" if fresh else "a", newline="")
    metrics = csv.writer(metrics_f)
    timings_f = open(timings_path, "w" if fresh else "a", newline="")
    timings = csv.writer(timings_f)
    if fresh:
        metrics.writerow(["iteration", "split", "loss", "accuracy", "lr"])
        timings.writerow(["iteration", "elapsed_s"])

    eval_images, eval_labels = pipeline.eval_set()
    n = pipeline.train_size
    last_eval = EvalResult(loss=float("nan"), accuracy=float("nan"))
    ck_path = os.path.join(out_dir, "final.bin")
    t0 = time.perf_counter()

    def save(path, iteration):
        save_checkpoint(path, config, kernels, iteration, seed,
                        opt_state=optimizer.state())

    with single_thread_blas():
        for it in range(start, tcfg.iterations):
            idx = batch_indices(n, tcfg.batch_size, seed, it)
            images = pipeline.train_batch(idx, child_rng(seed, "aug", it))
            labels = pipeline.train_labels[idx]
            lr = lr_at(tcfg.base_lr, tcfg.lr_decay, tcfg.decay_every, it)
            loss, grads, correct, _ = batch_loss_and_grads(
                config, kernels, images, labels, loss_cfg,
                threads=tcfg.threads)
            if not np.isfinite(loss):
                raise NumericError(f"loss became {loss} at iteration {it}")
            optimizer.step(kernels, grads, lr)

            done = it + 1
            _metric_row(metrics, done, "train", loss,
                        correct / tcfg.batch_size, lr)
            if done % tcfg.eval_every == 0 or done == tcfg.iterations:
                last_eval = evaluate(config, kernels, eval_images, eval_labels,
                                     loss_cfg, threads=tcfg.threads,
                                     batch=tcfg.eval_batch)
                _metric_row(metrics, done, "test", last_eval.loss,
                            last_eval.accuracy, lr)
                timings.writerow([done, f"{time.perf_counter() - t0:.3f}"])
                metrics_f.flush()
                timings_f.flush()
                if log:
                    log(f"iter {done:>7}  lr {lr:.6g}  train loss {loss:.5f}  "
                        f"test acc {last_eval.accuracy:.4f}")
            if done % tcfg.checkpoint_every == 0:
                save(os.path.join(out_dir, f"ck_{done:07d}.bin"), done)
        save(ck_path, tcfg.iterations)

    metrics_f.close()
    timings_f.close()
    return TrainResult(iteration=tcfg.iterations, kernels=kernels,
                       final_eval=last_eval, out_dir=out_dir,
                       metrics_path=metrics_path, checkpoint_path=ck_path)
