"""Central-difference verification of every analytic backward pass.

Each check builds a scalar objective, computes the analytic gradient, then
probes coordinates with central differences in 64-bit. Small targets are
probed exhaustively; big layer geometries get a seeded coordinate sample
(finite differences over ~100K weights would add hours and no information).
Per-operation tolerance is 1e-6 relative error, end-to-end 1e-5, with the
comparison denominator floored at 1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .activations import (
    MarginLossConfig,
    class_scores,
    class_scores_backward,
    leaky_relu,
    leaky_relu_backward,
    margin_loss,
    margin_loss_backward,
    squash,
    squash_backward,
)
from .conv import conv_backward, conv_forward, single_thread_blas
from .model import (
    PRESETS,
    forward_features,
    images_to_feature_map,
    init_kernels,
    preset,
)
from .tensor_core import frobenius_norm
from .training import batch_loss_and_grads, derive_seed

FD_STEP = 1e-5
OP_TOL = 1e-6
E2E_TOL = 1e-5
REL_FLOOR = 1e-8


def fd_coordinate(f, x: np.ndarray, idx: int, step: float = FD_STEP) -> float:
    """Central difference of scalar f along one flat coordinate of x."""
    flat = x.ravel()
    orig = flat[idx]
    flat[idx] = orig + step
    hi = f(x)
    flat[idx] = orig - step
    lo = f(x)
    flat[idx] = orig
    return (hi - lo) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self):
        verdict = "pass" if self.ok else "FAIL"
        return (f"{verdict}  {self.name:<28} max rel err {self.max_rel_err:.3e}"
                f"  (tol {self.tolerance:g}, {self.checked} coords)")


def check_tensor_grad(name, f, x: np.ndarray, analytic: np.ndarray,
                      tolerance: float = OP_TOL, sample: int | None = None,
                      rng: np.random.Generator | None = None) -> CheckResult:
    """Probe d f/d x at every coordinate, or a seeded sample of them."""
    x = np.asarray(x, dtype=np.float64)
    flat_analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if sample is not None and x.size > sample:
        coords = np.sort(rng.choice(x.size, size=sample, replace=False))
    else:
        coords = np.arange(x.size)
    worst = 0.0
    for idx in coords:
        fd = fd_coordinate(f, x, int(idx))
        worst = max(worst, relative_error(fd, flat_analytic[idx]))
    return CheckResult(name, worst, tolerance, len(coords))


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, "gradcheck:" + name))


# ---------------------------------------------------------------------------
# single operations

def check_leaky_relu(seed=0) -> CheckResult:
    rng = _rng(seed, "leaky")
    x = rng.normal(size=(4, 5))
    x = np.where(np.abs(x) < 1e-3, 1e-3, x)  # FD is meaningless on the kink
    co = rng.normal(size=x.shape)
    analytic = leaky_relu_backward(x, co)
    return check_tensor_grad(
        "leaky_relu/input", lambda z: float((leaky_relu(z) * co).sum()),
        x, analytic)


def check_squash(seed=0) -> CheckResult:
    rng = _rng(seed, "squash")
    x = rng.normal(size=(3, 2, 3, 2)) * 1.5
    co = rng.normal(size=x.shape)
    analytic = squash_backward(x, co)
    return check_tensor_grad(
        "squash/input", lambda z: float((squash(z) * co).sum()), x, analytic)


def check_margin_loss(seed=0) -> CheckResult:
    rng = _rng(seed, "margin")
    scores = rng.uniform(0.0, 1.0, size=(6, 10))
    labels = rng.integers(0, 10, size=6)
    cfg = MarginLossConfig()
    analytic = margin_loss_backward(scores, labels, cfg)
    return check_tensor_grad(
        "margin_loss/scores", lambda s: margin_loss(s, labels, cfg),
        scores, analytic)


def check_class_scores(seed=0) -> CheckResult:
    rng = _rng(seed, "scores")
    fmap = rng.normal(size=(2, 4, 1, 1, 1, 3, 2))
    co = rng.normal(size=(2, 4))
    analytic = class_scores_backward(fmap, co)
    return check_tensor_grad(
        "class_scores/input", lambda z: float((class_scores(z) * co).sum()),
        fmap, analytic)


# ---------------------------------------------------------------------------
# convolution layers at real preset geometries

def check_conv_layer(preset_name: str, layer_index: int, seed=0,
                     sample: int | None = 200) -> list[CheckResult]:
    """FD-check one preset layer's kernel and input gradients, batch 1.

    Draws are positive on purpose. Conv is bilinear, so each gradient
    coordinate is a plain sum of x*co or w*co terms; signed draws let that
    sum cancel to ~1e-5 on unlucky coordinates, where the relative metric
    at step 1e-5 measures FD roundoff instead of the backward pass.
    Positive draws bound every coordinate away from the dead zone, and
    sign coverage is the loop-oracle tests' job, not this one's.
    """
    config = preset(preset_name)
    layer = config.layers[layer_index]
    entering = config.feature_shapes(batch=1)[layer_index]
    x_shape = (1, entering.channels, entering.height,
               entering.width) + layer.capsule_in.as_tuple()
    rng = _rng(seed, f"{preset_name}/L{layer_index}")
    x = rng.uniform(0.5, 1.5, size=x_shape)
    kernel = rng.uniform(0.1, 0.3, size=layer.kernel_shape.as_tuple())
    co = rng.uniform(0.5, 1.5,
                     size=conv_forward(x, kernel, layer.stride).shape)

    grads = conv_backward(x, kernel, layer.stride, co)
    tag = f"{preset_name}/layer{layer_index}"

    # The probe objective is centered at the base output and summed with
    # fsum. Uncentered, the objective is ~1e6 while one step moves it ~1e-4,
    # so its own last-bit rounding divided by the 2e-5 step would eat most
    # of the 1e-6 budget. Centering leaves the gradient identical, and the
    # subtraction is exact because perturbed outputs stay within a factor
    # of two of the base.
    base = conv_forward(x, kernel, layer.stride)

    def project(out: np.ndarray) -> float:
        return math.fsum(((out - base) * co).ravel().tolist())

    return [
        check_tensor_grad(
            tag + "/kernel",
            lambda k: project(conv_forward(x, k, layer.stride)),
            kernel, grads.wrt_kernel, sample=sample, rng=rng),
        check_tensor_grad(
            tag + "/input",
            lambda z: project(conv_forward(z, kernel, layer.stride)),
            x, grads.wrt_input, sample=sample, rng=rng),
    ]


# ---------------------------------------------------------------------------
# whole network

def _clears_the_kinks(config, kernels, images, loss_cfg,
                      margin: float = 1e-4) -> bool:
    """True when no FD step can cross a nondifferentiable point.

    The stack has kinks at leaky-ReLU zero and the margin hinges, plus the
    squash origin where curvature blows up; an instance sitting within a
    step of one makes FD measure the kink, not the backward formula.
    """
    out, cache = forward_features(config, kernels,
                                  images_to_feature_map(images), keep=True)
    for lc in cache.layers:
        if np.abs(lc.pre).min() < margin:
            return False
        if frobenius_norm(lc.act).min() < 1e-2:
            return False
    scores = class_scores(out)
    hinges = np.array([loss_cfg.m_pos, loss_cfg.m_neg])
    return bool(np.abs(scores[..., None] - hinges).min() >= margin)


def check_end_to_end(seed=0, preset_name: str = "toy") -> list[CheckResult]:
    """Margin loss through the full stack vs FD on every kernel and the input."""
    config = preset(preset_name)
    loss_cfg = config.loss
    for attempt in range(16):
        rng = _rng(seed, f"e2e:{preset_name}:{attempt}")
        kernels = [k.astype(np.float64) for k in
                   init_kernels(config,
                                derive_seed(seed, f"e2e-init:{attempt}"))]
        shape = (2, config.height, config.width)
        if config.capsule.n == 3:
            shape += (3,)
        images = rng.uniform(0.0, 1.0, size=shape)
        labels = rng.integers(0, config.classes, size=2)
        if _clears_the_kinks(config, kernels, images, loss_cfg):
            break

    _, grads, _, dx = batch_loss_and_grads(config, kernels, images, labels,
                                           loss_cfg, need_input_grad=True)

    def loss_with_kernel(li):
        def f(k):
            trial = list(kernels)
            trial[li] = k
            return batch_loss_and_grads(config, trial, images, labels,
                                        loss_cfg)[0]
        return f

    results = []
    for li in range(len(kernels)):
        results.append(check_tensor_grad(
            f"{preset_name}/end_to_end/kernel{li}", loss_with_kernel(li),
            kernels[li], grads[li], tolerance=E2E_TOL))

    def loss_of_images(im):
        return batch_loss_and_grads(config, kernels, im, labels, loss_cfg)[0]

    image_grad = dx[:, 0, :, :, 0, 0, 0] if config.capsule.n == 1 \
        else dx[:, 0, :, :, 0, 0, :]
    results.append(check_tensor_grad(
        f"{preset_name}/end_to_end/input", loss_of_images,
        np.asarray(images, dtype=np.float64), image_grad,
        tolerance=E2E_TOL))
    return results


def run_all(seed: int = 0, sample: int | None = 200,
            presets=None) -> list[CheckResult]:
    """The full suite: op checks, every preset layer geometry, toy end-to-end."""
    names = list(presets) if presets else sorted(PRESETS)
    results = []
    with single_thread_blas():
        results += [check_leaky_relu(seed), check_squash(seed),
                    check_margin_loss(seed), check_class_scores(seed)]
        for name in names:
            for li in range(len(preset(name).layers)):
                results += check_conv_layer(name, li, seed=seed, sample=sample)
        if "toy" in names or not presets:
            results += check_end_to_end(seed)
    return results
