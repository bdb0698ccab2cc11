"""Network configs, built-in presets, weight init, and whole-model passes.

A model is a plain list of kernels plus a ModelConfig describing how they
chain. Between layers the capsule block is reinterpreted row-major to
whatever rank-3 shape the next layer declares; spatially everything is the
sliding capsule convolution from `conv`. Each layer applies, in order:
convolution, leaky ReLU, squash. Class scores are the capsule norms of the
final 1x1 map, one channel per class.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .activations import (
    MarginLossConfig,
    class_scores,
    class_scores_backward,
    leaky_relu,
    leaky_relu_backward,
    squash,
    squash_backward,
)
from .conv import conv_backward, conv_forward, infer_output_shape
from .tensor_core import (
    CapsuleShape,
    FeatureMapShape,
    KernelShape,
    ShapeError,
    reshape_capsules,
)


class ConfigError(ValueError):
    """Bad or inconsistent model/run configuration."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the run."""


@dataclass(frozen=True)
class LayerConfig:
    """One convolution layer: channel map, expected input capsule, kernel p."""

    in_channels: int
    out_channels: int
    capsule_in: CapsuleShape
    p: int
    stride: int
    kh: int = 3
    kw: int = 3

    @property
    def kernel_shape(self) -> KernelShape:
        c = self.capsule_in
        return KernelShape(self.kh, self.kw, self.in_channels,
                           self.out_channels, c.g, c.n, self.p)

    @property
    def capsule_out(self) -> CapsuleShape:
        c = self.capsule_in
        return CapsuleShape(c.g, c.m, self.p)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    in_channels: int
    height: int
    width: int
    capsule: CapsuleShape
    layers: tuple[LayerConfig, ...] = field(default_factory=tuple)
    # margin bounds travel with the architecture so a checkpoint evaluates
    # with the loss it was trained under
    loss: MarginLossConfig = field(default_factory=MarginLossConfig)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        cap_size = self.capsule.size
        ch = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != ch:
                raise ConfigError(
                    f"layer {i}: expects {layer.in_channels} channels, "
                    f"gets {ch}")
            if layer.capsule_in.size != cap_size:
                raise ConfigError(
                    f"layer {i}: capsule {layer.capsule_in.as_tuple()} cannot "
                    f"be reinterpreted from {cap_size} elements")
            ch = layer.out_channels
            cap_size = layer.capsule_out.size

    @property
    def classes(self) -> int:
        return self.layers[-1].out_channels

    def feature_shapes(self, batch: int = 1) -> list[FeatureMapShape]:
        """Feature-map shape entering the net and leaving every layer."""
        fm = FeatureMapShape(batch, self.in_channels, self.height, self.width,
                             self.capsule)
        shapes = [fm]
        for layer in self.layers:
            fm_in = FeatureMapShape(fm.batch, fm.channels, fm.height, fm.width,
                                    layer.capsule_in)
            fm = infer_output_shape(fm_in, layer.kernel_shape, layer.stride)
            shapes.append(fm)
        return shapes

    def validate_geometry(self):
        """Walk the spatial chain; the last map must be 1x1 for class scores."""
        final = self.feature_shapes()[-1]
        if final.height != 1 or final.width != 1:
            raise ConfigError(
                f"final map is {final.height}x{final.width}, expected 1x1")
        return final


def count_parameters(config: ModelConfig):
    """Per-layer kernel element counts and their total."""
    per_layer = [layer.kernel_shape.size for layer in config.layers]
    return per_layer, int(sum(per_layer))


def msra_init(kernel_shape: KernelShape, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean normal with std sqrt(2 / fan_in), fan_in = kh*kw*Cin*g*n."""
    fan_in = (kernel_shape.kh * kernel_shape.kw * kernel_shape.in_channels
              * kernel_shape.g * kernel_shape.n)
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=kernel_shape.as_tuple())


def init_kernels(config: ModelConfig, seed: int, dtype=np.float32):
    """Fresh kernels for every layer, drawn in layer order from one stream."""
    rng = np.random.default_rng(seed)
    return [msra_init(layer.kernel_shape, rng).astype(dtype)
            for layer in config.layers]


# ---------------------------------------------------------------------------
# presets

def _mnist(name, specs):
    # specs: (in_ch, out_ch, (g, m, n), p, stride) per layer, 28x28 gray input
    layers = tuple(
        LayerConfig(ci, co, CapsuleShape(*cap), p, s) for ci, co, cap, p, s in specs)
    return ModelConfig(name, 1, 28, 28, CapsuleShape(1, 1, 1), layers)


def _presets():
    p0 = _mnist("p0", [
        (1, 1, (1, 1, 1), 32, 2),
        (1, 2, (1, 4, 8), 8, 1),
        (2, 4, (1, 4, 8), 8, 2),
        (4, 2, (1, 4, 8), 8, 1),
        (2, 10, (1, 4, 8), 8, 1),
    ])
    p1 = _mnist("p1", [
        (1, 1, (1, 1, 1), 16, 2),
        (1, 1, (1, 4, 4), 6, 1),
        (1, 1, (1, 4, 6), 4, 2),
        (1, 1, (1, 4, 4), 6, 1),
        (1, 10, (1, 4, 6), 4, 1),
    ])
    p2 = _mnist("p2", [
        (1, 1, (1, 1, 1), 16, 2),
        (1, 1, (1, 4, 4), 8, 1),
        (1, 1, (1, 4, 8), 4, 2),
        (1, 1, (1, 4, 4), 8, 1),
        (1, 10, (1, 4, 8), 4, 1),
    ])
    p3 = _mnist("p3", [
        (1, 1, (1, 1, 1), 32, 2),
        (1, 4, (1, 4, 8), 16, 1),
        (4, 8, (1, 4, 16), 8, 2),
        (8, 4, (1, 4, 8), 16, 1),
        (4, 10, (1, 4, 16), 16, 1),
    ])
    p4 = ModelConfig("p4", 1, 24, 24, CapsuleShape(1, 1, 3), (
        LayerConfig(1, 1, CapsuleShape(1, 1, 3), 32, 2),
        LayerConfig(1, 4, CapsuleShape(1, 4, 8), 16, 1),
        LayerConfig(4, 8, CapsuleShape(1, 4, 16), 8, 1),
        LayerConfig(8, 10, CapsuleShape(1, 4, 8), 16, 2),
        LayerConfig(10, 10, CapsuleShape(1, 4, 16), 16, 1),
    ), loss=MarginLossConfig.cifar())
    toy = ModelConfig("toy", 1, 7, 7, CapsuleShape(1, 1, 1), (
        LayerConfig(1, 2, CapsuleShape(1, 1, 1), 4, 2),
        LayerConfig(2, 3, CapsuleShape(1, 2, 2), 2, 1),
    ))
    return {c.name: c for c in (p0, p1, p2, p3, p4, toy)}


PRESETS = _presets()


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# config text format

_INPUT_RE = re.compile(
    r"^input\s*=\s*(\d+)x(\d+)x(\d+)\s*\((\d+)x(\d+)x(\d+)\)$")
_LAYER_RE = re.compile(
    r"^layer\s*=\s*(\d+)x(\d+)x(\d+)x(\d+)\s*\((\d+)x(\d+)x(\d+)->(\d+)\)"
    r"\s*stride\s*(\d+)$")
_NAME_RE = re.compile(r"^name\s*=\s*(\S+)$")
_FLOAT = r"[0-9.eE+-]+"
_LOSS_RE = re.compile(
    rf"^loss\s*=\s*({_FLOAT})\s+({_FLOAT})\s+({_FLOAT})$")


def format_config_text(config: ModelConfig) -> str:
    """Canonical text form: input line, margin line, one line per layer."""
    c = config.capsule
    lines = [
        f"name = {config.name}",
        f"input = {config.in_channels}x{config.height}x{config.width} "
        f"({c.g}x{c.m}x{c.n})",
        f"loss = {config.loss.m_pos!r} {config.loss.m_neg!r} "
        f"{config.loss.lam!r}",
    ]
    for layer in config.layers:
        cap = layer.capsule_in
        lines.append(
            f"layer = {layer.kh}x{layer.kw}x{layer.in_channels}x"
            f"{layer.out_channels} ({cap.g}x{cap.m}x{cap.n}->{layer.p}) "
            f"stride {layer.stride}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> ModelConfig:
    name = "custom"
    inp = None
    loss = MarginLossConfig()
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if m := _NAME_RE.match(line):
            name = m.group(1)
        elif m := _INPUT_RE.match(line):
            ch, h, w, g, cm, cn = map(int, m.groups())
            inp = (ch, h, w, CapsuleShape(g, cm, cn))
        elif m := _LOSS_RE.match(line):
            try:
                loss = MarginLossConfig(*(float(v) for v in m.groups()))
            except ValueError as e:
                raise ConfigError(f"line {lineno}: {e}") from None
        elif m := _LAYER_RE.match(line):
            kh, kw, ci, co, g, cm, cn, p, s = map(int, m.groups())
            layers.append(LayerConfig(ci, co, CapsuleShape(g, cm, cn), p, s,
                                      kh=kh, kw=kw))
        else:
            raise ConfigError(f"line {lineno}: cannot parse {raw!r}")
    if inp is None:
        raise ConfigError("missing 'input = CxHxW (gxmxn)' line")
    if not layers:
        raise ConfigError("no layer lines")
    try:
        return ModelConfig(name, inp[0], inp[1], inp[2], inp[3], tuple(layers),
                           loss=loss)
    except (ConfigError, ShapeError) as e:
        raise ConfigError(str(e)) from None


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(format_config_text(config).encode()).hexdigest()


# ---------------------------------------------------------------------------
# whole-model passes

def images_to_feature_map(images: np.ndarray) -> np.ndarray:
    """Lift (B, H, W) gray or (B, H, W, 3) color images to 7-axis maps.

    Gray pixels become scalar capsules (1, 1, 1); the color axis becomes the
    trailing capsule axis (1, 1, 3). One spatial channel either way.
    """
    if images.ndim == 3:
        return images[:, None, :, :, None, None, None]
    if images.ndim == 4 and images.shape[-1] == 3:
        return images[:, None, :, :, None, None, :]
    raise ShapeError(f"expected (B, H, W) or (B, H, W, 3), got {images.shape}")


@dataclass
class LayerCache:
    x_in: np.ndarray   # layer input, capsule already reinterpreted
    pre: np.ndarray    # convolution output
    act: np.ndarray    # after leaky ReLU, before squash


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    output: np.ndarray  # final feature map (B, K, 1, 1, g, m, p)


def forward_features(config: ModelConfig, kernels, x: np.ndarray,
                     nonlinear: bool = True,
                     keep: bool = False) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the layer stack on a 7-axis input map; optionally keep per-layer state."""
    if len(kernels) != len(config.layers):
        raise ConfigError(
            f"{len(kernels)} kernels for {len(config.layers)} layers")
    caches = [] if keep else None
    for layer, kernel in zip(config.layers, kernels):
        x = reshape_capsules(x, layer.capsule_in)
        pre = conv_forward(x, kernel, layer.stride)
        if nonlinear:
            act = leaky_relu(pre)
            out = squash(act)
        else:
            act = pre
            out = pre
        if keep:
            caches.append(LayerCache(x_in=x, pre=pre, act=act))
        x = out
    cache = ForwardCache(layers=caches, output=x) if keep else None
    return x, cache


def model_scores(config: ModelConfig, kernels, images: np.ndarray) -> np.ndarray:
    """images -> (B, K) class scores."""
    x = images_to_feature_map(images)
    out, _ = forward_features(config, kernels, x)
    return class_scores(out)


def model_backward(config: ModelConfig, kernels, cache: ForwardCache,
                   grad_scores: np.ndarray, nonlinear: bool = True,
                   need_input_grad: bool = False):
    """Backpropagate (B, K) score gradients through the whole stack.

    Returns (kernel_grads, input_grad); input_grad is in the model's input
    capsule layout, or None unless requested.
    """
    g = class_scores_backward(cache.output, grad_scores)
    kernel_grads: list = [None] * len(config.layers)
    for i in range(len(config.layers) - 1, -1, -1):
        layer = config.layers[i]
        lc = cache.layers[i]
        if nonlinear:
            g = squash_backward(lc.act, g)
            g = leaky_relu_backward(lc.pre, g)
        need = need_input_grad or i > 0
        grads = conv_backward(lc.x_in, kernels[i], layer.stride, g,
                              need_input=need)
        kernel_grads[i] = grads.wrt_kernel
        g = grads.wrt_input
        if g is not None:
            prev_cap = (config.layers[i - 1].capsule_out if i > 0
                        else config.capsule)
            g = reshape_capsules(g, prev_cap)
    return kernel_grads, (g if need_input_grad else None)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CCKP0001"


def _dtype_tag(dtype) -> str:
    return np.dtype(dtype).str  # e.g. '<f4'


def save_checkpoint(path, config: ModelConfig, kernels, iteration: int,
                    seed: int, opt_state: dict | None = None):
    """Write config text, kernels, and optimizer slots to one binary file.

    Layout: 8-byte magic, u32 little-endian header length, JSON header, then
    the raw bytes of every listed array in order. All scalars that influence
    the run are in the header, so two identical runs write identical files.
    """
    arrays = [(f"kernel/{i}", np.ascontiguousarray(k)) for i, k in enumerate(kernels)]
    opt_meta = None
    if opt_state is not None:
        opt_meta = {k: v for k, v in opt_state.items() if not isinstance(v, list)}
        for key, val in sorted(opt_state.items()):
            if isinstance(val, list):
                arrays.extend((f"opt/{key}/{i}", np.ascontiguousarray(a))
                              for i, a in enumerate(val))
    header = {
        "config_text": format_config_text(config),
        "config_hash": config_hash(config),
        "iteration": int(iteration),
        "seed": int(seed),
        "opt": opt_meta,
        "arrays": [{"name": name, "shape": list(a.shape),
                    "dtype": _dtype_tag(a.dtype)} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


@dataclass
class Checkpoint:
    config: ModelConfig
    kernels: list
    iteration: int
    seed: int
    opt_state: dict | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header: {e}") from None
        config = parse_config_text(header["config_text"])
        if config_hash(config) != header["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch")
        named = {}
        for meta in header["arrays"]:
            dt = np.dtype(meta["dtype"])
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            buf = f.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated at {meta['name']}")
            named[meta["name"]] = np.frombuffer(buf, dtype=dt).reshape(
                meta["shape"]).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    kernels = []
    for i in range(len(config.layers)):
        key = f"kernel/{i}"
        if key not in named:
            raise CheckpointError(f"{path}: missing {key}")
        kernels.append(named[key])
    opt_state = None
    if header.get("opt") is not None:
        opt_state = dict(header["opt"])
        slots: dict[str, list] = {}
        for name, arr in named.items():
            parts = name.split("/")
            if parts[0] == "opt":
                slots.setdefault(parts[1], []).append((int(parts[2]), arr))
        for key, items in slots.items():
            opt_state[key] = [a for _, a in sorted(items)]
    return Checkpoint(config=config, kernels=kernels,
                      iteration=int(header["iteration"]),
                      seed=int(header["seed"]), opt_state=opt_state)
