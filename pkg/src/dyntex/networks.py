"""The two feature streams: appearance (VGG19-style prefix) and dynamics
(spatiotemporal energy stack over an image pyramid).

Networks are declarative lists of :class:`LayerSpec` evaluated by
:class:`SequentialNet`, which runs a cached forward pass and a
vector-Jacobian backward pass from any subset of tapped activations down
to the input pixels. Weights are drawn once from a seeded generator (or
loaded from a weight file) and never change afterwards.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ShapeMismatchError, WeightFileError
from .ops import ConvSpec

APPEARANCE_TAPS = ("conv1", "pool1", "pool2", "pool3", "pool4")
DYNAMICS_TAP = "dynamics"

# Minimum spatial extent of a pyramid scale: the first dynamics conv has
# an 11x11 receptive field.
MIN_DYNAMICS_EXTENT = 11
MIN_APPEARANCE_EXTENT = 16

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``kind`` is one of conv, relu, maxpool, square, divnorm, tap. ``name``
    is the parameter base name for conv layers and the label for taps.
    """

    kind: str
    name: str = ""
    conv: ConvSpec | None = None
    window: int = 0
    stride: int = 1


@dataclass
class WeightStore:
    """Named parameter tensors plus where they came from."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = "seeded-random"

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def checksum(self):
        """Stable digest of every tensor; used to assert frozen parameters."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            h.update(name.encode("utf-8"))
            h.update(repr(arr.shape).encode("ascii"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class _Cache:
    """Per-layer saved state from a forward pass, for the backward walk."""

    __slots__ = ("input_shape", "items")

    def __init__(self, input_shape, items):
        self.input_shape = input_shape
        self.items = items


class SequentialNet:
    """Evaluates a layer list against a frozen WeightStore."""

    def __init__(self, layers, weights):
        labels = [l.name for l in layers if l.kind == "tap"]
        if len(labels) != len(set(labels)):
            raise ConfigError("tap labels must be unique within a network")
        for layer in layers:
            if layer.kind != "conv":
                continue
            for suffix in ("weight", "bias"):
                key = f"{layer.name}.{suffix}"
                if key not in weights:
                    raise WeightFileError(
                        f"layer {layer.name}: missing parameter entry {key!r}")
            expected = layer.conv.weight_shape
            if weights[f"{layer.name}.weight"].shape != expected:
                raise WeightFileError(
                    f"layer {layer.name}: weight shape "
                    f"{weights[f'{layer.name}.weight'].shape} does not match "
                    f"topology shape {expected}")
            if weights[f"{layer.name}.bias"].shape != (layer.conv.out_channels,):
                raise WeightFileError(
                    f"layer {layer.name}: bias shape "
                    f"{weights[f'{layer.name}.bias'].shape} does not match "
                    f"({layer.conv.out_channels},)")
        self.layers = list(layers)
        self.weights = weights

    @property
    def tap_labels(self):
        return tuple(l.name for l in self.layers if l.kind == "tap")

    def tap_strides(self):
        """Cumulative input stride at each tap."""
        stride = 1
        out = {}
        for layer in self.layers:
            if layer.kind == "conv":
                stride *= layer.conv.stride
            elif layer.kind == "maxpool":
                stride *= layer.stride
            elif layer.kind == "tap":
                out[layer.name] = stride
        return out

    def forward(self, x, with_cache=False):
        """Run the stack on ``x`` (T, H, W, C); returns {label: activation}."""
        cur = np.asarray(x, dtype=np.float64)
        input_shape = cur.shape
        taps = {}
        items = [] if with_cache else None
        for layer in self.layers:
            saved = None
            if layer.kind == "conv":
                saved = cur
                cur = ops.conv_forward(
                    cur, self.weights[f"{layer.name}.weight"],
                    self.weights[f"{layer.name}.bias"], layer.conv)
            elif layer.kind == "relu":
                saved = cur
                cur = ops.relu_forward(cur)
            elif layer.kind == "square":
                saved = cur
                cur = ops.square_forward(cur)
            elif layer.kind == "divnorm":
                saved = cur
                cur = ops.divnorm_l1_forward(cur)
            elif layer.kind == "maxpool":
                shape = cur.shape
                cur, argmax = ops.maxpool_forward(cur, layer.window, layer.stride)
                saved = (shape, argmax)
            elif layer.kind == "tap":
                taps[layer.name] = cur
            else:
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
            if with_cache:
                items.append(saved)
        if with_cache:
            return taps, _Cache(input_shape, items)
        return taps

    def backward(self, cache, tap_grads):
        """Propagate tapped gradients back to the network input."""
        g = None
        for layer, saved in zip(reversed(self.layers), reversed(cache.items)):
            if layer.kind == "tap":
                tg = tap_grads.get(layer.name)
                if tg is not None:
                    g = tg if g is None else g + tg
                continue
            if g is None:
                continue
            if layer.kind == "conv":
                g = ops.conv_backward(
                    saved, self.weights[f"{layer.name}.weight"], layer.conv, g)
            elif layer.kind == "relu":
                g = ops.relu_backward(saved, g)
            elif layer.kind == "square":
                g = ops.square_backward(saved, g)
            elif layer.kind == "divnorm":
                g = ops.divnorm_l1_backward(saved, g)
            elif layer.kind == "maxpool":
                shape, argmax = saved
                g = ops.maxpool_backward(g, argmax, shape)
        if g is None:
            return np.zeros(cache.input_shape)
        return g


def appearance_layer_specs():
    """VGG19-style prefix: four conv blocks with 2x2/2 max pools, tapped at
    the first rectified conv and after every pool."""
    blocks = ((64, 2), (128, 2), (256, 4), (512, 4))
    layers = []
    cin = 3
    for b, (width, count) in enumerate(blocks, start=1):
        for i in range(1, count + 1):
            layers.append(LayerSpec(
                "conv", name=f"conv{b}_{i}",
                conv=ConvSpec(1, 3, 3, cin, width, 1, "same")))
            layers.append(LayerSpec("relu"))
            cin = width
            if b == 1 and i == 1:
                layers.append(LayerSpec("tap", name="conv1"))
        layers.append(LayerSpec("maxpool", window=2, stride=2))
        layers.append(LayerSpec("tap", name=f"pool{b}"))
    return layers


def dynamics_layer_specs():
    """Frame-pair energy stack: 11x11 3D conv (32 filters), squaring,
    5x5/1 max pool, 1x1 conv to 64 channels, L1 divisive normalization."""
    return [
        LayerSpec("conv", name="conv1", conv=ConvSpec(2, 11, 11, 1, 32, 1, "same")),
        LayerSpec("square"),
        LayerSpec("maxpool", window=5, stride=1),
        LayerSpec("conv", name="conv2", conv=ConvSpec(1, 1, 1, 32, 64, 1, "same")),
        LayerSpec("divnorm"),
        LayerSpec("tap", name=DYNAMICS_TAP),
    ]


def _seeded_weights(layers, seed):
    # Uniform [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases zero.
    rng = np.random.default_rng(int(seed) & (2**64 - 1))
    tensors = {}
    for layer in layers:
        if layer.kind != "conv":
            continue
        spec = layer.conv
        k = spec.kt * spec.kh * spec.kw
        bound = np.sqrt(6.0 / (k * spec.in_channels + k * spec.out_channels))
        tensors[f"{layer.name}.weight"] = rng.uniform(-bound, bound, spec.weight_shape)
        tensors[f"{layer.name}.bias"] = np.zeros(spec.out_channels)
    return WeightStore(tensors, provenance="seeded-random")


def _resolve_weights(layers, seed, weights):
    if weights is None:
        return _seeded_weights(layers, seed)
    if isinstance(weights, WeightStore):
        return weights
    from .video_io import read_weight_file

    return read_weight_file(weights)


def build_appearance_net(seed=0, weights=None):
    """Appearance stream; ``weights`` may be a WeightStore or a weight-file
    path and overrides the seeded initialization."""
    layers = appearance_layer_specs()
    return SequentialNet(layers, _resolve_weights(layers, seed, weights))


def build_dynamics_net(seed=1, weights=None):
    """Dynamics stream (single-scale stack; the pyramid lives in
    extract_dynamics)."""
    layers = dynamics_layer_specs()
    return SequentialNet(layers, _resolve_weights(layers, seed, weights))


@dataclass
class TwoStreamNets:
    appearance: SequentialNet
    dynamics: SequentialNet

    def checksum(self):
        return (self.appearance.weights.checksum(),
                self.dynamics.weights.checksum())


@dataclass
class AppearanceTaps:
    """Tapped appearance activations, each (frames, H_l, W_l, C_l)."""

    maps: dict[str, np.ndarray]
    strides: dict[str, int]


@dataclass
class DynamicsFeatures:
    """Per-scale dynamics activations for one frame pair, each (h, w, 64)."""

    maps: list

    @property
    def scale_count(self):
        return len(self.maps)

    @property
    def position_count(self):
        return sum(m.shape[0] * m.shape[1] for m in self.maps)


def _check_frames(frames, what):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeMismatchError(
            f"{what} must be (frames, height, width, 3)",
            dimension="shape", expected="(F, H, W, 3)", actual=frames.shape)
    return frames


def extract_appearance(frames, net, with_cache=False):
    """Run the appearance stream over one frame or a stack of frames.

    Returns all five taps with their cumulative strides. Raises if the
    spatial extents are below 16 (the deepest pool tap would be empty).
    """
    frames = _check_frames(frames, "appearance input")
    h, w = frames.shape[1], frames.shape[2]
    if min(h, w) < MIN_APPEARANCE_EXTENT:
        raise ShapeMismatchError(
            "appearance stream needs spatial extents >= 16 so the deepest "
            "pooling tap is nonempty", dimension="spatial",
            expected=f">= {MIN_APPEARANCE_EXTENT}", actual=(h, w))
    strides = net.tap_strides()
    if with_cache:
        taps, cache = net.forward(frames, with_cache=True)
        return AppearanceTaps(taps, strides), cache
    return AppearanceTaps(net.forward(frames), strides)


def appearance_backward(net, cache, tap_grads):
    """Gradients of a functional of the taps with respect to the frames."""
    return net.backward(cache, tap_grads)


def rgb_to_luma(frame):
    """(..., 3) -> (..., 1) luma with weights 0.299 / 0.587 / 0.114."""
    return (frame @ LUMA_WEIGHTS)[..., None]


def luma_backward(upstream):
    return upstream * LUMA_WEIGHTS


def pyramid_extents(height, width, scales):
    extents = []
    h, w = height, width
    for _ in range(scales):
        extents.append((h, w))
        h //= 2
        w //= 2
    return extents


def build_pyramid(x, scales):
    """Average-pool pyramid with factor 2; level 0 is ``x`` itself."""
    levels = [x]
    for _ in range(scales - 1):
        levels.append(ops.downsample2x(levels[-1]))
    return levels


def check_pyramid_scales(height, width, scales):
    if scales < 1:
        raise ShapeMismatchError(
            "at least one pyramid scale is required", dimension="scales",
            expected=">= 1", actual=scales)
    coarse_h, coarse_w = pyramid_extents(height, width, scales)[-1]
    if min(coarse_h, coarse_w) < MIN_DYNAMICS_EXTENT:
        raise ShapeMismatchError(
            f"{scales} pyramid scales leave the coarsest level "
            f"{coarse_h}x{coarse_w}, below the {MIN_DYNAMICS_EXTENT}x"
            f"{MIN_DYNAMICS_EXTENT} needed by the first dynamics conv",
            dimension="scales", expected=f">= {MIN_DYNAMICS_EXTENT}",
            actual=(coarse_h, coarse_w))


def extract_dynamics(frame_a, frame_b, net, scales=3, with_cache=False):
    """Dynamics features of one frame pair across pyramid scales.

    Both frames are converted to luma, pyramids are built per frame, and
    each scale is pushed through the stack independently. Results stay per
    scale (no cross-scale resampling).
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(
            "frame pair shapes differ", dimension="shape",
            expected=a.shape, actual=b.shape)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ShapeMismatchError(
            "dynamics input frames must be (height, width, 3)",
            dimension="shape", expected="(H, W, 3)", actual=a.shape)
    check_pyramid_scales(a.shape[0], a.shape[1], scales)
    pyr_a = build_pyramid(rgb_to_luma(a), scales)
    pyr_b = build_pyramid(rgb_to_luma(b), scales)
    maps = []
    caches = []
    for la, lb in zip(pyr_a, pyr_b):
        x = np.stack([la, lb])
        if with_cache:
            taps, cache = net.forward(x, with_cache=True)
            caches.append(cache)
        else:
            taps = net.forward(x)
        maps.append(taps[DYNAMICS_TAP][0])
    features = DynamicsFeatures(maps)
    if with_cache:
        return features, _DynamicsCache(pyr_a, pyr_b, caches)
    return features


class _DynamicsCache:
    __slots__ = ("pyr_a", "pyr_b", "net_caches")

    def __init__(self, pyr_a, pyr_b, net_caches):
        self.pyr_a = pyr_a
        self.pyr_b = pyr_b
        self.net_caches = net_caches


def _collapse_pyramid_grads(pyramid, grads):
    # Fold per-scale gradients back to full resolution, coarsest first.
    acc = grads[-1]
    for s in range(len(grads) - 2, -1, -1):
        acc = grads[s] + ops.downsample2x_backward(acc, pyramid[s].shape)
    return acc


def dynamics_backward(net, cache, scale_grads):
    """Gradients with respect to both RGB frames of the extracted pair.

    ``scale_grads`` is one array per scale, shaped like the corresponding
    feature map. Returns (grad_a, grad_b).
    """
    grads_a = []
    grads_b = []
    for net_cache, g in zip(cache.net_caches, scale_grads):
        gx = net.backward(net_cache, {DYNAMICS_TAP: g[None]})
        grads_a.append(gx[0])
        grads_b.append(gx[1])
    luma_a = _collapse_pyramid_grads(cache.pyr_a, grads_a)
    luma_b = _collapse_pyramid_grads(cache.pyr_b, grads_b)
    return luma_backward(luma_a), luma_backward(luma_b)
