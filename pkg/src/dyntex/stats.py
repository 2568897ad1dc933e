"""Gram statistics, shifted Gram statistics, and the two-stream objective.

A plain Gram matrix averages channel products over all spatial positions,
so it is blind to spatial arrangement. The shifted variant correlates each
feature map with a translated copy of the others, which is what picks up
long-range structure. The dynamics side applies the same Gram machinery
to frame-pair features, sampled at several frame intervals to capture
long-period motion.

Shift distances are given in input pixels and converted to feature cells
per layer via the layer's cumulative stride (rounded half-up); shifts that
land below one cell or beyond the map extent are skipped by contract.
"""

from dataclasses import dataclass, field

import numpy as np

from . import networks
from .errors import ConfigError, ShapeMismatchError
from .networks import APPEARANCE_TAPS, DYNAMICS_TAP

DEFAULT_SHIFT_DISTANCES = (8, 16, 32, 128)
DEFAULT_INTERVALS = (1, 2, 4)

_AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class ShiftSpec:
    """A spatial translation: axis plus distance in input pixels."""

    axis: str
    distance: int

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ConfigError(
                f"shift axis must be one of {_AXES}, got {self.axis!r}",
                key="shifts")
        if self.distance <= 0:
            raise ConfigError(
                f"shift distance must be positive, got {self.distance}",
                key="shifts")

    @property
    def key(self):
        return f"{self.axis}_{self.distance}"


@dataclass
class GramMatrix:
    """Channel-by-channel second-order statistic.

    ``count`` is the number of positions averaged over; ``shift`` is None
    for the plain statistic.
    """

    values: np.ndarray
    count: int
    shift: ShiftSpec | None = None


def shifts_for_distances(distances):
    """Instantiate both orientations for every distance."""
    return tuple(ShiftSpec(axis, int(d)) for d in distances for axis in _AXES)


def _uniform(labels):
    return {label: 1.0 / len(labels) for label in labels}


@dataclass(frozen=True)
class LossConfig:
    """Weights and switches for the full objective.

    An empty shift tuple and intervals (1,) reproduce the baseline
    two-stream objective. ``stream_balance`` multiplies the whole dynamics
    term.
    """

    layer_weights: dict = field(default_factory=lambda: _uniform(APPEARANCE_TAPS))
    shifts: tuple = field(
        default_factory=lambda: shifts_for_distances(DEFAULT_SHIFT_DISTANCES))
    intervals: tuple = DEFAULT_INTERVALS
    interval_weights: tuple | None = None
    dynamics_weights: dict = field(default_factory=lambda: {DYNAMICS_TAP: 1.0})
    stream_balance: float = 1.0
    pyramid_scales: int = 3

    def __post_init__(self):
        if not self.layer_weights:
            raise ConfigError("at least one appearance layer must be enabled",
                              key="loss.layer_weights")
        for label, w in self.layer_weights.items():
            if w < 0:
                raise ConfigError(f"layer weight for {label!r} is negative",
                                  key="loss.layer_weights")
        if not self.intervals:
            raise ConfigError("at least one frame interval must be enabled",
                              key="loss.intervals")
        for t in self.intervals:
            if int(t) != t or t < 1:
                raise ConfigError(f"intervals must be positive integers, got {t}",
                                  key="loss.intervals")
        if len(set(self.intervals)) != len(self.intervals):
            raise ConfigError("intervals must be distinct", key="loss.intervals")
        weights = self.interval_weights
        if weights is None:
            weights = tuple(1.0 / len(self.intervals) for _ in self.intervals)
            object.__setattr__(self, "interval_weights", weights)
        if len(weights) != len(self.intervals):
            raise ConfigError(
                "interval_weights must align with intervals",
                key="loss.interval_weights")
        if any(w < 0 for w in weights):
            raise ConfigError("interval weights must be >= 0",
                              key="loss.interval_weights")
        for label, w in self.dynamics_weights.items():
            if w < 0:
                raise ConfigError(f"dynamics weight for {label!r} is negative",
                                  key="loss.dynamics_weights")
        if self.stream_balance < 0:
            raise ConfigError("stream balance must be >= 0", key="loss.lambda")
        if self.pyramid_scales < 1:
            raise ConfigError("pyramid_scales must be >= 1",
                              key="loss.pyramid_scales")

    def interval_weight(self, t):
        return self.interval_weights[self.intervals.index(t)]

    @property
    def max_interval(self):
        return max(self.intervals)


def baseline_config(**overrides):
    """The objective without shifted terms and with consecutive pairs only."""
    defaults = dict(shifts=(), intervals=(1,), interval_weights=(1.0,))
    defaults.update(overrides)
    return LossConfig(**defaults)


# ---------------------------------------------------------------------------
# Gram statistics


def gram(features):
    """Average channel-product statistic over all positions.

    ``features`` is (..., C); leading axes are flattened into positions.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim < 2:
        raise ShapeMismatchError(
            "gram needs at least (positions, channels)", dimension="ndim",
            expected=">= 2", actual=f.ndim)
    flat = f.reshape(-1, f.shape[-1])
    m = flat.shape[0]
    if m < 1:
        raise ShapeMismatchError("gram needs at least one position",
                                 dimension="positions", expected=">= 1",
                                 actual=m)
    return GramMatrix(flat.T @ flat / m, m, None)


def gram_backward(features, upstream):
    """d(sum(upstream * gram(features).values)) / d features."""
    f = np.asarray(features, dtype=np.float64)
    flat = f.reshape(-1, f.shape[-1])
    m = flat.shape[0]
    g = flat @ (upstream + upstream.T) / m
    return g.reshape(f.shape)


def shift_cells(distance, layer_stride):
    """Convert a pixel distance to feature cells (rounded half-up)."""
    return int(np.floor(distance / layer_stride + 0.5))


def shifted_gram_cells(features, axis, cells):
    """Shifted Gram at an explicit (possibly negative) cell offset.

    Entry (i, j) averages F_i(p) * F_j(p + delta) over the overlap region.
    Returns None when the offset is zero or exceeds the map extent.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeMismatchError(
            "shifted gram needs 2-D spatial geometry (H, W, C)",
            dimension="ndim", expected=3, actual=f.ndim)
    ax = 1 if axis == "horizontal" else 0
    extent = f.shape[ax]
    d = abs(cells)
    if d < 1 or d >= extent:
        return None
    if ax == 1:
        a, b = f[:, :-d, :], f[:, d:, :]
    else:
        a, b = f[:-d, :, :], f[d:, :, :]
    if cells < 0:
        a, b = b, a
    count = a.shape[0] * a.shape[1]
    fa = a.reshape(count, -1)
    fb = b.reshape(count, -1)
    return GramMatrix(fa.T @ fb / count, count, None)


def shifted_gram(features, shift, layer_stride):
    """Shifted Gram for a pixel-distance shift at a given layer stride.

    Returns None (skipped) when the distance rounds below one cell or is
    not smaller than the map extent along the shift axis.
    """
    d = shift_cells(shift.distance, layer_stride)
    out = shifted_gram_cells(features, shift.axis, d)
    if out is None:
        return None
    out.shift = shift
    return out


def shifted_gram_backward(features, shift, layer_stride, upstream):
    """VJP of shifted_gram with respect to the feature map."""
    f = np.asarray(features, dtype=np.float64)
    d = shift_cells(shift.distance, layer_stride)
    ax = 1 if shift.axis == "horizontal" else 0
    extent = f.shape[ax]
    if d < 1 or d >= extent:
        return np.zeros(f.shape)
    if ax == 1:
        a, b = f[:, :-d, :], f[:, d:, :]
    else:
        a, b = f[:-d, :, :], f[d:, :, :]
    count = a.shape[0] * a.shape[1]
    fa = a.reshape(count, -1)
    fb = b.reshape(count, -1)
    ga = (fb @ upstream.T / count).reshape(a.shape)
    gb = (fa @ upstream / count).reshape(b.shape)
    g = np.zeros(f.shape)
    if ax == 1:
        g[:, :-d, :] += ga
        g[:, d:, :] += gb
    else:
        g[:-d, :, :] += ga
        g[d:, :, :] += gb
    return g


# ---------------------------------------------------------------------------
# Per-layer losses


def _gram_values(g):
    return g.values if isinstance(g, GramMatrix) else np.asarray(g)


def _check_gram_pair(g_target, g_synth):
    vt, vs = _gram_values(g_target), _gram_values(g_synth)
    if vt.shape != vs.shape:
        raise ShapeMismatchError(
            "gram matrices have different shapes", dimension="gram",
            expected=vt.shape, actual=vs.shape)
    if isinstance(g_target, GramMatrix) and isinstance(g_synth, GramMatrix):
        if g_target.shift != g_synth.shift:
            raise ShapeMismatchError(
                "gram matrices have different shift descriptors",
                dimension="shift", expected=g_target.shift,
                actual=g_synth.shift)
    return vt, vs


def appearance_layer_loss(g_target, g_synth, positions):
    """Mean-squared Gram mismatch for one layer: sum((G - Ghat)^2) / M."""
    vt, vs = _check_gram_pair(g_target, g_synth)
    diff = vt - vs
    return float(np.sum(diff * diff) / positions)


def dynamics_layer_loss(d_target, d_synth, positions):
    """Same statistic over dynamics Grams."""
    return appearance_layer_loss(d_target, d_synth, positions)


# ---------------------------------------------------------------------------
# Target statistics (computed once per exemplar, reused every iteration)


@dataclass
class LayerStats:
    """Target appearance statistics at one tap."""

    plain: GramMatrix
    shifted: dict            # ShiftSpec -> GramMatrix | None (skipped)
    positions: int           # cells per frame at this tap
    stride: int

    def active_shifts(self):
        return [s for s, g in self.shifted.items() if g is not None]


def appearance_layer_stats(taps, config):
    """Per-tap frame-averaged plain and shifted Grams of a tapped video."""
    out = {}
    for label in config.layer_weights:
        if label not in taps.maps:
            raise ConfigError(f"unknown appearance layer {label!r}",
                              key="loss.layer_weights")
        maps = taps.maps[label]
        frames = maps.shape[0]
        positions = maps.shape[1] * maps.shape[2]
        stride = taps.strides[label]
        plain_sum = None
        shifted_sums = {s: None for s in config.shifts}
        shifted_counts = {}
        for f in range(frames):
            g = gram(maps[f]).values
            plain_sum = g if plain_sum is None else plain_sum + g
            for shift in config.shifts:
                sg = shifted_gram(maps[f], shift, stride)
                if sg is not None:
                    prev = shifted_sums[shift]
                    shifted_sums[shift] = (sg.values if prev is None
                                           else prev + sg.values)
                    shifted_counts[shift] = sg.count
        plain = GramMatrix(plain_sum / frames, positions, None)
        shifted = {}
        for shift in config.shifts:
            if shifted_sums[shift] is None:
                shifted[shift] = None
            else:
                shifted[shift] = GramMatrix(shifted_sums[shift] / frames,
                                            shifted_counts[shift], shift)
        out[label] = LayerStats(plain, shifted, positions, stride)
    return out


def pair_anchors(frame_count, interval):
    """Start indices of interval-``t`` frame pairs.

    Frames are sampled every ``t`` positions and consecutive samples are
    paired, so a video with period t at interval t yields the same pair
    set as its decimated (static) counterpart.
    """
    if interval >= frame_count:
        raise ConfigError(
            f"interval {interval} needs at least {interval + 1} frames, "
            f"got {frame_count}", key="intervals")
    return list(range(0, frame_count - interval, interval))


def dynamics_pair_gram(features):
    """Single Gram over the union of positions across pyramid scales."""
    flats = [m.reshape(-1, m.shape[-1]) for m in features.maps]
    flat = np.concatenate(flats, axis=0)
    m = flat.shape[0]
    return GramMatrix(flat.T @ flat / m, m, None)


def dynamics_pair_gram_backward(features, upstream):
    """VJP of dynamics_pair_gram; returns one gradient array per scale."""
    m = features.position_count
    sym = upstream + upstream.T
    grads = []
    for fmap in features.maps:
        flat = fmap.reshape(-1, fmap.shape[-1])
        grads.append((flat @ sym / m).reshape(fmap.shape))
    return grads


def dynamics_interval_stats(video, nets, interval, config):
    """Pair-averaged dynamics Gram of a video at one frame interval."""
    anchors = pair_anchors(video.shape[0], interval)
    total = None
    count = None
    for i in anchors:
        feats = networks.extract_dynamics(
            video[i], video[i + interval], nets.dynamics,
            scales=config.pyramid_scales)
        g = dynamics_pair_gram(feats)
        total = g.values if total is None else total + g.values
        count = g.count
    return GramMatrix(total / len(anchors), count, None)


@dataclass
class ExemplarStats:
    """Everything the objective needs about the exemplar, computed once."""

    channel_means: np.ndarray
    appearance: dict                  # label -> LayerStats
    dynamics: dict                    # interval -> GramMatrix
    dropped_intervals: tuple
    frame_shape: tuple
    frames: int

    def gram_count(self):
        n = 0
        for stats in self.appearance.values():
            n += 1 + len(stats.active_shifts())
        n += len(self.dynamics)
        return n


def compute_exemplar_stats(exemplar, nets, config):
    """Build the target-statistics bundle for an exemplar video.

    Intervals too long for the exemplar are dropped (and recorded) rather
    than rejected; the synthesis-side frame count is validated separately.
    """
    exemplar = np.asarray(exemplar, dtype=np.float64)
    if exemplar.ndim != 4 or exemplar.shape[-1] != 3:
        raise ShapeMismatchError(
            "exemplar must be (frames, height, width, 3)", dimension="shape",
            expected="(F, H, W, 3)", actual=exemplar.shape)
    if exemplar.shape[0] < 2:
        raise ShapeMismatchError(
            "exemplar needs at least 2 frames", dimension="frames",
            expected=">= 2", actual=exemplar.shape[0])
    means = exemplar.mean(axis=(0, 1, 2))
    taps = networks.extract_appearance(exemplar - means, nets.appearance)
    appearance = appearance_layer_stats(taps, config)
    dynamics = {}
    dropped = []
    for t in config.intervals:
        if t >= exemplar.shape[0]:
            dropped.append(t)
            continue
        dynamics[t] = dynamics_interval_stats(exemplar, nets, t, config)
    return ExemplarStats(means, appearance, dynamics, tuple(dropped),
                         exemplar.shape[1:3], exemplar.shape[0])


# ---------------------------------------------------------------------------
# Losses over whole videos


def _appearance_terms(target, taps, config, with_grads):
    """Plain and shifted appearance losses (and tap gradients) against
    precomputed target layer statistics."""
    plain_total = 0.0
    shifted_total = 0.0
    tap_grads = {} if with_grads else None
    for label, weight in config.layer_weights.items():
        stats = target[label]
        maps = taps.maps[label]
        frames = maps.shape[0]
        positions = maps.shape[1] * maps.shape[2]
        if positions != stats.positions:
            raise ShapeMismatchError(
                f"layer {label}: geometry differs from the exemplar",
                dimension="positions", expected=stats.positions,
                actual=positions)
        stride = taps.strides[label]
        grad = np.zeros(maps.shape) if with_grads else None

        per_frame = [gram(maps[f]).values for f in range(frames)]
        mean_gram = sum(per_frame) / frames
        diff = mean_gram - stats.plain.values
        plain_total += weight * float(np.sum(diff * diff) / stats.positions)
        if with_grads and weight != 0.0:
            up = (2.0 * weight / (stats.positions * frames)) * diff
            for f in range(frames):
                grad[f] += gram_backward(maps[f], up)

        active = stats.active_shifts()
        if active:
            share = weight / len(active)
            for shift in active:
                tgt = stats.shifted[shift]
                per = [shifted_gram(maps[f], shift, stride) for f in range(frames)]
                if any(p is None for p in per):
                    raise ShapeMismatchError(
                        f"layer {label}: shift {shift.key} active for the "
                        "exemplar but skipped for the candidate",
                        dimension="shift")
                mean_shift = sum(p.values for p in per) / frames
                sdiff = mean_shift - tgt.values
                shifted_total += share * float(np.sum(sdiff * sdiff) / tgt.count)
                if with_grads and share != 0.0:
                    up = (2.0 * share / (tgt.count * frames)) * sdiff
                    for f in range(frames):
                        grad[f] += shifted_gram_backward(maps[f], shift,
                                                         stride, up)
        if with_grads:
            tap_grads[label] = grad
    return plain_total, shifted_total, tap_grads


def appearance_loss(exemplar_taps, synth_taps, config):
    """Weighted two-part appearance loss between two tapped videos.

    Gram matrices are averaged over frames on each side before
    differencing; shifted terms are averaged over the shifts active at
    each layer. An empty shift set gives the baseline loss.
    """
    target = appearance_layer_stats(exemplar_taps, config)
    plain, shifted, _ = _appearance_terms(target, synth_taps, config, False)
    return plain + shifted


def dynamics_loss_interval(exemplar, synth, interval, nets, config):
    """Dynamics Gram mismatch at one frame interval.

    Each side's pair Grams are averaged over its own pairs before
    differencing, so videos of different lengths are comparable.
    """
    exemplar = np.asarray(exemplar, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    target = dynamics_interval_stats(exemplar, nets, interval, config)
    candidate = dynamics_interval_stats(synth, nets, interval, config)
    beta = config.dynamics_weights.get(DYNAMICS_TAP, 0.0)
    return beta * dynamics_layer_loss(target, candidate, target.count)


def total_dynamics_loss(exemplar, synth, nets, config):
    """Weighted sum of the interval losses over all configured intervals."""
    total = 0.0
    for t in config.intervals:
        alpha = config.interval_weight(t)
        if alpha == 0.0:
            continue
        total += alpha * dynamics_loss_interval(exemplar, synth, t, nets, config)
    return total


def _dynamics_terms(stats, synth, nets, config, with_grads, video_grad):
    """Per-interval dynamics losses against the precomputed bundle,
    accumulating pixel gradients into ``video_grad`` when asked."""
    terms = {}
    lam = config.stream_balance
    beta = config.dynamics_weights.get(DYNAMICS_TAP, 0.0)
    for t, target in stats.dynamics.items():
        alpha = config.interval_weight(t)
        scale = lam * alpha * beta
        if scale == 0.0:
            terms[t] = 0.0
            continue
        anchors = pair_anchors(synth.shape[0], t)
        feats = []
        caches = []
        total = None
        for i in anchors:
            if with_grads:
                f, c = networks.extract_dynamics(
                    synth[i], synth[i + t], nets.dynamics,
                    scales=config.pyramid_scales, with_cache=True)
                caches.append(c)
            else:
                f = networks.extract_dynamics(
                    synth[i], synth[i + t], nets.dynamics,
                    scales=config.pyramid_scales)
            feats.append(f)
            g = dynamics_pair_gram(f)
            total = g.values if total is None else total + g.values
        mean = total / len(anchors)
        diff = mean - target.values
        terms[t] = scale * float(np.sum(diff * diff) / target.count)
        if with_grads:
            up = (2.0 * scale / (target.count * len(anchors))) * diff
            for i, f, c in zip(anchors, feats, caches):
                scale_grads = dynamics_pair_gram_backward(f, up)
                ga, gb = networks.dynamics_backward(nets.dynamics, c, scale_grads)
                video_grad[i] += ga
                video_grad[i + t] += gb
    return terms


def total_objective(synth, stats, nets, config, return_terms=False):
    """Full two-stream loss and its gradient with respect to every pixel.

    ``stats`` is the precomputed exemplar bundle. The appearance stream
    sees pixels shifted by the exemplar's channel means; the dynamics
    stream sees raw pixels. Returns (loss, gradient) or, with
    ``return_terms``, (loss, gradient, terms) where the term breakdown
    sums exactly to the loss.
    """
    synth = np.asarray(synth, dtype=np.float64)
    if synth.ndim != 4 or synth.shape[-1] != 3:
        raise ShapeMismatchError(
            "candidate video must be (frames, height, width, 3)",
            dimension="shape", expected="(F, H, W, 3)", actual=synth.shape)
    if synth.shape[1:3] != tuple(stats.frame_shape):
        raise ShapeMismatchError(
            "candidate frame geometry differs from the exemplar",
            dimension="spatial", expected=tuple(stats.frame_shape),
            actual=synth.shape[1:3])
    for t in stats.dynamics:
        if synth.shape[0] <= t:
            raise ConfigError(
                f"interval {t} needs more than {t} output frames, "
                f"got {synth.shape[0]}", key="intervals")

    taps, cache = networks.extract_appearance(
        synth - stats.channel_means, nets.appearance, with_cache=True)
    plain, shifted, tap_grads = _appearance_terms(
        stats.appearance, taps, config, True)
    grad = networks.appearance_backward(nets.appearance, cache, tap_grads)

    if config.stream_balance != 0.0 and stats.dynamics:
        dyn_terms = _dynamics_terms(stats, synth, nets, config, True, grad)
    else:
        dyn_terms = {t: 0.0 for t in stats.dynamics}

    loss = plain + shifted
    for t in sorted(dyn_terms):
        loss += dyn_terms[t]
    if return_terms:
        terms = {"appearance_plain": plain, "appearance_shifted": shifted,
                 "dynamics": {t: dyn_terms[t] for t in sorted(dyn_terms)}}
        return loss, grad, terms
    return loss, grad
