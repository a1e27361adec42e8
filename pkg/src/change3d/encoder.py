"""Tiny-video encoder: clip assembly, the 3D backbone, perception-feature
acquisition, and differential fusion.

The clip is ``[I1 | perception frames | I2]`` (order set by the insertion
position) over a temporal axis that is never downsampled, so every frame
stays addressable at every layer.  Layer ``i`` halves the spatial extents to
``H/2^(i+1)``; the temporal extent is always ``K + 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from change3d import tensor as T
from change3d.nn import BatchNorm, Conv2d, Conv3d, Layer
from change3d.tensor import Tensor

TASK_FRAME_COUNT = {"bcd": 1, "scd": 3, "bda": 2, "cc": 1}
INSERTION_POSITIONS = ("before", "after", "sandwiched")
ACQUISITION_MODES = ("fc", "max", "mean", "selected")
FRAME_INIT_MODES = ("zeros", "ones", "uniform", "random")


@dataclass
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 2, 2)
    temporal_kernel: int = 3
    insertion_position: str = "sandwiched"
    acquisition_mode: str = "selected"
    expansion: float = 2.25

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("encoder needs exactly 4 stages")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("blocks_per_stage entries must be >= 1")
        if self.temporal_kernel % 2 != 1 or self.temporal_kernel < 1:
            raise ValueError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if self.insertion_position not in INSERTION_POSITIONS:
            raise ValueError(f"insertion_position must be one of {INSERTION_POSITIONS}")
        if self.acquisition_mode not in ACQUISITION_MODES:
            raise ValueError(f"acquisition_mode must be one of {ACQUISITION_MODES}")


def frame_indices(position: str, k: int) -> tuple[int, ...]:
    """Temporal indices of the perception frames for a given insertion order."""
    if position == "sandwiched":
        return tuple(range(1, k + 1))
    if position == "before":
        return tuple(range(k))
    if position == "after":
        return tuple(range(2, k + 2))
    raise ValueError(f"unknown insertion position {position!r}")


def image_indices(position: str, k: int) -> tuple[int, int]:
    """Temporal indices of (I1, I2) for a given insertion order."""
    if position == "sandwiched":
        return 0, k + 1
    if position == "before":
        return k, k + 1
    if position == "after":
        return 0, 1
    raise ValueError(f"unknown insertion position {position!r}")


class PerceptionFrames(Layer):
    """K learnable pseudo-frames of shape (3, H, W), one set per task."""

    def __init__(self, task: str, size: int, init_mode: str = "random", *,
                 rng, dtype=np.float32):
        super().__init__()
        if task not in TASK_FRAME_COUNT:
            raise ValueError(f"unknown task {task!r}")
        if init_mode not in FRAME_INIT_MODES:
            raise ValueError(f"init_mode must be one of {FRAME_INIT_MODES}")
        self.k = TASK_FRAME_COUNT[task]
        self.init_mode = init_mode
        shape = (self.k, 3, size, size)
        if init_mode == "zeros":
            data = np.zeros(shape)
        elif init_mode == "ones":
            data = np.ones(shape)
        elif init_mode == "uniform":
            data = rng.uniform(0.0, 1.0, size=shape)
        else:
            data = rng.normal(0.0, 1.0, size=shape)
        self.frames = T.parameter(data.astype(dtype))


def assemble_clip(i1: Tensor, i2: Tensor, frames: PerceptionFrames,
                  position: str = "sandwiched") -> Tensor:
    """Stack images and perception frames along a new temporal axis.

    Accepts (3, H, W) or batched (N, 3, H, W) images and returns
    (3, T, H, W) / (N, 3, T, H, W) with T = K + 2.
    """
    unbatched = i1.ndim == 3
    if unbatched:
        i1 = T.reshape(i1, (1,) + i1.shape)
        i2 = T.reshape(i2, (1,) + i2.shape)
    if i1.shape != i2.shape:
        raise ValueError(f"bi-temporal shape mismatch: {i1.shape} vs {i2.shape}")
    n, c, h, w = i1.shape
    if frames.frames.shape[2:] != (h, w):
        raise ValueError(
            f"perception frames are {frames.frames.shape[2:]}, images are {(h, w)}")
    k = frames.k

    per_frame = []
    for j in range(k):
        fj = T.reshape(T.narrow(frames.frames, 0, j, 1), (c, h, w))
        per_frame.append(T.reshape(T.expand_batch(fj, n), (n, c, 1, h, w)))
    a = T.reshape(i1, (n, c, 1, h, w))
    b = T.reshape(i2, (n, c, 1, h, w))
    if position == "sandwiched":
        order = [a, *per_frame, b]
    elif position == "before":
        order = [*per_frame, a, b]
    elif position == "after":
        order = [a, b, *per_frame]
    else:
        raise ValueError(f"unknown insertion position {position!r}")
    clip = T.concat(order, axis=2)
    if unbatched:
        clip = T.reshape(clip, clip.shape[1:])
    return clip


class X3DBlock(Layer):
    """Residual depthwise-separable block: 1x1x1 expand, kx3x3 depthwise,
    1x1x1 project; spatial stride lives in the depthwise conv."""

    def __init__(self, cin, cout, temporal_kernel, spatial_stride, expansion, *,
                 rng, dtype=np.float32):
        super().__init__()
        hidden = max(8, int(round(cin * expansion)))
        tk = temporal_kernel
        s = spatial_stride
        self.expand = Conv3d(cin, hidden, (1, 1, 1), bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(hidden, dtype=dtype)
        self.dw = Conv3d(hidden, hidden, (tk, 3, 3), stride=(1, s, s),
                         padding=(tk // 2, 1, 1), groups=hidden, bias=False,
                         rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(hidden, dtype=dtype)
        self.project = Conv3d(hidden, cout, (1, 1, 1), bias=False, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm(cout, dtype=dtype)
        if cin != cout or s != 1:
            self.skip = Conv3d(cin, cout, (1, 1, 1), stride=(1, s, s), bias=False,
                               rng=rng, dtype=dtype)
            self.bn_skip = BatchNorm(cout, dtype=dtype)
        else:
            self.skip = None
            self.bn_skip = None

    def __call__(self, x, train: bool):
        y = T.relu(self.bn1(self.expand(x), train))
        y = T.relu(self.bn2(self.dw(y), train))
        y = self.bn3(self.project(y), train)
        shortcut = x if self.skip is None else self.bn_skip(self.skip(x), train)
        return T.relu(T.add(y, shortcut))


class VideoEncoder(Layer):
    """Stem plus four stages; stage i emits (N, C_i, T, H/2^(i+1), W/2^(i+1))."""

    def __init__(self, cfg: EncoderConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        tk = cfg.temporal_kernel
        c0 = cfg.stage_channels[0]
        self.stem = Conv3d(3, c0, (tk, 3, 3), stride=(1, 2, 2),
                           padding=(tk // 2, 1, 1), bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(c0, dtype=dtype)
        self.stages = []
        prev = c0
        for i, (ch, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for b in range(nblocks):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(X3DBlock(prev, ch, tk, stride, cfg.expansion,
                                       rng=rng, dtype=dtype))
                prev = ch
            self.stages.append(blocks)

    def __call__(self, clip: Tensor, train: bool) -> list[Tensor]:
        x = T.relu(self.stem_bn(self.stem(clip), train))
        outs = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x, train)
            outs.append(x)
        return outs


@dataclass
class FeaturePyramid:
    """Per-layer encoder features, stored frame-major: (N, T, C_i, h_i, w_i)."""

    layers: list[Tensor] = field(default_factory=list)

    @property
    def t(self) -> int:
        return self.layers[0].shape[1]

    def frame(self, layer: int, t: int) -> Tensor:
        """One temporal slice as (N, C, h, w)."""
        lt = self.layers[layer]
        n, _, c, h, w = lt.shape
        return T.reshape(T.narrow(lt, 1, t, 1), (n, c, h, w))


def encode(clip: Tensor, encoder: VideoEncoder, train: bool = False) -> FeaturePyramid:
    """Run the backbone over (N, 3, T, H, W) (or unbatched) and build the pyramid."""
    unbatched = clip.ndim == 4
    if unbatched:
        clip = T.reshape(clip, (1,) + clip.shape)
    n, c, t, h, w = clip.shape
    if h % 16 or w % 16:
        raise ValueError(f"input resolution {h}x{w} not divisible by 16")
    if not np.all(np.isfinite(clip.data)):
        raise ValueError("clip contains non-finite values")
    outs = encoder(clip, train)
    layers = []
    for i, o in enumerate(outs):
        expect = (h // (2 ** (i + 1)), w // (2 ** (i + 1)))
        if o.shape[3:] != expect:
            raise AssertionError(
                f"layer {i} spatial extents {o.shape[3:]} violate halving law {expect}")
        if o.shape[2] != t:
            raise AssertionError(f"temporal extent changed at layer {i}")
        layers.append(T.transpose(o, (0, 2, 1, 3, 4)))
    return FeaturePyramid(layers=layers)


def acquire_perception_features(pyr: FeaturePyramid, k: int, mode: str,
                                position: str = "sandwiched",
                                fc_convs: list | None = None) -> list[list[Tensor]]:
    """Read K per-layer change features out of the pyramid.

    selected: the temporal slices at the inserted indices.  mean/max: pool
    over all T frames, replicated K times.  fc: learned depthwise temporal
    aggregation (kernel 3x1x1, stride 3), replicated K times.
    Returns features[layer][j] with shape (N, C_i, h_i, w_i).
    """
    if mode not in ACQUISITION_MODES:
        raise ValueError(f"acquisition mode must be one of {ACQUISITION_MODES}")
    if pyr.t != k + 2:
        raise ValueError(f"pyramid has T={pyr.t}, expected K+2={k + 2}")
    if mode == "fc" and (fc_convs is None or len(fc_convs) != len(pyr.layers)):
        raise ValueError("fc acquisition needs one temporal conv per layer")

    feats: list[list[Tensor]] = []
    if mode == "selected":
        idx = frame_indices(position, k)
        for i in range(len(pyr.layers)):
            feats.append([pyr.frame(i, t) for t in idx])
        return feats
    for i, lt in enumerate(pyr.layers):
        n, t, c, h, w = lt.shape
        if mode == "mean":
            pooled = T.mean(lt, axis=1)
        elif mode == "max":
            pooled = T.max_(lt, axis=1)
        else:  # fc
            x = T.transpose(lt, (0, 2, 1, 3, 4))
            pooled = T.reshape(fc_convs[i](x), (n, c, h, w))
        feats.append([pooled] * k)
    return feats


class DifferentialFusion(Layer):
    """p + ReLU(Conv1x1(f_first - f_last)); the conv is bias-free so equal
    bi-temporal features contribute exactly zero."""

    def __init__(self, channels: int, *, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, bias=False, rng=rng, dtype=dtype)

    def __call__(self, p: Tensor, f_first: Tensor, f_last: Tensor) -> Tensor:
        if p.shape != f_first.shape or p.shape != f_last.shape:
            raise ValueError(
                f"fusion shape mismatch: {p.shape} / {f_first.shape} / {f_last.shape}")
        return T.add(p, T.relu(self.conv(T.sub(f_first, f_last))))
