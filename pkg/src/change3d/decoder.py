"""Change decoder: deep-to-shallow cascade of 1x1 conv + 4x4/stride-2
transposed conv with lateral additions, then a 3x3 classifier at full
resolution.  One head per prediction map (1 for binary change, 3 for
semantic change, 2 for damage assessment)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from change3d import tensor as T
from change3d.nn import Conv2d, ConvTranspose2d, Layer
from change3d.tensor import Tensor


@dataclass
class ChangeMap:
    """Per-pixel integer class labels; values in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("class labels out of range")


class DecoderHead(Layer):
    """Upsampling cascade over a 4-level pyramid.

    The transposed convs are depthwise (one 4x4 filter per channel, bilinear
    at init) which keeps nearly all trainable weight in the encoder; channel
    mixing happens in the dense 1x1 laterals and the final 3x3 classifier.
    """

    def __init__(self, stage_channels, num_classes: int, *, rng, dtype=np.float32):
        super().__init__()
        if num_classes < 2:
            raise ValueError("a prediction head needs at least 2 classes")
        self.stage_channels = tuple(stage_channels)
        self.num_classes = num_classes
        c = self.stage_channels
        self.laterals = [Conv2d(c[i + 1], c[i], 1, rng=rng, dtype=dtype)
                         for i in range(3)]
        self.ups = [ConvTranspose2d(c[i], c[i], 4, (2, 2), (1, 1), depthwise=True,
                                    bilinear_init=True, rng=rng, dtype=dtype)
                    for i in range(3)]
        self.final_up = ConvTranspose2d(c[0], c[0], 4, (2, 2), (1, 1), depthwise=True,
                                        bilinear_init=True, rng=rng, dtype=dtype)
        self.classifier = Conv2d(c[0], num_classes, 3, padding=(1, 1), rng=rng,
                                 dtype=dtype)

    def __call__(self, feats: list[Tensor]) -> tuple[Tensor, Tensor]:
        """feats[i]: (N, C_i, H/2^(i+1), W/2^(i+1)) for i in 0..3.

        Returns (logits (N, num_classes, H, W), pre-classifier feature).
        """
        if len(feats) != 4:
            raise ValueError(f"expected a 4-level pyramid, got {len(feats)} levels")
        for i, f in enumerate(feats):
            if f.shape[1] != self.stage_channels[i]:
                raise ValueError(f"level {i} has {f.shape[1]} channels, expected "
                                 f"{self.stage_channels[i]}")
            if i and (f.shape[2] * 2 != feats[i - 1].shape[2]
                      or f.shape[3] * 2 != feats[i - 1].shape[3]):
                raise ValueError(f"level {i} spatial extents {f.shape[2:]} do not "
                                 f"halve level {i - 1} {feats[i - 1].shape[2:]}")
        x = feats[3]
        for i in (2, 1, 0):
            x = T.add(self.ups[i](self.laterals[i](x)), feats[i])
        x = self.final_up(x)
        return self.classifier(x), x


def classify(logits) -> ChangeMap:
    """Per-pixel argmax along the channel axis; ties go to the lowest class."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 3:
        axis, n = 0, data.shape[0]
    elif data.ndim == 4:
        axis, n = 1, data.shape[1]
    else:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) logits, got {data.shape}")
    return ChangeMap(labels=np.argmax(data, axis=axis), num_classes=n)


def mask_semantic(sem_labels: np.ndarray, binary_labels: np.ndarray) -> np.ndarray:
    """Force semantic predictions to no-change (0) wherever the binary head
    predicts no change; the standard composition of the two maps."""
    return np.where(binary_labels > 0, sem_labels, 0)
