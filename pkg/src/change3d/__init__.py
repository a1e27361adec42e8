"""Bi-temporal change detection and captioning as tiny-video modeling.

Two input images plus a handful of learnable perception frames are stacked
along a temporal axis and run through a 3D-convolutional encoder; the
per-layer features of the perception frames drive light decoders for binary
change detection, semantic change detection, building damage assessment, and
change captioning.  Everything runs on the package's own autodiff engine
with compiled or numpy convolution kernels (see ``change3d.backend``).
"""

__version__ = "0.1.0"

from change3d.tensor import GradTape, Tensor, backward  # noqa: F401
