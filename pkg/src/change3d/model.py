"""Task model: perception frames + video encoder + per-task heads.

Detection tasks read K fused perception features per layer and decode each
index j with its own head; captioning reads the fused deepest feature only.
"""

from __future__ import annotations

import numpy as np

from change3d import tensor as T
from change3d.captioner import CaptionDecoder, Vocabulary
from change3d.config import RunConfig
from change3d.decoder import DecoderHead
from change3d.encoder import (DifferentialFusion, PerceptionFrames, VideoEncoder,
                              acquire_perception_features, assemble_clip, encode,
                              frame_indices, image_indices)
from change3d.nn import Conv3d, Layer
from change3d.tensor import Tensor


def _model_rng(seed: int):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, 0x11])))


class TaskModel(Layer):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.task = cfg.task
        self.dtype = dtype
        rng = _model_rng(cfg.seed)
        enc_cfg = cfg.encoder
        channels = enc_cfg.stage_channels
        size = cfg.train.image_size

        self.frames = PerceptionFrames(cfg.task, size, cfg.frame_init,
                                       rng=rng, dtype=dtype)
        self.encoder = VideoEncoder(enc_cfg, rng=rng, dtype=dtype)
        if cfg.task == "cc":
            # captioning fuses bi-temporal differences only at the deepest layer
            self.fusions = [None, None, None,
                            DifferentialFusion(channels[3], rng=rng, dtype=dtype)]
        else:
            self.fusions = [DifferentialFusion(c, rng=rng, dtype=dtype)
                            for c in channels]
        if enc_cfg.acquisition_mode == "fc":
            self.fc_convs = [Conv3d(c, c, (3, 1, 1), stride=(3, 1, 1), groups=c,
                                    rng=rng, dtype=dtype) for c in channels]
        else:
            self.fc_convs = None

        n_sem = cfg.decoder.num_semantic_classes
        n_dmg = cfg.decoder.num_damage_classes
        if cfg.task == "bcd":
            self.heads = [DecoderHead(channels, 2, rng=rng, dtype=dtype)]
        elif cfg.task == "scd":
            self.heads = [DecoderHead(channels, 2, rng=rng, dtype=dtype),
                          DecoderHead(channels, n_sem + 1, rng=rng, dtype=dtype),
                          DecoderHead(channels, n_sem + 1, rng=rng, dtype=dtype)]
        elif cfg.task == "bda":
            self.heads = [DecoderHead(channels, 2, rng=rng, dtype=dtype),
                          DecoderHead(channels, n_dmg + 1, rng=rng, dtype=dtype)]
        else:
            if vocab is None:
                raise ValueError("captioning model needs a vocabulary")
            self.heads = []
            self.caption = CaptionDecoder(cfg.caption, len(vocab), channels[3],
                                          (size // 16) ** 2, rng=rng, dtype=dtype)
            self.vocab = vocab

    # ---- shared feature path

    def perception_features(self, i1: Tensor, i2: Tensor, train: bool):
        """Fused per-layer perception features plus the raw pyramid."""
        cfg = self.cfg.encoder
        clip = assemble_clip(i1, i2, self.frames, cfg.insertion_position)
        pyr = encode(clip, self.encoder, train)
        k = self.frames.k
        feats = acquire_perception_features(pyr, k, cfg.acquisition_mode,
                                            cfg.insertion_position, self.fc_convs)
        ia, ib = image_indices(cfg.insertion_position, k)
        fused = []
        for i in range(4):
            if self.fusions[i] is None:
                fused.append(feats[i])
                continue
            first, last = pyr.frame(i, ia), pyr.frame(i, ib)
            fused.append([self.fusions[i](f, first, last) for f in feats[i]])
        return fused, pyr

    # ---- task forwards

    def forward_detection(self, i1: Tensor, i2: Tensor, train: bool) -> dict:
        fused, _ = self.perception_features(i1, i2, train)
        outputs = {}
        if self.task == "bcd":
            logits, _ = self.heads[0]([fused[i][0] for i in range(4)])
            outputs["binary"] = logits
        elif self.task == "scd":
            names = ("binary", "sem1", "sem2")
            for j, name in enumerate(names):
                logits, pre = self.heads[j]([fused[i][j] for i in range(4)])
                outputs[name] = logits
                if name == "sem1":
                    outputs["feat1"] = pre
                elif name == "sem2":
                    outputs["feat2"] = pre
        elif self.task == "bda":
            for j, name in enumerate(("loc", "damage")):
                logits, _ = self.heads[j]([fused[i][j] for i in range(4)])
                outputs[name] = logits
        else:
            raise ValueError("use forward_caption for the captioning task")
        return outputs

    def forward_caption(self, i1: Tensor, i2: Tensor, token_ids: np.ndarray,
                        train: bool) -> dict:
        fused, _ = self.perception_features(i1, i2, train)
        p_cap = fused[3][0]
        return {"caption_logits": self.caption(p_cap, token_ids)}

    def generate_caption(self, i1: Tensor, i2: Tensor) -> tuple[list[str], bool]:
        fused, _ = self.perception_features(i1, i2, train=False)
        return self.caption.generate(fused[3][0], self.vocab)

    # ---- parameter accounting

    def param_groups(self) -> dict[str, int]:
        """Parameter counts by component; the video-encoding side is the
        encoder weights plus the perception frames and fusion/aggregation
        convs that produce the perception features."""
        groups = {
            "encoder": self.encoder.param_count(),
            "perception_frames": self.frames.param_count(),
            "fusion": sum(f.param_count() for f in self.fusions if f is not None),
        }
        if self.fc_convs is not None:
            groups["fusion"] += sum(c.param_count() for c in self.fc_convs)
        if self.task == "cc":
            groups["caption_head"] = self.caption.param_count()
        else:
            groups["heads"] = sum(h.param_count() for h in self.heads)
        return groups

    def encoder_share(self) -> float:
        groups = self.param_groups()
        encoding = groups["encoder"] + groups["perception_frames"] + groups["fusion"]
        total = sum(groups.values())
        return encoding / total

    # ---- state

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{name}": p.data for name, p in self.named_parameters()}
        out.update({f"buffer.{name}": b for name, b in self.named_buffers()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            key = f"param.{name}"
            if key not in tensors:
                raise KeyError(f"checkpoint missing parameter {name}")
            if tensors[key].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{tensors[key].shape} vs {p.data.shape}")
            p.data = tensors[key].astype(p.data.dtype, copy=True)
        for name, b in self.named_buffers():
            key = f"buffer.{name}"
            if key not in tensors:
                raise KeyError(f"checkpoint missing buffer {name}")
            b[...] = tensors[key]


def build_model(cfg: RunConfig, vocab: Vocabulary | None = None,
                dtype=np.float32) -> TaskModel:
    return TaskModel(cfg, vocab=vocab, dtype=dtype)
