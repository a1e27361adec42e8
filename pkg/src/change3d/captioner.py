"""Autoregressive caption head over the deepest perception feature.

Token embeddings (word + learned position) pass through pre-norm decoder
blocks: causal self-attention, then cross-attention whose keys/values are the
flattened perception feature tokens, with a single residual wrapping both
attentions, then a feedforward.  Decoding is greedy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from change3d import tensor as T
from change3d.nn import Embedding, Layer, LayerNorm, Linear
from change3d.tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Ordered token list with the four reserved tokens pinned to 0..3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:4] != list(RESERVED):
            raise ValueError(f"tokens must start with reserved {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        return cls(list(RESERVED) + sorted(set(words)))

    def encode(self, words) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


@dataclass
class CaptionHeadConfig:
    embed_dim: int = 128
    num_heads: int = 4
    num_layers: int = 2
    max_len: int = 24
    ffn_dim: int = 256

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


class MultiHeadAttention(Layer):
    def __init__(self, dim, num_heads, *, rng, dtype=np.float32):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng=rng, dtype=dtype)

    def __call__(self, q: Tensor, kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, lq, d = q.shape
        lk = kv.shape[1]
        h, hd = self.num_heads, self.head_dim

        def split(x, l):
            return T.transpose(T.reshape(x, (b, l, h, hd)), (0, 2, 1, 3))

        qh = split(self.wq(q), lq)
        kh = split(self.wk(kv), lk)
        vh = split(self.wv(kv), lk)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        if mask is not None:
            scores = T.add(scores, Tensor(mask.astype(q.dtype)))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, vh)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, lq, d))
        return self.wo(out)


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: -1e9 above the diagonal blocks attention to later tokens."""
    m = np.zeros((length, length), dtype=np.float64)
    m[np.triu_indices(length, k=1)] = -1e9
    return m


class DecoderBlock(Layer):
    """e' = CrossAttn(SelfAttn(e), p) + e, pre-norm, then a feedforward."""

    def __init__(self, cfg: CaptionHeadConfig, *, rng, dtype=np.float32):
        super().__init__()
        d = cfg.embed_dim
        self.ln_self = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, cfg.num_heads, rng=rng, dtype=dtype)
        self.ln_cross = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.num_heads, rng=rng, dtype=dtype)
        self.ln_ffn = LayerNorm(d, dtype=dtype)
        self.ffn_in = Linear(d, cfg.ffn_dim, rng=rng, dtype=dtype)
        self.ffn_out = Linear(cfg.ffn_dim, d, rng=rng, dtype=dtype)

    def __call__(self, e: Tensor, p_tokens: Tensor, mask: np.ndarray) -> Tensor:
        x = self.ln_self(e)
        h = self.self_attn(x, x, mask)
        h = self.cross_attn(self.ln_cross(h), p_tokens)
        e = T.add(e, h)
        return T.add(e, self.ffn_out(T.relu(self.ffn_in(self.ln_ffn(e)))))


class CaptionDecoder(Layer):
    """Teacher-forced logits and greedy generation over a fixed vocabulary."""

    def __init__(self, cfg: CaptionHeadConfig, vocab_size: int, feat_channels: int,
                 feat_hw: int, *, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.embed_dim
        self.tok_embed = Embedding(vocab_size, d, rng=rng, dtype=dtype)
        self.pos_embed = T.parameter(
            rng.normal(0.0, 0.02, size=(cfg.max_len, d)).astype(dtype))
        # learned 2D position for the perception tokens, added before projection
        self.kv_pos = T.parameter(
            rng.normal(0.0, 0.02, size=(feat_hw, feat_channels)).astype(dtype))
        self.kv_proj = Linear(feat_channels, d, rng=rng, dtype=dtype)
        self.blocks = [DecoderBlock(cfg, rng=rng, dtype=dtype)
                       for _ in range(cfg.num_layers)]
        self.ln_out = LayerNorm(d, dtype=dtype)
        self.lm_head = Linear(d, vocab_size, rng=rng, dtype=dtype)

    def embed(self, token_ids: np.ndarray) -> Tensor:
        """Word embedding plus learned positional embedding: (B, L) -> (B, L, D)."""
        token_ids = np.asarray(token_ids)
        b, l = token_ids.shape
        if l > self.cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        e = self.tok_embed(token_ids)
        pos = T.narrow(self.pos_embed, 0, 0, l)
        return T.add(e, pos)

    def perception_tokens(self, p_cap: Tensor) -> Tensor:
        """Flatten (N, C, h, w) into h*w key/value tokens projected to D."""
        n, c, h, w = p_cap.shape
        toks = T.transpose(T.reshape(p_cap, (n, c, h * w)), (0, 2, 1))
        return self.kv_proj(T.add(toks, self.kv_pos))

    def __call__(self, p_cap: Tensor, token_ids: np.ndarray) -> Tensor:
        """Teacher-forced forward: logits (B, L, vocab)."""
        e = self.embed(token_ids)
        p_tokens = self.perception_tokens(p_cap)
        mask = causal_mask(e.shape[1])
        for block in self.blocks:
            e = block(e, p_tokens, mask)
        return self.lm_head(self.ln_out(e))

    def generate(self, p_cap: Tensor, vocab: Vocabulary) -> tuple[list[str], bool]:
        """Greedy decode from BOS until EOS or max_len.

        Returns (words, truncated); PAD/BOS logits are suppressed so they can
        never be emitted.
        """
        ids = [BOS]
        truncated = True
        for _ in range(self.cfg.max_len - 1):
            logits = self(p_cap, np.asarray([ids]))
            last = logits.data[0, -1].copy()
            last[PAD] = -np.inf
            last[BOS] = -np.inf
            nxt = int(np.argmax(last))
            if nxt == EOS:
                truncated = False
                break
            ids.append(nxt)
        return vocab.decode(ids), truncated
