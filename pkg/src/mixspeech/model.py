"""Desk-scale audio-visual translation network.

A linear+tanh fusion front-end over the 2D-wide modality-padded frames, a
pre-norm bidirectional transformer encoder, and a pre-norm autoregressive
transformer decoder. One parameter set serves every input modality.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, PAD

NEG_INF = -1e9
INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 256
    tgt_vocab: int = 60

    def __post_init__(self):
        if self.model_dim % self.attention_heads:
            raise ModelError(
                f"model_dim {self.model_dim} not divisible by attention_heads {self.attention_heads}")
        for f in fields(self):
            if getattr(self, f.name) < 0 or (f.name not in ("encoder_layers", "decoder_layers")
                                             and getattr(self, f.name) < 1):
                raise ModelError(f"{f.name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid_table(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(s: int) -> np.ndarray:
    return np.triu(np.full((s, s), NEG_INF), k=1)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, zero_output: bool = False):
        self.config = config
        self.positions = sinusoid_table(config.max_positions, config.model_dim)
        self.use_positions = True
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.default_rng(seed)
        h, f, v = config.model_dim, config.ffn_dim, config.tgt_vocab

        def weight(name, shape):
            self.params[name] = ad.Tensor(INIT_STD * rng.standard_normal(shape), True, name)

        def bias(name, n, fill=0.0):
            self.params[name] = ad.Tensor(np.full(n, fill), True, name)

        def norm(prefix):
            bias(prefix + ".g", h, 1.0)
            bias(prefix + ".b", h)

        def attention(prefix):
            for w in ("q", "k", "v", "o"):
                weight(f"{prefix}.w{w}", (h, h))
                bias(f"{prefix}.b{w}", h)

        def ffn(prefix):
            weight(prefix + ".w1", (h, f))
            bias(prefix + ".b1", f)
            weight(prefix + ".w2", (f, h))
            bias(prefix + ".b2", h)

        weight("fuse.w", (2 * config.feature_dim, h))
        bias("fuse.b", h)
        for i in range(config.encoder_layers):
            norm(f"enc.{i}.ln1")
            attention(f"enc.{i}.attn")
            norm(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        norm("enc.ln")
        weight("dec.emb", (v, h))
        for i in range(config.decoder_layers):
            norm(f"dec.{i}.ln1")
            attention(f"dec.{i}.self")
            norm(f"dec.{i}.ln2")
            attention(f"dec.{i}.cross")
            norm(f"dec.{i}.ln3")
            ffn(f"dec.{i}.ffn")
        norm("dec.ln")
        weight("out.w", (h, v))
        bias("out.b", v)
        if zero_output:
            self.params["out.w"].data[:] = 0.0

    # --- parameter plumbing ---

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ModelError(f"checkpoint lacks parameter {name!r}")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ModelError(f"parameter {name!r}: checkpoint shape {a.shape}, model {p.shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --- building blocks ---

    def _p(self, name: str) -> ad.Tensor:
        return self.params[name]

    def _linear(self, x, prefix_w: str, prefix_b: str):
        return ad.add(ad.matmul(x, self._p(prefix_w)), self._p(prefix_b))

    def _norm(self, x, prefix: str):
        return ad.layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _split_heads(self, x):
        b, t, h = x.shape
        nh = self.config.attention_heads
        return ad.transpose(ad.reshape(x, (b, t, nh, h // nh)), (0, 2, 1, 3))

    def _attention(self, prefix: str, query, memory, mask):
        """Multi-head scaled dot-product attention; ``mask`` is additive, broadcast to (B, heads, Tq, Tk)."""
        b, tq, h = query.shape
        q = self._split_heads(self._linear(query, prefix + ".wq", prefix + ".bq"))
        k = self._split_heads(self._linear(memory, prefix + ".wk", prefix + ".bk"))
        v = self._split_heads(self._linear(memory, prefix + ".wv", prefix + ".bv"))
        dh = h // self.config.attention_heads
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask)
        ctx = ad.matmul(ad.softmax_rows(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, h))
        return self._linear(ctx, prefix + ".wo", prefix + ".bo")

    def _ffn(self, prefix: str, x):
        hidden = ad.relu(self._linear(x, prefix + ".w1", prefix + ".b1"))
        return self._linear(hidden, prefix + ".w2", prefix + ".b2")

    @staticmethod
    def _key_mask(frame_mask, b: int, t: int):
        if frame_mask is None:
            return None
        frame_mask = np.asarray(frame_mask, dtype=bool).reshape(b, t)
        return np.where(frame_mask, 0.0, NEG_INF)[:, None, None, :]

    @staticmethod
    def _batched(x):
        x = ad.as_tensor(x)
        return (x, False) if x.data.ndim == 3 else (ad.reshape(x, (1, *x.shape)), True)

    # --- public forward pieces ---

    def fuse(self, e_concat):
        x = ad.as_tensor(e_concat)
        if x.shape[-1] != 2 * self.config.feature_dim:
            raise ModelError(f"fuse: last axis {x.shape[-1]} != 2*feature_dim "
                             f"({2 * self.config.feature_dim})")
        return ad.tanh(self._linear(x, "fuse.w", "fuse.b"))

    def encode(self, e_f, frame_mask=None):
        x, single = self._batched(e_f)
        b, t, h = x.shape
        if h != self.config.model_dim:
            raise ModelError(f"encode: feature width {h} != model_dim {self.config.model_dim}")
        if t > self.config.max_positions:
            raise ModelError(f"encode: {t} frames exceed max_positions {self.config.max_positions}")
        if self.use_positions:
            x = ad.add(x, self.positions[:t])
        mask = self._key_mask(frame_mask, b, t)
        for i in range(self.config.encoder_layers):
            y = self._norm(x, f"enc.{i}.ln1")
            x = ad.add(x, self._attention(f"enc.{i}.attn", y, y, mask))
            y = self._norm(x, f"enc.{i}.ln2")
            x = ad.add(x, self._ffn(f"enc.{i}.ffn", y))
        x = self._norm(x, "enc.ln")
        return ad.reshape(x, (t, h)) if single else x

    def _decoder_probs(self, e_p, tgt_in: np.ndarray, frame_mask=None):
        mem, single = self._batched(e_p)
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        b, s = tgt_in.shape
        if s > self.config.max_positions:
            raise ModelError(f"decode: {s} steps exceed max_positions {self.config.max_positions}")
        if tgt_in.size and (tgt_in.min() < 0 or tgt_in.max() >= self.config.tgt_vocab):
            raise ModelError(f"decode: token id outside [0, {self.config.tgt_vocab})")
        h = self.config.model_dim
        x = ad.scale(ad.embed(self._p("dec.emb"), tgt_in), math.sqrt(h))
        if self.use_positions:
            x = ad.add(x, self.positions[:s])
        self_mask = causal_mask(s)
        cross_mask = self._key_mask(frame_mask, b, mem.shape[1])
        for i in range(self.config.decoder_layers):
            y = self._norm(x, f"dec.{i}.ln1")
            x = ad.add(x, self._attention(f"dec.{i}.self", y, y, self_mask))
            y = self._norm(x, f"dec.{i}.ln2")
            x = ad.add(x, self._attention(f"dec.{i}.cross", y, mem, cross_mask))
            y = self._norm(x, f"dec.{i}.ln3")
            x = ad.add(x, self._ffn(f"dec.{i}.ffn", y))
        x = self._norm(x, "dec.ln")
        probs = ad.softmax_rows(self._linear(x, "out.w", "out.b"))
        return ad.reshape(probs, probs.shape[1:]) if single else probs

    def decode_teacher_forced(self, e_p, tgt_tokens, frame_mask=None):
        """Per-step next-token distributions given gold prefixes.

        ``tgt_tokens`` is BOS-prefixed (``(S+1,)`` or ``(B, S+1)``); row t of
        the result is the distribution over token t+1 given tokens ``<= t``.
        """
        tgt = np.asarray(tgt_tokens, dtype=np.int64)
        return self._decoder_probs(e_p, tgt[..., :-1], frame_mask)

    def forward(self, features, tgt_tokens, frame_mask=None):
        """fuse -> encode -> teacher-forced decode."""
        e_p = self.encode(self.fuse(features), frame_mask)
        return self.decode_teacher_forced(e_p, tgt_tokens, frame_mask)

    def greedy_decode(self, e_p, max_len: int, frame_mask=None) -> list[list[int]]:
        """Argmax decoding from BOS until EOS or ``max_len`` tokens; ties go to the lowest id.

        Returns the emitted tokens without BOS/EOS, one list per batch item.
        """
        if max_len > self.config.max_positions:
            raise ModelError(f"max_len {max_len} exceeds max_positions")
        mem, single = self._batched(e_p)
        b = mem.shape[0]
        seqs = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            probs = self._decoder_probs(mem, seqs, frame_mask)
            nxt = np.argmax(probs.data[:, -1, :], axis=-1)
            for j in range(b):
                if done[j]:
                    continue
                if nxt[j] == EOS:
                    done[j] = True
                else:
                    out[j].append(int(nxt[j]))
            if done.all():
                break
            seqs = np.concatenate([seqs, np.where(done, PAD, nxt)[:, None]], axis=1)
        return out
