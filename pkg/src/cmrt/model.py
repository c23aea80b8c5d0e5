"""Toy end-to-end speech translation model.

Speech frames go through a frame projection, two stride-2 windowed
projections (kernel 5, padding 2) and a small transformer encoder.  Text
tokens go through an embedding table.  Either representation, or any mix of
the two, feeds one shared translation encoder-decoder whose output layer is
tied to the text embedding table.

Batched functions take padded arrays plus lengths; the single-utterance
functions ``encode_speech``, ``embed_text``, ``translate_forward`` and
``beam_decode`` wrap them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
NEG = -1e9


class Vocab:
    """Token <-> id table with the four specials first."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in dict.fromkeys(tokens) if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def encode(self, tokens: Sequence[str], strict: bool = True) -> list[int]:
        if strict:
            missing = [t for t in tokens if t not in self.stoi]
            if missing:
                raise KeyError(f"out-of-vocabulary tokens: {missing}")
        return [self.stoi.get(t, self.unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (self.pad, self.bos, self.eos)]


@dataclass
class ModelConfig:
    vocab_size: int
    d_in: int = 16
    d: int = 64
    n_speech: int = 2
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    ffn: int = 128
    max_len: int = 512
    dropout: float = 0.1
    min_frames: int = 4
    max_frames: int = 4096


def sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


SPEECH_PREFIX = "speech."


@dataclass
class ToyModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out, gain=1.0):
            p[name + ".w"] = rng.standard_normal((fan_in, fan_out)) * gain / math.sqrt(fan_in)
            p[name + ".b"] = np.zeros(fan_out)

        def ln(name):
            p[name + ".g"] = np.ones(c.d)
            p[name + ".b"] = np.zeros(c.d)

        def layer(prefix, cross: bool, depth: int):
            res_gain = 1.0 / math.sqrt(2 * depth)
            ln(prefix + ".ln1")
            lin(prefix + ".qkv", c.d, 3 * c.d)
            lin(prefix + ".out", c.d, c.d, res_gain)
            if cross:
                ln(prefix + ".lnx")
                lin(prefix + ".xq", c.d, c.d)
                lin(prefix + ".xkv", c.d, 2 * c.d)
                lin(prefix + ".xout", c.d, c.d, res_gain)
            ln(prefix + ".ln2")
            lin(prefix + ".ff1", c.d, c.ffn)
            lin(prefix + ".ff2", c.ffn, c.d, res_gain)

        lin("speech.in", c.d_in, c.d)
        lin("speech.down1", 5 * c.d, c.d)
        lin("speech.down2", 5 * c.d, c.d)
        for i in range(c.n_speech):
            layer(f"speech.layer{i}", False, c.n_speech)
        ln("speech.ln_out")
        p["embed"] = rng.standard_normal((c.vocab_size, c.d)) / math.sqrt(c.d)
        for i in range(c.n_enc):
            layer(f"enc.layer{i}", False, c.n_enc)
        ln("enc.ln_out")
        for i in range(c.n_dec):
            layer(f"dec.layer{i}", True, c.n_dec)
        ln("dec.ln_out")
        p["dec.out_bias"] = np.zeros(c.vocab_size)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def speech_params(self) -> list[str]:
        return [k for k in self.params if k.startswith(SPEECH_PREFIX)]

    def set_frozen(self, names: Sequence[str], frozen: bool = True) -> None:
        for k in names:
            self.params[k].requires_grad = not frozen

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise dc.ShapeError("load_state", v.shape, self.params[k].shape)
            self.params[k].values = np.array(v, dtype=np.float64)

    def copy(self) -> "ToyModel":
        m = ToyModel(self.config, {k: Tensor(t.values.copy(), t.requires_grad, k) for k, t in self.params.items()})
        return m


# ---------------------------------------------------------------------------
# building blocks


class Ctx:
    """Per-forward switches: dropout on/off and its random stream."""

    def __init__(self, train: bool = False, rng: np.random.Generator | None = None, dropout: float = 0.0):
        self.train = train and dropout > 0
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dropout = dropout

    def drop(self, x: Tensor) -> Tensor:
        if not self.train:
            return x
        keep = 1.0 - self.dropout
        mask = (self.rng.random(x.shape) < keep) / keep
        return dc.mul(x, Tensor._wrap(mask, False))


EVAL = Ctx()


def linear(m: ToyModel, name: str, x: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, m[name + ".w"]), m[name + ".b"])


def norm(m: ToyModel, name: str, x: Tensor) -> Tensor:
    return dc.layer_norm(x, m[name + ".g"], m[name + ".b"])


def _split_heads(x: Tensor, n: int, heads: int) -> list[Tensor]:
    """(B, L, n*d) -> n tensors of shape (B, H, L, d/H)."""
    b, l, nd = x.shape
    dh = nd // (n * heads)
    x = dc.reshape(x, (b, l, n, heads, dh))
    x = dc.transpose(x, (2, 0, 3, 1, 4))
    return [dc.slice_(x, k) for k in range(n)]


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, ctx: Ctx) -> Tensor:
    dh = q.shape[-1]
    scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = dc.add(scores, Tensor._wrap(mask, False))
    return dc.matmul(dc.softmax(scores), v)


def key_mask(lengths: Sequence[int], n: int) -> np.ndarray:
    """Additive mask (B, 1, 1, n) hiding padded keys."""
    valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG), 1)[None, None]


def encoder_layer(m: ToyModel, pfx: str, x: Tensor, mask: np.ndarray, ctx: Ctx) -> Tensor:
    h = m.config.heads
    q, k, v = _split_heads(linear(m, pfx + ".qkv", norm(m, pfx + ".ln1", x)), 3, h)
    a = linear(m, pfx + ".out", _merge_heads(attention(q, k, v, mask, ctx)))
    x = dc.add(x, ctx.drop(a))
    f = linear(m, pfx + ".ff2", dc.gelu(linear(m, pfx + ".ff1", norm(m, pfx + ".ln2", x))))
    return dc.add(x, ctx.drop(f))


def decoder_layer(m: ToyModel, pfx: str, y: Tensor, mem: Tensor, self_mask: np.ndarray,
                  mem_mask: np.ndarray, ctx: Ctx) -> Tensor:
    h = m.config.heads
    q, k, v = _split_heads(linear(m, pfx + ".qkv", norm(m, pfx + ".ln1", y)), 3, h)
    y = dc.add(y, ctx.drop(linear(m, pfx + ".out", _merge_heads(attention(q, k, v, self_mask, ctx)))))
    (q,) = _split_heads(linear(m, pfx + ".xq", norm(m, pfx + ".lnx", y)), 1, h)
    k, v = _split_heads(linear(m, pfx + ".xkv", mem), 2, h)
    y = dc.add(y, ctx.drop(linear(m, pfx + ".xout", _merge_heads(attention(q, k, v, mem_mask, ctx)))))
    f = linear(m, pfx + ".ff2", dc.gelu(linear(m, pfx + ".ff1", norm(m, pfx + ".ln2", y))))
    return dc.add(y, ctx.drop(f))


def _length_mask(lengths: Sequence[int], n: int) -> np.ndarray:
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def downsampled_length(t: int) -> int:
    return -(-(-(-t // 2)) // 2)


def _stride2(m: ToyModel, name: str, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Kernel-5, stride-2, padding-2 windowed projection along time, then GELU."""
    b, t, d = x.shape
    t_out = -(-t // 2)
    zeros = Tensor._wrap(np.zeros((b, 2, d)), False)
    tail = Tensor._wrap(np.zeros((b, 2 * t_out + 3 - t - 2, d)), False)
    padded = dc.concat([zeros, x, tail], axis=1)
    windows = dc.concat([dc.slice_(padded, (slice(None), slice(k, k + 2 * t_out - 1, 2))) for k in range(5)], axis=2)
    out = dc.gelu(linear(m, name, windows))
    new_len = -(-lengths // 2)
    out = dc.mul(out, Tensor._wrap(_length_mask(new_len, t_out)[..., None], False))
    return out, new_len


# ---------------------------------------------------------------------------
# batched model pieces


def speech_encoder(m: ToyModel, frames: np.ndarray, lengths: Sequence[int], ctx: Ctx = EVAL) -> tuple[Tensor, np.ndarray]:
    """(B, T, d_in) padded frames -> (B, T', d) speech embeddings and lengths T'."""
    lengths = np.asarray(lengths, dtype=np.int64)
    b, t, _ = frames.shape
    x = linear(m, "speech.in", Tensor._wrap(np.asarray(frames, dtype=np.float64), False))
    x = dc.mul(x, Tensor._wrap(_length_mask(lengths, t)[..., None], False))
    x, n1 = _stride2(m, "speech.down1", x, lengths)
    x, n2 = _stride2(m, "speech.down2", x, n1)
    tp = x.shape[1]
    x = dc.add(x, Tensor._wrap(sinusoid(tp, m.config.d), False))
    x = ctx.drop(x)
    mask = key_mask(n2, tp)
    for i in range(m.config.n_speech):
        x = encoder_layer(m, f"speech.layer{i}", x, mask, ctx)
    return norm(m, "speech.ln_out", x), n2


def text_embeddings(m: ToyModel, ids: np.ndarray, ctx: Ctx = EVAL) -> Tensor:
    """(B, L) ids -> (B, L, d) scaled embeddings plus sinusoidal positions."""
    ids = np.asarray(ids, dtype=np.int64)
    l = ids.shape[1]
    e = dc.scale(dc.embedding(m["embed"], ids), math.sqrt(m.config.d))
    return dc.add(e, Tensor._wrap(sinusoid(l, m.config.d), False))


def translation_encoder(m: ToyModel, src: Tensor, lengths: Sequence[int], ctx: Ctx = EVAL) -> Tensor:
    x = ctx.drop(src)
    mask = key_mask(lengths, src.shape[1])
    for i in range(m.config.n_enc):
        x = encoder_layer(m, f"enc.layer{i}", x, mask, ctx)
    return norm(m, "enc.ln_out", x)


def decoder_logits(m: ToyModel, memory: Tensor, mem_lengths: Sequence[int], tgt_in: np.ndarray,
                   ctx: Ctx = EVAL) -> Tensor:
    """Teacher-forced logits (B, Lt, V) for decoder inputs ``tgt_in``."""
    lt = tgt_in.shape[1]
    y = ctx.drop(text_embeddings(m, tgt_in))
    self_mask = causal_mask(lt)
    mem_mask = key_mask(mem_lengths, memory.shape[1])
    for i in range(m.config.n_dec):
        y = decoder_layer(m, f"dec.layer{i}", y, memory, self_mask, mem_mask, ctx)
    y = norm(m, "dec.ln_out", y)
    return dc.add(dc.matmul(y, dc.transpose(m["embed"], (1, 0))), m["dec.out_bias"])


@dataclass
class Targets:
    """Teacher-forcing arrays for a batch of target sequences."""

    tgt_in: np.ndarray
    tgt_out: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, seqs: Sequence[Sequence[int]], vocab: Vocab | None = None, bos: int = 1, eos: int = 2) -> "Targets":
        if any(len(s) == 0 for s in seqs):
            raise ValueError("target sequences must be non-empty")
        n = max(len(s) for s in seqs) + 1
        tin = np.zeros((len(seqs), n), dtype=np.int64)
        tout = np.zeros((len(seqs), n), dtype=np.int64)
        mask = np.zeros((len(seqs), n))
        for i, s in enumerate(seqs):
            tin[i, : len(s) + 1] = [bos, *s]
            tout[i, : len(s) + 1] = [*s, eos]
            mask[i, : len(s) + 1] = 1.0
        return cls(tin, tout, mask)


def translate_logits(m: ToyModel, src: Tensor, src_lengths: Sequence[int], targets: Targets, ctx: Ctx = EVAL) -> Tensor:
    mem = translation_encoder(m, src, src_lengths, ctx)
    return decoder_logits(m, mem, src_lengths, targets.tgt_in, ctx)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(lens.max(initial=0), 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([f.shape[0] for f in frames], dtype=np.int64)
    d = frames[0].shape[1]
    out = np.zeros((len(frames), lens.max(), d))
    for i, f in enumerate(frames):
        out[i, : len(f)] = f
    return out, lens


# ---------------------------------------------------------------------------
# single-utterance API


@dataclass
class EncoderOutput:
    frames: Tensor
    source: str

    @property
    def length(self) -> int:
        return self.frames.shape[0]


class InputTooShortError(ValueError):
    pass


def encode_speech(frames: np.ndarray, model: ToyModel, ctx: Ctx = EVAL) -> EncoderOutput:
    """T x d_in frames -> T' x d speech embeddings, T' = ceil(ceil(T/2)/2)."""
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if t < model.config.min_frames:
        raise InputTooShortError(f"speech input has {t} frames, need at least {model.config.min_frames}")
    if t > model.config.max_frames:
        raise ValueError(f"speech input has {t} frames, limit is {model.config.max_frames}")
    if frames.ndim != 2 or frames.shape[1] != model.config.d_in:
        raise dc.ShapeError("encode_speech", frames.shape)
    out, _ = speech_encoder(model, frames[None], [t], ctx)
    return EncoderOutput(dc.reshape(out, out.shape[1:]), "speech")


def embed_text(tokens: Sequence[int], model: ToyModel) -> EncoderOutput:
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise KeyError(f"token id out of vocabulary (size {model.config.vocab_size})")
    e = text_embeddings(model, ids)
    return EncoderOutput(dc.reshape(e, e.shape[1:]), "text")


def translate_forward(src: EncoderOutput, tgt_tokens: Sequence[int], model: ToyModel,
                      ctx: Ctx = EVAL) -> tuple[Tensor, Tensor]:
    """Teacher-forced log-probs ((|y|+1) x V, eos included) and mean cross-entropy."""
    targets = Targets.build([list(tgt_tokens)])
    s = dc.reshape(src.frames, (1, *src.frames.shape))
    logits = translate_logits(model, s, [src.length], targets, ctx)
    logits = dc.reshape(logits, logits.shape[1:])
    return dc.log_softmax(logits), dc.cross_entropy(logits, targets.tgt_out[0])


_BANNED = (0, 1, 3)


# Incremental decoding.  Plain numpy, no graph: keys and values of earlier
# target positions are cached so each step costs one position per layer.


def _np_lin(m: ToyModel, name: str, x: np.ndarray) -> np.ndarray:
    return x @ m[name + ".w"].values + m[name + ".b"].values


def _np_norm(m: ToyModel, name: str, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    c = x - x.mean(-1, keepdims=True)
    return c / np.sqrt((c * c).mean(-1, keepdims=True) + eps) * m[name + ".g"].values + m[name + ".b"].values


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(dc._GELU_C * x * (1.0 + 0.044715 * x * x)))


def _np_heads(x: np.ndarray, n: int, heads: int) -> np.ndarray:
    """(B, L, n*d) -> (n, B, H, L, d/H)."""
    b, l, nd = x.shape
    return x.reshape(b, l, n, heads, nd // (n * heads)).transpose(2, 0, 3, 1, 4)


def _np_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        s = s + mask
    s = np.exp(s - s.max(-1, keepdims=True))
    out = (s / s.sum(-1, keepdims=True)) @ v
    b, h, l, dh = out.shape
    return out.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


@dataclass
class DecoderState:
    keys: list[np.ndarray]
    values: list[np.ndarray]
    mem_keys: list[np.ndarray]
    mem_values: list[np.ndarray]
    mem_mask: np.ndarray
    t: int = 0

    def select(self, rows: np.ndarray) -> "DecoderState":
        rows = np.asarray(rows)
        return DecoderState([k[rows] for k in self.keys], [v[rows] for v in self.values],
                            [k[rows] for k in self.mem_keys], [v[rows] for v in self.mem_values],
                            self.mem_mask[rows], self.t)


def decoder_start(m: ToyModel, memory: np.ndarray, mem_lengths: Sequence[int]) -> DecoderState:
    """Cache cross-attention keys/values of an encoded source batch (B, M, d)."""
    h = m.config.heads
    mk, mv = [], []
    for i in range(m.config.n_dec):
        k, v = _np_heads(_np_lin(m, f"dec.layer{i}.xkv", memory), 2, h)
        mk.append(k)
        mv.append(v)
    b = memory.shape[0]
    empty = np.zeros((b, h, 0, m.config.d // h))
    return DecoderState([empty] * m.config.n_dec, [empty] * m.config.n_dec, mk, mv,
                        key_mask(mem_lengths, memory.shape[1]))


def decoder_step(m: ToyModel, state: DecoderState, tokens: np.ndarray) -> np.ndarray:
    """Feed one token per row; returns next-token log-probs (B, V) and advances ``state``."""
    c = m.config
    tokens = np.asarray(tokens, dtype=np.int64)
    y = m["embed"].values[tokens] * math.sqrt(c.d) + sinusoid(state.t + 1, c.d)[state.t]
    y = y[:, None, :]
    for i in range(c.n_dec):
        p = f"dec.layer{i}"
        q, k, v = _np_heads(_np_lin(m, p + ".qkv", _np_norm(m, p + ".ln1", y)), 3, c.heads)
        state.keys[i] = np.concatenate([state.keys[i], k], axis=2)
        state.values[i] = np.concatenate([state.values[i], v], axis=2)
        y = y + _np_lin(m, p + ".out", _np_attend(q, state.keys[i], state.values[i], None))
        (q,) = _np_heads(_np_lin(m, p + ".xq", _np_norm(m, p + ".lnx", y)), 1, c.heads)
        y = y + _np_lin(m, p + ".xout", _np_attend(q, state.mem_keys[i], state.mem_values[i], state.mem_mask))
        y = y + _np_lin(m, p + ".ff2", _np_gelu(_np_lin(m, p + ".ff1", _np_norm(m, p + ".ln2", y))))
    state.t += 1
    logits = _np_norm(m, "dec.ln_out", y[:, 0]) @ m["embed"].values.T + m["dec.out_bias"].values
    logits = logits - logits.max(-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


def _encode_memory(model: ToyModel, src: Tensor, lengths: Sequence[int]) -> np.ndarray:
    return translation_encoder(model, src.detach(), lengths).values


def beam_search(model: ToyModel, src: EncoderOutput, beam: int = 5, max_len: int = 40) -> tuple[list[int], float]:
    """Returns (tokens without eos, length-normalized log-prob).

    Each step keeps the ``beam`` best expansions by cumulative log-prob;
    expansions ending in eos are set aside as finished.  At ``max_len`` every
    expansion is final.  The winner maximizes log-prob divided by the number
    of emitted tokens (eos included).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    f = src.frames.detach()
    memory = _encode_memory(model, dc.reshape(f, (1, *f.shape)), [src.length])
    return _beam_from_memory(model, memory, src.length, beam, max_len)


def _beam_from_memory(model: ToyModel, memory: np.ndarray, mem_len: int, beam: int, max_len: int):
    state = decoder_start(model, memory[:, :mem_len], [mem_len])
    eos = 2
    hyps: list[list[int]] = [[]]
    scores = np.zeros(1)
    finished: list[tuple[list[int], float]] = []
    last = np.array([1])
    for t in range(1, max_len + 1):
        lp = decoder_step(model, state, last)
        lp[:, list(_BANNED)] = -np.inf
        total = (scores[:, None] + lp).ravel()
        # stable sort on -score keeps (hypothesis, token) order among ties
        order = np.argsort(-total, kind="stable")
        order = order[np.isfinite(total[order])]
        v_size = lp.shape[1]
        if t == max_len:
            finished += [(hyps[o // v_size] + [int(o % v_size)], float(total[o])) for o in order]
            break
        keep, parents = [], []
        for o in order[:beam]:
            i, v = divmod(int(o), v_size)
            toks = hyps[i] + [v]
            if v == eos:
                finished.append((toks, float(total[o])))
            else:
                keep.append((toks, float(total[o])))
                parents.append(i)
        if not keep:
            break
        hyps = [h for h, _ in keep]
        scores = np.array([sc for _, sc in keep])
        state = state.select(np.array(parents))
        last = np.array([h[-1] for h in hyps])
    best_toks, best_score = max(finished, key=lambda h: h[1] / len(h[0]))
    out = best_toks[:-1] if best_toks[-1] == eos else best_toks
    return out, best_score / len(best_toks)


def beam_decode(src: EncoderOutput, model: ToyModel, beam: int = 5, max_len: int = 40) -> list[int]:
    return beam_search(model, src, beam, max_len)[0]


def beam_decode_batch(model: ToyModel, src: Tensor, src_lengths: Sequence[int], beam: int = 5,
                      max_len: int = 40) -> list[list[int]]:
    """Beam search per row of a padded source batch (encoder run once for the batch)."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    memory = _encode_memory(model, src, src_lengths)
    return [_beam_from_memory(model, memory[i:i + 1], int(n), beam, max_len)[0] for i, n in enumerate(src_lengths)]


def greedy_decode_batch(model: ToyModel, src: Tensor, src_lengths: Sequence[int], max_len: int = 40) -> list[list[int]]:
    """Argmax decoding of a padded batch of sources."""
    memory = _encode_memory(model, src, src_lengths)
    state = decoder_start(model, memory, src_lengths)
    b = src.shape[0]
    last = np.ones(b, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len):
        lp = decoder_step(model, state, last)
        lp[:, list(_BANNED)] = -np.inf
        nxt = lp.argmax(-1)
        for i in np.flatnonzero(~done):
            if nxt[i] == 2:
                done[i] = True
            else:
                outs[i].append(int(nxt[i]))
        if done.all():
            break
        last = nxt
    return outs


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CMRTCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: ToyModel, path: str | Path, meta: dict | None = None) -> None:
    """Versioned binary: header, JSON metadata, then named float64 tensors with shape headers."""
    blob = json.dumps({"config": asdict(model.config), "meta": meta or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, len(blob), len(model.params)), blob]
    for name, t in model.params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.values.ndim) + struct.pack(f"<{t.values.ndim}I", *t.values.shape))
        parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[ToyModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, blob_len, n = struct.unpack_from("<III", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    info = json.loads(raw[off:off + blob_len])
    off += blob_len
    params = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            (nd,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{nd}I", raw, off + 1)
            off += 1 + 4 * nd
            count = int(np.prod(shape)) if nd else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
            params[name] = Tensor(arr, requires_grad=True, name=name)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    return ToyModel(ModelConfig(**info["config"]), params), info["meta"]
