"""Training objectives: word pooling, word-aligned contrastive loss, mixup,
adversarial mixup, KL regularizers and the two combined losses.

Word indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import AlignedUtterance, WordAlignment, split_subwords
from .diffcore import Tensor
from .model import (Ctx, EVAL, Targets, ToyModel, Vocab, pad_batch, pad_frames, speech_encoder,
                    text_embeddings, translate_logits)

SPEECH, TEXT, ADV_TEXT = "speech", "text", "adv-text"


class SpanError(IndexError):
    pass


class ZeroVectorError(ValueError):
    pass


class Draws(Protocol):
    def random(self) -> float: ...


class ReplayDraws:
    """Feeds recorded uniform draws back in order."""

    def __init__(self, values: Sequence[float]):
        self.values = list(values)
        self.pos = 0

    def random(self) -> float:
        v = self.values[self.pos]
        self.pos += 1
        return float(v)


@dataclass
class TrainConfig:
    tau: float = 0.2
    p_star: float = 0.8
    lambda_ctr: float = 1.0
    lambda_kl: float = 2.0
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    beam: int = 5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.p_star <= 1.0:
            raise ValueError("p_star must lie in [0, 1]")
        if self.lambda_ctr < 0 or self.lambda_kl < 0:
            raise ValueError("loss weights must be non-negative")


def encoder_span(span: tuple[int, int], factor: int = 4) -> tuple[int, int]:
    """Frame span -> span over the downsampled speech embeddings (rounded outward)."""
    lo, hi = span
    return lo // factor, -(-hi // factor)


# ---------------------------------------------------------------------------
# pooling and contrastive loss


@dataclass
class PooledWordPair:
    index: int
    f_s: Tensor
    f_t: Tensor


def _check_span(span, n, what):
    lo, hi = span
    if not 0 <= lo < hi <= n:
        raise SpanError(f"{what} span {span} out of range for length {n}")


def pool_word_reps(a: Tensor, e: Tensor, alignments: Sequence[WordAlignment]) -> list[PooledWordPair]:
    """Mean-pool each word's speech rows of ``a`` and text rows of ``e``.

    Spans in ``alignments`` index ``a`` and ``e`` directly.
    """
    out = []
    for al in alignments:
        _check_span(al.speech, a.shape[0], "speech")
        _check_span(al.text, e.shape[0], "text")
        fs = dc.mean(dc.slice_(a, slice(*al.speech)), axis=0)
        ft = dc.mean(dc.slice_(e, slice(*al.text)), axis=0)
        out.append(PooledWordPair(al.index, fs, ft))
    return out


def _stack(vectors: Sequence[Tensor]) -> Tensor:
    return dc.concat([dc.reshape(v, (1, v.shape[-1])) for v in vectors], axis=0)


def contrastive_loss_matrix(fs: Tensor, ft: Tensor, tau: float) -> Tensor:
    """InfoNCE over rows: row i of ``fs`` is positive with row i of ``ft``, every other row is a negative."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if fs.shape[0] < 1 or fs.shape != ft.shape:
        raise dc.ShapeError("contrastive_loss", fs.shape, ft.shape)
    if (np.linalg.norm(fs.values, axis=1) == 0).any() or (np.linalg.norm(ft.values, axis=1) == 0).any():
        raise ZeroVectorError("contrastive_loss: zero vector, cosine undefined")
    sim = dc.scale(dc.cosine_matrix(fs, ft), 1.0 / tau)
    return dc.cross_entropy(sim, np.arange(fs.shape[0]))


def contrastive_loss(pairs: Sequence[PooledWordPair], tau: float) -> Tensor:
    if not pairs:
        raise ValueError("contrastive_loss: empty batch")
    return contrastive_loss_matrix(_stack([p.f_s for p in pairs]), _stack([p.f_t for p in pairs]), tau)


# ---------------------------------------------------------------------------
# mixup


@dataclass
class MixupSequence:
    segments: list[tuple[int, str, Tensor]]
    m: Tensor

    @property
    def tags(self) -> list[str]:
        return [tag for _, tag, _ in self.segments]


def mixup_choices(n_words: int, p_star: float, rng: Draws, adv_indices: Sequence[int] = ()) -> list[str]:
    """Per-word modality; one uniform draw is consumed for every word, attacked or not."""
    adv = set(adv_indices)
    tags = []
    for i in range(n_words):
        p = rng.random()
        if i in adv:
            tags.append(ADV_TEXT)
        else:
            tags.append(SPEECH if p < p_star else TEXT)
    return tags


def _assemble(tags, a, e, alignments, e_adv=None, adv_spans=None) -> MixupSequence:
    segs = []
    for al, tag in zip(alignments, tags):
        if tag == SPEECH:
            _check_span(al.speech, a.shape[0], "speech")
            block = dc.slice_(a, slice(*al.speech))
        elif tag == TEXT:
            _check_span(al.text, e.shape[0], "text")
            block = dc.slice_(e, slice(*al.text))
        else:
            span = adv_spans[al.index]
            _check_span(span, e_adv.shape[0], "adversarial text")
            block = dc.slice_(e_adv, slice(*span))
        segs.append((al.index, tag, block))
    return MixupSequence(segs, dc.concat([b for _, _, b in segs], axis=0))


def build_mixup(a: Tensor, e: Tensor, alignments: Sequence[WordAlignment], p_star: float, rng: Draws) -> MixupSequence:
    """Pick each word's speech rows when its draw is below ``p_star``, else its text rows."""
    tags = mixup_choices(len(alignments), p_star, rng)
    return _assemble(tags, a, e, alignments)


def build_adversarial_mixup(a: Tensor, e_clean: Tensor, e_adv: Tensor, adv_spans: dict[int, tuple[int, int]],
                            alignments: Sequence[WordAlignment], adv_indices: Sequence[int], p_star: float,
                            rng: Draws) -> MixupSequence:
    """Mixup where attacked words always take their adversarial text rows."""
    missing = [i for i in adv_indices if i not in adv_spans]
    if missing:
        raise KeyError(f"no adversarial span for attacked words {missing}")
    tags = mixup_choices(len(alignments), p_star, rng, adv_indices)
    return _assemble(tags, a, e_clean, alignments, e_adv, adv_spans)


# ---------------------------------------------------------------------------
# KL


def kl_divergence(log_p: Tensor, log_q: Tensor, mode: str = "sym", mask=None) -> Tensor:
    """Token-level KL averaged over target positions.

    ``asym`` is KL(P || Q); ``sym`` adds KL(Q || P).  Detach ``log_p``
    beforehand to treat P as a fixed teacher.
    """
    if log_p.shape != log_q.shape:
        raise dc.ShapeError("kl_divergence", log_p.shape, log_q.shape)
    fwd = dc.kl_from_log_probs(log_p, log_q, mask)
    if mode == "asym":
        return fwd
    if mode == "sym":
        return dc.add(fwd, dc.kl_from_log_probs(log_q, log_p, mask))
    raise ValueError(f"unknown KL mode {mode!r}")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Padded arrays for a list of utterances (and optional adversarial transcripts)."""

    frames: np.ndarray
    frame_lens: np.ndarray
    src_ids: np.ndarray
    src_lens: np.ndarray
    targets: Targets
    speech_spans: list[list[tuple[int, int]]]
    text_spans: list[list[tuple[int, int]]]
    adv_ids: np.ndarray | None = None
    adv_lens: np.ndarray | None = None
    adv_text_spans: list[list[tuple[int, int]]] | None = None
    adv_indices: list[list[int]] | None = None

    def __len__(self) -> int:
        return len(self.speech_spans)


def make_batch(utts: Sequence[AlignedUtterance], vocab: Vocab, max_piece_len: int = 3,
               adv_x: Sequence[Sequence[str]] | None = None,
               adv_indices: Sequence[Sequence[int]] | None = None) -> Batch:
    src, tspans = [], []
    for u in utts:
        pieces, spans = split_subwords(u.x, max_piece_len)
        src.append(vocab.encode(pieces))
        tspans.append(spans)
    src_ids, src_lens = pad_batch(src)
    frames, frame_lens = pad_frames([u.frames for u in utts])
    sspans = [[encoder_span(al.speech) for al in u.alignments] for u in utts]
    targets = Targets.build([vocab.encode(u.y) for u in utts])
    b = Batch(frames, frame_lens, src_ids, src_lens, targets, sspans, tspans)
    if adv_x is not None:
        adv, aspans = [], []
        for x in adv_x:
            pieces, spans = split_subwords(x, max_piece_len)
            adv.append(vocab.encode(pieces))
            aspans.append(spans)
        b.adv_ids, b.adv_lens = pad_batch(adv)
        b.adv_text_spans = aspans
        b.adv_indices = [list(ix) for ix in (adv_indices or [[] for _ in utts])]
    return b


def _flat(x: Tensor) -> Tensor:
    b, l, d = x.shape
    return dc.reshape(x, (b * l, d))


def pooled_batch(a: Tensor, e: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
    """Word-pooled speech and text rows for every word in the batch, (N, d) each."""
    bsz, ts, _ = a.shape
    lt = e.shape[1]
    wmax = max(len(s) for s in batch.speech_spans)
    ps = np.zeros((bsz, wmax, ts))
    pt = np.zeros((bsz, wmax, lt))
    rows = []
    for i, (ss, tt) in enumerate(zip(batch.speech_spans, batch.text_spans)):
        for w, ((l1, r1), (l2, r2)) in enumerate(zip(ss, tt)):
            ps[i, w, l1:r1] = 1.0 / (r1 - l1)
            pt[i, w, l2:r2] = 1.0 / (r2 - l2)
            rows.append(i * wmax + w)
    fs = dc.matmul(Tensor._wrap(ps, False), a)
    ft = dc.matmul(Tensor._wrap(pt, False), e)
    return dc.embedding(_flat(fs), rows), dc.embedding(_flat(ft), rows)


def batch_mixup_tags(batch: Batch, p_star: float, rng: Draws, adversarial: bool = False) -> list[list[str]]:
    return [mixup_choices(len(ss), p_star, rng, batch.adv_indices[i] if adversarial else ())
            for i, ss in enumerate(batch.speech_spans)]


def mixup_batch(a: Tensor, e: Tensor, batch: Batch, tags: list[list[str]],
                e_adv: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Gather each utterance's chosen segments into a padded (B, Lm, d) source."""
    bsz, ts, d = a.shape
    lt = e.shape[1]
    parts = [_flat(a), _flat(e)]
    base_e = bsz * ts
    base_adv = base_e + bsz * lt
    if e_adv is not None:
        parts.append(_flat(e_adv))
    table = dc.concat(parts, axis=0)
    rows: list[list[int]] = []
    for i, item_tags in enumerate(tags):
        r: list[int] = []
        for w, tag in enumerate(item_tags):
            if tag == SPEECH:
                lo, hi = batch.speech_spans[i][w]
                r.extend(i * ts + k for k in range(lo, hi))
            elif tag == TEXT:
                lo, hi = batch.text_spans[i][w]
                r.extend(base_e + i * lt + k for k in range(lo, hi))
            else:
                lo, hi = batch.adv_text_spans[i][w]
                r.extend(base_adv + i * e_adv.shape[1] + k for k in range(lo, hi))
        rows.append(r)
    ids, lens = pad_batch(rows)
    return dc.embedding(table, ids), lens


# ---------------------------------------------------------------------------
# combined losses

COMPONENTS = ("st", "mt", "ctr", "mix", "kl_s", "kl_x", "total")


@dataclass
class LossOutput:
    total: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)

    def breakdown(self) -> dict[str, float]:
        out = {k: 0.0 for k in COMPONENTS}
        out.update({k: float(v.values) for k, v in self.parts.items()})
        out["total"] = float(self.total.values)
        return out


def _log_probs(logits: Tensor) -> Tensor:
    return dc.log_softmax(logits)


def _weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    total = None
    for w, t in terms:
        t = t if w == 1.0 else dc.scale(t, w)
        total = t if total is None else dc.add(total, t)
    return total


def cmrt_tr_loss(batch: Batch, model: ToyModel, config: TrainConfig, rng: Draws,
                 ctx: Ctx = EVAL, *, use_ctr: bool = True, use_mixup: bool = True,
                 use_mt: bool = True) -> LossOutput:
    """ST + MT + lambda_ctr*CTR + MIX + lambda_kl*(KL(m<->s) + KL(m<->x))/2.

    The ``use_*`` switches drop terms for the ablation variants; with all of
    them off the loss is the plain ST objective.
    """
    tg = batch.targets
    a, a_lens = speech_encoder(model, batch.frames, batch.frame_lens, ctx)
    e = text_embeddings(model, batch.src_ids, ctx)
    logits_s = translate_logits(model, a, a_lens, tg, ctx)
    parts = {"st": dc.cross_entropy(logits_s, tg.tgt_out, tg.mask)}
    terms = [(1.0, parts["st"])]
    logits_x = None
    if use_mt or use_mixup:
        logits_x = translate_logits(model, e, batch.src_lens, tg, ctx)
    if use_mt:
        parts["mt"] = dc.cross_entropy(logits_x, tg.tgt_out, tg.mask)
        terms.append((1.0, parts["mt"]))
    if use_ctr:
        fs, ft = pooled_batch(a, e, batch)
        parts["ctr"] = contrastive_loss_matrix(fs, ft, config.tau)
        terms.append((config.lambda_ctr, parts["ctr"]))
    if use_mixup:
        tags = batch_mixup_tags(batch, config.p_star, rng)
        m, m_lens = mixup_batch(a, e, batch, tags)
        logits_m = translate_logits(model, m, m_lens, tg, ctx)
        parts["mix"] = dc.cross_entropy(logits_m, tg.tgt_out, tg.mask)
        lp_s, lp_x, lp_m = _log_probs(logits_s), _log_probs(logits_x), _log_probs(logits_m)
        parts["kl_s"] = kl_divergence(lp_s, lp_m, "sym", tg.mask)
        parts["kl_x"] = kl_divergence(lp_x, lp_m, "sym", tg.mask)
        terms += [(1.0, parts["mix"]), (config.lambda_kl / 2, parts["kl_s"]), (config.lambda_kl / 2, parts["kl_x"])]
    return LossOutput(_weighted_sum(terms), parts)


def cmrt_fn_loss(batch: Batch, model: ToyModel, config: TrainConfig, rng: Draws,
                 ctx: Ctx = EVAL) -> LossOutput:
    """ST + MT + adversarial MIX + lambda_kl*(KL(s->m~) + KL(x->m~))/2, teachers detached.

    Freezing the speech encoder is the caller's job (``ToyModel.set_frozen``).
    """
    if batch.adv_ids is None:
        raise ValueError("cmrt_fn_loss needs a batch with adversarial transcripts")
    tg = batch.targets
    a, a_lens = speech_encoder(model, batch.frames, batch.frame_lens, ctx)
    e = text_embeddings(model, batch.src_ids, ctx)
    e_adv = text_embeddings(model, batch.adv_ids, ctx)
    logits_s = translate_logits(model, a, a_lens, tg, ctx)
    logits_x = translate_logits(model, e, batch.src_lens, tg, ctx)
    tags = batch_mixup_tags(batch, config.p_star, rng, adversarial=True)
    m, m_lens = mixup_batch(a, e, batch, tags, e_adv)
    logits_m = translate_logits(model, m, m_lens, tg, ctx)
    lp_m = _log_probs(logits_m)
    parts = {
        "st": dc.cross_entropy(logits_s, tg.tgt_out, tg.mask),
        "mt": dc.cross_entropy(logits_x, tg.tgt_out, tg.mask),
        "mix": dc.cross_entropy(logits_m, tg.tgt_out, tg.mask),
        "kl_s": kl_divergence(_log_probs(logits_s).detach(), lp_m, "asym", tg.mask),
        "kl_x": kl_divergence(_log_probs(logits_x).detach(), lp_m, "asym", tg.mask),
    }
    terms = [(1.0, parts["st"]), (1.0, parts["mt"]), (1.0, parts["mix"]),
             (config.lambda_kl / 2, parts["kl_s"]), (config.lambda_kl / 2, parts["kl_x"])]
    return LossOutput(_weighted_sum(terms), parts)


def st_loss(batch: Batch, model: ToyModel, ctx: Ctx = EVAL) -> LossOutput:
    a, a_lens = speech_encoder(model, batch.frames, batch.frame_lens, ctx)
    ce = dc.cross_entropy(translate_logits(model, a, a_lens, batch.targets, ctx), batch.targets.tgt_out, batch.targets.mask)
    return LossOutput(ce, {"st": ce})


def mt_loss(batch: Batch, model: ToyModel, ctx: Ctx = EVAL) -> LossOutput:
    e = text_embeddings(model, batch.src_ids, ctx)
    ce = dc.cross_entropy(translate_logits(model, e, batch.src_lens, batch.targets, ctx), batch.targets.tgt_out, batch.targets.mask)
    return LossOutput(ce, {"mt": ce})
