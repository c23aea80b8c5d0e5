"""BLEU, linear CKA, speech/text alignment cosine and CSV reports."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_ORDER = 4
FLOOR_EPS = 0.1


class DegenerateInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU


def _tokens(s: str | Sequence[str]) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def _ngram_stats(hyp: list[str], ref: list[str]) -> tuple[list[int], list[int]]:
    correct, total = [], []
    for n in range(1, MAX_ORDER + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        correct.append(sum(min(c, r[g]) for g, c in h.items()))
        total.append(max(len(hyp) - n + 1, 0))
    return correct, total


def _brevity(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)


def bleu(hypotheses: Sequence[str | Sequence[str]], references: Sequence[str | Sequence[str]],
         level: str = "corpus") -> float:
    """BLEU-4 in [0, 100] on whitespace tokens.

    ``corpus`` pools n-gram counts over all sentences with no smoothing.
    ``sentence`` returns the mean of per-sentence scores, where a zero n-gram
    precision is floored to ``0.1 / total`` and only orders that the
    hypothesis is long enough to have are used.  A sentence sharing no
    unigram with its reference scores 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if level == "sentence":
        if not hypotheses:
            return 0.0
        return float(np.mean([sentence_bleu(h, r) for h, r in zip(hypotheses, references)]))
    if level != "corpus":
        raise ValueError(f"unknown BLEU level {level!r}")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hl = rl = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        c, t = _ngram_stats(h, r)
        correct = [a + b for a, b in zip(correct, c)]
        total = [a + b for a, b in zip(total, t)]
        hl += len(h)
        rl += len(r)
    if any(c == 0 for c in correct) or any(t == 0 for t in total):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(correct, total)) / MAX_ORDER
    return 100.0 * _brevity(hl, rl) * math.exp(log_p)


def sentence_bleu(hypothesis: str | Sequence[str], reference: str | Sequence[str], eps: float = FLOOR_EPS) -> float:
    h, r = _tokens(hypothesis), _tokens(reference)
    correct, total = _ngram_stats(h, r)
    if not any(correct):
        return 0.0
    logs = []
    for c, t in zip(correct, total):
        if t == 0:
            break
        logs.append(math.log((c if c > 0 else eps) / t))
    if not logs:
        return 0.0
    return 100.0 * _brevity(len(h), len(r)) * math.exp(sum(logs) / len(logs))


# ---------------------------------------------------------------------------
# CKA


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two representations of the same ``n`` items."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"linear_cka: need (n, d) inputs with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise DegenerateInputError("linear_cka: need at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("linear_cka: a centered Gram matrix is zero")
    return float(np.linalg.norm(xc.T @ yc) ** 2 / (nx * ny))


# ---------------------------------------------------------------------------
# representation probes


def _pairs(model, utts, vocab, max_piece_len: int, batch_size: int):
    from .objectives import make_batch, pooled_batch
    from .model import speech_encoder, text_embeddings

    for i in range(0, len(utts), batch_size):
        b = make_batch(utts[i:i + batch_size], vocab, max_piece_len)
        a, _ = speech_encoder(model, b.frames, b.frame_lens)
        e = text_embeddings(model, b.src_ids)
        fs, ft = pooled_batch(a, e, b)
        yield fs.values, ft.values


def pair_cosines(model, utts, vocab, max_piece_len: int = 3, batch_size: int = 64) -> np.ndarray:
    """cos(f_s, f_t) for every word of every utterance."""
    out = []
    for fs, ft in _pairs(model, utts, vocab, max_piece_len, batch_size):
        num = (fs * ft).sum(1)
        den = np.linalg.norm(fs, axis=1) * np.linalg.norm(ft, axis=1)
        out.append(num / den)
    return np.concatenate(out) if out else np.zeros(0)


def alignment_cosine(model, utts, vocab, max_piece_len: int = 3) -> float:
    """Mean cosine between mean-pooled speech and text embeddings of each word."""
    c = pair_cosines(model, utts, vocab, max_piece_len)
    if c.size == 0:
        raise ValueError("alignment_cosine: no words")
    return float(c.mean())


CKA_LAYER = "enc.ln_out"


def sentence_representations(model, utts, vocab, source: str = "speech", max_piece_len: int = 3,
                             batch_size: int = 64) -> np.ndarray:
    """Per-sentence mean of the translation-encoder output, one row per utterance."""
    from .objectives import make_batch
    from .model import speech_encoder, text_embeddings, translation_encoder

    rows = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        b = make_batch(chunk, vocab, max_piece_len)
        if source == "speech":
            src, lens = speech_encoder(model, b.frames, b.frame_lens)
        else:
            src, lens = text_embeddings(model, b.src_ids), b.src_lens
        h = translation_encoder(model, src, lens).values
        mask = (np.arange(h.shape[1])[None, :] < np.asarray(lens)[:, None])[..., None]
        rows.append((h * mask).sum(1) / np.asarray(lens)[:, None])
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("model", "dataset", "bleu", "mean_cosine", "cka_vs_ref", "lambda_kl", "seed")


@dataclass
class SimilarityReport:
    model: str
    dataset: str
    bleu: float
    mean_cosine: float | None = None
    cka_vs_ref: float | None = None
    lambda_kl: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.bleu <= 100.0:
            raise ValueError(f"BLEU out of range: {self.bleu}")
        if self.mean_cosine is not None and not -1.0 - 1e-9 <= self.mean_cosine <= 1.0 + 1e-9:
            raise ValueError(f"cosine out of range: {self.mean_cosine}")
        if self.cka_vs_ref is not None and not -1e-9 <= self.cka_vs_ref <= 1.0 + 1e-9:
            raise ValueError(f"CKA out of range: {self.cka_vs_ref}")

    def row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.6f}"
            return str(v)

        return [fmt(getattr(self, c)) for c in REPORT_COLUMNS]

    def sort_key(self):
        return (self.model, self.dataset,
                -math.inf if self.lambda_kl is None else self.lambda_kl,
                -1 if self.seed is None else self.seed)


def report_csv(reports: Iterable[SimilarityReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in sorted(reports, key=SimilarityReport.sort_key):
        w.writerow(r.row())
    return buf.getvalue()


def emit_report(reports: Iterable[SimilarityReport], path: str | Path, metadata: dict | None = None) -> Path:
    """Write the CSV table, plus ``<path>.meta.json`` when metadata is given."""
    path = Path(path)
    try:
        path.write_text(report_csv(reports), encoding="utf-8")
        if metadata is not None:
            Path(str(path) + ".meta.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc.strerror or exc}") from exc
    return path


def read_report(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def translate(model, utts, vocab, source: str = "speech", beam: int = 5, max_len: int = 40,
              max_piece_len: int = 3, batch_size: int = 64) -> list[list[str]]:
    """Decode every utterance from its speech (or transcript) with beam search."""
    from .objectives import make_batch
    from .model import beam_decode_batch, greedy_decode_batch, speech_encoder, text_embeddings

    out: list[list[str]] = []
    for i in range(0, len(utts), batch_size):
        b = make_batch(utts[i:i + batch_size], vocab, max_piece_len)
        if source == "speech":
            src, lens = speech_encoder(model, b.frames, b.frame_lens)
        else:
            src, lens = text_embeddings(model, b.src_ids), b.src_lens
        if beam == 1:
            hyps = greedy_decode_batch(model, src, lens, max_len)
        else:
            hyps = beam_decode_batch(model, src, lens, beam, max_len)
        out += [vocab.decode(h) for h in hyps]
    return out


def corpus_bleu(model, utts, vocab, source: str = "speech", beam: int = 5, max_len: int = 40,
                max_piece_len: int = 3) -> float:
    hyps = translate(model, utts, vocab, source, beam, max_len, max_piece_len)
    return bleu(hyps, [u.y for u in utts])
