"""Synthetic bilingual speech-translation corpus with exact word alignments.

Speech is generated from phonemes: every phoneme has a fixed base vector,
and each occurrence is rendered as 2-4 noisy copies of it.  Because the
generator knows where every word starts and ends, word alignments are exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import lexicon as lx
from .lexicon import InflectionLexicon, LexiconError

CONT = "##"
FRAME_MAGIC = b"CMRTFRM1"
RECORD_VERSION = 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class WordAlignment:
    """Half-open spans of word ``index`` in the speech and text sequences."""

    index: int
    speech: tuple[int, int]
    text: tuple[int, int]


@dataclass
class AlignedUtterance:
    id: str
    frames: np.ndarray
    x: list[str]
    y: list[str]
    alignments: list[WordAlignment]

    def check(self) -> None:
        if self.frames.ndim != 2 or not np.isfinite(self.frames).all():
            raise CorpusFormatError(f"{self.id}: frames must be a finite 2-D array")
        if len(self.alignments) != len(self.x):
            raise CorpusFormatError(f"{self.id}: {len(self.alignments)} alignments for {len(self.x)} words")
        s_end = t_end = 0
        for al in self.alignments:
            (ls, rs), (lt, rt) = al.speech, al.text
            if ls != s_end or rs <= ls or lt != t_end or rt <= lt:
                raise CorpusFormatError(f"{self.id}: alignment of word {al.index} is not contiguous")
            s_end, t_end = rs, rt
        if s_end != self.frames.shape[0]:
            raise CorpusFormatError(f"{self.id}: spans cover {s_end} frames, utterance has {self.frames.shape[0]}")


@dataclass
class SynthSpec:
    """Knobs of the synthetic language and speech generator."""

    d_in: int = 16
    frames_per_phoneme: tuple[int, int] = (2, 4)
    noise: float = 0.1
    max_piece_len: int = 3
    p_the: float = 0.4
    p_adj: float = 0.4
    p_object: float = 0.6
    p_adverb: float = 0.7
    seed: int = 1234
    lexicon: InflectionLexicon = field(default_factory=lx.toy_lexicon, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(derive_seed("phoneme-bases", self.seed))
        base = rng.standard_normal((len(lx.PHONEMES), self.d_in))
        base *= np.sqrt(self.d_in) / np.linalg.norm(base, axis=1, keepdims=True)
        self.base_vectors = base
        self.phoneme_index = {p: i for i, p in enumerate(lx.PHONEMES)}

    @property
    def base_norm(self) -> float:
        return float(np.sqrt(self.d_in))


# ---------------------------------------------------------------------------
# subwords


def split_subwords(tokens: Sequence[str], max_piece_len: int = 3) -> tuple[list[str], list[tuple[int, int]]]:
    """Fixed-width chunking; continuation pieces carry a ``##`` prefix.

    Returns the piece sequence and, per word, its half-open piece span.
    """
    if max_piece_len < 2:
        raise ValueError("max_piece_len must be at least 2")
    pieces: list[str] = []
    spans: list[tuple[int, int]] = []
    for w in tokens:
        start = len(pieces)
        for k in range(0, max(len(w), 1), max_piece_len):
            chunk = w[k:k + max_piece_len]
            pieces.append(chunk if k == 0 else CONT + chunk)
        spans.append((start, len(pieces)))
    return pieces, spans


def detokenize(pieces: Sequence[str]) -> list[str]:
    words: list[str] = []
    for p in pieces:
        if p.startswith(CONT) and words:
            words[-1] += p[len(CONT):]
        else:
            words.append(p)
    return words


# ---------------------------------------------------------------------------
# speech


def synthesize_speech(tokens: Sequence[str], spec: SynthSpec, seed: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Render ``tokens`` as frames; returns (T x d_in frames, per-word frame spans).

    Each word draws its durations and noise from its own stream keyed on
    (seed, word position), so replacing one word leaves the other words'
    frames unchanged.
    """
    lo, hi = spec.frames_per_phoneme
    sigma = spec.noise * spec.base_norm / np.sqrt(spec.d_in)
    blocks: list[np.ndarray] = []
    spans: list[tuple[int, int]] = []
    t = 0
    for i, w in enumerate(tokens):
        phon = spec.lexicon.phonemes(w)
        rng = np.random.default_rng(derive_seed(seed, "word", i))
        start = t
        for p in phon:
            if p not in spec.phoneme_index:
                raise LexiconError(f"unknown phoneme {p!r} in {w!r}")
            n = int(rng.integers(lo, hi + 1))
            noise = rng.standard_normal((n, spec.d_in)) * sigma
            blocks.append(spec.base_vectors[spec.phoneme_index[p]] + noise)
            t += n
        spans.append((start, t))
    frames = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, spec.d_in))
    return frames, spans


def decode_phonemes(frames: np.ndarray, spec: SynthSpec) -> tuple[str, ...]:
    """Nearest-base-vector classification with run collapsing."""
    if len(frames) == 0:
        return ()
    d = ((frames[:, None, :] - spec.base_vectors[None]) ** 2).sum(-1)
    idx = d.argmin(1)
    out = [lx.PHONEMES[idx[0]]]
    for k in idx[1:]:
        if lx.PHONEMES[k] != out[-1]:
            out.append(lx.PHONEMES[k])
    return tuple(out)


def make_utterance(uid: str, x: Sequence[str], y: Sequence[str], spec: SynthSpec, seed: int) -> AlignedUtterance:
    frames, sspans = synthesize_speech(x, spec, seed)
    _, tspans = split_subwords(x, spec.max_piece_len)
    als = [WordAlignment(i, s, t) for i, (s, t) in enumerate(zip(sspans, tspans))]
    return AlignedUtterance(uid, frames, list(x), list(y), als)


# ---------------------------------------------------------------------------
# grammar


def _np(rng, number: str, spec: SynthSpec) -> tuple[list[str], list[str]]:
    noun = rng.choice(list(lx.NOUNS))
    if rng.random() < spec.p_the:
        det = "the"
    else:
        det = "a" if number == "sg" else "two"
    src, tgt = [det], [lx.DETERMINERS[det]]
    if rng.random() < spec.p_adj:
        adj = rng.choice(list(lx.ADJECTIVES))
        degree = rng.choice(["base", "cmp", "sup"])
        intens = {"base": "very", "cmp": "even", "sup": "most"}[degree]
        src += [intens, lx.adj_forms(adj)[degree]]
        tgt += [lx.INTENSIFIERS[intens], lx.ADJECTIVES[adj]]
        if degree != "base":
            tgt.append(lx.MARKERS[degree])
    src.append(lx.noun_forms(noun)[number])
    tgt.append(lx.NOUNS[noun])
    if number == "pl":
        tgt.append(lx.MARKERS["pl"])
    return src, tgt


_ADVERB = {"past": "yesterday", "prog": "now", "pres": "often"}


def generate_sentence(rng: np.random.Generator, spec: SynthSpec) -> tuple[list[str], list[str]]:
    """One SVO source sentence and its verb-final translation."""
    subj_num = rng.choice(["sg", "pl"])
    subj_src, subj_tgt = _np(rng, subj_num, spec)
    verb = rng.choice(list(lx.VERBS))
    tense = rng.choice(["past", "prog", "pres"])
    forms = lx.verb_forms(verb)
    if tense == "past":
        vform, marker = forms["ed"], lx.MARKERS["past"]
    elif tense == "prog":
        vform, marker = forms["ing"], lx.MARKERS["prog"]
    elif subj_num == "sg":
        vform, marker = forms["s"], lx.MARKERS["pres_sg"]
    else:
        vform, marker = forms["base"], lx.MARKERS["pres_pl"]
    src = subj_src + [vform]
    obj_tgt: list[str] = []
    if rng.random() < spec.p_object:
        obj_src, obj_tgt = _np(rng, rng.choice(["sg", "pl"]), spec)
        src += obj_src
    adv_tgt: list[str] = []
    if rng.random() < spec.p_adverb:
        adv = _ADVERB[tense]
        src.append(adv)
        adv_tgt = [lx.ADVERBS[adv]]
    tgt = subj_tgt + adv_tgt + obj_tgt + [lx.VERBS[verb], marker]
    return [str(w) for w in src], [str(w) for w in tgt]


def vocabulary_tokens(spec: SynthSpec) -> list[str]:
    """Every source subword piece and target word the toy language can produce.

    Built from the lexicon rather than a corpus so that attacked transcripts
    never fall out of vocabulary.
    """
    src = [w.word for w in spec.lexicon]
    pieces, _ = split_subwords(src, spec.max_piece_len)
    tgt = [*lx.VERBS.values(), *lx.NOUNS.values(), *lx.ADJECTIVES.values(), *lx.DETERMINERS.values(),
           *lx.INTENSIFIERS.values(), *lx.ADVERBS.values(), *lx.MARKERS.values()]
    return sorted(set(pieces)) + sorted(set(tgt) - set(pieces))


@dataclass
class CorpusSplits:
    train: list[AlignedUtterance]
    dev: list[AlignedUtterance]
    test: list[AlignedUtterance]

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))


def generate_corpus(spec: SynthSpec, n: int, seed: int) -> CorpusSplits:
    """``n`` distinct sentences split 80/10/10 (train/dev/test)."""
    if n < 30:
        raise ValueError(f"corpus size must be at least 30, got {n}")
    rng = np.random.default_rng(derive_seed("sentences", seed))
    seen: set[tuple[str, ...]] = set()
    pairs: list[tuple[list[str], list[str]]] = []
    while len(pairs) < n:
        x, y = generate_sentence(rng, spec)
        if tuple(x) in seen:
            continue
        seen.add(tuple(x))
        pairs.append((x, y))
    n_train, n_dev = (8 * n) // 10, n // 10
    utts = [make_utterance(f"utt{i:05d}", x, y, spec, derive_seed(seed, f"utt{i:05d}"))
            for i, (x, y) in enumerate(pairs)]
    return CorpusSplits(utts[:n_train], utts[n_train:n_train + n_dev], utts[n_train + n_dev:])


def utterance_seed(global_seed: int, uid: str) -> int:
    return derive_seed(global_seed, uid)


# ---------------------------------------------------------------------------
# persistence


def write_corpus(utts: Iterable[AlignedUtterance], path: str | Path) -> None:
    """Write ``path`` (JSON lines) and ``path + '.frames'`` (float64 sidecar)."""
    path = Path(path)
    utts = list(utts)
    d_in = utts[0].frames.shape[1] if utts else 0
    offset = 0
    lines = []
    with open(str(path) + ".frames", "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<I", d_in))
        for u in utts:
            rec = {
                "v": RECORD_VERSION,
                "id": u.id,
                "x": " ".join(u.x),
                "y": " ".join(u.y),
                "speech_spans": [list(a.speech) for a in u.alignments],
                "text_spans": [list(a.text) for a in u.alignments],
                "frames_offset": offset,
                "n_frames": int(u.frames.shape[0]),
            }
            fh.write(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
            offset += u.frames.shape[0]
            lines.append(json.dumps(rec, separators=(",", ":")))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_records(path: str | Path) -> list[dict]:
    """Parse the JSON-lines records only (no speech)."""
    text = Path(path).read_text(encoding="utf-8")
    recs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if rec.get("v") != RECORD_VERSION:
                raise CorpusFormatError(f"{path}:{lineno}: unsupported record version {rec.get('v')!r}")
            for key in ("id", "x", "y", "speech_spans", "text_spans", "frames_offset", "n_frames"):
                if key not in rec:
                    raise CorpusFormatError(f"{path}:{lineno}: missing field {key!r}")
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
        recs.append(rec)
    return recs


def read_corpus(path: str | Path) -> list[AlignedUtterance]:
    path = Path(path)
    recs = read_records(path)
    if not recs:
        return []
    raw = Path(str(path) + ".frames").read_bytes()
    if raw[:8] != FRAME_MAGIC or len(raw) < 12:
        raise CorpusFormatError(f"{path}.frames: bad header")
    (d_in,) = struct.unpack("<I", raw[8:12])
    data = np.frombuffer(raw, dtype="<f8", offset=12)
    n_rows = data.size // d_in if d_in else 0
    out = []
    for rec in recs:
        lo, n = rec["frames_offset"], rec["n_frames"]
        if lo + n > n_rows:
            raise CorpusFormatError(f"{path}.frames: truncated, frames of utterance {rec['id']} missing")
        frames = data[lo * d_in:(lo + n) * d_in].reshape(n, d_in).astype(np.float64)
        als = [WordAlignment(i, tuple(s), tuple(t))
               for i, (s, t) in enumerate(zip(rec["speech_spans"], rec["text_spans"]))]
        u = AlignedUtterance(rec["id"], frames, rec["x"].split(), rec["y"].split(), als)
        u.check()
        out.append(u)
    return out
