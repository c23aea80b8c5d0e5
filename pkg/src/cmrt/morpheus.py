"""Inflectional adversarial attack on transcripts, re-synthesized as speech.

The attack walks the transcript left to right.  At every verb, noun or
adjective it tries each same-lemma inflection whose pronunciation differs
from the current word, and keeps the one that hurts the victim most.  The
victim is scored through its text path; the perturbed transcript is then
turned into speech with the corpus synthesizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .analysis import sentence_bleu
from .corpus import AlignedUtterance, SynthSpec, make_utterance, split_subwords
from .lexicon import ATTACKABLE, InflectionLexicon
from .model import Targets, ToyModel, Vocab, greedy_decode_batch, pad_batch, text_embeddings, translate_logits

Scorer = Callable[[Sequence[str]], float]
BatchScorer = Callable[[Sequence[Sequence[str]], Sequence[Sequence[str]]], list[float]]


class AttackError(RuntimeError):
    pass


def tag_pos(tokens: Sequence[str], lexicon: InflectionLexicon) -> list[str]:
    return [lexicon.pos(t) for t in tokens]


def candidate_inflections(word: str, lexicon: InflectionLexicon) -> list[str]:
    """Other inflections of ``word``'s lemma with the same POS, in lexicon order."""
    if word not in lexicon or lexicon.pos(word) not in ATTACKABLE:
        return []
    e = lexicon.entries[word]
    return [f for f in e.inflections if f != word and lexicon.pos(f) == e.pos]


def filter_homophones(original: str, candidates: Sequence[str], lexicon: InflectionLexicon) -> list[str]:
    ref = lexicon.phonemes(original)
    return [c for c in candidates if lexicon.phonemes(c) != ref]


def attack_candidates(word: str, lexicon: InflectionLexicon) -> list[str]:
    return filter_homophones(word, candidate_inflections(word, lexicon), lexicon)


@dataclass
class PositionTrial:
    """What the search saw at one attackable position."""

    index: int
    original: str
    candidates: list[str]
    scores: list[float]
    score_before: float
    chosen: str


@dataclass
class AdversarialText:
    x: list[str]
    x_adv: list[str]
    indices: list[int]
    pairs: dict[int, tuple[str, str]]
    score_before: float
    score_after: float
    trials: list[PositionTrial] = field(default_factory=list)

    def validate(self, lexicon: InflectionLexicon) -> None:
        """Raise AttackError unless x_adv differs from x exactly at the recorded,
        lemma- and POS-preserving, non-homophone replacements."""
        if len(self.x) != len(self.x_adv):
            raise AttackError("perturbed transcript changed length")
        diff = [i for i, (a, b) in enumerate(zip(self.x, self.x_adv)) if a != b]
        if diff != sorted(self.indices):
            raise AttackError(f"perturbed positions {diff} != recorded {sorted(self.indices)}")
        for i in self.indices:
            orig, adv = self.pairs[i]
            if (orig, adv) != (self.x[i], self.x_adv[i]):
                raise AttackError(f"position {i}: pair {orig}->{adv} does not match transcripts")
            if lexicon.pos(orig) not in ATTACKABLE or lexicon.pos(adv) != lexicon.pos(orig):
                raise AttackError(f"position {i}: POS changed or not attackable ({orig}->{adv})")
            if lexicon.lemma(adv) != lexicon.lemma(orig):
                raise AttackError(f"position {i}: lemma changed ({orig}->{adv})")
            if lexicon.phonemes(adv) == lexicon.phonemes(orig):
                raise AttackError(f"position {i}: homophone replacement ({orig}->{adv})")

    def record(self, uid: str) -> dict:
        return {"id": uid, "x": self.x, "x_adv": self.x_adv, "indices": self.indices,
                "score_before": self.score_before, "score_after": self.score_after}


def _choose(scores: Sequence[float], current: float) -> int | None:
    """Index of the winning candidate, or None to keep the current word (ties keep it)."""
    if not scores:
        return None
    best = min(range(len(scores)), key=lambda k: (scores[k], k))
    return best if scores[best] < current else None


def greedy_attack(tokens: Sequence[str], scorer: Scorer, lexicon: InflectionLexicon) -> AdversarialText:
    """Left-to-right greedy search; every position commits before the next is tried."""
    x = list(tokens)
    cur = list(x)
    current = float(scorer(cur))
    before = current
    trials, idx, pairs = [], [], {}
    for i, word in enumerate(x):
        cands = attack_candidates(word, lexicon)
        if not cands:
            continue
        scores = []
        for c in cands:
            trial = cur[:i] + [c] + cur[i + 1:]
            try:
                scores.append(float(scorer(trial)))
            except Exception as exc:
                raise AttackError(f"scorer failed at position {i} ({word!r} -> {c!r}): {exc}") from exc
        k = _choose(scores, current)
        chosen = word if k is None else cands[k]
        trials.append(PositionTrial(i, word, cands, scores, current, chosen))
        if k is not None:
            cur[i] = chosen
            current = scores[k]
            idx.append(i)
            pairs[i] = (word, chosen)
    return AdversarialText(x, cur, idx, pairs, before, current, trials)


def batch_greedy_attack(sentences: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                        scorer: BatchScorer, lexicon: InflectionLexicon) -> list[AdversarialText]:
    """``greedy_attack`` run in lockstep over many sentences.

    Round ``k`` handles each sentence's k-th attackable position, so every
    round needs one call to the batch scorer.  Results equal running
    ``greedy_attack`` per sentence with the same scorer.
    """
    xs = [list(s) for s in sentences]
    cur = [list(s) for s in xs]
    positions = [[i for i, w in enumerate(x) if attack_candidates(w, lexicon)] for x in xs]
    current = list(scorer(cur, references)) if xs else []
    before = list(current)
    trials: list[list[PositionTrial]] = [[] for _ in xs]
    rounds = max((len(p) for p in positions), default=0)
    for r in range(rounds):
        queries, refs, owners = [], [], []
        for s, pos in enumerate(positions):
            if r >= len(pos):
                continue
            i = pos[r]
            for c in attack_candidates(xs[s][i], lexicon):
                queries.append(cur[s][:i] + [c] + cur[s][i + 1:])
                refs.append(references[s])
                owners.append((s, c))
        scores = list(scorer(queries, refs)) if queries else []
        by_sent: dict[int, list[tuple[str, float]]] = {}
        for (s, c), sc in zip(owners, scores):
            by_sent.setdefault(s, []).append((c, float(sc)))
        for s, got in by_sent.items():
            i = positions[s][r]
            cands = [c for c, _ in got]
            sc = [v for _, v in got]
            k = _choose(sc, current[s])
            chosen = xs[s][i] if k is None else cands[k]
            trials[s].append(PositionTrial(i, xs[s][i], cands, sc, current[s], chosen))
            if k is not None:
                cur[s][i] = chosen
                current[s] = sc[k]
    out = []
    for s, x in enumerate(xs):
        idx = [t.index for t in trials[s] if t.chosen != t.original]
        pairs = {t.index: (t.original, t.chosen) for t in trials[s] if t.chosen != t.original}
        out.append(AdversarialText(x, cur[s], idx, pairs, before[s], current[s], trials[s]))
    return out


# ---------------------------------------------------------------------------
# victim scorers


class VictimScorer:
    """Scores transcripts through a model's text path; lower is worse for the victim.

    ``bleu``: smoothed sentence BLEU of the greedy translation against the
    reference.  ``nll``: negative mean reference cross-entropy (so the
    attack maximizes the reference loss).
    """

    def __init__(self, model: ToyModel, vocab: Vocab, objective: str = "bleu", max_piece_len: int = 3,
                 max_len: int = 40, batch_size: int = 256):
        if objective not in ("bleu", "nll"):
            raise ValueError(f"unknown attack objective {objective!r}")
        self.model, self.vocab, self.objective = model, vocab, objective
        self.max_piece_len, self.max_len, self.batch_size = max_piece_len, max_len, batch_size

    def _ids(self, sents):
        return [self.vocab.encode(split_subwords(s, self.max_piece_len)[0]) for s in sents]

    def translate(self, sents: Sequence[Sequence[str]]) -> list[list[str]]:
        out = []
        for k in range(0, len(sents), self.batch_size):
            ids, lens = pad_batch(self._ids(sents[k:k + self.batch_size]))
            src = text_embeddings(self.model, ids)
            out += [self.vocab.decode(h) for h in greedy_decode_batch(self.model, src, lens, self.max_len)]
        return out

    def nll(self, sents, refs) -> list[float]:
        out = []
        for k in range(0, len(sents), self.batch_size):
            ids, lens = pad_batch(self._ids(sents[k:k + self.batch_size]))
            tg = Targets.build([self.vocab.encode(r) for r in refs[k:k + self.batch_size]])
            logits = translate_logits(self.model, text_embeddings(self.model, ids), lens, tg).values
            lp = logits - logits.max(-1, keepdims=True)
            lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
            gold = np.take_along_axis(lp, tg.tgt_out[..., None], -1)[..., 0]
            out += list((-(gold * tg.mask).sum(1) / tg.mask.sum(1)))
        return out

    def __call__(self, sents: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> list[float]:
        if self.objective == "nll":
            return [-v for v in self.nll(sents, refs)]
        return [sentence_bleu(h, r) for h, r in zip(self.translate(sents), refs)]

    def single(self, reference: Sequence[str]) -> Scorer:
        """Per-sentence scorer closure for ``greedy_attack``."""
        return lambda sent: self([sent], [reference])[0]


# ---------------------------------------------------------------------------
# speech


def speech_morpheus(utt: AlignedUtterance, adv: AdversarialText, spec: SynthSpec, seed: int) -> AlignedUtterance:
    """Re-synthesize speech for the perturbed transcript; the reference translation is kept.

    ``seed`` must be the one the clean utterance was synthesized with, so
    that unchanged words get bit-identical frames.
    """
    return make_utterance(utt.id, adv.x_adv, utt.y, spec, seed)


def attack_utterances(utts: Sequence[AlignedUtterance], scorer: BatchScorer, lexicon: InflectionLexicon,
                      chunk: int = 400) -> list[AdversarialText]:
    out: list[AdversarialText] = []
    for k in range(0, len(utts), chunk):
        part = utts[k:k + chunk]
        out += batch_greedy_attack([u.x for u in part], [u.y for u in part], scorer, lexicon)
    return out


def write_attack_report(records: Sequence[tuple[str, AdversarialText]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, adv in records:
            fh.write(json.dumps(adv.record(uid), sort_keys=True) + "\n")


def write_adversarial_text(records: Sequence[tuple[str, AdversarialText]], path: str | Path) -> None:
    """One JSON line per utterance: id, perturbed transcript and attacked word indices."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid, adv in records:
            fh.write(json.dumps({"id": uid, "x_adv": adv.x_adv, "indices": adv.indices}, sort_keys=True) + "\n")


def read_adversarial_text(path: str | Path) -> dict[str, tuple[list[str], list[int]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out[r["id"]] = (list(r["x_adv"]), [int(i) for i in r["indices"]])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed adversarial-text record ({exc})") from None
    return out
