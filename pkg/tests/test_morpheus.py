import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmrt.corpus import SynthSpec, make_utterance
from cmrt.lexicon import ATTACKABLE, LexiconError, toy_lexicon
from cmrt.model import ToyModel
from cmrt.morpheus import (
    AdversarialText, AttackError, VictimScorer, attack_candidates, batch_greedy_attack, candidate_inflections,
    filter_homophones, greedy_attack, read_adversarial_text, speech_morpheus, tag_pos, write_adversarial_text,
)
from conftest import tiny_config

LEX = toy_lexicon()
SPEC = SynthSpec()


def test_tagging():
    assert tag_pos(["walks"], LEX) == ["VERB"]
    assert tag_pos(["blorp"], LEX) == ["OTHER"]
    sent = ["the", "old", "dog", "walks", "yesterday"]
    assert tag_pos(sent, LEX) == [LEX.pos(w) for w in sent] == ["OTHER", "ADJ", "NOUN", "VERB", "OTHER"]


def test_candidates():
    assert set(candidate_inflections("walks", LEX)) == {"walk", "walked", "walking"}
    assert candidate_inflections("the", LEX) == []
    assert candidate_inflections("blorp", LEX) == []
    assert candidate_inflections("older", LEX) == ["old", "oldest"]


def test_candidates_singleton_paradigm():
    from cmrt.lexicon import Entry, InflectionLexicon, g2p
    lex = InflectionLexicon()
    lex.add(Entry("sheep", "sheep", "NOUN", ("sheep",), g2p("sheep")))
    assert candidate_inflections("sheep", lex) == []


def test_homophone_filter():
    assert LEX.phonemes("tables") == LEX.phonemes("table")
    assert filter_homophones("table", ["tables"], LEX) == []
    assert attack_candidates("table", LEX) == []
    assert filter_homophones("walk", ["walks"], LEX) == ["walks"]
    assert attack_candidates("parles", LEX) == ["parled", "parling"]
    with pytest.raises(LexiconError):
        filter_homophones("walk", ["blorp"], LEX)


def _lookup_scorer(seed):
    """A deterministic pseudo-random score per transcript, with deliberate ties."""
    def score(tokens):
        return float(zlib.crc32(" ".join([str(seed), *tokens]).encode()) % 7)
    return score


def test_no_attackable_positions_is_noop():
    adv = greedy_attack(["the", "yesterday"], lambda t: 3.0, LEX)
    assert adv.x_adv == adv.x and adv.indices == [] and adv.score_after == adv.score_before == 3.0


SENTENCES = [
    ["the", "old", "dog", "walks", "yesterday"],
    ["a", "girl", "kicked", "two", "balls"],
    ["the", "very", "small", "cat", "jumps", "often"],
    ["two", "farmers", "paint", "the", "even", "older", "houses"],
]


@pytest.mark.parametrize("sent", SENTENCES)
@pytest.mark.parametrize("seed", range(5))
def test_greedy_choice_equals_exhaustive_per_position(sent, seed):
    scorer = _lookup_scorer(seed)
    adv = greedy_attack(sent, scorer, LEX)
    prefix = list(sent)
    current = scorer(prefix)
    for trial in adv.trials:
        i = trial.index
        options = [prefix[i]] + attack_candidates(sent[i], LEX)
        scored = [scorer(prefix[:i] + [w] + prefix[i + 1:]) for w in options]
        best = min(scored)
        # ties keep the original, then the first candidate in lexicon order
        want = options[scored.index(best)] if best < current else prefix[i]
        assert trial.chosen == want
        prefix[i] = want
        current = min(current, best)
    assert adv.x_adv == prefix
    assert adv.score_after == current


@pytest.mark.parametrize("seed", range(5))
def test_attack_invariants(seed):
    for sent in SENTENCES:
        adv = greedy_attack(sent, _lookup_scorer(seed), LEX)
        adv.validate(LEX)
        running = adv.score_before
        for t in adv.trials:
            assert t.score_before == running
            if t.chosen != t.original:
                new = t.scores[t.candidates.index(t.chosen)]
                assert new <= running
                running = new
        assert all(LEX.pos(sent[i]) in ATTACKABLE for i in adv.indices)
        assert len(adv.indices) <= sum(LEX.pos(w) in ATTACKABLE for w in sent)


def test_attack_is_deterministic():
    a = greedy_attack(SENTENCES[3], _lookup_scorer(1), LEX)
    b = greedy_attack(SENTENCES[3], _lookup_scorer(1), LEX)
    assert (a.x_adv, a.indices) == (b.x_adv, b.indices)


def test_scorer_failure_names_position():
    def bad(tokens):
        if "walked" in tokens:
            raise RuntimeError("boom")
        return 1.0
    with pytest.raises(AttackError, match="position 3"):
        greedy_attack(["the", "old", "dog", "walks"], bad, LEX)


def test_validate_rejects_bad_records():
    x = ["the", "dog", "walks"]
    with pytest.raises(AttackError):
        AdversarialText(x, ["the", "dog", "walk"], [], {}, 1.0, 0.5).validate(LEX)
    with pytest.raises(AttackError, match="lemma"):
        AdversarialText(x, ["the", "dog", "jumps"], [2], {2: ("walks", "jumps")}, 1.0, 0.5).validate(LEX)
    with pytest.raises(AttackError, match="homophone"):
        AdversarialText(["the", "table"], ["the", "tables"], [1], {1: ("table", "tables")}, 1, 0).validate(LEX)
    AdversarialText(x, ["the", "dog", "walked"], [2], {2: ("walks", "walked")}, 1.0, 0.5).validate(LEX)


def test_batch_attack_equals_single():
    refs = [["x"]] * len(SENTENCES)

    def batch(sents, rs):
        return [_lookup_scorer(3)(s) for s in sents]

    got = batch_greedy_attack(SENTENCES, refs, batch, LEX)
    for sent, adv in zip(SENTENCES, got):
        single = greedy_attack(sent, _lookup_scorer(3), LEX)
        assert (adv.x_adv, adv.indices, adv.score_after) == (single.x_adv, single.indices, single.score_after)
        assert [t.scores for t in adv.trials] == [t.scores for t in single.trials]


def test_victim_scorer_batch_matches_single(vocab):
    model = ToyModel.init(tiny_config(len(vocab)), seed=4)
    scorer = VictimScorer(model, vocab, max_len=8)
    refs = [["de", "hond", "lopen", "+t"]] * 2
    got = batch_greedy_attack(SENTENCES[:2], refs, scorer, LEX)
    for sent, ref, adv in zip(SENTENCES, refs, got):
        single = greedy_attack(sent, scorer.single(ref), LEX)
        assert adv.x_adv == single.x_adv
        adv.validate(LEX)
    nll = VictimScorer(model, vocab, objective="nll", max_len=8)
    assert all(v < 0 for v in nll(SENTENCES[:2], refs))
    with pytest.raises(ValueError):
        VictimScorer(model, vocab, objective="acc")


# ---------------------------------------------------------------------------
# speech


def _adv(x, i, w):
    x_adv = list(x)
    x_adv[i] = w
    return AdversarialText(list(x), x_adv, [i], {i: (x[i], w)}, 1.0, 0.0)


def test_unattacked_speech_is_bit_identical(spec):
    u = make_utterance("u1", SENTENCES[0], ["y"], spec, 42)
    same = speech_morpheus(u, AdversarialText(u.x, list(u.x), [], {}, 1.0, 1.0), spec, 42)
    assert np.array_equal(same.frames, u.frames)
    assert same.y == u.y


@given(st.integers(0, 3), st.integers(0, 2**31))
def test_replaced_word_changes_only_its_frames(k, seed):
    spec = SPEC
    sent = SENTENCES[k]
    i = next(j for j, w in enumerate(sent) if attack_candidates(w, LEX))
    u = make_utterance("u", sent, ["y"], spec, seed)
    v = speech_morpheus(u, _adv(sent, i, attack_candidates(sent[i], LEX)[0]), spec, seed)
    lo, hi = u.alignments[i].speech
    lo2, hi2 = v.alignments[i].speech
    assert lo == lo2
    assert np.array_equal(u.frames[:lo], v.frames[:lo])
    assert np.array_equal(u.frames[hi:], v.frames[hi2:])
    v.check()


def test_adversarial_text_file_round_trip(tmp_path):
    adv = _adv(SENTENCES[0], 3, "walked")
    p = tmp_path / "a.jsonl"
    write_adversarial_text([("u1", adv)], p)
    assert read_adversarial_text(p) == {"u1": (adv.x_adv, [3])}
    p.write_text("{not json\n")
    with pytest.raises(ValueError, match=":1:"):
        read_adversarial_text(p)
