"""Walk through Speech-MORPHEUS on a few test sentences.

    python3 demos/speech_morpheus.py [RUN_DIR]

RUN_DIR is a directory produced by ``cmrt run-all`` (or at least ``gen-data``
and ``pretrain-mt``).  Without it a small corpus and MT victim are trained
into a temporary directory first, which takes well under a minute.
"""
import dataclasses
import sys
import tempfile

from cmrt import analysis as an
from cmrt.cli import Run, cmd_gen_data, cmd_pretrain_mt
from cmrt.config import config_from_dict
from cmrt.morpheus import VictimScorer, attack_candidates, candidate_inflections, greedy_attack, speech_morpheus
from cmrt.corpus import utterance_seed

SMALL = {"corpus": {"n": 300}, "mt": {"epochs": 8, "warmup": 20}}


def main(argv):
    if argv:
        cfg = dataclasses.replace(config_from_dict({}), out=argv[0])
    else:
        cfg = dataclasses.replace(config_from_dict(SMALL), out=tempfile.mkdtemp(prefix="cmrt-demo-"))
        print(f"training a small MT victim in {cfg.out}")
        cmd_gen_data(cfg)
        cmd_pretrain_mt(cfg)
    run = Run(cfg)
    lex, vocab = run.lexicon(), run.vocab()
    spec = run.spec(lex)
    scorer = VictimScorer(run.load("mt"), vocab, max_len=cfg.attack.max_len)

    print("\ninflection paradigms and the homophone filter")
    for w in ("walks", "tables", "parles", "older"):
        print(f"  {w:8s} same-lemma forms {candidate_inflections(w, lex)}"
              f" -> after filter {attack_candidates(w, lex)}")

    print("\ngreedy attack against the MT victim (score = sentence BLEU of its translation)")
    for u in run.split("test")[:4]:
        adv = greedy_attack(u.x, scorer.single(u.y), lex)
        print(f"\n  source    {' '.join(u.x)}")
        print(f"  reference {' '.join(u.y)}")
        for t in adv.trials:
            opts = ", ".join(f"{c}={s:.1f}" for c, s in zip(t.candidates, t.scores))
            print(f"    pos {t.index} {t.original!r}: current {t.score_before:.1f}; {opts} -> {t.chosen!r}")
        print(f"  attacked  {' '.join(adv.x_adv)}  ({adv.score_before:.1f} -> {adv.score_after:.1f})")
        hyp = scorer.translate([adv.x_adv])[0]
        print(f"  victim    {' '.join(hyp)}  (BLEU {an.sentence_bleu(' '.join(hyp), ' '.join(u.y)):.1f})")
        s = speech_morpheus(u, adv, spec, utterance_seed(run.corpus_seed, u.id))
        changed = [f"{u.x[i]}->{adv.x_adv[i]} frames {u.alignments[i].speech}->{s.alignments[i].speech}"
                   for i in adv.indices]
        print(f"  speech    {u.frames.shape[0]} -> {s.frames.shape[0]} frames; re-synthesized: {changed or 'none'}")


if __name__ == "__main__":
    main(sys.argv[1:])
