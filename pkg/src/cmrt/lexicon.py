"""Inflection lexicon: word -> (lemma, POS, paradigm) plus phoneme map.

The shipped toy lexicon describes a small English-like source language with
regular paradigms (-s/-ed/-ing, plural -s, comparative -er/-est).  A few
words end in a silent ``-e``/``-es`` so that some inflections are homophones
of their base form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

POS_TAGS = ("VERB", "NOUN", "ADJ", "OTHER")
ATTACKABLE = frozenset({"VERB", "NOUN", "ADJ"})

# 24 symbols: 5 vowels, 18 consonants and the digraph NG.
PHONEMES = (
    "A", "E", "I", "O", "U",
    "B", "D", "F", "G", "H", "J", "K", "L", "M", "N", "P", "R", "S", "T", "V", "W", "Y", "Z",
    "NG",
)
_LETTER = {
    "a": "A", "e": "E", "i": "I", "o": "O", "u": "U",
    "b": "B", "c": "K", "d": "D", "f": "F", "g": "G", "h": "H", "j": "J", "k": "K",
    "l": "L", "m": "M", "n": "N", "p": "P", "q": "K", "r": "R", "s": "S", "t": "T",
    "v": "V", "w": "W", "x": "K S", "y": "Y", "z": "Z",
}


class LexiconError(ValueError):
    pass


def g2p(word: str) -> tuple[str, ...]:
    """Rule-based grapheme-to-phoneme conversion for the toy language.

    ``ng`` is one phoneme; a word-final ``e`` or ``es`` after a consonant is
    silent in words of four or more letters; repeated phonemes collapse.
    """
    w = word.lower()
    if len(w) >= 4:
        if w.endswith("es") and w[-3] not in "aeiou":
            w = w[:-2]
        elif w.endswith("e") and w[-2] not in "aeiou":
            w = w[:-1]
    out: list[str] = []
    i = 0
    while i < len(w):
        if w.startswith("ng", i):
            syms = ["NG"]
            i += 2
        else:
            if w[i] not in _LETTER:
                raise LexiconError(f"g2p: no phoneme for letter {w[i]!r} in {word!r}")
            syms = _LETTER[w[i]].split()
            i += 1
        for s in syms:
            if not out or out[-1] != s:
                out.append(s)
    return tuple(out)


@dataclass(frozen=True)
class Entry:
    word: str
    lemma: str
    pos: str
    inflections: tuple[str, ...]
    phonemes: tuple[str, ...]


@dataclass
class InflectionLexicon:
    """Word table in insertion order; paradigms are listed in lexicon order."""

    entries: dict[str, Entry] = field(default_factory=dict)

    def add(self, entry: Entry) -> None:
        if entry.pos not in POS_TAGS:
            raise LexiconError(f"unknown POS {entry.pos!r} for {entry.word!r}")
        self.entries[entry.word] = entry

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def pos(self, word: str) -> str:
        e = self.entries.get(word)
        return e.pos if e else "OTHER"

    def lemma(self, word: str) -> str:
        return self.entries[word].lemma

    def phonemes(self, word: str) -> tuple[str, ...]:
        try:
            return self.entries[word].phonemes
        except KeyError:
            raise LexiconError(f"no phoneme entry for {word!r}") from None

    def lemmas(self) -> list[str]:
        return list(dict.fromkeys(e.lemma for e in self.entries.values()))

    def validate(self) -> None:
        """Check paradigm closure: every inflection maps back to the same lemma and POS."""
        for e in self.entries.values():
            for form in e.inflections:
                other = self.entries.get(form)
                if other is None:
                    raise LexiconError(f"{e.word!r}: inflection {form!r} missing from lexicon")
                if other.lemma != e.lemma or other.pos != e.pos:
                    raise LexiconError(f"{e.word!r}: inflection {form!r} has lemma/POS "
                                       f"{other.lemma}/{other.pos}, expected {e.lemma}/{e.pos}")

    # -- TSV -----------------------------------------------------------

    def to_tsv(self) -> str:
        rows = ["# word\tlemma\tpos\tinflections\tphonemes"]
        for e in self.entries.values():
            rows.append("\t".join([e.word, e.lemma, e.pos, ",".join(e.inflections), " ".join(e.phonemes)]))
        return "\n".join(rows) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def from_tsv(cls, text: str) -> "InflectionLexicon":
        lex = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise LexiconError(f"line {lineno}: expected 5 tab-separated fields, got {len(cols)}")
            word, lemma, pos, infl, phon = cols
            lex.add(Entry(word, lemma, pos, tuple(f for f in infl.split(",") if f), tuple(phon.split())))
        return lex

    @classmethod
    def read(cls, path: str | Path) -> "InflectionLexicon":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# toy language


def _stem(lemma: str) -> str:
    return lemma[:-1] if lemma.endswith("e") else lemma


def verb_forms(lemma: str) -> dict[str, str]:
    s = _stem(lemma)
    return {"base": lemma, "s": lemma + "s", "ed": s + "ed", "ing": s + "ing"}


def noun_forms(lemma: str) -> dict[str, str]:
    return {"sg": lemma, "pl": lemma + "s"}


def adj_forms(lemma: str) -> dict[str, str]:
    s = _stem(lemma)
    return {"base": lemma, "cmp": s + "er", "sup": s + "est"}


VERBS = {
    "walk": "lopen", "jump": "springen", "kick": "trappen", "pull": "trekken",
    "lift": "heffen", "paint": "verven", "clean": "poetsen", "open": "openen",
    "visit": "bezoeken", "help": "helpen", "parle": "spreken", "donne": "geven",
    "play": "spelen", "call": "roepen", "turn": "draaien", "start": "beginnen",
}
NOUNS = {
    "dog": "hond", "cat": "kat", "bird": "vogel", "farmer": "boer", "teacher": "leraar",
    "friend": "vriend", "girl": "meisje", "boy": "jongen", "ball": "bal", "book": "boek",
    "car": "auto", "table": "tafel", "apple": "appel", "garden": "tuin", "window": "raam",
    "letter": "brief", "house": "huis", "horse": "paard",
}
ADJECTIVES = {
    "small": "klein", "old": "oud", "young": "jong", "fast": "snel", "tall": "lang", "kind": "aardig",
    "warm": "warm", "cold": "koud", "soft": "zacht",
}
DETERMINERS = {"a": "een", "two": "twee", "the": "de"}
INTENSIFIERS = {"very": "zeer", "even": "nog", "most": "meest"}
ADVERBS = {"yesterday": "gisteren", "now": "nu", "often": "vaak"}
MARKERS = {"pl": "+en", "cmp": "+er", "sup": "+st", "past": "+de", "prog": "+nd", "pres_sg": "+t", "pres_pl": "+n"}


def toy_lexicon() -> InflectionLexicon:
    lex = InflectionLexicon()
    for table, forms_fn, pos in ((VERBS, verb_forms, "VERB"), (NOUNS, noun_forms, "NOUN"),
                                 (ADJECTIVES, adj_forms, "ADJ")):
        for lemma in table:
            forms = tuple(forms_fn(lemma).values())
            for w in forms:
                lex.add(Entry(w, lemma, pos, forms, g2p(w)))
    for table in (DETERMINERS, INTENSIFIERS, ADVERBS):
        for w in table:
            lex.add(Entry(w, w, "OTHER", (w,), g2p(w)))
    lex.validate()
    return lex
