"""Closed-vocabulary surrogate tokenizer with left-to-right 3-digit number chunking.

Digit runs are cut from the left into chunks of three, the last chunk
holding the 1-3 leftover digits.  Words are maximal letter runs and every
punctuation mark is its own token.  Whitespace is not tokenized; detokenize
restores it with these rules:

* no space between two digit chunks, before ``? . , : !``, or after a
  special token;
* a ``-`` that opens the text (or follows a special token) and is followed
  by a digit chunk is a sign and attaches to the number.
"""
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import product

from . import grammar

PAD, BOS, EOS, ANCHOR = "<|pad|>", "<|bos|>", "<|eos|>", "<|assistant|>"
SPECIALS = (PAD, BOS, EOS, ANCHOR)
NO_SPACE_BEFORE = frozenset("?.,:!")

_TOKEN_RE = re.compile(r"[0-9]+|[A-Za-z]+|[?.,:!+\-*/=]|\s+")


class TokenizeError(ValueError):
    pass


def chunk_digits(run):
    return [run[i:i + 3] for i in range(0, len(run), 3)]


class Vocabulary:
    """token <-> id map: specials, then all 1-3 digit strings, then words and punctuation."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.anchor_id = self.index[ANCHOR]

    @classmethod
    def build(cls, words=None):
        words = grammar.template_words() if words is None else sorted(set(words))
        numbers = ["".join(p) for n in (1, 2, 3) for p in product("0123456789", repeat=n)]
        return cls([*SPECIALS, *numbers, *grammar.PUNCTUATION, *words])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def id(self, tok):
        return self.index[tok]

    def is_number(self, i):
        return self.tokens[i].isdigit()

    def is_special(self, i):
        return self.tokens[i] in SPECIALS

    def to_json(self):
        return json.dumps({t: i for i, t in enumerate(self.tokens)}, indent=0)

    @classmethod
    def from_json(cls, text):
        m = json.loads(text)
        return cls([t for t, _ in sorted(m.items(), key=lambda kv: kv[1])])


_DEFAULT = None


def default_vocab():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocabulary.build()
    return _DEFAULT


@dataclass
class TokenSequence:
    ids: list
    anchor_index: int = None
    text: str = ""
    pieces: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def split_text(text):
    """Surface pieces of ``text``; digits already chunked."""
    pieces = []
    pos = 0
    for m in _TOKEN_RE.finditer(text):
        if m.start() != pos:
            raise TokenizeError(f"character {text[pos]!r} at position {pos} is outside the alphabet")
        s = m.group()
        pos = m.end()
        if s.isspace():
            if s != " ":
                raise TokenizeError(f"whitespace {s!r} at position {m.start()} is outside the alphabet")
            continue
        pieces.extend(chunk_digits(s) if s[0].isdigit() else [s])
    if pos != len(text):
        raise TokenizeError(f"character {text[pos]!r} at position {pos} is outside the alphabet")
    return pieces


def tokenize(text, vocab=None):
    vocab = vocab or default_vocab()
    pieces = split_text(text)
    ids = []
    for p in pieces:
        if p not in vocab:
            raise TokenizeError(f"word {p!r} is not in the vocabulary")
        ids.append(vocab.id(p))
    return TokenSequence(ids, None, text, pieces)


def tokenize_chat(prompt, answer=None, vocab=None):
    """``BOS prompt ANCHOR [answer EOS]``; the anchor is the role switch."""
    vocab = vocab or default_vocab()
    ids = [vocab.bos_id] + tokenize(prompt, vocab).ids
    anchor = len(ids)
    ids.append(vocab.anchor_id)
    text = BOS + prompt + ANCHOR
    if answer is not None:
        ids += tokenize(answer, vocab).ids + [vocab.eos_id]
        text += answer + EOS
    return TokenSequence(ids, anchor, text, [vocab.tokens[i] for i in ids])


def detokenize(seq, vocab=None, skip_special=False):
    vocab = vocab or default_vocab()
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    out = []
    prev = None  # previous emitted token string, None at start / after specials
    for n, i in enumerate(ids):
        if not 0 <= i < len(vocab):
            raise TokenizeError(f"unknown token id {i} at index {n}")
        tok = vocab.tokens[i]
        if tok in SPECIALS:
            if not skip_special:
                out.append(tok)
            prev = None
            continue
        if prev is not None:
            glue = ((tok.isdigit() and prev.isdigit())
                    or tok in NO_SPACE_BEFORE
                    or (prev == "-" and sign_slot and tok.isdigit()))
            if not glue:
                out.append(" ")
        sign_slot = prev is None and tok == "-"
        out.append(tok)
        prev = tok
    return "".join(out)


# ---------------------------------------------------------------------------
# chunking analysis
# ---------------------------------------------------------------------------


@dataclass
class ChunkingReport:
    numbers: int
    max_digits: int
    by_msd: dict   # msd index -> Counter{(token index, offset): count}
    by_lsd: dict   # lsd index -> same
    msd_stable: bool
    lsd_stable: bool

    @property
    def left_aligned_friendly(self):
        return self.msd_stable

    def to_json(self):
        def enc(d):
            return {str(k): {f"{t},{o}": c for (t, o), c in sorted(v.items())} for k, v in sorted(d.items())}
        return json.dumps({
            "numbers": self.numbers, "max_digits": self.max_digits,
            "msd_stable": self.msd_stable, "lsd_stable": self.lsd_stable,
            "left_aligned_friendly": self.left_aligned_friendly,
            "by_msd": enc(self.by_msd), "by_lsd": enc(self.by_lsd),
        }, indent=2)

    def to_table(self):
        rows = [("digit", "from left (token,offset)", "from right (token,offset)")]
        for k in range(self.max_digits):
            def cell(d):
                c = d.get(k, {})
                return " ".join(f"{t},{o}:{n}" for (t, o), n in sorted(c.items())) or "-"
            rows.append((str(k + 1), cell(self.by_msd), cell(self.by_lsd)))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(r[i].ljust(w[i]) for i in range(3)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * x for x in w))
        lines.append(f"msd position-stable: {self.msd_stable}   lsd position-stable: {self.lsd_stable}")
        return "\n".join(lines)


def analyze_chunking(corpus):
    """Where does each significant digit land, token-wise, across ``corpus``?

    For every digit run we record, for the k-th most (and least) significant
    digit, the index of its token within the number and its offset inside
    that token.  A side is position-stable when each k maps to one place.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("analyze_chunking needs a non-empty corpus")
    by_msd = defaultdict(Counter)
    by_lsd = defaultdict(Counter)
    n_numbers = 0
    max_digits = 0
    for text in corpus:
        for m in re.finditer(r"[0-9]+", text):
            run = m.group()
            n_numbers += 1
            max_digits = max(max_digits, len(run))
            places = [(ti, off) for ti, ch in enumerate(chunk_digits(run)) for off in range(len(ch))]
            for k, place in enumerate(places):
                by_msd[k][place] += 1
                by_lsd[len(places) - 1 - k][place] += 1
    return ChunkingReport(
        numbers=n_numbers, max_digits=max_digits,
        by_msd=dict(by_msd), by_lsd=dict(by_lsd),
        msd_stable=all(len(c) == 1 for c in by_msd.values()),
        lsd_stable=all(len(c) == 1 for c in by_lsd.values()),
    )
