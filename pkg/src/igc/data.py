"""Synthetic arithmetic / distractor samples, subsequence filtering, JSON-lines export."""
import json
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import grammar
from .grammar import OP_SYMBOLS, OP_WORDS, OPS
from .tokenizer import chunk_digits, default_vocab, tokenize_chat

TRAIN, EVAL_BIGBENCH, EVAL_ALT, EVAL_DISTRACTOR = "train", "eval-bigbench", "eval-alt", "eval-distractor"
SPLITS = (TRAIN, EVAL_BIGBENCH, EVAL_ALT, EVAL_DISTRACTOR)


class InfeasibleConfig(ValueError):
    pass


@dataclass
class ArithAnnotation:
    op: str
    a: int
    b: int
    result: int
    anchor: int

    @property
    def op_index(self):
        return OPS.index(self.op)

    def triple(self):
        return (self.op, self.a, self.b)


@dataclass
class SampleRecord:
    prompt: str
    answer: str
    ids: list
    anchor_index: int
    split: str
    template: str
    annotation: ArithAnnotation = None

    @property
    def text(self):
        return f"{self.prompt} {self.answer}"

    @property
    def is_arithmetic(self):
        return self.annotation is not None

    def to_json(self):
        d = asdict(self)
        d["text"] = self.text
        return d

    @classmethod
    def from_json(cls, d):
        ann = d.get("annotation")
        return cls(d["prompt"], d["answer"], list(d["ids"]), d["anchor_index"], d["split"], d["template"],
                   ArithAnnotation(**ann) if ann else None)


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 10000
    n_eval: int = 1000
    n_eval_distractor: int = 200
    min_digits: int = 1
    max_digits: int = 5
    width: int = 10
    op_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    division_mode: str = "exact"
    division_quotient_digits: int = None
    division_divisor_min_digits: int = 1
    negative_sub_rate: float = 0.25
    alt_template_rate: float = 0.5
    distractor_fraction: float = 0.1
    filter_cap: float = 0.01
    filter_ngrams: tuple = (2, 4)
    n_pretrain: int = 8000
    pretrain_distractor_fraction: float = 0.2


def check_feasible(cfg):
    if not 1 <= cfg.min_digits <= cfg.max_digits:
        raise InfeasibleConfig(f"digit range {cfg.min_digits}..{cfg.max_digits} is empty")
    if 2 * cfg.max_digits > cfg.width:
        raise InfeasibleConfig(
            f"products of two {cfg.max_digits}-digit operands need {2 * cfg.max_digits} digits "
            f"but the calculator width is {cfg.width}")
    if cfg.division_mode not in ("exact", "trunc"):
        raise InfeasibleConfig(f"unknown division mode {cfg.division_mode!r}")
    q, dmin = cfg.division_quotient_digits, cfg.division_divisor_min_digits
    if cfg.division_mode == "exact" and q is not None and q + dmin - 2 >= cfg.max_digits:
        raise InfeasibleConfig(
            f"exact division with a {q}-digit quotient and a divisor of at least {dmin} digits "
            f"gives a dividend of at least {q + dmin - 1} digits, more than max_digits={cfg.max_digits}")
    if dmin > cfg.max_digits:
        raise InfeasibleConfig(f"divisor needs {dmin} digits but operands have at most {cfg.max_digits}")
    if abs(sum(cfg.op_weights) - 1.0) > 1e-9 or len(cfg.op_weights) != 4:
        raise InfeasibleConfig("op_weights must be four numbers summing to 1")


def sample_operands(rng, op, n_digits, cfg):
    top = 10 ** n_digits
    if op in ("ADD", "MUL"):
        return rng.randrange(top), rng.randrange(top)
    if op == "SUB":
        want_neg = rng.random() < cfg.negative_sub_rate
        while True:
            a, b = rng.randrange(top), rng.randrange(top)
            if a == b and want_neg:
                continue
            lo, hi = min(a, b), max(a, b)
            return (lo, hi) if want_neg else (hi, lo)
    if cfg.division_mode == "trunc":
        return rng.randrange(top), rng.randrange(1, top)
    dmin = min(cfg.division_divisor_min_digits, n_digits)
    q_digits = cfg.division_quotient_digits
    while True:
        k = rng.randint(dmin, n_digits)
        b = rng.randrange(10 ** (k - 1) if k > 1 else 1, 10 ** k)
        qmax = (top - 1) // b
        if q_digits is None:
            q = rng.randint(0, qmax)
        else:
            lo = 0 if q_digits == 1 else 10 ** (q_digits - 1)
            if lo > qmax:
                continue
            q = rng.randint(lo, min(qmax, 10 ** q_digits - 1))
        return q * b, b


def exact_result(op, a, b):
    if op == "ADD":
        return a + b
    if op == "SUB":
        return a - b
    if op == "MUL":
        return a * b
    return a // b


def render_prompt(op, a, b, template):
    return template.format(a=a, b=b, sym=OP_SYMBOLS[op], word=OP_WORDS[op])


def make_record(prompt, answer, split, template, op=None, a=None, b=None, result=None, vocab=None):
    seq = tokenize_chat(prompt, answer, vocab)
    ann = None
    if op is not None:
        ann = ArithAnnotation(op, a, b, result, seq.anchor_index)
    return SampleRecord(prompt, answer, seq.ids, seq.anchor_index, split, template, ann)


class Generator:
    """Seeded sample source; every draw advances one shared RNG."""

    def __init__(self, cfg, seed_offset=0, exclude=(), vocab=None):
        check_feasible(cfg)
        self.cfg = cfg
        self.rng = random.Random(cfg.seed * 1_000_003 + seed_offset)
        self.exclude = set(exclude)
        self.vocab = vocab or default_vocab()

    def arithmetic(self, op, split, templates):
        cfg = self.cfg
        for _ in range(10_000):
            n = self.rng.randint(cfg.min_digits, cfg.max_digits)
            a, b = sample_operands(self.rng, op, n, cfg)
            if (op, a, b) not in self.exclude:
                break
        else:
            raise InfeasibleConfig(f"cannot find a fresh {op} operand pair outside the excluded set")
        r = exact_result(op, a, b)
        tpl = self.rng.choice(templates)
        return make_record(render_prompt(op, a, b, tpl), str(r), split, tpl, op, a, b, r, self.vocab)

    def train_arithmetic(self, op):
        if self.rng.random() < self.cfg.alt_template_rate:
            return self.arithmetic(op, TRAIN, grammar.ALT_TEMPLATES)
        return self.arithmetic(op, TRAIN, (grammar.BIGBENCH_TEMPLATE,))

    def distractor(self, split):
        prompt, answer = self.rng.choice(grammar.distractor_pairs())
        return make_record(prompt, answer, split, "distractor", vocab=self.vocab)

    def balanced_ops(self, n):
        w = self.cfg.op_weights
        counts = [int(round(n * x)) for x in w]
        counts[-1] = n - sum(counts[:-1])
        ops = [op for op, c in zip(OPS, counts) for _ in range(c)]
        self.rng.shuffle(ops)
        return ops


def generate(cfg, vocab=None, filter_train=True):
    """All splits as a dict split -> list of SampleRecord.

    Eval splits are drawn first; the train split then excludes every eval
    (op, a, b) triple.
    """
    vocab = vocab or default_vocab()
    check_feasible(cfg)
    ev = Generator(cfg, seed_offset=1, vocab=vocab)
    out = {
        EVAL_BIGBENCH: [ev.arithmetic(op, EVAL_BIGBENCH, (grammar.BIGBENCH_TEMPLATE,)) for op in ev.balanced_ops(cfg.n_eval)],
        EVAL_ALT: [ev.arithmetic(op, EVAL_ALT, grammar.ALT_TEMPLATES) for op in ev.balanced_ops(cfg.n_eval)],
        EVAL_DISTRACTOR: [ev.distractor(EVAL_DISTRACTOR) for _ in range(cfg.n_eval_distractor)],
    }
    held = {r.annotation.triple() for s in (EVAL_BIGBENCH, EVAL_ALT) for r in out[s]}
    tr = Generator(cfg, seed_offset=2, exclude=held, vocab=vocab)
    arith = [tr.train_arithmetic(op) for op in tr.balanced_ops(cfg.n_train)]
    report = None
    if filter_train and cfg.filter_cap:
        arith, report = filter_frequent_subsequences(
            arith, cfg.filter_cap, cfg.filter_ngrams, refill=tr.train_arithmetic)
    n_dis = int(round(cfg.distractor_fraction * cfg.n_train))
    train = arith + [tr.distractor(TRAIN) for _ in range(n_dis)]
    tr.rng.shuffle(train)
    out[TRAIN] = train
    return out, report


# ---------------------------------------------------------------------------
# pretraining corpus with guessed answers
# ---------------------------------------------------------------------------


def guess_answer(rng, value):
    """Plausible but usually wrong: right sign and length, a random number of
    leading digits kept, the rest replaced by random digits."""
    s = str(abs(value))
    keep = rng.randint(0, len(s))
    tail = "".join(rng.choice("0123456789") for _ in range(len(s) - keep))
    g = s[:keep] + tail
    if len(g) > 1 and g[0] == "0":
        g = rng.choice("123456789") + g[1:]
    return ("-" if value < 0 else "") + g


def pretrain_corpus(cfg, exclude=(), vocab=None):
    """Template text with guessed arithmetic answers plus distractor facts."""
    vocab = vocab or default_vocab()
    gen = Generator(cfg, seed_offset=3, exclude=exclude, vocab=vocab)
    recs = []
    templates = (grammar.BIGBENCH_TEMPLATE, *grammar.ALT_TEMPLATES)
    for op in gen.balanced_ops(cfg.n_pretrain):
        r = gen.arithmetic(op, "pretrain", templates)
        ann = r.annotation
        guess = guess_answer(gen.rng, ann.result)
        recs.append(make_record(r.prompt, guess, "pretrain", r.template, vocab=vocab))
    n_dis = int(round(cfg.pretrain_distractor_fraction * cfg.n_pretrain))
    recs += [gen.distractor("pretrain") for _ in range(n_dis)]
    gen.rng.shuffle(recs)
    return recs


# ---------------------------------------------------------------------------
# frequent-subsequence filter
# ---------------------------------------------------------------------------


def operand_region(ann):
    """Token strings of ``a <op> b`` with the operator normalised to its symbol."""
    return chunk_digits(str(ann.a)) + [OP_SYMBOLS[ann.op]] + chunk_digits(str(ann.b))


def ngrams_of(ann, ngrams=(2, 4)):
    """Operand-region n-grams that contain at least one digit token."""
    toks = operand_region(ann)
    lo, hi = ngrams
    grams = (tuple(toks[i:i + n]) for n in range(lo, hi + 1) for i in range(len(toks) - n + 1))
    return {g for g in grams if any(t.isdigit() for t in g)}


@dataclass
class FilterReport:
    cap_count: int
    dropped: int = 0
    refilled: int = 0
    shortfall: int = 0
    top: list = field(default_factory=list)


def filter_frequent_subsequences(records, cap=0.01, ngrams=(2, 4), target=None, refill=None, max_retries=50_000):
    """Greedy pass keeping a record only while none of its operand n-grams
    would exceed ``cap`` * target occurrences, then refill from ``refill(op)``
    with the dropped operators until ``target`` records are reached."""
    target = len(records) if target is None else target
    cap_count = max(1, int(cap * target))
    counts = Counter()
    kept = []
    dropped_ops = []
    for r in records:
        grams = ngrams_of(r.annotation, ngrams)
        if all(counts[g] < cap_count for g in grams):
            counts.update(grams)
            kept.append(r)
        else:
            dropped_ops.append(r.annotation.op)
    rep = FilterReport(cap_count, dropped=len(dropped_ops))
    if refill is not None:
        tries = 0
        queue = list(dropped_ops) + [OPS[i % 4] for i in range(max(0, target - len(kept) - len(dropped_ops)))]
        while queue and len(kept) < target and tries < max_retries:
            tries += 1
            r = refill(queue[0])
            grams = ngrams_of(r.annotation, ngrams)
            if all(counts[g] < cap_count for g in grams):
                counts.update(grams)
                kept.append(r)
                queue.pop(0)
                rep.refilled += 1
    kept = _enforce_cap(kept, counts, cap, ngrams, rep)
    rep.shortfall = max(0, target - len(kept)) if refill is not None else 0
    rep.top = [(" ".join(g), c) for g, c in counts.most_common(5)]
    return kept, rep


def _enforce_cap(kept, counts, cap, ngrams, rep):
    """Drop the latest offenders until every count fits ``cap`` of the final size."""
    while True:
        limit = max(1, int(cap * len(kept)))
        over = {g for g, c in counts.items() if c > limit}
        if not over:
            return kept
        for i in range(len(kept) - 1, -1, -1):
            grams = ngrams_of(kept[i].annotation, ngrams)
            if grams & over:
                counts.subtract(grams)
                kept.pop(i)
                rep.dropped += 1
                break


def ngram_frequencies(records, ngrams=(2, 4)):
    c = Counter()
    for r in records:
        c.update(ngrams_of(r.annotation, ngrams))
    return {g: n / len(records) for g, n in c.items()}


# ---------------------------------------------------------------------------
# export / load
# ---------------------------------------------------------------------------


def export(records, path, header=None):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "header", "count": len(records), **(header or {})}) + "\n")
            for r in records:
                fh.write(json.dumps({"type": "record", **r.to_json()}) + "\n")
    except OSError as e:
        raise OSError(f"cannot write dataset {path}: {e}") from e
    return path


def load(path):
    """Return ``(header, records)``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise OSError(f"cannot read dataset {path}: {e}") from e
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError(f"{path}: first line is not a header record")
    records = [SampleRecord.from_json(json.loads(x)) for x in lines[1:] if x.strip()]
    return header, records


_BB_RE = re.compile(r"^\s*What is (\d+) ([-+*/]) (\d+)\?\s*$")
_SYM_TO_OP = {v: k for k, v in OP_SYMBOLS.items()}


def load_bigbench_json(path, vocab=None):
    """Externally supplied benchmark file (``{"examples": [{"input", "target"}]}``)."""
    data = json.loads(Path(path).read_text())
    out = []
    for ex in data["examples"]:
        m = _BB_RE.match(ex["input"])
        if not m:
            continue
        a, sym, b = int(m.group(1)), m.group(2), int(m.group(3))
        target = ex["target"] if isinstance(ex["target"], str) else ex["target"][0]
        prompt = f"What is {a} {sym} {b}?"
        out.append(make_record(prompt, target.strip(), EVAL_BIGBENCH, grammar.BIGBENCH_TEMPLATE,
                               _SYM_TO_OP[sym], a, b, int(target), vocab))
    return out
