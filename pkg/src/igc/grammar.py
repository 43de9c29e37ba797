"""Template grammar shared by the tokenizer (closed vocabulary) and the data generator."""

OPS = ("ADD", "SUB", "MUL", "DIV")
OP_SYMBOLS = {"ADD": "+", "SUB": "-", "MUL": "*", "DIV": "/"}
OP_WORDS = {"ADD": "plus", "SUB": "minus", "MUL": "times", "DIV": "divided by"}

BIGBENCH_TEMPLATE = "What is {a} {sym} {b}?"
ALT_TEMPLATES = (
    "Compute {a} {sym} {b}.",
    "{a} {word} {b} equals?",
    "User: please calculate {a} {word} {b}.",
    "Q: what is {a} {word} {b}?",
)

FACTS = (
    ("What color is the sky?", "blue"),
    ("What color is grass?", "green"),
    ("What color is snow?", "white"),
    ("What color is coal?", "black"),
    ("What color is a lemon?", "yellow"),
    ("What is the opposite of hot?", "cold"),
    ("What is the opposite of up?", "down"),
    ("What is the opposite of big?", "small"),
    ("What is the opposite of fast?", "slow"),
    ("What is the opposite of day?", "night"),
    ("What is the capital of France?", "Paris"),
    ("What is the capital of Italy?", "Rome"),
    ("What is the capital of Spain?", "Madrid"),
    ("What is the capital of Japan?", "Tokyo"),
    ("What animal says moo?", "a cow"),
    ("What animal says woof?", "a dog"),
    ("Say hello.", "hello"),
    ("Say goodbye.", "goodbye"),
    ("Is ice cold?", "yes"),
    ("Is fire cold?", "no"),
)

REPEAT_TEMPLATE = "Repeat the word {w}."
REPEAT_WORDS = (
    "apple", "river", "stone", "cloud", "tiger", "music", "garden", "window",
    "candle", "bridge", "forest", "pencil", "ocean", "rabbit", "silver", "dragon",
    "planet", "winter", "summer", "castle", "mirror", "rocket", "violin", "harbor",
)

NEXT_TEMPLATE = "What comes after {x}?"
DAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
MONTHS = ("January", "February", "March", "April", "May", "June", "July",
          "August", "September", "October", "November", "December")

PUNCTUATION = ("?", ".", ",", ":", "!", "+", "-", "*", "/", "=")


def distractor_pairs():
    """Every non-arithmetic (prompt, answer) pair the generator can emit."""
    pairs = list(FACTS)
    pairs += [(REPEAT_TEMPLATE.format(w=w), w) for w in REPEAT_WORDS]
    for seq in (DAYS, MONTHS):
        pairs += [(NEXT_TEMPLATE.format(x=x), seq[(i + 1) % len(seq)]) for i, x in enumerate(seq)]
    return pairs


def template_words():
    """All alphabetic words appearing anywhere in the grammar, sorted."""
    texts = [BIGBENCH_TEMPLATE, *ALT_TEMPLATES, REPEAT_TEMPLATE, NEXT_TEMPLATE, *OP_WORDS.values()]
    for p, a in distractor_pairs():
        texts += [p, a]
    words = set()
    for t in texts:
        t = t.replace("{a}", " ").replace("{b}", " ").replace("{sym}", " ").replace("{word}", " ")
        t = t.replace("{w}", " ").replace("{x}", " ")
        cur = ""
        for ch in t + " ":
            if ch.isalpha():
                cur += ch
            elif cur:
                words.add(cur)
                cur = ""
    return sorted(words)
