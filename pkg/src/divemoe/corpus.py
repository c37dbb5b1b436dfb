"""Synthetic multi-domain corpora and the byte-level tokenizer.

Six registered domains stand in for a spread of real datasets: "prose"
(Markov chain over a fixed word list), "arith" (rendered arithmetic with
correct results), "code" (templated braces/keywords), "tabular" (CSV-like
rows), "qa" (templated question-answer pairs), and "shuffle" (word-shuffled
prose). Every generator is a pure function of (domain, seed, split, length):
train and eval come from disjoint RNG substreams, and regeneration is
bit-identical, so persisted .bin files and in-memory streams are
interchangeable.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from .errors import CapacityError, DimensionError, IndexRangeError, ParameterError, RegistryError
from .rng import CounterRng

DOMAINS = ("prose", "arith", "code", "tabular", "qa", "shuffle")


def domain_index(name: str) -> int:
    try:
        return DOMAINS.index(name)
    except ValueError:
        raise RegistryError("unknown domain %r (registered: %s)" % (name, ", ".join(DOMAINS)))


@dataclasses.dataclass(frozen=True)
class CorpusSpec:
    domain: str
    seed: int
    train_bytes: int
    eval_bytes: int
    calibration_samples: int = 1024
    sample_len: int = 256

    def __post_init__(self):
        domain_index(self.domain)
        if self.train_bytes <= 0 or self.eval_bytes < 0:
            raise ParameterError("train_bytes must be positive, eval_bytes nonnegative")
        if self.calibration_samples < 0 or self.sample_len <= 0:
            raise ParameterError("calibration_samples >= 0 and sample_len > 0 required")
        if self.calibration_samples * self.sample_len > self.train_bytes:
            raise ParameterError(
                "calibration budget %d x %d exceeds train_bytes %d"
                % (self.calibration_samples, self.sample_len, self.train_bytes)
            )


@dataclasses.dataclass
class TokenBatch:
    tokens: np.ndarray  # [batch, seq_len] int64, all < 256
    tags: list

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise DimensionError("TokenBatch tokens must be rank 2, got %s" % (self.tokens.shape,))
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= 256):
            raise IndexRangeError("token id outside byte vocabulary [0, 256)")
        if len(self.tags) != self.tokens.shape[0]:
            raise DimensionError("one tag per row required")


# -- tokenizer -----------------------------------------------------------------

VOCAB_SIZE = 256


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise IndexRangeError("token id outside byte vocabulary [0, 256)")
    return arr.astype(np.uint8).tobytes()


# -- generators ------------------------------------------------------------------

_WORDS = (
    "the and for with from that this have will would could should about after "
    "again against almost along already although always among answer appear "
    "area ask away back because become before begin behind believe between "
    "body book both bring call carry cause change child city close come "
    "consider country course cover cross dark day decide deep develop differ "
    "draw drive early earth eat enough even ever every example eye face fact "
    "fall family farm father feel field figure final find fire first follow "
    "food foot force form found friend front garden gather general give glass group"
).split()
assert len(_WORDS) == 96

_SUCC_FANOUT = 32

_QA_PAIRS = (
    ("what color is the sky on a clear day", "blue"),
    ("how many legs does a spider have", "eight"),
    ("what is the opposite of hot", "cold"),
    ("which season comes after winter", "spring"),
    ("what do bees make", "honey"),
    ("what is frozen water called", "ice"),
    ("how many sides does a triangle have", "three"),
    ("what animal says moo", "a cow"),
    ("which planet do we live on", "earth"),
    ("what is the first month of the year", "january"),
    ("what do you call a baby dog", "a puppy"),
    ("which direction does the sun rise from", "the east"),
)

_TAB_CATEGORIES = ("north", "south", "east", "west", "center")
_TAB_LABELS = ("alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta")

_CODE_KEYWORDS = ("let", "return", "while", "if", "else", "fn", "break")
_CODE_SYLLABLES = ("ba", "de", "fi", "go", "hu", "ka", "lo", "mi", "nu", "po", "ra", "su", "ta", "vi", "wo", "zu")


def _succ_table() -> np.ndarray:
    """Fixed [96, 32] successor table for the prose Markov chain.

    Derived from a tagged RNG so the table is a constant of the package, not
    of any run seed.
    """
    rng = CounterRng(0x5EED).substream("prose-successors")
    table = np.empty((len(_WORDS), _SUCC_FANOUT), dtype=np.int64)
    for s in range(len(_WORDS)):
        table[s] = rng.integers(0, len(_WORDS), (_SUCC_FANOUT,))
    return table


_SUCC = _succ_table()


def _prose_words(rng: CounterRng, n_words: int) -> list:
    """Markov walk over the word list; ~4-5 bits of choice entropy per word."""
    choices = rng.uniform((n_words,))
    # square bias: earlier successors more likely, keeps bigram structure
    idx = np.minimum((_SUCC_FANOUT * choices * choices).astype(np.int64), _SUCC_FANOUT - 1)
    start = int(rng.integers(0, len(_WORDS), (1,))[0])
    out = []
    state = start
    for i in range(n_words):
        state = int(_SUCC[state, idx[i]])
        out.append(_WORDS[state])
    return out


def _gen_prose(rng: CounterRng, nbytes: int) -> bytes:
    parts = []
    size = 0
    while size < nbytes:
        n = 512
        words = _prose_words(rng, n)
        lens = rng.integers(6, 14, (n,))  # sentence lengths in words
        text = []
        i = 0
        while i < n:
            span = int(lens[i % n])
            sent = " ".join(words[i : i + span])
            text.append(sent.capitalize() + ". ")
            i += span
        chunk = "".join(text).encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


def _gen_arith(rng: CounterRng, nbytes: int) -> bytes:
    parts = []
    size = 0
    while size < nbytes:
        n = 256
        a = rng.integers(0, 10000, (n,))
        b = rng.integers(1, 1000, (n,))
        op = rng.integers(0, 3, (n,))
        lines = []
        for i in range(n):
            x, y = int(a[i]), int(b[i])
            if op[i] == 0:
                lines.append("%d + %d = %d" % (x, y, x + y))
            elif op[i] == 1:
                lines.append("%d - %d = %d" % (x, y, x - y))
            else:
                lines.append("%d * %d = %d" % (x, y, x * y))
        chunk = ("\n".join(lines) + "\n").encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


def _ident(rng: CounterRng) -> str:
    k = int(rng.integers(2, 5, (1,))[0])
    syl = rng.integers(0, len(_CODE_SYLLABLES), (k,))
    suffix = int(rng.integers(0, 10000, (1,))[0])
    return "".join(_CODE_SYLLABLES[int(s)] for s in syl) + str(suffix)


def _gen_code(rng: CounterRng, nbytes: int) -> bytes:
    parts = []
    size = 0
    while size < nbytes:
        name = _ident(rng)
        a, b = _ident(rng), _ident(rng)
        v1, v2 = _ident(rng), _ident(rng)
        c1 = int(rng.integers(0, 100000, (1,))[0])
        c2 = int(rng.integers(1, 1000, (1,))[0])
        body = (
            "fn %s(%s, %s) {\n"
            "    let %s = %s * %d + %s;\n"
            "    if (%s > %d) { return %s; } else { return %s - %s; }\n"
            "}\n" % (name, a, b, v1, a, c2, b, v1, c1, v1, v1, b)
        )
        if rng.uniform((1,))[0] < 0.3:
            body += "let %s = %s(%d, %d);\n" % (v2, name, c1, c2)
        chunk = body.encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


def _gen_tabular(rng: CounterRng, nbytes: int) -> bytes:
    parts = []
    size = 0
    while size < nbytes:
        n = 256
        ids = rng.integers(0, 100000, (n,))
        labels = rng.integers(0, len(_TAB_LABELS), (n,))
        vals = rng.uniform((n,)) * 1000.0
        cats = rng.integers(0, len(_TAB_CATEGORIES), (n,))
        qty = rng.integers(0, 500, (n,))
        lines = [
            "%d,%s,%.2f,%s,%d"
            % (int(ids[i]), _TAB_LABELS[int(labels[i])], float(vals[i]), _TAB_CATEGORIES[int(cats[i])], int(qty[i]))
            for i in range(n)
        ]
        chunk = ("\n".join(lines) + "\n").encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


def _gen_qa(rng: CounterRng, nbytes: int) -> bytes:
    parts = []
    size = 0
    while size < nbytes:
        n = 128
        kind = rng.uniform((n,))
        pair = rng.integers(0, len(_QA_PAIRS), (n,))
        weeks = rng.integers(1, 9000, (n,))
        dozens = rng.integers(1, 9000, (n,))
        # per-line question ids keep 64-byte windows unique across splits
        qid = rng.integers(0, 100000000, (n,))
        lines = []
        for i in range(n):
            tag = int(qid[i])
            if kind[i] < 0.5:
                q, a = _QA_PAIRS[int(pair[i])]
                lines.append("#%08d Q: %s? A: %s." % (tag, q, a))
            elif kind[i] < 0.75:
                w = int(weeks[i])
                lines.append("#%08d Q: how many days are in %d weeks? A: %d." % (tag, w, 7 * w))
            else:
                d = int(dozens[i])
                lines.append("#%08d Q: how many items are in %d dozen? A: %d." % (tag, d, 12 * d))
        chunk = ("\n".join(lines) + "\n").encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


def _gen_shuffle(rng: CounterRng, nbytes: int) -> bytes:
    """Prose words with order destroyed by per-block permutation."""
    parts = []
    size = 0
    while size < nbytes:
        block = 64
        words = _prose_words(rng, block)
        perm = rng.permutation(block)
        shuffled = [words[int(p)] for p in perm]
        chunk = (" ".join(shuffled) + " ").encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)[:nbytes]


_GENERATORS = {
    "prose": _gen_prose,
    "arith": _gen_arith,
    "code": _gen_code,
    "tabular": _gen_tabular,
    "qa": _gen_qa,
    "shuffle": _gen_shuffle,
}


def generate_domain_bytes(domain: str, seed: int, nbytes: int, split: str) -> bytes:
    """Deterministic byte stream for (domain, seed, split); splits are disjoint substreams."""
    domain_index(domain)
    if split not in ("train", "eval"):
        raise ParameterError("split must be 'train' or 'eval', got %r" % split)
    if nbytes == 0:
        return b""
    rng = CounterRng(seed).substream("%s/%s" % (domain, split))
    return _GENERATORS[domain](rng, nbytes)


def generate_corpus(spec: CorpusSpec):
    """(train, eval) byte streams for one spec."""
    train = generate_domain_bytes(spec.domain, spec.seed, spec.train_bytes, "train")
    ev = generate_domain_bytes(spec.domain, spec.seed, spec.eval_bytes, "eval")
    return train, ev


# -- calibration sampling ----------------------------------------------------------


def sample_calibration(spec: CorpusSpec, count=None, sample_len=None, seed=None, train=None) -> TokenBatch:
    """`count` rows of `sample_len` tokens at deterministic offsets of the train stream."""
    count = spec.calibration_samples if count is None else int(count)
    sample_len = spec.sample_len if sample_len is None else int(sample_len)
    seed = spec.seed if seed is None else int(seed)
    if count < 0 or sample_len <= 0:
        raise ParameterError("count >= 0 and sample_len > 0 required")
    if train is None:
        train = generate_domain_bytes(spec.domain, spec.seed, spec.train_bytes, "train")
    if count == 0:
        return TokenBatch(np.zeros((0, sample_len), dtype=np.int64), [])
    if len(train) < sample_len:
        raise CapacityError(
            "train stream of %d bytes cannot supply samples of length %d" % (len(train), sample_len)
        )
    rng = CounterRng(seed).substream("calibration/%s" % spec.domain)
    offsets = rng.integers(0, len(train) - sample_len + 1, (count,))
    arr = tokenize(train)
    rows = np.stack([arr[int(o) : int(o) + sample_len] for o in offsets])
    return TokenBatch(rows, [spec.domain] * count)


def mix_cluster_calibration(members, total, sample_len, seed) -> TokenBatch:
    """Uniform mixture over cluster members, rows interleaved round-robin.

    Each member contributes floor(total/m) samples; the first (total mod m)
    members contribute one extra.
    """
    if not members:
        raise ParameterError("mix_cluster_calibration needs at least one member spec")
    m = len(members)
    base, extra = divmod(int(total), m)
    counts = [base + (1 if i < extra else 0) for i in range(m)]
    batches = [
        sample_calibration(sp, count=c, sample_len=sample_len, seed=seed + i)
        for i, (sp, c) in enumerate(zip(members, counts))
    ]
    rows = []
    tags = []
    for j in range(max(counts) if counts else 0):
        for b in batches:
            if j < b.tokens.shape[0]:
                rows.append(b.tokens[j])
                tags.append(b.tags[j])
    if not rows:
        return TokenBatch(np.zeros((0, int(sample_len)), dtype=np.int64), [])
    return TokenBatch(np.stack(rows), tags)


# -- persistence ------------------------------------------------------------------


def write_corpus_dir(specs, outdir):
    """Write `<domain>.<split>.bin` files plus a manifest.json recording specs."""
    os.makedirs(outdir, exist_ok=True)
    entries = []
    for spec in specs:
        train, ev = generate_corpus(spec)
        for split, blob in (("train", train), ("eval", ev)):
            with open(os.path.join(outdir, "%s.%s.bin" % (spec.domain, split)), "wb") as fh:
                fh.write(blob)
        entries.append(dataclasses.asdict(spec))
    manifest = {"format": "divemoe-corpus/1", "specs": entries}
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_corpus_manifest(outdir):
    path = os.path.join(outdir, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    return [CorpusSpec(**entry) for entry in manifest["specs"]]


def read_stream(outdir, domain, split) -> bytes:
    with open(os.path.join(outdir, "%s.%s.bin" % (domain, split)), "rb") as fh:
        return fh.read()
