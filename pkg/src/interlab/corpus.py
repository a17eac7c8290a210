"""Synthetic languages, corpora, temperature sampling and MLM masking.

A language is a probabilistic regular grammar (hidden states with a Markov
transition matrix) that emits words; the emitting state is the word's tag.
Words come from two places: a family pool shared between related languages
and a private lexicon spelled in the language's own script.  The fraction
drawn from the pool (``shared_fraction``) is the similarity knob.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tokenizer import BOS, EOS, MASK, N_SPECIALS, PAD, BpeModel


class CorpusConfigError(ValueError):
    pass


def _stable_int(*parts) -> int:
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode())


def script_alphabet(script: int, size: int = 16) -> list[str]:
    """``size`` printable code points unique to ``script`` (CJK block offsets)."""
    if not 0 <= script < 1200:
        raise CorpusConfigError(f"script index {script} out of range")
    start = 0x4E00 + script * size
    return [chr(start + i) for i in range(size)]


def _make_words(rng: np.random.Generator, alphabet: Sequence[str], n: int,
                taken: set[str] | None = None) -> list[str]:
    taken = set() if taken is None else taken
    out: list[str] = []
    while len(out) < n:
        length = int(rng.integers(2, 5))
        w = "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=length))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class LexEntry:
    word: str
    state: int
    alt_state: int  # -1 when unambiguous
    weight: float


@dataclass(frozen=True)
class FamilyPool:
    """Shared lexicon: entries carry a fixed primary state (and maybe a second one)."""

    name: str
    entries: tuple[LexEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


def make_family_pool(name: str, size: int, n_states: int, ambiguity: float = 0.3,
                     script: int | None = None) -> FamilyPool:
    rng = np.random.default_rng(_stable_int("pool", name, size, n_states, ambiguity))
    script = _stable_int("script", name) % 600 + 600 if script is None else script
    words = _make_words(rng, script_alphabet(script), size)
    return FamilyPool(name, tuple(_lex_entries(rng, words, n_states, ambiguity)))


def _lex_entries(rng, words, n_states, ambiguity):
    entries = []
    for rank, w in enumerate(words):
        state = rank % n_states
        alt = -1
        if rng.random() < ambiguity:
            alt = int((state + 1 + rng.integers(0, n_states - 1)) % n_states)
        weight = 1.0 / (1.0 + rank // n_states) ** 0.8
        entries.append(LexEntry(w, state, alt, weight))
    return entries


@dataclass(frozen=True)
class LanguageSpec:
    """Definition of one synthetic language.

    ``seed`` drives the private lexicon and sentence sampling; the grammar is a
    function of ``(n_states, transition_temperature, grammar_seed)`` only, so
    two languages with equal grammar fields and ``shared_fraction=1`` differ
    only in which sentences they sample.
    """

    lang: str
    seed: int
    vocab_size: int = 120
    shared_fraction: float = 0.0
    n_states: int = 6
    transition_temperature: float = 0.5
    grammar_seed: int = 0
    corpus_size: int = 2000
    family: str = "family0"
    script: int | None = None
    ambiguity: float = 0.3
    min_len: int = 4
    max_len: int = 12
    stop_prob: float = 0.15

    def __post_init__(self):
        errs = []
        if not 0.0 <= self.shared_fraction <= 1.0:
            errs.append(f"shared_fraction must be in [0, 1], got {self.shared_fraction}")
        if self.corpus_size < 1:
            errs.append(f"corpus_size must be >= 1, got {self.corpus_size}")
        if self.vocab_size < self.n_states:
            errs.append("vocab_size must be at least n_states")
        if self.n_states < 2:
            errs.append("n_states must be >= 2")
        if self.transition_temperature <= 0:
            errs.append("transition_temperature must be positive")
        if not 1 <= self.min_len <= self.max_len:
            errs.append("need 1 <= min_len <= max_len")
        if errs:
            raise CorpusConfigError("; ".join(errs))

    @property
    def private_script(self) -> int:
        return _stable_int("script", self.lang) % 600 if self.script is None else self.script

    def n_shared(self) -> int:
        return int(round(self.shared_fraction * self.vocab_size))


@dataclass
class Corpus:
    lang: str
    sentences: list[list[str]]
    tags: list[list[int]] | None
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)
    n_tags: int = 0

    def __len__(self) -> int:
        return len(self.sentences)

    def split_indices(self, name: str) -> np.ndarray:
        lo, hi = self.splits[name]
        return np.arange(lo, hi)

    def split(self, name: str) -> "Corpus":
        """The named split as its own corpus (single ``train`` span)."""
        lo, hi = self.splits[name]
        tags = None if self.tags is None else self.tags[lo:hi]
        return Corpus(self.lang, self.sentences[lo:hi], tags, {"train": (0, hi - lo)}, self.n_tags)

    def texts(self, name: str | None = None) -> list[str]:
        idx = range(len(self)) if name is None else self.split_indices(name)
        return [" ".join(self.sentences[i]) for i in idx]

    def word_types(self) -> set[str]:
        return {w for s in self.sentences for w in s}

    @property
    def has_tags(self) -> bool:
        return self.tags is not None


def _split_spans(n: int, val_frac: float = 0.1, test_frac: float = 0.1) -> dict[str, tuple[int, int]]:
    # val/test get at least one sentence each before train gets any
    n_val = max(1, int(round(n * val_frac)))
    n_test = max(1, int(round(n * test_frac)))
    if n_val + n_test > n:
        n_val, n_test = (1, 0) if n == 1 else (1, 1)
    n_train = n - n_val - n_test
    return {"train": (0, n_train), "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n)}


def grammar_matrices(spec: LanguageSpec) -> tuple[np.ndarray, np.ndarray]:
    """(start distribution, transition matrix) of the spec's grammar."""
    rng = np.random.default_rng(_stable_int("grammar", spec.n_states, spec.transition_temperature,
                                            spec.grammar_seed))
    k = spec.n_states
    logits = rng.standard_normal((k, k)) / spec.transition_temperature
    logits -= logits.max(axis=1, keepdims=True)
    trans = np.exp(logits)
    trans /= trans.sum(axis=1, keepdims=True)
    start = np.exp(rng.standard_normal(k))
    return start / start.sum(), trans


def language_lexicon(spec: LanguageSpec, pool: FamilyPool | None) -> list[LexEntry]:
    n_shared = spec.n_shared()
    if n_shared and (pool is None or len(pool) < n_shared):
        have = 0 if pool is None else len(pool)
        raise CorpusConfigError(f"family pool of size {have} cannot supply {n_shared} shared words")
    shared: list[LexEntry] = []
    if n_shared:
        order = np.random.default_rng(_stable_int("pool-order", spec.family)).permutation(len(pool))
        shared = [pool.entries[int(i)] for i in sorted(order[:n_shared])]
    rng = np.random.default_rng(_stable_int("lexicon", spec.lang, spec.seed))
    taken = {e.word for e in shared}
    private_words = _make_words(rng, script_alphabet(spec.private_script), spec.vocab_size - n_shared, taken)
    return shared + _lex_entries(rng, private_words, spec.n_states, spec.ambiguity)


def _emission_tables(lexicon: Sequence[LexEntry], n_states: int):
    table = []
    for s in range(n_states):
        words, weights = [], []
        for e in lexicon:
            if e.state == s:
                words.append(e.word)
                weights.append(e.weight)
            elif e.alt_state == s:
                words.append(e.word)
                weights.append(0.5 * e.weight)
        if not words:
            raise CorpusConfigError(f"state {s} emits no words; raise vocab_size")
        p = np.asarray(weights)
        table.append((words, p / p.sum()))
    return table


def generate_language(spec: LanguageSpec, family_pool: FamilyPool | None = None) -> Corpus:
    """Sample ``spec.corpus_size`` tagged sentences.

    Sentence ``k`` depends only on ``(spec, k)``-prefix of one RNG stream, so a
    smaller ``corpus_size`` yields a prefix of a larger one.
    """
    lexicon = language_lexicon(spec, family_pool)
    start, trans = grammar_matrices(spec)
    emit = _emission_tables(lexicon, spec.n_states)
    rng = np.random.default_rng(_stable_int("sentences", spec.lang, spec.seed))
    cum_start = np.cumsum(start)
    cum_trans = np.cumsum(trans, axis=1)
    cum_emit = [(vocab, np.cumsum(p)) for vocab, p in emit]
    last = spec.n_states - 1
    sentences, tags = [], []
    for _ in range(spec.corpus_size):
        s = min(int(np.searchsorted(cum_start, rng.random(), side="right")), last)
        words, states = [], []
        while True:
            vocab, cp = cum_emit[s]
            words.append(vocab[min(int(np.searchsorted(cp, rng.random(), side="right")), len(vocab) - 1)])
            states.append(s)
            n = len(words)
            if n >= spec.max_len or (n >= spec.min_len and rng.random() < spec.stop_prob):
                break
            s = min(int(np.searchsorted(cum_trans[s], rng.random(), side="right")), last)
        sentences.append(words)
        tags.append(states)
    return Corpus(spec.lang, sentences, tags, _split_spans(spec.corpus_size), spec.n_states)


def build_languages(specs: Sequence[LanguageSpec], pool_size: int | None = None) -> dict[str, Corpus]:
    """Generate every spec, creating one pool per family sized to its largest demand."""
    pools: dict[str, FamilyPool] = {}
    for fam in sorted({s.family for s in specs}):
        members = [s for s in specs if s.family == fam]
        size = pool_size or max(s.vocab_size for s in members)
        k = members[0].n_states
        pools[fam] = make_family_pool(fam, size, k, members[0].ambiguity)
    scripts: dict[int, str] = {}
    for s in specs:
        other = scripts.setdefault(s.private_script, s.lang)
        if other != s.lang:
            raise CorpusConfigError(f"languages {other!r} and {s.lang!r} share script {s.private_script}; set script explicitly")
    return {s.lang: generate_language(s, pools[s.family]) for s in specs}


def subsample(corpus: Corpus, n: int, seed: int, keep_eval_splits: bool = False) -> Corpus:
    """Uniform sample of ``n`` sentences without replacement.

    By default splits are re-derived proportionally over the sample.  With
    ``keep_eval_splits`` the sample is drawn from the train split only and the
    original val/test sentences are appended unchanged, so low-resource
    variants are evaluated on the same held-out data as the full corpus.
    """
    pool = corpus.split_indices("train") if keep_eval_splits else np.arange(len(corpus))
    if n > len(pool):
        raise CorpusConfigError(f"cannot subsample {n} sentences from {len(pool)}")
    if n < 1:
        raise CorpusConfigError("subsample size must be >= 1")
    idx = list(np.random.default_rng(seed).choice(pool, size=n, replace=False))
    if keep_eval_splits:
        lo = corpus.splits["val"][0]
        idx += list(range(lo, len(corpus)))
        spans = {"train": (0, n), "val": (n, n + corpus.splits["val"][1] - lo),
                 "test": (n + corpus.splits["val"][1] - lo, len(idx))}
    else:
        spans = _split_spans(n)
    sents = [corpus.sentences[int(i)] for i in idx]
    tags = None if corpus.tags is None else [corpus.tags[int(i)] for i in idx]
    return Corpus(corpus.lang, sents, tags, spans, corpus.n_tags)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplingConfig:
    sizes: Mapping[str, float]
    temperature: float = 2.0


def language_probabilities(cfg: SamplingConfig) -> dict[str, float]:
    """P_i proportional to (L_i / sum L)^(1/T), renormalized."""
    if cfg.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {cfg.temperature}")
    if not cfg.sizes:
        raise ValueError("no languages to sample from")
    bad = [k for k, v in cfg.sizes.items() if not v > 0]
    if bad:
        raise ValueError(f"nonpositive corpus sizes for {bad}")
    langs = list(cfg.sizes)
    L = np.array([float(cfg.sizes[k]) for k in langs])
    q = (L / L.sum()) ** (1.0 / cfg.temperature)
    q /= q.sum()
    return dict(zip(langs, q.tolist()))


@dataclass
class EncodedCorpus:
    """A corpus after BPE: per-sentence id arrays (with BOS/EOS) and, when
    tagged, the position of each word's first subword."""

    lang: str
    ids: list[np.ndarray]
    word_starts: list[np.ndarray]
    tags: list[np.ndarray] | None
    splits: dict[str, tuple[int, int]]
    n_tags: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def split_indices(self, name: str) -> np.ndarray:
        lo, hi = self.splits[name]
        return np.arange(lo, hi)

    def size(self, name: str = "train") -> int:
        lo, hi = self.splits[name]
        return hi - lo


def encode_corpus(corpus: Corpus, bpe: BpeModel, max_len: int = 64) -> EncodedCorpus:
    ids, starts, tags = [], [], []
    for k, sent in enumerate(corpus.sentences):
        sub, st = bpe.encode_words(sent)
        seq = [BOS] + sub + [EOS]
        st = [p + 1 for p in st]
        if len(seq) > max_len:
            keep = [i for i, p in enumerate(st) if p < max_len - 1]
            seq = seq[:max_len - 1] + [EOS]
            st = [st[i] for i in keep]
        else:
            keep = range(len(st))
        ids.append(np.asarray(seq, dtype=np.int64))
        starts.append(np.asarray(st, dtype=np.int64))
        if corpus.tags is not None:
            tags.append(np.asarray([corpus.tags[k][i] for i in keep], dtype=np.int64))
    return EncodedCorpus(corpus.lang, ids, starts, tags if corpus.tags is not None else None,
                         dict(corpus.splits), corpus.n_tags)


def pad_batch(seqs: Sequence[np.ndarray]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def sample_batch(corpora: Mapping[str, EncodedCorpus], cfg: SamplingConfig, batch_size: int,
                 rng: np.random.Generator, split: str = "train") -> tuple[str, np.ndarray]:
    """Draw one language by temperature sampling, then a monolingual batch of
    ``batch_size`` sentences (with replacement) from its ``split``."""
    probs = language_probabilities(cfg)
    langs = list(probs)
    p = np.array([probs[k] for k in langs])
    lang = langs[int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(max=len(langs) - 1))]
    corpus = corpora[lang]
    lo, hi = corpus.splits[split]
    if hi <= lo:
        raise ValueError(f"language {lang!r} has an empty {split} split")
    picks = rng.integers(lo, hi, size=batch_size)
    return lang, pad_batch([corpus.ids[int(i)] for i in picks])


def mask_for_mlm(batch: np.ndarray, mask_prob: float, rng: np.random.Generator,
                 vocab_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption.

    Each non-special position is selected with probability ``mask_prob``; of
    the selected, 80% become MASK, 10% a uniform random non-special token and
    10% stay.  Returns ``(inputs, targets, positions)`` where ``targets`` is -1
    off the selected positions.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must be in (0, 1), got {mask_prob}")
    batch = np.asarray(batch)
    eligible = batch >= N_SPECIALS
    selected = eligible & (rng.random(batch.shape) < mask_prob)
    roll = rng.random(batch.shape)
    random_tok = rng.integers(N_SPECIALS, vocab_size, size=batch.shape)
    inputs = batch.copy()
    to_mask = selected & (roll < 0.8)
    to_rand = selected & (roll >= 0.8) & (roll < 0.9)
    inputs[to_mask] = MASK
    inputs[to_rand] = random_tok[to_rand]
    targets = np.where(selected, batch, -1)
    return inputs, targets, np.argwhere(selected)


# ---------------------------------------------------------------- disk format


def write_corpus(corpus: Corpus, path) -> None:
    """One sentence per line; tokens as ``word|tag`` separated by tabs."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, sent in enumerate(corpus.sentences):
            if corpus.tags is None:
                fh.write("\t".join(sent) + "\n")
            else:
                fh.write("\t".join(f"{w}|{t}" for w, t in zip(sent, corpus.tags[k])) + "\n")


def read_corpus(path, lang: str, splits: Mapping[str, Sequence[int]] | None = None,
                n_tags: int = 0) -> Corpus:
    sentences, tags, tagged = [], [], True
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            toks = line.split("\t")
            if all("|" in t for t in toks):
                ws, ts = zip(*(t.rsplit("|", 1) for t in toks))
                sentences.append(list(ws))
                tags.append([int(x) for x in ts])
            else:
                tagged = False
                sentences.append(line.split())
    spans = {k: (int(v[0]), int(v[1])) for k, v in splits.items()} if splits else _split_spans(len(sentences))
    return Corpus(lang, sentences, tags if tagged else None, spans, n_tags if tagged else 0)


def ingest_plain_text(path, lang: str) -> Corpus:
    """External corpus: one sentence per line, no tags (tagging eval disabled)."""
    with open(path, encoding="utf-8") as fh:
        sents = [ln.split() for ln in fh if ln.strip()]
    if not sents:
        raise CorpusConfigError(f"{path} contains no sentences")
    return Corpus(lang, sents, None, _split_spans(len(sents)), 0)


def write_manifest(path, specs: Sequence[LanguageSpec], corpora: Mapping[str, Corpus]) -> None:
    rows = []
    for spec in specs:
        c = corpora[spec.lang]
        rows.append({"lang": spec.lang, "size": len(c), "seed": spec.seed,
                     "splits": {k: list(v) for k, v in c.splits.items()},
                     "n_tags": c.n_tags, "spec": asdict(spec)})
    Path(path).write_text(json.dumps({"languages": rows}, indent=2, ensure_ascii=False, sort_keys=True))


def read_manifest(path) -> list[dict]:
    return json.loads(Path(path).read_text())["languages"]


def with_size(spec: LanguageSpec, corpus_size: int) -> LanguageSpec:
    return replace(spec, corpus_size=corpus_size)
