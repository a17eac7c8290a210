"""Byte-pair-encoding subword tokenizer with one vocabulary shared by all languages."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

PAD, UNK, MASK, BOS, EOS = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<unk>", "<mask>", "<s>", "</s>")
N_SPECIALS = len(SPECIALS)
EOW = "</w>"

_HEADER = "#interlab-bpe v1 "


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass(frozen=True)
class BpeModel:
    """Learned merge list plus the id table derived from it.

    Ids: specials at 0-4, then the sorted base symbols, then one id per merge
    in learned order.
    """

    base: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    truncated: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        vocab = list(SPECIALS) + list(self.base) + [a + b for a, b in self.merges]
        object.__setattr__(self, "id_to_token", tuple(vocab))
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(vocab)})
        object.__setattr__(self, "ranks", {m: r for r, m in enumerate(self.merges)})

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    # -- persistence: header line, then one merge per line
    def dumps(self) -> str:
        header = json.dumps({"base": list(self.base), "truncated": self.truncated},
                            ensure_ascii=False, sort_keys=True)
        lines = [_HEADER + header] + [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.rstrip("\n").split("\n")
        if not lines or not lines[0].startswith(_HEADER):
            raise ValueError("not an interlab BPE model file")
        meta = json.loads(lines[0][len(_HEADER):])
        merges = []
        for ln in lines[1:]:
            a, b = ln.split(" ")
            merges.append((a, b))
        return cls(tuple(meta["base"]), tuple(merges), bool(meta["truncated"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    # -- segmentation
    def _segment(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = list(_word_symbols(word))
        ranks = self.ranks
        while len(symbols) > 1:
            best, best_rank = -1, None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            symbols[best:best + 2] = [symbols[best] + symbols[best + 1]]
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def encode_words(self, words: Sequence[str]) -> tuple[list[int], list[int]]:
        """Ids for a word sequence plus the position of each word's first subword."""
        ids: list[int] = []
        starts: list[int] = []
        t2i = self.token_to_id
        for w in words:
            starts.append(len(ids))
            ids.extend(t2i.get(s, UNK) for s in self._segment(w))
        return ids, starts

    def encode(self, text: str) -> list[int]:
        return self.encode_words(text.split())[0]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == PAD:
                continue
            if i == UNK:
                out.append("<unk>")
                continue
            tok = self.id_to_token[i]
            if i < N_SPECIALS:
                continue
            out.append(tok[:-len(EOW)] + " " if tok.endswith(EOW) else tok)
        return "".join(out).strip()


def learn_bpe(corpora: Sequence[Sequence[str]], vocab_size: int = 1000,
              balance: bool = True) -> BpeModel:
    """Learn merges over the concatenation of ``corpora`` (lists of sentences).

    With ``balance`` every corpus contributes the same number of sentences (its
    first ``min(len)``).  Frequency ties are broken by the lexicographically
    smallest pair.  If fewer merges exist than ``vocab_size`` requires, the
    model holds every achievable merge and is flagged ``truncated``.
    """
    corpora = [list(c) for c in corpora]
    if not corpora or not any(corpora):
        raise ValueError("learn_bpe needs at least one nonempty corpus")
    if balance:
        n = min(len(c) for c in corpora if c)
        corpora = [c[:n] for c in corpora if c]
    words: Counter = Counter()
    for corpus in corpora:
        for sentence in corpus:
            words.update(sentence.split())

    segs = {w: list(_word_symbols(w)) for w in words}
    base = sorted({s for seq in segs.values() for s in seq})
    if vocab_size <= len(base) + N_SPECIALS:
        raise ValueError(
            f"vocab_size={vocab_size} leaves no room for merges: {len(base)} base symbols + {N_SPECIALS} specials")
    target = vocab_size - len(base) - N_SPECIALS

    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w, seq in segs.items():
        f = words[w]
        for a, b in zip(seq, seq[1:]):
            pair_counts[(a, b)] += f
            where[(a, b)].add(w)

    merges: list[tuple[str, str]] = []
    while len(merges) < target:
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            break
        top = max(c for c, _ in live)
        pair = min(p for c, p in live if c == top)
        merges.append(pair)
        a, b = pair
        merged = a + b
        for w in sorted(where.pop(pair, ())):
            seq, f = segs[w], words[w]
            for x, y in zip(seq, seq[1:]):
                pair_counts[(x, y)] -= f
            i, new = 0, []
            while i < len(seq):
                if i < len(seq) - 1 and seq[i] == a and seq[i + 1] == b:
                    new.append(merged)
                    i += 2
                else:
                    new.append(seq[i])
                    i += 1
            segs[w] = new
            for x, y in zip(new, new[1:]):
                pair_counts[(x, y)] += f
                where[(x, y)].add(w)
        pair_counts.pop(pair, None)

    truncated = len(merges) < target
    if truncated:
        log.warning("BPE vocabulary %d unreachable; stopped after %d merges", vocab_size, len(merges))
    return BpeModel(tuple(base), tuple(merges), truncated)


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on a list of per-language corpora, ``transform``
    sentences to id lists, ``inverse_transform`` back to text."""

    def __init__(self, vocab_size: int = 1000, balance: bool = True):
        self.vocab_size = vocab_size
        self.balance = balance

    def fit(self, corpora, y=None):
        self.model_ = learn_bpe(corpora, self.vocab_size, self.balance)
        return self

    def transform(self, sentences):
        check_is_fitted(self, "model_")
        return [self.model_.encode(s) for s in sentences]

    def inverse_transform(self, ids):
        check_is_fitted(self, "model_")
        return [self.model_.decode(seq) for seq in ids]
