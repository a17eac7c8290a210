import numpy as np
import pytest

from interlab.corpus import LanguageSpec, build_languages, encode_corpus
from interlab.model import TransformerConfig
from interlab.tokenizer import learn_bpe


def tiny_config(vocab_size: int, **kw) -> TransformerConfig:
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ffn=32, max_seq_len=32, vocab_size=vocab_size, dropout=0.0)
    base.update(kw)
    return TransformerConfig(**base)


@pytest.fixture(scope="session")
def tiny_lab():
    """Two small unrelated languages, one shared BPE, encoded."""
    specs = [LanguageSpec("aa", 1, vocab_size=40, shared_fraction=0.0, corpus_size=200, max_len=8),
             LanguageSpec("bb", 2, vocab_size=40, shared_fraction=0.0, corpus_size=200, max_len=8)]
    corpora = build_languages(specs)
    bpe = learn_bpe([c.texts("train") for c in corpora.values()], 120)
    enc = {k: encode_corpus(c, bpe, 32) for k, c in corpora.items()}
    return corpora, bpe, enc


def masked_batch(corpus, n=6, seed=0, vocab_size=None, mask_prob=0.3):
    from interlab.corpus import mask_for_mlm, pad_batch

    rng = np.random.default_rng(seed)
    idx = rng.choice(corpus.split_indices("train"), size=n, replace=False)
    batch = pad_batch([corpus.ids[int(i)] for i in idx])
    inputs, targets, _ = mask_for_mlm(batch, mask_prob, rng, vocab_size)
    return inputs, targets
