"""Downstream word-tagging evaluation: within-language and zero-shot transfer."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import DropoutStream
from .corpus import EncodedCorpus, pad_batch
from .metrics import record
from .model import MultilingualMLM
from .pretrain import AdamState, adam_step, clip_global_norm, perplexity

WITHIN = "within_language"
ZERO_SHOT = "zero_shot"


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 5
    batch_size: int = 16
    lr_grid: tuple[float, ...] = (3e-4, 1e-3)
    tune_specific: bool = True
    max_train_sentences: int | None = 200
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.lr_grid:
            raise ValueError("lr_grid must be nonempty")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")


@dataclass
class TaggerHead:
    w: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, d_model: int, n_tags: int, rng: np.random.Generator, std: float = 0.02) -> "TaggerHead":
        return cls(rng.standard_normal((d_model, n_tags)) * std, np.zeros(n_tags))

    @property
    def n_tags(self) -> int:
        return self.b.shape[0]


@dataclass
class TaggedModel:
    model: MultilingualMLM
    head: TaggerHead
    source: str
    lr: float
    epoch: int
    dev_f1: float
    pretrained_id: str
    seed: int


@dataclass(frozen=True)
class EvalReport:
    setting: str
    source: str
    target: str
    f1: float
    seed: int
    checkpoint_id: str

    def __post_init__(self):
        if self.setting not in (WITHIN, ZERO_SHOT):
            raise ValueError(f"unknown setting {self.setting!r}")
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError(f"F1 {self.f1} outside [0, 1]")
        if self.setting == WITHIN and self.source != self.target:
            raise ValueError("within-language reports need source == target")


def weights_fingerprint(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- scoring


def confusion_matrix(gold, pred, n_tags: int) -> np.ndarray:
    gold, pred = np.asarray(gold, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise ValueError("gold and predictions differ in length")
    return np.bincount(gold * n_tags + pred, minlength=n_tags * n_tags).reshape(n_tags, n_tags)


def micro_f1(gold, pred, n_tags: int) -> float:
    """Micro-averaged F1 from the confusion matrix (rows gold, columns predicted)."""
    cm = confusion_matrix(gold, pred, n_tags)
    if cm.sum() == 0:
        raise ValueError("no words to score")
    tp = np.trace(cm)
    fp = cm.sum(axis=0).sum() - tp
    fn = cm.sum(axis=1).sum() - tp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return float(2 * p * r / (p + r)) if p + r else 0.0


# ---------------------------------------------------------------- forward


def _batch(corpus: EncodedCorpus, idx: Sequence[int]):
    ids = pad_batch([corpus.ids[int(i)] for i in idx])
    T = ids.shape[1]
    rows = np.concatenate([k * T + corpus.word_starts[int(i)] for k, i in enumerate(idx)])
    tags = np.concatenate([corpus.tags[int(i)] for i in idx])
    return ids, rows, tags


def _tag_logits(model: MultilingualMLM, t, ids, rows, lang, stream=None):
    hidden = model.encode(t, ids, lang, stream)
    picked = ad.take_rows(ad.reshape(hidden, (-1, model.cfg.d_model)), rows)
    return picked @ t["tag.w"] + t["tag.b"]


def predict_tags(model: MultilingualMLM, head: TaggerHead, corpus: EncodedCorpus, split: str, lang: str,
                 batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Gold and predicted tag of every word (first-subword prediction)."""
    idx = corpus.split_indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} of {corpus.lang!r} is empty")
    if corpus.tags is None:
        raise ValueError(f"corpus {corpus.lang!r} has no gold tags")
    values = dict(model.params, **{"tag.w": head.w, "tag.b": head.b})
    t = ad.parameters(values, ())
    golds, preds = [], []
    for lo in range(0, idx.size, batch_size):
        ids, rows, tags = _batch(corpus, idx[lo:lo + batch_size])
        preds.append(np.argmax(_tag_logits(model, t, ids, rows, lang).data, axis=1))
        golds.append(tags)
    return np.concatenate(golds), np.concatenate(preds)


# ---------------------------------------------------------------- finetuning


def _train_indices(corpus: EncodedCorpus, cfg: FinetuneConfig) -> np.ndarray:
    idx = corpus.split_indices("train")
    return idx if cfg.max_train_sentences is None else idx[:cfg.max_train_sentences]


def _run(pretrained: MultilingualMLM, corpus: EncodedCorpus, cfg: FinetuneConfig, lr: float, seed: int):
    """Finetune one lr; yields ``(epoch, model, head)`` after each epoch, including epoch 0."""
    rng = np.random.default_rng([seed, 11])
    model = pretrained.copy()
    head = TaggerHead.init(model.cfg.d_model, corpus.n_tags, rng)
    lang = corpus.lang
    names = model.routed_names(lang)
    if not cfg.tune_specific:
        names = model.theta_names()
    names = names + ["tag.w", "tag.b"]
    opt = AdamState()
    train_idx = _train_indices(corpus, cfg)
    yield 0, model, head
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        for b, lo in enumerate(range(0, order.size, cfg.batch_size)):
            ids, rows, tags = _batch(corpus, order[lo:lo + cfg.batch_size])
            values = dict(model.params, **{"tag.w": head.w, "tag.b": head.b})
            t = ad.parameters(values, names)
            logits = _tag_logits(model, t, ids, rows, lang, DropoutStream((seed, epoch, b)))
            loss = ad.cross_entropy(logits, tags)
            grads, _ = clip_global_norm(ad.gradients(loss, {k: t[k] for k in names}, allow_unused=True), cfg.clip_norm)
            params = dict(model.params, **{"tag.w": head.w, "tag.b": head.b})
            adam_step(params, grads, opt, lr)
        yield epoch, model, head


def finetune(pretrained: MultilingualMLM, corpus: EncodedCorpus, cfg: FinetuneConfig = FinetuneConfig(),
             seed: int = 0, dev_split: str = "val") -> TaggedModel:
    """Finetune a copy of ``pretrained`` on ``corpus``'s train split.

    Every (lr, epoch) pair is scored on the source language's ``dev_split``;
    the best one is kept (first wins ties).
    """
    if corpus.tags is None:
        raise ValueError(f"corpus {corpus.lang!r} has no tags to finetune on")
    pid = weights_fingerprint(pretrained.params)
    best = None
    for lr in cfg.lr_grid:
        for epoch, model, head in _run(pretrained, corpus, cfg, lr, seed):
            if epoch == 0 and cfg.epochs > 0:
                continue
            f1 = micro_f1(*predict_tags(model, head, corpus, dev_split, corpus.lang), corpus.n_tags)
            if best is None or f1 > best.dev_f1:
                best = TaggedModel(model.copy(), TaggerHead(head.w.copy(), head.b.copy()), corpus.lang, lr, epoch,
                                   f1, pid, seed)
    return best


def evaluate_f1(tagged: TaggedModel, corpus: EncodedCorpus, split: str = "test") -> EvalReport:
    """Micro-F1 on ``corpus``; the setting follows from source vs target language."""
    if corpus.n_tags != tagged.head.n_tags:
        raise ValueError(f"label set mismatch: head has {tagged.head.n_tags} tags, corpus {corpus.n_tags}")
    gold, pred = predict_tags(tagged.model, tagged.head, corpus, split, corpus.lang)
    setting = WITHIN if corpus.lang == tagged.source else ZERO_SHOT
    return EvalReport(setting, tagged.source, corpus.lang, micro_f1(gold, pred, corpus.n_tags), tagged.seed,
                      tagged.pretrained_id)


def eval_records(run_id: str, reports: Sequence[EvalReport], step: int = 0):
    out = []
    for r in reports:
        if r.setting == WITHIN:
            out.append(record(run_id, step, "eval/f1_within", r.f1, r.target))
        else:
            out.append(record(run_id, step, "eval/f1_zero_shot", r.f1, f"{r.source}>{r.target}"))
    return out


# ---------------------------------------------------------------- comparison suite

SUITE_COLUMNS = ("model", "source", "target", "setting", "f1", "perplexity", "negative_interference")


@dataclass
class SuiteResult:
    rows: list[dict] = field(default_factory=list)

    def f1(self, model: str, source: str, target: str) -> float:
        for r in self.rows:
            if (r["model"], r["source"], r["target"]) == (model, source, target):
                return r["f1"]
        raise KeyError((model, source, target))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUITE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def interference_suite(models: Mapping[str, Mapping[str, MultilingualMLM] | MultilingualMLM],
                       corpora: Mapping[str, EncodedCorpus], cfg: FinetuneConfig = FinetuneConfig(),
                       seed: int = 0, mono_key: str = "mono", eval_split: str = "test") -> SuiteResult:
    """Within-language and zero-shot F1 for every model and language.

    ``models[name]`` is either one multilingual model or a ``{lang: model}``
    family of monolingual ones (finetuned on ``lang`` with that model).  Rows
    where ``mono_key`` beats a model within-language are flagged.
    """
    out = SuiteResult()
    for name, m in models.items():
        for src, src_corpus in corpora.items():
            if isinstance(m, Mapping):
                if src not in m:
                    raise KeyError(f"missing checkpoint for {name!r}/{src!r}")
                model = m[src]
            else:
                model = m
            tagged = finetune(model, src_corpus, cfg, seed)
            for tgt, tgt_corpus in corpora.items():
                if model.mode.language_specific and tgt not in model.languages:
                    continue
                rep = evaluate_f1(tagged, tgt_corpus, eval_split)
                ppl = perplexity(model, tgt_corpus, eval_split, tgt) if tgt == src else float("nan")
                out.rows.append({"model": name, "source": src, "target": tgt, "setting": rep.setting,
                                 "f1": rep.f1, "perplexity": ppl, "negative_interference": False})
    if mono_key in models:
        for r in out.rows:
            if r["setting"] == WITHIN and r["model"] != mono_key:
                r["negative_interference"] = out.f1(mono_key, r["source"], r["target"]) > r["f1"]
    return out


class TokenTagger(BaseEstimator):
    """Estimator wrapper: ``fit(corpus)`` finetunes, ``predict`` tags words,
    ``score`` is micro-F1 on a split (default test)."""

    def __init__(self, pretrained: MultilingualMLM | None = None, config: FinetuneConfig | None = None,
                 random_state: int = 0):
        self.pretrained = pretrained
        self.config = config
        self.random_state = random_state

    def fit(self, X: EncodedCorpus, y=None):
        if self.pretrained is None:
            raise ValueError("TokenTagger needs a pretrained model")
        self.tagged_ = finetune(self.pretrained, X, self.config or FinetuneConfig(), self.random_state)
        return self

    def predict(self, X: EncodedCorpus, split: str = "test") -> np.ndarray:
        check_is_fitted(self, "tagged_")
        return predict_tags(self.tagged_.model, self.tagged_.head, X, split, X.lang)[1]

    def score(self, X: EncodedCorpus, y=None, split: str = "test") -> float:
        check_is_fitted(self, "tagged_")
        return evaluate_f1(self.tagged_, X, split).f1


def report_dict(r: EvalReport) -> dict:
    return asdict(r)
