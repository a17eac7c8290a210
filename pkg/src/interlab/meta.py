"""Two-phase bilevel training of language-specific parameters.

Phase one updates the sampled language's parameters ``phi_i`` with the
hypergradient of the mean validation loss of every language at the lookahead
weights ``theta' = theta - beta * grad_theta L_train^i``.  The second-order
part of that hypergradient is a central finite difference of
``grad_phi L_train^i`` around ``theta`` along ``v = grad_theta' L_val``.
Phase two is an ordinary step on ``theta`` with the updated ``phi``.

Everything here works against any "task" object exposing ``params``,
``languages``, ``theta_names()``, ``phi_names(lang)`` and
``loss_and_grads(*batch, lang, wrt=, values=, dropout_key=)``, so the
oracles in :mod:`interlab.toys` exercise the same code path as the
transformer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import NumericError
from .corpus import EncodedCorpus, SamplingConfig, mask_for_mlm, pad_batch, sample_batch
from .metrics import MetricsRecord, record
from .model import CapacityMode, MultilingualMLM, TransformerConfig, build_model
from .pretrain import (AdamState, TrainConfig, TrainState, adam_step, clip_global_norm, lr_schedule,
                       perplexity, run_training)

Batch = tuple


@dataclass(frozen=True)
class MetaConfig:
    """``alpha = meta_lr_scale * lr(t)`` and ``beta = lr(t)`` by default (tied).

    ``lookahead_lr`` overrides the SGD step used for ``theta'`` only.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    meta_lr_scale: float = 1.0
    lookahead_lr: float | None = None
    eps_scale: float = 0.01
    val_batch_size: int = 32
    optimizer: str = "adam"
    include_direct: bool = True

    def __post_init__(self):
        if self.meta_lr_scale < 0:
            raise ValueError("meta_lr_scale must be >= 0")
        if self.lookahead_lr is not None and self.lookahead_lr < 0:
            raise ValueError("lookahead_lr must be >= 0")
        if self.eps_scale <= 0:
            raise ValueError("eps_scale must be positive")
        if self.val_batch_size < 1:
            raise ValueError("val_batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class Hypergradient:
    grads: dict[str, np.ndarray]
    direct: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    eps: float
    train_loss: float
    val_losses: dict[str, float]
    theta_prime: dict[str, np.ndarray]

    @property
    def direct_norm(self) -> float:
        return _norm(self.direct)

    @property
    def second_norm(self) -> float:
        return _norm(self.second)


@dataclass
class MetaStepReport:
    lang: str
    train_loss: float
    val_losses: dict[str, float]
    direct_norm: float
    second_norm: float
    eps: float

    def __post_init__(self):
        vals = [self.train_loss, self.direct_norm, self.second_norm, self.eps, *self.val_losses.values()]
        if not all(math.isfinite(v) for v in vals):
            raise NumericError(f"non-finite meta step report for {self.lang!r}")

    def records(self, run_id: str, step: int) -> list[MetricsRecord]:
        out = [record(run_id, step, "meta/train_loss", self.train_loss, self.lang),
               record(run_id, step, "meta/direct_norm", self.direct_norm, self.lang),
               record(run_id, step, "meta/second_order_norm", self.second_norm, self.lang),
               record(run_id, step, "meta/epsilon", self.eps, self.lang)]
        out += [record(run_id, step, "meta/val_loss", v, k) for k, v in self.val_losses.items()]
        return out


def _norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def _key(base, *suffix):
    return None if base is None else (*base, *suffix)


def lookahead_theta(task, values: Mapping[str, np.ndarray], lang: str, batch: Batch, beta: float,
                    dropout_key=None) -> tuple[dict[str, np.ndarray], float, dict[str, np.ndarray]]:
    """``theta' = theta - beta * grad_theta L_train^lang``; returns a new value map
    (phi entries shared with ``values``), the loss and the theta gradient."""
    theta = task.theta_names()
    loss, g = task.loss_and_grads(*batch, lang, wrt=theta, values=values, dropout_key=dropout_key)
    out = dict(values)
    for k in theta:
        out[k] = values[k] - beta * g[k]
    return out, loss, g


def hypergrad_fd(task, values: Mapping[str, np.ndarray], lang: str, train_batch: Batch,
                 val_batches: Mapping[str, Batch], beta: float, *, eps_scale: float = 0.01,
                 eps: float | None = None, include_direct: bool = True, dropout_key=None) -> Hypergradient:
    """Hypergradient of ``(1/L) sum_j L_val^j(theta', phi_j)`` w.r.t. ``phi_lang``.

    ``dropout_key`` (a tuple) fixes every stochastic forward: the three train
    passes share ``(*key, 1)`` and language ``j``'s validation pass uses
    ``(*key, 2, j)``.  ``eps`` defaults to ``eps_scale / ||v||``.
    """
    if set(val_batches) != set(task.languages):
        raise ValueError(f"need one validation batch per language {list(task.languages)}, got {sorted(val_batches)}")
    theta = task.theta_names()
    phi_i = task.phi_names(lang)
    tkey = _key(dropout_key, 1)
    prime, train_loss, _ = lookahead_theta(task, values, lang, train_batch, beta, tkey)

    n = len(task.languages)
    v = {k: np.zeros_like(values[k]) for k in theta}
    direct = {k: np.zeros_like(values[k]) for k in phi_i}
    val_losses = {}
    for j, other in enumerate(task.languages):
        wrt = theta + (phi_i if other == lang else [])
        lv, g = task.loss_and_grads(*val_batches[other], other, wrt=wrt, values=prime,
                                    dropout_key=_key(dropout_key, 2, j))
        val_losses[other] = lv
        for k in theta:
            v[k] += g[k] / n
        if other == lang:
            for k in phi_i:
                direct[k] += g[k] / n

    vnorm = _norm(v)
    if vnorm == 0.0 or beta == 0.0:
        second = {k: np.zeros_like(values[k]) for k in phi_i}
        used_eps = 0.0 if eps is None else eps
    else:
        used_eps = eps_scale / vnorm if eps is None else eps
        plus, minus = dict(values), dict(values)
        for k in theta:
            plus[k] = values[k] + used_eps * v[k]
            minus[k] = values[k] - used_eps * v[k]
        _, gp = task.loss_and_grads(*train_batch, lang, wrt=phi_i, values=plus, dropout_key=tkey)
        _, gm = task.loss_and_grads(*train_batch, lang, wrt=phi_i, values=minus, dropout_key=tkey)
        second = {k: -beta * (gp[k] - gm[k]) / (2.0 * used_eps) for k in phi_i}
    if not include_direct:
        direct = {k: np.zeros_like(d) for k, d in direct.items()}
    grads = {k: direct[k] + second[k] for k in phi_i}
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite hypergradient for {k!r}")
    return Hypergradient(grads, direct, second, used_eps, train_loss, val_losses, prime)


def composite_objective(task, values, lang: str, train_batch: Batch, val_batches: Mapping[str, Batch],
                        beta: float, dropout_key=None) -> float:
    """``(1/L) sum_j L_val^j(theta - beta grad_theta L_train^lang, phi_j)`` as a plain number."""
    prime, _, _ = lookahead_theta(task, values, lang, train_batch, beta, _key(dropout_key, 1))
    n = len(task.languages)
    total = 0.0
    for j, other in enumerate(task.languages):
        total += task.loss(*val_batches[other], other, values=prime, dropout_key=_key(dropout_key, 2, j))
    return total / n


def reference_hypergrad(task, values, lang: str, train_batch: Batch, val_batches: Mapping[str, Batch],
                        beta: float, h: float = 1e-3, dropout_key=None) -> dict[str, np.ndarray]:
    """Oracle: Richardson-extrapolated central differences of
    :func:`composite_objective` over every ``phi_lang`` entry (truncation
    error O(h^4)).  Only sensible for small models."""
    out = {}
    base = {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}

    def f(name, idx, delta):
        vals = dict(base)
        arr = base[name].copy()
        arr[idx] += delta
        vals[name] = arr
        return composite_objective(task, vals, lang, train_batch, val_batches, beta, dropout_key)

    for name in task.phi_names(lang):
        g = np.zeros_like(base[name])
        for idx in np.ndindex(*base[name].shape):
            d1 = (f(name, idx, h) - f(name, idx, -h)) / (2 * h)
            d2 = (f(name, idx, h / 2) - f(name, idx, -h / 2)) / h
            g[idx] = (4 * d2 - d1) / 3
        out[name] = g
    return out


# ---------------------------------------------------------------- batches


class CorpusBatches:
    """Train batches by temperature sampling from ``state.rng``; validation
    batches round-robin over each val split, masked by a per-step stream
    derived from ``seed`` (so they need no state of their own)."""

    def __init__(self, corpora: Mapping[str, EncodedCorpus], vocab_size: int, cfg: MetaConfig):
        self.corpora = corpora
        self.vocab_size = vocab_size
        self.cfg = cfg
        t = cfg.train
        self.sampling = SamplingConfig({k: c.size("train") for k, c in corpora.items()}, t.temperature)

    def train_batch(self, rng: np.random.Generator, lang: str | None = None) -> tuple[str, Batch]:
        t = self.cfg.train
        if lang is None:
            lang, ids = sample_batch(self.corpora, self.sampling, t.batch_size, rng)
        else:
            corpus = self.corpora[lang]
            lo, hi = corpus.splits["train"]
            ids = pad_batch([corpus.ids[int(i)] for i in rng.integers(lo, hi, size=t.batch_size)])
        inputs, targets, _ = mask_for_mlm(ids, t.mask_prob, rng, self.vocab_size)
        return lang, (inputs, targets)

    def val_batch(self, lang: str, step: int) -> Batch:
        corpus = self.corpora[lang]
        idx = corpus.split_indices("val")
        b = self.cfg.val_batch_size
        picks = idx[(step * b + np.arange(b)) % idx.size]
        rng = np.random.default_rng([self.cfg.train.seed, 7, step, sorted(self.corpora).index(lang)])
        ids = pad_batch([corpus.ids[int(i)] for i in picks])
        inputs, targets, _ = mask_for_mlm(ids, self.cfg.train.mask_prob, rng, self.vocab_size)
        return inputs, targets


class ToyBatches:
    """Batch source for :class:`~interlab.toys.BilinearToy`: uniform language choice."""

    def __init__(self, languages: Sequence[str]):
        self.languages = tuple(languages)

    def train_batch(self, rng, lang=None):
        if lang is None:
            lang = self.languages[int(rng.integers(len(self.languages)))]
        return lang, ("train",)

    def val_batch(self, lang, step):
        return ("val",)


# ---------------------------------------------------------------- steps


def _update(params, grads, opt: AdamState, lr: float, cfg: MetaConfig) -> None:
    t = cfg.train
    if cfg.optimizer == "sgd":
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {k!r}")
        for k, g in grads.items():
            params[k] -= lr * g
        return
    adam_step(params, grads, opt, lr, t.beta1, t.beta2, t.adam_eps)


def meta_step(task, state: TrainState, batches, cfg: MetaConfig) -> MetaStepReport:
    """One iteration: sample ``i``; update ``phi_i`` by the hypergradient (lr
    alpha); update ``theta`` on a fresh batch of ``i`` (lr beta)."""
    t = cfg.train
    lr = lr_schedule(state.step + 1, t)
    alpha = cfg.meta_lr_scale * lr
    look = lr if cfg.lookahead_lr is None else cfg.lookahead_lr
    key = (t.seed, state.step)

    lang, train_b = batches.train_batch(state.rng)
    val_b = {j: batches.val_batch(j, state.step) for j in task.languages}
    hg = hypergrad_fd(task, task.params, lang, train_b, val_b, look, eps_scale=cfg.eps_scale,
                      include_direct=cfg.include_direct, dropout_key=key)
    phi_g, _ = clip_global_norm(hg.grads, t.clip_norm)
    _update(task.params, phi_g, state.optim["phi"], alpha, cfg)

    _, fresh = batches.train_batch(state.rng, lang)
    loss2, theta_g = task.loss_and_grads(*fresh, lang, wrt=task.theta_names(), dropout_key=(*key, 3))
    theta_g, _ = clip_global_norm(theta_g, t.clip_norm)
    _update(task.params, theta_g, state.optim["theta"], lr, cfg)
    return MetaStepReport(lang, hg.train_loss, hg.val_losses, hg.direct_norm, hg.second_norm, hg.eps)


def fresh_meta_state(task, seed: int) -> TrainState:
    return TrainState(task.params, np.random.default_rng(seed), {"theta": AdamState(), "phi": AdamState()})


def meta_train(model: MultilingualMLM, corpora: Mapping[str, EncodedCorpus], cfg: MetaConfig,
               state: TrainState | None = None, *, run_id: str = "run", emit=None, **kwargs):
    """Pretrain with the two-phase loop.  Emits the usual per-epoch perplexities
    plus ``meta/*`` rows every ``log_every`` steps."""
    if not model.mode.language_specific:
        raise ValueError(f"meta training needs a language-specific capacity mode, got {model.mode.value}")
    if set(corpora) != set(model.languages):
        raise KeyError(f"corpora {sorted(corpora)} do not match model languages {list(model.languages)}")
    state = fresh_meta_state(model, cfg.train.seed) if state is None else state
    batches = CorpusBatches(corpora, model.cfg.vocab_size, cfg)

    def step(model_, corpora_, st, tcfg, samp):
        rep = meta_step(model_, st, batches, cfg)
        recs = rep.records(run_id, st.step + 1) if (st.step + 1) % tcfg.log_every == 0 else []
        return rep.lang, rep.train_loss, recs

    return run_training(model, corpora, cfg.train, step, state, run_id=run_id, emit=emit, **kwargs)


class MetaAdapterPretrainer(BaseEstimator):
    """Estimator front-end for :func:`meta_train` (adapter mode by default)."""

    def __init__(self, model_config: TransformerConfig | None = None, mode: str = "lang_adapter",
                 meta_config: MetaConfig | None = None, random_state: int = 0):
        self.model_config = model_config
        self.mode = mode
        self.meta_config = meta_config
        self.random_state = random_state

    def fit(self, corpora: Mapping[str, EncodedCorpus], y=None):
        cfg = self.model_config or TransformerConfig()
        self.model_ = build_model(cfg, CapacityMode(self.mode), list(corpora), self.random_state)
        self.state_, self.history_ = meta_train(self.model_, corpora, self.meta_config or MetaConfig())
        return self

    def perplexity(self, corpus: EncodedCorpus, split: str = "val") -> float:
        check_is_fitted(self, "model_")
        return perplexity(self.model_, corpus, split)

    def score(self, corpora: Mapping[str, EncodedCorpus], y=None) -> float:
        return -float(np.mean([self.perplexity(c) for c in corpora.values()]))
