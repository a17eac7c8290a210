"""Joint or monolingual MLM pretraining with Adam and a warmup/inverse-sqrt schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import NumericError
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import EncodedCorpus, SamplingConfig, mask_for_mlm, pad_batch, sample_batch
from .metrics import MetricsRecord, record
from .model import CapacityMode, MultilingualMLM, TransformerConfig, build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps_per_epoch: int = 200
    n_epochs: int = 5
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    temperature: float = 2.0
    mask_prob: float = 0.15
    eval_seed: int = 1234
    eval_batch_size: int = 64
    eval_split: str = "val"
    log_every: int = 50

    def __post_init__(self):
        for k in ("steps_per_epoch", "batch_size", "eval_batch_size", "log_every"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.n_epochs < 0 or self.warmup_steps < 0:
            raise ValueError("n_epochs and warmup_steps must be nonnegative")
        if self.n_epochs and self.warmup_steps > self.steps_per_epoch * self.n_epochs:
            raise ValueError("warmup_steps exceeds the total number of steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.n_epochs


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then ``peak_lr * sqrt(warmup / step)``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_steps
    if w == 0:
        return cfg.peak_lr
    if step < w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * math.sqrt(w / step)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        c = max_norm / norm
        return {k: g * c for k, g in grads.items()}, norm
    return dict(grads), norm


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam on the parameters named in ``grads`` (others untouched).

    Raises :class:`NumericError` before touching anything if a gradient is
    not finite.
    """
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k!r}")
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        v = state.v[k]
        t = state.t.get(k, 0) + 1
        state.t[k] = t
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    rng: np.random.Generator
    optim: dict[str, AdamState]
    step: int = 0
    epoch: int = 0
    skipped: int = 0
    loss_sum: dict[str, float] = field(default_factory=dict)
    batches: dict[str, int] = field(default_factory=dict)
    total_loss: float = 0.0
    total_batches: int = 0

    @classmethod
    def fresh(cls, model: MultilingualMLM, seed: int, groups: Sequence[str] = ("all",)) -> "TrainState":
        return cls(model.params, np.random.default_rng(seed), {g: AdamState() for g in groups})

    def account(self, lang: str, loss: float) -> None:
        self.loss_sum[lang] = self.loss_sum.get(lang, 0.0) + loss
        self.batches[lang] = self.batches.get(lang, 0) + 1
        self.total_loss += loss
        self.total_batches += 1

    def to_checkpoint(self, model: MultilingualMLM, config_digest: str = "", extra: dict | None = None) -> Checkpoint:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        adam_t = {}
        for g, st in self.optim.items():
            for k in st.m:
                tensors[f"adam/{g}/m/{k}"] = st.m[k]
                tensors[f"adam/{g}/v/{k}"] = st.v[k]
            adam_t[g] = dict(st.t)
        meta = {"model": model.describe(), "epoch": self.epoch, "skipped": self.skipped,
                "rng": _jsonable(self.rng.bit_generator.state), "adam_t": adam_t,
                "optim_groups": list(self.optim),
                "loss_sum": self.loss_sum, "batches": self.batches,
                "total_loss": self.total_loss, "total_batches": self.total_batches}
        meta.update(extra or {})
        return Checkpoint(config_digest, self.step, tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> tuple["TrainState", MultilingualMLM]:
        m = ckpt.meta["model"]
        model = MultilingualMLM(TransformerConfig(**m["config"]), m["mode"], m["languages"], m["seed"])
        for k in model.params:
            model.params[k] = ckpt.tensors[f"param/{k}"].copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng"]
        optim = {}
        for g in ckpt.meta["optim_groups"]:
            st = AdamState()
            st.t = {k: int(v) for k, v in ckpt.meta["adam_t"][g].items()}
            for k in st.t:
                st.m[k] = ckpt.tensors[f"adam/{g}/m/{k}"].copy()
                st.v[k] = ckpt.tensors[f"adam/{g}/v/{k}"].copy()
            optim[g] = st
        state = cls(model.params, rng, optim, ckpt.step, ckpt.meta["epoch"], ckpt.meta["skipped"],
                    dict(ckpt.meta["loss_sum"]), {k: int(v) for k, v in ckpt.meta["batches"].items()},
                    float(ckpt.meta["total_loss"]), int(ckpt.meta["total_batches"]))
        return state, model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- evaluation


def perplexity(model: MultilingualMLM, corpus: EncodedCorpus, split: str = "val", lang: str | None = None,
               mask_prob: float = 0.15, eval_seed: int = 1234, batch_size: int = 64,
               values: Mapping[str, np.ndarray] | None = None) -> float:
    """exp(mean masked-token cross-entropy) with a fixed masking seed, no dropout."""
    lang = corpus.lang if lang is None else lang
    idx = corpus.split_indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} of {corpus.lang!r} is empty")
    rng = np.random.default_rng(eval_seed)
    nll, count = 0.0, 0
    for lo in range(0, idx.size, batch_size):
        batch = pad_batch([corpus.ids[int(i)] for i in idx[lo:lo + batch_size]])
        inputs, targets, _ = mask_for_mlm(batch, mask_prob, rng, model.cfg.vocab_size)
        n = int((targets >= 0).sum())
        if n:
            nll += model.loss(inputs, targets, lang, values=values) * n
            count += n
    if count == 0:
        raise ValueError("no tokens were selected for evaluation")
    return math.exp(nll / count)


def assert_routing_isolation(model: MultilingualMLM, corpora: Mapping[str, EncodedCorpus],
                             mask_prob: float = 0.15, seed: int = 0) -> None:
    """Gradients of every non-routed language's parameters must be exactly zero."""
    if not model.mode.language_specific:
        return
    rng = np.random.default_rng(seed)
    for lang, corpus in corpora.items():
        batch = pad_batch([corpus.ids[int(i)] for i in corpus.split_indices("train")[:8]])
        inputs, targets, _ = mask_for_mlm(batch, mask_prob, rng, model.cfg.vocab_size)
        _, grads = model.loss_and_grads(inputs, targets, lang, wrt=list(model.params))
        for other in model.languages:
            if other == lang:
                continue
            for k in model.phi_names(other):
                if np.any(grads[k] != 0.0):
                    raise RuntimeError(f"routing leak: {k} received gradient from language {lang!r}")


# ---------------------------------------------------------------- training loop


def sampling_config(corpora: Mapping[str, EncodedCorpus], temperature: float) -> SamplingConfig:
    return SamplingConfig({k: c.size("train") for k, c in corpora.items()}, temperature)


def plain_step(model, corpora, state: TrainState, cfg: TrainConfig, samp: SamplingConfig):
    """One Adam step on a temperature-sampled monolingual batch.

    Step functions return ``(language, loss, extra_records)``.
    """
    lang, batch = sample_batch(corpora, samp, cfg.batch_size, state.rng)
    inputs, targets, _ = mask_for_mlm(batch, cfg.mask_prob, state.rng, model.cfg.vocab_size)
    loss, grads = model.loss_and_grads(inputs, targets, lang, dropout_key=(cfg.seed, state.step))
    grads, _ = clip_global_norm(grads, cfg.clip_norm)
    adam_step(model.params, grads, state.optim["all"], lr_schedule(state.step + 1, cfg),
              cfg.beta1, cfg.beta2, cfg.adam_eps)
    return lang, loss, []


def run_training(model: MultilingualMLM, corpora: Mapping[str, EncodedCorpus], cfg: TrainConfig,
                 step_fn, state: TrainState, *, run_id: str = "run", emit=None,
                 checkpoint_dir=None, config_digest: str = "", checkpoint_extra: dict | None = None,
                 on_epoch=None, on_step=None) -> tuple[TrainState, list[MetricsRecord]]:
    samp = sampling_config(corpora, cfg.temperature)
    records: list[MetricsRecord] = []

    def out(recs):
        records.extend(recs)
        if emit is not None:
            emit(recs)

    window: list[float] = []
    while state.epoch < cfg.n_epochs:
        for _ in range(cfg.steps_per_epoch):
            try:
                lang, loss, extra = step_fn(model, corpora, state, cfg, samp)
            except NumericError as exc:
                state.skipped += 1
                log.warning("step %d skipped: %s", state.step, exc)
            else:
                state.account(lang, loss)
                window.append(loss)
                if extra:
                    out(extra)
            state.step += 1
            if on_step is not None:
                extra = on_step(model, state)
                if extra:
                    out(extra)
            if state.step % cfg.log_every == 0 and window:
                out([record(run_id, state.step, "train/loss", float(np.mean(window))),
                     record(run_id, state.step, "train/lr", lr_schedule(state.step, cfg)),
                     record(run_id, state.step, "train/skipped_steps", state.skipped)])
                window = []
        state.epoch += 1
        assert_routing_isolation(model, corpora, cfg.mask_prob, seed=cfg.eval_seed)
        recs = []
        for lang, corpus in corpora.items():
            if state.batches.get(lang):
                recs.append(record(run_id, state.step, "train/loss_lang",
                                   state.loss_sum[lang] / state.batches[lang], lang))
            recs.append(record(run_id, state.step, "val/perplexity",
                               perplexity(model, corpus, cfg.eval_split, lang, cfg.mask_prob, cfg.eval_seed,
                                          cfg.eval_batch_size), lang))
        out(recs)
        if checkpoint_dir is not None:
            ck = state.to_checkpoint(model, config_digest, checkpoint_extra)
            save_checkpoint(ck, Path(checkpoint_dir) / f"epoch{state.epoch:03d}.ckpt")
            save_checkpoint(ck, Path(checkpoint_dir) / "last.ckpt")
        if on_epoch is not None:
            on_epoch(state)
    return state, records


def train(model: MultilingualMLM, corpora: Mapping[str, EncodedCorpus], cfg: TrainConfig,
          state: TrainState | None = None, **kwargs) -> tuple[TrainState, list[MetricsRecord]]:
    """Pretrain ``model`` on ``corpora`` (one entry = monolingual, several = joint).

    Passing a ``state`` restored from a checkpoint resumes bit-identically;
    ``cfg.n_epochs`` is the total epoch target, not the number still to run.
    """
    missing = [k for k in corpora if model.mode.language_specific and k not in model.languages]
    if missing:
        raise KeyError(f"corpora for unregistered languages: {missing}")
    state = TrainState.fresh(model, cfg.seed) if state is None else state
    if state.params is not model.params:
        raise ValueError("state does not belong to this model")
    return run_training(model, corpora, cfg, plain_step, state, **kwargs)


def resume(checkpoint_path, corpora, cfg: TrainConfig, **kwargs):
    state, model = TrainState.from_checkpoint(load_checkpoint(checkpoint_path))
    state, records = train(model, corpora, cfg, state, **kwargs)
    return model, state, records


class MLMPretrainer(BaseEstimator):
    """Estimator front-end: ``fit(corpora)`` with ``corpora`` a dict
    ``lang -> EncodedCorpus``; ``score`` is minus the mean validation perplexity."""

    def __init__(self, model_config: TransformerConfig | None = None, mode: str = "shared_only",
                 train_config: TrainConfig | None = None, random_state: int = 0):
        self.model_config = model_config
        self.mode = mode
        self.train_config = train_config
        self.random_state = random_state

    def _build(self, corpora):
        cfg = self.model_config or TransformerConfig()
        return build_model(cfg, CapacityMode(self.mode), list(corpora), self.random_state)

    def fit(self, corpora: Mapping[str, EncodedCorpus], y=None):
        self.model_ = self._build(corpora)
        self.state_, self.history_ = train(self.model_, corpora, self.train_config or TrainConfig())
        return self

    def perplexity(self, corpus: EncodedCorpus, split: str = "val") -> float:
        check_is_fitted(self, "model_")
        return perplexity(self.model_, corpus, split)

    def score(self, corpora: Mapping[str, EncodedCorpus], y=None) -> float:
        return -float(np.mean([self.perplexity(c) for c in corpora.values()]))


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
