"""Paired experiments on synthetic languages, shared by the acceptance suite
and the canned pipeline configs.

All experiments use the same conventions: a "pair at similarity s" is two
languages in one family, both with ``shared_fraction = s`` and the same
grammar parameters, so ``s`` is the only thing that differs between rows of
a similarity sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, EncodedCorpus, LanguageSpec, build_languages, encode_corpus, subsample
from .meta import MetaConfig, meta_train
from .model import MultilingualMLM, TransformerConfig, build_model
from .pretrain import TrainConfig, perplexity, train
from .probes import (GradientProbeConfig, HardConcreteConfig, finite_mean, learn_masks, mask_similarity_by_layer,
                     mlm_batch_fn, probe_pair)
from .tasks import FinetuneConfig, evaluate_f1, finetune
from .tokenizer import BpeModel, learn_bpe


def desk_train_config(steps: int, seed: int, **overrides) -> TrainConfig:
    """Single-epoch schedule used by the experiments (peak lr raised for short runs)."""
    base = dict(peak_lr=2e-3, warmup_steps=min(100, steps), steps_per_epoch=steps, n_epochs=1, seed=seed,
                log_every=max(1, steps // 4))
    base.update(overrides)
    return TrainConfig(**base)


def similarity_pair(s: float, seed: int, corpus_size: int = 4000, names: Sequence[str] = ("aa", "bb"),
                    **kw) -> list[LanguageSpec]:
    return [LanguageSpec(names[0], 10 * seed + 1, shared_fraction=s, grammar_seed=seed, corpus_size=corpus_size, **kw),
            LanguageSpec(names[1], 10 * seed + 2, shared_fraction=s, grammar_seed=seed, corpus_size=corpus_size, **kw)]


@dataclass
class Lab:
    corpora: dict[str, Corpus]
    bpe: BpeModel
    encoded: dict[str, EncodedCorpus]

    def model_config(self, **kw) -> TransformerConfig:
        return TransformerConfig(vocab_size=self.bpe.vocab_size, **kw)

    def subset(self, langs: Sequence[str]) -> dict[str, EncodedCorpus]:
        return {k: self.encoded[k] for k in langs}


def prepare_lab(specs: Sequence[LanguageSpec], bpe_vocab: int = 1000,
                subsample_to: Mapping[str, int] | None = None, seed: int = 0) -> Lab:
    """Generate, optionally subsample (keeping eval splits), learn one shared BPE, encode."""
    corpora = build_languages(specs)
    for lang, n in (subsample_to or {}).items():
        corpora[lang] = subsample(corpora[lang], n, seed, keep_eval_splits=True)
    bpe = learn_bpe([c.texts("train") for c in corpora.values()], bpe_vocab)
    return Lab(corpora, bpe, {k: encode_corpus(c, bpe) for k, c in corpora.items()})


def pretrain(lab: Lab, langs: Sequence[str], mode: str, tcfg: TrainConfig, seed: int,
             trainer: str = "joint", meta: MetaConfig | None = None, **train_kw) -> MultilingualMLM:
    model = build_model(lab.model_config(), mode, list(langs), seed)
    corpora = lab.subset(langs)
    if trainer == "meta":
        meta_train(model, corpora, replace(meta or MetaConfig(), train=tcfg), **train_kw)
    else:
        train(model, corpora, tcfg, **train_kw)
    return model


def bootstrap_mean_ci(x: Sequence[float], n_boot: int = 2000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    x = np.asarray([v for v in x if math.isfinite(v)], dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    a = (1.0 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


# ---------------------------------------------------------------- gradient conflict


@dataclass
class ProbeSeries:
    within: list[float] = field(default_factory=list)
    cross: list[float] = field(default_factory=list)

    @property
    def paired_diffs(self) -> list[float]:
        return [w - c for w, c in zip(self.within, self.cross) if math.isfinite(w) and math.isfinite(c)]


def gradient_conflict(s: float, seed: int = 0, steps: int = 1000, corpus_size: int = 2000,
                      probe: GradientProbeConfig = GradientProbeConfig(interval=10, micro_batches=2)) -> ProbeSeries:
    """Probe within- and cross-language gradient cosines every ``interval``
    steps while jointly pretraining the pair at similarity ``s``."""
    lab = prepare_lab(similarity_pair(s, seed, corpus_size))
    series = ProbeSeries()
    rng = np.random.default_rng([seed, 99])

    def hook(model, state):
        if state.step % probe.interval == 0:
            r = probe_pair(model, lab.encoded, "aa", "bb", probe, rng)
            series.within.append(r["within"])
            series.cross.append(r["cross"])

    pretrain(lab, ["aa", "bb"], "shared_only", desk_train_config(steps, seed), seed, on_step=hook)
    return series


# ---------------------------------------------------------------- interference


def interference(seed: int = 0, steps: int = 800, corpus_size: int = 4000, low_size: int = 100,
                 tagging: FinetuneConfig | None = None, low_resource: bool = True) -> dict:
    """Mono vs Joint validation perplexity on the s=0 pair, with ample data and
    with ``aa`` subsampled to ``low_size`` training sentences.  With ``tagging``
    the ample-data entries also carry within-language test F1 (``*_f1``)."""
    specs = similarity_pair(0.0, seed, corpus_size)
    tcfg = desk_train_config(steps, seed)
    out = {"ample": {}, "low": {}}
    lab = prepare_lab(specs)
    joint = pretrain(lab, ["aa", "bb"], "shared_only", tcfg, seed)
    for lang in ("aa", "bb"):
        mono = pretrain(lab, [lang], "shared_only", tcfg, seed)
        row = {"mono": perplexity(mono, lab.encoded[lang], "val"),
               "joint": perplexity(joint, lab.encoded[lang], "val")}
        if tagging is not None:
            row["mono_f1"] = tagging_scores(mono, lab, [lang], [lang], tagging, seed)[(lang, lang)]
            row["joint_f1"] = tagging_scores(joint, lab, [lang], [lang], tagging, seed)[(lang, lang)]
        out["ample"][lang] = row
    if not low_resource:
        return out
    low = prepare_lab(specs, subsample_to={"aa": low_size}, seed=seed)
    mono = pretrain(low, ["aa"], "shared_only", tcfg, seed)
    joint = pretrain(low, ["aa", "bb"], "shared_only", tcfg, seed)
    out["low"]["aa"] = {"mono": perplexity(mono, low.encoded["aa"], "val"),
                        "joint": perplexity(joint, low.encoded["aa"], "val")}
    return out


# ---------------------------------------------------------------- downstream


def tagging_scores(model: MultilingualMLM, lab: Lab, sources: Sequence[str], targets: Sequence[str],
                   ft: FinetuneConfig, seed: int) -> dict[tuple[str, str], float]:
    """Test-split F1 for every (source, target); within-language when equal."""
    out = {}
    for src in sources:
        tagged = finetune(model, lab.encoded[src], ft, seed)
        for tgt in targets:
            out[(src, tgt)] = evaluate_f1(tagged, lab.encoded[tgt], "test").f1
    return out


CAPACITY_MODES = ("shared_only", "lang_ffn", "lang_attn", "lang_adapter", "shared_adapter", "meta_adapter")


def capacity_modes(seed: int = 0, steps: int = 800, s: float = 0.5, corpus_size: int = 4000,
                   modes: Sequence[str] = ("shared_only", "lang_ffn", "lang_adapter", "meta_adapter"),
                   ft: FinetuneConfig = FinetuneConfig()) -> dict[str, dict[str, float]]:
    """Mean within-language and zero-shot F1 (both directions) per capacity mode."""
    lab = prepare_lab(similarity_pair(s, seed, corpus_size))
    tcfg = desk_train_config(steps, seed)
    out = {}
    for mode in modes:
        if mode == "meta_adapter":
            model = pretrain(lab, ["aa", "bb"], "lang_adapter", tcfg, seed, trainer="meta")
        else:
            model = pretrain(lab, ["aa", "bb"], mode, tcfg, seed)
        sc = tagging_scores(model, lab, ["aa", "bb"], ["aa", "bb"], ft, seed)
        out[mode] = {"within": float(np.mean([sc[("aa", "aa")], sc[("bb", "bb")]])),
                     "zero_shot": float(np.mean([sc[("aa", "bb")], sc[("bb", "aa")]])),
                     "test_ppl": float(np.mean([perplexity(model, lab.encoded[k], "test") for k in ("aa", "bb")]))}
    return out


def trilingual(seed: int = 0, steps: int = 800, corpus_size: int = 4000, s3: float = 0.9,
               ft: FinetuneConfig = FinetuneConfig()) -> dict[str, dict[str, float]]:
    """JointPair (lg1, lg2) vs JointTri (+ lg3 sharing lg1's grammar and more of
    its vocabulary).  Within-language F1 on lg1; zero-shot lg2 -> lg1."""
    specs = [LanguageSpec("lg1", 10 * seed + 1, shared_fraction=0.5, grammar_seed=seed, corpus_size=corpus_size),
             LanguageSpec("lg2", 10 * seed + 2, shared_fraction=0.5, grammar_seed=seed + 1, corpus_size=corpus_size),
             LanguageSpec("lg3", 10 * seed + 3, shared_fraction=s3, grammar_seed=seed, corpus_size=corpus_size)]
    lab = prepare_lab(specs)
    tcfg = desk_train_config(steps, seed)
    out = {}
    for name, langs in (("pair", ["lg1", "lg2"]), ("tri", ["lg1", "lg2", "lg3"])):
        model = pretrain(lab, langs, "shared_only", tcfg, seed)
        sc = tagging_scores(model, lab, ["lg1", "lg2"], ["lg1"], ft, seed)
        out[name] = {"within": sc[("lg1", "lg1")], "zero_shot": sc[("lg2", "lg1")]}
    return out


# ---------------------------------------------------------------- masks


def mask_similarity(seed: int = 0, steps: int = 600, corpus_size: int = 2000,
                    cfg: HardConcreteConfig = HardConcreteConfig(steps=300)) -> dict:
    """Two independent mask runs on ``aa`` and one on ``bb`` over a frozen Joint
    model of the s=0 pair; per (layer, block) within vs cross similarity."""
    lab = prepare_lab(similarity_pair(0.0, seed, corpus_size))
    model = pretrain(lab, ["aa", "bb"], "shared_only", desk_train_config(steps, seed), seed)
    v = model.cfg.vocab_size

    def run(lang, s):
        return learn_masks(model, mlm_batch_fn(lab.encoded[lang], v, cfg.batch_size, cfg.mask_prob), lang, cfg, s)

    a1, a2, b = run("aa", 1000 * seed + 1), run("aa", 1000 * seed + 2), run("bb", 1000 * seed + 3)
    return {"within": mask_similarity_by_layer(a1, a2), "cross": mask_similarity_by_layer(a1, b),
            "masks": (a1, a2, b)}


def summarize_probes(series: ProbeSeries) -> dict[str, float]:
    return {"within": finite_mean(series.within), "cross": finite_mean(series.cross), "n": len(series.within)}
