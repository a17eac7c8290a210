"""Experiment configuration: a YAML file validated into :class:`ExperimentConfig`.

Every problem in a file is collected and reported together; unknown keys
are errors.  The schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .corpus import LanguageSpec
from .meta import MetaConfig
from .model import CapacityMode, TransformerConfig
from .probes import GradientProbeConfig, HardConcreteConfig
from .pretrain import TrainConfig
from .tasks import FinetuneConfig
from .validation import (Checker, ValidationErrors, check_choice, check_fraction, check_keys, check_language_id,
                         check_positive_int)

STAGES = ("gen-corpus", "learn-bpe", "pretrain", "meta-pretrain", "probe", "prune", "eval", "report")
TRAINERS = ("joint", "meta")
ENV_OUT = "INTERLAB_OUT"
ENV_THREADS = "INTERLAB_THREADS"

ConfigError = ValidationErrors

_SPEC_FIELDS = {f.name for f in dataclasses.fields(LanguageSpec)}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(TransformerConfig)} - {"vocab_size"}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_META_FIELDS = {f.name for f in dataclasses.fields(MetaConfig)} - {"train"}
_FT_FIELDS = {f.name for f in dataclasses.fields(FinetuneConfig)}


@dataclass(frozen=True)
class ExternalLanguage:
    lang: str
    path: str
    format: str = "plain"  # plain | tagged


@dataclass(frozen=True)
class ModelRun:
    name: str
    languages: tuple[str, ...]
    capacity_mode: str = "shared_only"
    trainer: str = "joint"
    per_language: bool = False

    def expand(self) -> list["ModelRun"]:
        """A ``per_language`` run becomes one monolingual run per language, named ``name/lang``."""
        if not self.per_language:
            return [self]
        return [ModelRun(f"{self.name}/{lang}", (lang,), self.capacity_mode, self.trainer) for lang in self.languages]


@dataclass(frozen=True)
class ProbePlan:
    model: str
    pairs: tuple[tuple[str, str], ...]
    config: GradientProbeConfig = GradientProbeConfig()
    during_pretrain: bool = True
    per_checkpoint: int = 10


@dataclass(frozen=True)
class PrunePlan:
    model: str
    languages: tuple[str, ...]
    config: HardConcreteConfig = HardConcreteConfig()
    runs: int = 2
    lambda_grid: tuple[float, ...] = ()
    top_k: int = 20


@dataclass(frozen=True)
class EvalPlan:
    models: tuple[str, ...] = ()
    finetune: FinetuneConfig = FinetuneConfig()
    split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    out_dir: str
    stages: tuple[str, ...]
    languages: tuple[LanguageSpec, ...]
    external: tuple[ExternalLanguage, ...] = ()
    subsample: dict[str, int] = field(default_factory=dict)
    bpe_vocab_size: int = 1000
    bpe_balance: bool = True
    model: TransformerConfig = TransformerConfig()
    train: TrainConfig = TrainConfig()
    meta: MetaConfig = MetaConfig()
    models: tuple[ModelRun, ...] = ()
    probe: ProbePlan | None = None
    prune: PrunePlan | None = None
    eval: EvalPlan = EvalPlan()
    sweep: dict[str, list] = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def language_ids(self) -> list[str]:
        return [s.lang for s in self.languages] + [e.lang for e in self.external]

    def model_runs(self) -> list[ModelRun]:
        return [r for m in self.models for r in m.expand()]

    def digest_source(self) -> dict:
        return self.raw


TOP_KEYS = ("name", "seed", "out_dir", "stages", "languages", "subsample", "bpe", "model", "train", "meta",
            "models", "probe", "prune", "eval", "sweep")


def _section(chk: Checker, raw: dict, key: str, allowed) -> dict:
    val = raw.get(key, {}) or {}
    if not isinstance(val, dict):
        chk.fail(f"{key}: expected a mapping")
        return {}
    check_keys(key, val, allowed, chk)
    return {k: v for k, v in val.items() if k in set(allowed)}


def _build(chk: Checker, where: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        chk.fail(f"{where}: {exc}")
        return None


def parse_config(raw: dict, *, seed: int | None = None, out_dir: str | None = None,
                 stages: list[str] | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a loaded YAML mapping.  ``seed``/``out_dir``/``stages`` override the file."""
    chk = Checker()
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    raw = copy.deepcopy(raw)
    check_keys("config", raw, TOP_KEYS, chk)
    name = raw.get("name", "experiment")
    chk.require(isinstance(name, str) and name != "", "name: expected a nonempty string")
    seed = raw.get("seed", 0) if seed is None else seed
    check_positive_int("seed", seed, chk, allow_zero=True)
    out = out_dir or os.environ.get(ENV_OUT) or raw.get("out_dir") or f"runs/{name}"
    stage_list = stages if stages is not None else raw.get("stages", list(STAGES))
    if not isinstance(stage_list, list) or not stage_list:
        chk.fail("stages: expected a nonempty list")
        stage_list = []
    for s in stage_list:
        check_choice("stages", s, STAGES, chk)

    specs, external = [], []
    langs_raw = raw.get("languages", [])
    if not isinstance(langs_raw, list) or not langs_raw:
        chk.fail("languages: expected a nonempty list")
        langs_raw = []
    for i, entry in enumerate(langs_raw):
        where = f"languages[{i}]"
        if not isinstance(entry, dict):
            chk.fail(f"{where}: expected a mapping")
            continue
        check_language_id(f"{where}.lang", entry.get("lang"), chk)
        if "path" in entry:
            check_keys(where, entry, ("lang", "path", "format"), chk)
            fmt = entry.get("format", "plain")
            check_choice(f"{where}.format", fmt, ("plain", "tagged"), chk)
            path = Path(entry["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            chk.require(path.exists(), f"{where}.path: file {str(path)!r} does not exist")
            external.append(ExternalLanguage(entry.get("lang", "?"), str(path), fmt))
        else:
            check_keys(where, entry, _SPEC_FIELDS, chk)
            if "shared_fraction" in entry:
                check_fraction(f"{where}.shared_fraction", entry["shared_fraction"], chk)
            if "seed" not in entry:
                chk.fail(f"{where}: missing required key 'seed'")
                continue
            spec = _build(chk, where, LanguageSpec, {k: v for k, v in entry.items() if k in _SPEC_FIELDS})
            if spec is not None:
                specs.append(spec)
    ids = [s.lang for s in specs] + [e.lang for e in external]
    if len(set(ids)) != len(ids):
        chk.fail(f"languages: duplicate language ids in {ids}")
    known = set(ids)

    sub = raw.get("subsample", {}) or {}
    if not isinstance(sub, dict):
        chk.fail("subsample: expected a mapping lang -> sentences")
        sub = {}
    for k, v in sub.items():
        chk.require(k in known, f"subsample: unknown language {k!r}")
        check_positive_int(f"subsample.{k}", v, chk)

    bpe = _section(chk, raw, "bpe", ("vocab_size", "balance"))
    bpe_vocab = bpe.get("vocab_size", 1000)
    check_positive_int("bpe.vocab_size", bpe_vocab, chk)
    model_kw = _section(chk, raw, "model", _MODEL_FIELDS)
    model = _build(chk, "model", TransformerConfig, model_kw) or TransformerConfig()
    train_kw = _section(chk, raw, "train", _TRAIN_FIELDS)
    train = _build(chk, "train", TrainConfig, {**train_kw, "seed": seed}) or TrainConfig()
    meta_kw = _section(chk, raw, "meta", _META_FIELDS)
    meta = _build(chk, "meta", MetaConfig, {**meta_kw, "train": train}) or MetaConfig()

    models = []
    models_raw = raw.get("models", []) or []
    if not isinstance(models_raw, list):
        chk.fail("models: expected a list")
        models_raw = []
    for i, entry in enumerate(models_raw):
        where = f"models[{i}]"
        if not isinstance(entry, dict):
            chk.fail(f"{where}: expected a mapping")
            continue
        check_keys(where, entry, ("name", "languages", "capacity_mode", "trainer", "per_language"), chk)
        mname = entry.get("name")
        chk.require(isinstance(mname, str) and mname and "/" not in mname, f"{where}.name: nonempty, no '/'")
        mlangs = entry.get("languages", ids)
        if not isinstance(mlangs, list) or not mlangs:
            chk.fail(f"{where}.languages: expected a nonempty list")
            mlangs = []
        for lang in mlangs:
            chk.require(lang in known, f"{where}.languages: unknown language {lang!r}")
        mode = entry.get("capacity_mode", "shared_only")
        check_choice(f"{where}.capacity_mode", mode, [m.value for m in CapacityMode], chk)
        trainer = entry.get("trainer", "joint")
        check_choice(f"{where}.trainer", trainer, TRAINERS, chk)
        if trainer == "meta" and mode in ("shared_only", "shared_adapter"):
            chk.fail(f"{where}: the meta trainer needs a language-specific capacity_mode")
        models.append(ModelRun(str(mname), tuple(mlangs), mode, trainer, bool(entry.get("per_language", False))))
    names = [r.name for m in models for r in m.expand()]
    if len(set(names)) != len(names):
        chk.fail(f"models: duplicate model names {names}")

    probe = None
    if raw.get("probe"):
        p = _section(chk, raw, "probe", ("model", "pairs", "interval", "micro_batches", "batch_size",
                                          "during_pretrain", "per_checkpoint"))
        chk.require(p.get("model") in names, f"probe.model: {p.get('model')!r} is not a model name")
        pairs = p.get("pairs", [])
        if not isinstance(pairs, list) or not pairs:
            chk.fail("probe.pairs: expected a nonempty list of [lang_a, lang_b]")
            pairs = []
        clean = []
        for pair in pairs:
            if not (isinstance(pair, list) and len(pair) == 2 and all(x in known for x in pair)):
                chk.fail(f"probe.pairs: bad pair {pair!r}")
            else:
                clean.append(tuple(pair))
        pc = _build(chk, "probe", GradientProbeConfig,
                    {k: p[k] for k in ("interval", "micro_batches", "batch_size") if k in p}) or GradientProbeConfig()
        probe = ProbePlan(p.get("model", ""), tuple(clean), pc, bool(p.get("during_pretrain", True)),
                          int(p.get("per_checkpoint", 10)))

    prune = None
    if raw.get("prune"):
        hc_keys = {f.name for f in dataclasses.fields(HardConcreteConfig)}
        p = _section(chk, raw, "prune", {"model", "languages", "runs", "lambda_grid", "top_k"} | hc_keys)
        chk.require(p.get("model") in names, f"prune.model: {p.get('model')!r} is not a model name")
        plangs = p.get("languages", ids)
        for lang in plangs:
            chk.require(lang in known, f"prune.languages: unknown language {lang!r}")
        check_positive_int("prune.runs", p.get("runs", 2), chk)
        hc = _build(chk, "prune", HardConcreteConfig, {k: v for k, v in p.items() if k in hc_keys}) or HardConcreteConfig()
        grid = tuple(float(x) for x in p.get("lambda_grid", []) or [])
        prune = PrunePlan(p.get("model", ""), tuple(plangs), hc, int(p.get("runs", 2)), grid, int(p.get("top_k", 20)))

    e = _section(chk, raw, "eval", {"models", "split"} | _FT_FIELDS)
    emodels = e.get("models", [m.name for m in models])
    for m in emodels:
        chk.require(m in {x.name for x in models}, f"eval.models: unknown model {m!r}")
    ft_kw = {k: (tuple(v) if k == "lr_grid" else v) for k, v in e.items() if k in _FT_FIELDS}
    ft = _build(chk, "eval", FinetuneConfig, ft_kw) or FinetuneConfig()
    split = e.get("split", "test")
    check_choice("eval.split", split, ("val", "test"), chk)

    sweep = raw.get("sweep", {}) or {}
    if not isinstance(sweep, dict):
        chk.fail("sweep: expected a mapping")
        sweep = {}
    check_keys("sweep", sweep, ("shared_fraction",), chk)
    for v in sweep.get("shared_fraction", []):
        check_fraction("sweep.shared_fraction", v, chk)

    stage_set = set(stage_list)
    if "probe" in stage_set and probe is None:
        chk.fail("stages include 'probe' but there is no probe section")
    if "prune" in stage_set and prune is None:
        chk.fail("stages include 'prune' but there is no prune section")
    if stage_set & {"pretrain", "meta-pretrain", "eval", "probe", "prune"} and not models:
        chk.fail("stages need trained models but the models list is empty")
    chk.raise_if_any()
    return ExperimentConfig(name, int(seed), str(out), tuple(stage_list), tuple(specs), tuple(external),
                            {k: int(v) for k, v in sub.items()}, int(bpe_vocab), bool(bpe.get("balance", True)),
                            model, train, meta, tuple(models), probe, prune, EvalPlan(tuple(emodels), ft, split),
                            {k: list(v) for k, v in sweep.items()}, {**raw, "seed": int(seed)})


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    return parse_config(raw, base_dir=path.parent, **overrides)


def apply_thread_env() -> Any:
    """Honor ``INTERLAB_THREADS`` by limiting BLAS thread pools; returns the limiter (or None)."""
    n = os.environ.get(ENV_THREADS)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))
