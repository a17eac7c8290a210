"""Config-driven pipeline: gen-corpus -> learn-bpe -> pretrain / meta-pretrain
-> probe -> prune -> eval -> report, with resumable stages.

Output directory layout::

    corpora/<lang>.tsv, corpora/manifest.json
    bpe.txt
    models/<name>/epochNNN.ckpt, last.ckpt, final.ckpt
    metrics.csv
    masks_run<r>.tsv, top_k.tsv
    eval.csv
    report/*.csv, report/summary.txt
    stages/<stage>.done
"""

from __future__ import annotations

import csv
import json
import logging
import os
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import config_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelRun
from .corpus import (Corpus, build_languages, encode_corpus, ingest_plain_text, read_corpus, subsample,
                     write_corpus)
from .meta import meta_train
from .metrics import FIELDS, MetricsWriter, read_metrics, record
from .model import MultilingualMLM, build_model
from .pretrain import TrainState, train
from .probes import (learn_masks, mask_similarity_by_layer, mlm_batch_fn, probe_pair, select_lambda, top_k_groups,
                     write_masks)
from .report import write_report, write_similarity_table
from .tasks import SUITE_COLUMNS, interference_suite
from .tokenizer import BpeModel, learn_bpe

log = logging.getLogger(__name__)


class RunLockedError(RuntimeError):
    pass


class StageInputError(RuntimeError):
    """A stage needs artifacts an earlier stage has not produced."""


class RunLock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path.parent} is owned by another run (remove {self.path} if it is stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _sub_seed(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


def truncate_metrics(path: Path, run_id: str, max_step: int) -> None:
    """Drop rows of ``run_id`` past ``max_step`` (written after the checkpoint a resume starts from)."""
    if not path.exists():
        return
    rows = list(read_metrics(path))
    keep = [r for r in rows if not (r["run_id"] == run_id and int(r["step"]) > max_step)]
    if len(keep) == len(rows):
        return
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        w.writerows(keep)
    os.replace(tmp, path)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, resume: bool = False):
        self.cfg = cfg
        self.resume = resume
        self.out = Path(cfg.out_dir)
        self.digest = config_digest(cfg.digest_source())
        self._corpora: dict[str, Corpus] | None = None
        self._bpe: BpeModel | None = None

    # ---------------------------------------------------------------- paths and state
    @property
    def metrics_path(self) -> Path:
        return self.out / "metrics.csv"

    def model_dir(self, name: str) -> Path:
        return self.out / "models" / name

    def run_id(self, what: str) -> str:
        return f"{self.cfg.name}:{what}"

    def _done_path(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.done"

    def _is_done(self, stage: str) -> bool:
        p = self._done_path(stage)
        return p.exists() and json.loads(p.read_text()).get("digest") == self.digest

    def _mark_done(self, stage: str) -> None:
        p = self._done_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({"digest": self.digest}))

    def writer(self) -> MetricsWriter:
        return MetricsWriter(self.metrics_path)

    # ---------------------------------------------------------------- driver
    def run(self, stages=None) -> None:
        stages = list(stages or self.cfg.stages)
        with RunLock(self.out):
            if self.cfg.sweep:
                self._run_sweep(stages)
                return
            self._run_stages(stages)

    def _run_stages(self, stages) -> None:
        for stage in stages:
            if self.resume and self._is_done(stage):
                log.info("stage %s already complete; skipping", stage)
                continue
            log.info("stage %s", stage)
            getattr(self, "stage_" + stage.replace("-", "_"))()
            self._mark_done(stage)

    def _run_sweep(self, stages) -> None:
        values = self.cfg.sweep["shared_fraction"]
        subdirs = []
        for v in values:
            sub = replace(self.cfg, languages=tuple(replace(s, shared_fraction=float(v)) for s in self.cfg.languages),
                          out_dir=str(self.out / "sweep" / f"s={float(v):g}"), sweep={},
                          raw={**self.cfg.raw, "sweep": {}, "sweep_value": float(v)})
            p = Pipeline(sub, self.resume)
            p._run_stages([s for s in stages if s != "report"] + (["report"] if "report" in stages else []))
            subdirs.append((float(v), p.out))
        if "report" in stages:
            write_similarity_table(self.out / "report" / "similarity_table.csv", subdirs, self.cfg)

    # ---------------------------------------------------------------- loading helpers
    def corpora(self) -> dict[str, Corpus]:
        if self._corpora is None:
            man = self.out / "corpora" / "manifest.json"
            if not man.exists():
                raise StageInputError("no corpora found; run gen-corpus first")
            meta = json.loads(man.read_text())
            self._corpora = {}
            for lang, info in meta.items():
                c = read_corpus(self.out / "corpora" / f"{lang}.tsv", lang, info["splits"], info["n_tags"])
                self._corpora[lang] = c
        return self._corpora

    def bpe(self) -> BpeModel:
        if self._bpe is None:
            path = self.out / "bpe.txt"
            if not path.exists():
                raise StageInputError("no BPE model found; run learn-bpe first")
            self._bpe = BpeModel.load(path)
        return self._bpe

    def encoded(self, langs=None):
        corpora = self.corpora()
        langs = list(corpora) if langs is None else langs
        bpe = self.bpe()
        return {k: encode_corpus(corpora[k], bpe, self.cfg.model.max_seq_len) for k in langs}

    def model_config(self):
        return replace(self.cfg.model, vocab_size=self.bpe().vocab_size)

    def load_model(self, name: str) -> MultilingualMLM:
        path = self.model_dir(name) / "final.ckpt"
        if not path.exists():
            raise StageInputError(f"model {name!r} has no final checkpoint; run pretrain/meta-pretrain first")
        ck = load_checkpoint(path)
        if ck.config_digest != self.digest:
            raise StageInputError(f"{path} was written under a different config (digest {ck.config_digest})")
        if ck.meta.get("bpe") != self.bpe().fingerprint():
            raise StageInputError(f"{path} was trained with a different BPE model than {self.out / 'bpe.txt'}")
        _, model = TrainState.from_checkpoint(ck)
        return model

    # ---------------------------------------------------------------- stages
    def stage_gen_corpus(self) -> None:
        cfg = self.cfg
        corpora = build_languages(list(cfg.languages)) if cfg.languages else {}
        for ext in cfg.external:
            if ext.format == "tagged":
                c = read_corpus(ext.path, ext.lang)
                n_tags = 1 + max((max(t) for t in c.tags if t), default=0)
                corpora[ext.lang] = Corpus(ext.lang, c.sentences, c.tags, c.splits, n_tags)
            else:
                corpora[ext.lang] = ingest_plain_text(ext.path, ext.lang)
        for lang, n in cfg.subsample.items():
            corpora[lang] = subsample(corpora[lang], n, _sub_seed(cfg.seed, "subsample", lang), keep_eval_splits=True)
        d = self.out / "corpora"
        d.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for lang in cfg.language_ids:
            c = corpora[lang]
            write_corpus(c, d / f"{lang}.tsv")
            manifest[lang] = {"size": len(c), "splits": {k: list(v) for k, v in c.splits.items()},
                              "n_tags": c.n_tags, "word_types": len(c.word_types())}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        self._corpora = None

    def stage_learn_bpe(self) -> None:
        corpora = self.corpora()
        bpe = learn_bpe([c.texts("train") for c in corpora.values()], self.cfg.bpe_vocab_size, self.cfg.bpe_balance)
        bpe.save(self.out / "bpe.txt")
        self._bpe = None

    def stage_pretrain(self) -> None:
        for run in self.cfg.model_runs():
            if run.trainer == "joint":
                self._train_run(run)

    def stage_meta_pretrain(self) -> None:
        for run in self.cfg.model_runs():
            if run.trainer == "meta":
                self._train_run(run)

    def _probe_hook(self, run: ModelRun, enc):
        plan = self.cfg.probe
        if plan is None or not plan.during_pretrain or plan.model != run.name:
            return None
        rid = self.run_id(run.name + ":probe")

        def hook(model, state):
            if state.step % plan.config.interval:
                return []
            rng = np.random.default_rng([self.cfg.seed, 5, state.step])
            recs = []
            for a, b in plan.pairs:
                r = probe_pair(model, enc, a, b, plan.config, rng)
                recs.append(record(rid, state.step, "probe/grad_cosine", r["within"], f"{a}|{a}"))
                recs.append(record(rid, state.step, "probe/grad_cosine", r["cross"], f"{a}|{b}"))
            return recs

        return hook

    def _train_run(self, run: ModelRun) -> None:
        mdir = self.model_dir(run.name)
        final = mdir / "final.ckpt"
        if self.resume and final.exists():
            return
        enc = self.encoded(list(run.languages))
        rid = self.run_id(run.name)
        state = None
        model = build_model(self.model_config(), run.capacity_mode, list(run.languages), self.cfg.seed)
        last = mdir / "last.ckpt"
        if self.resume and last.exists():
            ck = load_checkpoint(last)
            if ck.config_digest != self.digest:
                raise StageInputError(f"{last} was written under a different config; cannot resume")
            state, model = TrainState.from_checkpoint(ck)
            truncate_metrics(self.metrics_path, rid, ck.step)
            truncate_metrics(self.metrics_path, rid + ":probe", ck.step)
        extra = {"bpe": self.bpe().fingerprint()}
        kw = dict(run_id=rid, emit=self.writer(), checkpoint_dir=mdir, config_digest=self.digest,
                  checkpoint_extra=extra, on_step=self._probe_hook(run, enc))
        if run.trainer == "meta":
            state, _ = meta_train(model, enc, replace(self.cfg.meta, train=self.cfg.train), state, **kw)
        else:
            state, _ = train(model, enc, self.cfg.train, state, **kw)
        save_checkpoint(state.to_checkpoint(model, self.digest, extra), final)

    def stage_probe(self) -> None:
        plan = self.cfg.probe
        langs = sorted({x for pair in plan.pairs for x in pair})
        enc = self.encoded(langs)
        rid = self.run_id(plan.model + ":probe-ckpt")
        writer = self.writer()
        ckpts = sorted(self.model_dir(plan.model).glob("epoch*.ckpt"))
        if not ckpts:
            raise StageInputError(f"model {plan.model!r} has no epoch checkpoints")
        for path in ckpts:
            ck = load_checkpoint(path)
            _, model = TrainState.from_checkpoint(ck)
            rng = np.random.default_rng([self.cfg.seed, 6, ck.step])
            recs = []
            for a, b in plan.pairs:
                for _ in range(plan.per_checkpoint):
                    r = probe_pair(model, enc, a, b, plan.config, rng)
                    recs.append(record(rid, ck.step, "probe/grad_cosine", r["within"], f"{a}|{a}"))
                    recs.append(record(rid, ck.step, "probe/grad_cosine", r["cross"], f"{a}|{b}"))
            writer.write(recs)

    def stage_prune(self) -> None:
        plan = self.cfg.prune
        model = self.load_model(plan.model)
        enc = self.encoded(list(plan.languages))
        rid = self.run_id(plan.model + ":prune")
        masks: dict[str, list] = {}
        for lang in plan.languages:
            cfg = plan.config
            if plan.lambda_grid:
                choice = select_lambda(model, enc[lang], lang, cfg, plan.lambda_grid, _sub_seed(self.cfg.seed, lang, "lam"))
                cfg = replace(cfg, lam=choice.lam)
            fn = mlm_batch_fn(enc[lang], model.cfg.vocab_size, cfg.batch_size, cfg.mask_prob)
            masks[lang] = [learn_masks(model, fn, lang, cfg, _sub_seed(self.cfg.seed, lang, r)) for r in range(plan.runs)]
        for r in range(plan.runs):
            write_masks(self.out / f"masks_run{r}.tsv", [masks[lang][r] for lang in plan.languages])
        recs = [record(rid, 0, "prune/expected_l0", masks[lang][0].expected_l0(plan.config), lang)
                for lang in plan.languages]
        other_run = 1 if plan.runs > 1 else 0
        top_rows = []
        for a in plan.languages:
            for b in plan.languages:
                if a == b and plan.runs < 2:
                    continue
                sims = mask_similarity_by_layer(masks[a][0], masks[b][other_run])
                for (layer, block), v in sims.items():
                    recs.append(record(rid, 0, "prune/mask_similarity", v, f"{a}|{b}|{layer}|{block}"))
                if a != b:
                    for row in top_k_groups(masks[a][0], masks[b][0], min(plan.top_k, len(masks[a][0].groups))):
                        layer, block, gid = row["group"]
                        top_rows.append([a, b, layer, block, gid, row["pi_a"], row["pi_b"], row["norm_a"],
                                         row["norm_b"], row["label"]])
        self.writer().write(recs)
        with open(self.out / "top_k.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["lang_a", "lang_b", "layer", "block_type", "group_id", "pi_a", "pi_b", "norm_a", "norm_b",
                        "label"])
            w.writerows(top_rows)

    def stage_eval(self) -> None:
        plan = self.cfg.eval
        runs = {r.name: r for r in self.cfg.models}
        corpora = self.corpora()
        tagged_langs = [k for k, c in corpora.items() if c.tags is not None]
        enc = self.encoded(tagged_langs)
        models = {}
        mono_key = None
        for name in plan.models:
            run = runs[name]
            if run.per_language:
                models[name] = {sub.languages[0]: self.load_model(sub.name) for sub in run.expand()}
                mono_key = mono_key or name
            else:
                models[name] = self.load_model(name)
        usable = {k: v for k, v in enc.items()
                  if all((k in m) if isinstance(m, dict) else True for m in models.values())}
        result = interference_suite(models, usable, plan.finetune, self.cfg.seed, mono_key or "", plan.split)
        result.write_csv(self.out / "eval.csv")
        recs = []
        for row in result.rows:
            rid = self.run_id(row["model"])
            if row["setting"] == "within_language":
                recs.append(record(rid, 0, "eval/f1_within", row["f1"], row["target"]))
                recs.append(record(rid, 0, "test/perplexity", row["perplexity"], row["target"]))
            else:
                recs.append(record(rid, 0, "eval/f1_zero_shot", row["f1"], f"{row['source']}>{row['target']}"))
        self.writer().write(recs)

    def stage_report(self) -> None:
        write_report(self.metrics_path, self.out / "report", self.out / "eval.csv")


def run_pipeline(cfg: ExperimentConfig, stages=None, resume: bool = False) -> Pipeline:
    p = Pipeline(cfg, resume)
    p.run(stages)
    return p


__all__ = ["Pipeline", "RunLock", "RunLockedError", "StageInputError", "run_pipeline", "truncate_metrics",
           "SUITE_COLUMNS"]
