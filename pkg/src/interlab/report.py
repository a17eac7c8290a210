"""Turn ``metrics.csv`` and ``eval.csv`` into the report tables.

Every table is written with its header even when no rows qualify, and rows
are sorted so that identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import UNDEFINED, read_metrics

PPL_COLUMNS = ("run_id", "step", "language", "perplexity")
GRAD_COLUMNS = ("run_id", "step", "lang_a", "lang_b", "kind", "cosine")
MASK_COLUMNS = ("run_id", "lang_a", "lang_b", "layer", "block", "kind", "similarity")
INTERFERENCE_COLUMNS = ("model", "source", "target", "setting", "f1", "perplexity", "negative_interference")


def _float(v: str) -> float:
    return float("nan") if v in ("", UNDEFINED, "nan") else float(v)


def _fmt(v) -> str:
    if isinstance(v, float):
        return UNDEFINED if not math.isfinite(v) else f"{v:.6g}"
    return str(v)


def _write(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _mean(xs) -> float:
    xs = [x for x in xs if math.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def collect(metrics_path: Path) -> dict[str, list]:
    """Metric rows grouped by name, as (run_id, step, language, value)."""
    out: dict[str, list] = defaultdict(list)
    if Path(metrics_path).exists():
        for r in read_metrics(metrics_path):
            out[r["metric"]].append((r["run_id"], int(r["step"]), r["language"], _float(r["value"])))
    return out


def read_eval(eval_path: Path) -> list[dict]:
    if not Path(eval_path).exists():
        return []
    with open(eval_path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(metrics_path, report_dir, eval_path) -> dict[str, Path]:
    report_dir = Path(report_dir)
    m = collect(Path(metrics_path))
    paths = {k: report_dir / f"{k}.csv" for k in ("perplexity_curves", "grad_similarity", "mask_similarity",
                                                   "interference")}

    _write(paths["perplexity_curves"], PPL_COLUMNS, sorted(m["val/perplexity"]))

    grad = []
    for run, step, lang, v in m["probe/grad_cosine"]:
        a, b = lang.split("|")
        grad.append((run, step, a, b, "within" if a == b else "cross", v))
    _write(paths["grad_similarity"], GRAD_COLUMNS, sorted(grad))

    masks = []
    for run, _, lang, v in m["prune/mask_similarity"]:
        a, b, layer, block = lang.split("|")
        masks.append((run, a, b, int(layer), block, "within" if a == b else "cross", v))
    _write(paths["mask_similarity"], MASK_COLUMNS, sorted(masks))

    ev = read_eval(Path(eval_path))
    _write(paths["interference"], INTERFERENCE_COLUMNS,
           sorted((tuple(r[c] for c in INTERFERENCE_COLUMNS) for r in ev)))

    lines = summary_lines(m, grad, masks, ev)
    (report_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    paths["summary"] = report_dir / "summary.txt"
    return paths


def summary_lines(m, grad, masks, ev) -> list[str]:
    lines = []
    final_ppl: dict[tuple[str, str], tuple[int, float]] = {}
    for run, step, lang, v in m["val/perplexity"]:
        if (run, lang) not in final_ppl or step >= final_ppl[(run, lang)][0]:
            final_ppl[(run, lang)] = (step, v)
    lines.append("final validation perplexity")
    for (run, lang), (step, v) in sorted(final_ppl.items()):
        lines.append(f"  {run} [{lang}] step {step}: {_fmt(v)}")
    if grad:
        lines.append("gradient cosine (mean over probes)")
        for kind in ("within", "cross"):
            lines.append(f"  {kind}: {_fmt(_mean(r[-1] for r in grad if r[4] == kind))}")
    if masks:
        lines.append("mask similarity by (layer, block)")
        keys = sorted({(r[3], r[4]) for r in masks})
        for layer, block in keys:
            w = _mean(r[-1] for r in masks if (r[3], r[4], r[5]) == (layer, block, "within"))
            c = _mean(r[-1] for r in masks if (r[3], r[4], r[5]) == (layer, block, "cross"))
            lines.append(f"  layer {layer} {block}: within {_fmt(w)} cross {_fmt(c)}")
    if ev:
        lines.append("tagging F1")
        for r in sorted(ev, key=lambda r: (r["model"], r["source"], r["target"])):
            flag = " (negative interference)" if r["negative_interference"] == "True" else ""
            lines.append(f"  {r['model']} {r['source']}->{r['target']}: {_fmt(_float(r['f1']))}{flag}")
    if len(lines) == 1:
        lines.append("  (no metrics recorded)")
    return lines


def lexical_overlap(corpora_dir: Path) -> float:
    """Jaccard overlap of word types between the first two languages of a run."""
    man = json.loads((corpora_dir / "manifest.json").read_text())
    langs = sorted(man)[:2]
    if len(langs) < 2:
        return float("nan")
    types = []
    for lang in langs:
        with open(corpora_dir / f"{lang}.tsv", encoding="utf-8") as fh:
            types.append({t.rsplit("|", 1)[0] for line in fh for t in line.rstrip("\n").split("\t") if t})
    return len(types[0] & types[1]) / len(types[0] | types[1])


def write_similarity_table(path, subdirs: Sequence[tuple[float, Path]], cfg) -> Path:
    """One row per swept shared_fraction: lexical overlap, final validation
    perplexity per model, and mean within/zero-shot F1 per evaluated model."""
    model_names = [m.name for m in cfg.models]
    eval_names = list(cfg.eval.models)
    cols = ["shared_fraction", "lexical_overlap"]
    cols += [f"{n}_val_ppl" for n in model_names]
    cols += [f"{n}_{k}_f1" for n in eval_names for k in ("within", "zero_shot")]
    rows = []
    for v, out in sorted(subdirs):
        m = collect(out / "metrics.csv")
        ev = read_eval(out / "eval.csv")
        row = [v, lexical_overlap(out / "corpora") if (out / "corpora" / "manifest.json").exists() else float("nan")]
        for n in model_names:
            last: dict[tuple[str, str], tuple[int, float]] = {}
            for run, step, lang, val in m["val/perplexity"]:
                model = run.split(":", 1)[1] if ":" in run else run
                if model == n or model.startswith(n + "/"):
                    if (run, lang) not in last or step >= last[(run, lang)][0]:
                        last[(run, lang)] = (step, val)
            row.append(_mean(x for _, x in last.values()))
        for n in eval_names:
            for setting in ("within_language", "zero_shot"):
                row.append(_mean(_float(r["f1"]) for r in ev if r["model"] == n and r["setting"] == setting))
        rows.append(row)
    path = Path(path)
    _write(path, cols, rows)
    return path
