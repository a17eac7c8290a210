"""Measurement instruments: cross-language gradient cosine and per-language
Hard Concrete (relaxed L0) masks over a frozen model."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .corpus import EncodedCorpus, mask_for_mlm, pad_batch
from .model import MultilingualMLM
from .pretrain import AdamState, adam_step, perplexity

# ---------------------------------------------------------------- gradient conflict


@dataclass(frozen=True)
class GradientProbeConfig:
    interval: int = 10
    micro_batches: int = 4
    batch_size: int = 32

    def __post_init__(self):
        if self.interval < 1 or self.micro_batches < 1 or self.batch_size < 1:
            raise ValueError("probe interval, micro_batches and batch_size must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batches * self.batch_size


def flat_cosine(ga: np.ndarray, gb: np.ndarray) -> float:
    """Cosine of two flat vectors; NaN (the undefined sentinel) if either is zero."""
    na, nb = float(np.linalg.norm(ga)), float(np.linalg.norm(gb))
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.clip(np.dot(ga, gb) / (na * nb), -1.0, 1.0))


def theta_gradient(model, batches: Sequence[tuple], lang: str, dropout_key=None) -> np.ndarray:
    """Mean shared-parameter gradient over micro-batches, flattened in sorted name order."""
    names = sorted(model.theta_names())
    acc = {k: np.zeros_like(model.params[k]) for k in names}
    for m, batch in enumerate(batches):
        key = None if dropout_key is None else (*dropout_key, m)
        _, g = model.loss_and_grads(*batch, lang, wrt=names, dropout_key=key)
        for k in names:
            acc[k] += g[k]
    return np.concatenate([acc[k].reshape(-1) for k in names]) / max(len(batches), 1)


def gradient_cosine(model, batches_a: Sequence[tuple], lang_a: str, batches_b: Sequence[tuple], lang_b: str,
                    dropout_key=None) -> float:
    """Cosine between shared-parameter gradients of two (accumulated) batches at the same weights."""
    ga = theta_gradient(model, batches_a, lang_a, dropout_key)
    gb = theta_gradient(model, batches_b, lang_b, dropout_key)
    return flat_cosine(ga, gb)


def mlm_micro_batches(corpus: EncodedCorpus, cfg: GradientProbeConfig, rng: np.random.Generator,
                      vocab_size: int, mask_prob: float = 0.15, split: str = "train") -> list[tuple]:
    lo, hi = corpus.splits[split]
    out = []
    for _ in range(cfg.micro_batches):
        ids = pad_batch([corpus.ids[int(i)] for i in rng.integers(lo, hi, size=cfg.batch_size)])
        inputs, targets, _ = mask_for_mlm(ids, mask_prob, rng, vocab_size)
        out.append((inputs, targets))
    return out


def probe_pair(model, corpora: Mapping[str, EncodedCorpus], lang_a: str, lang_b: str,
               cfg: GradientProbeConfig, rng: np.random.Generator) -> dict[str, float]:
    """Within-language (two independent ``lang_a`` batches) and cross-language cosines."""
    v = model.cfg.vocab_size
    a1 = mlm_micro_batches(corpora[lang_a], cfg, rng, v)
    a2 = mlm_micro_batches(corpora[lang_a], cfg, rng, v)
    b = mlm_micro_batches(corpora[lang_b], cfg, rng, v)
    ga = theta_gradient(model, a1, lang_a)
    return {"within": flat_cosine(ga, theta_gradient(model, a2, lang_a)),
            "cross": flat_cosine(ga, theta_gradient(model, b, lang_b))}


def finite_mean(values: Iterable[float]) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------- Hard Concrete


@dataclass(frozen=True)
class HardConcreteConfig:
    gamma: float = -0.1
    zeta: float = 1.1
    beta: float = 2.0 / 3.0
    lam: float = 1e-3
    embed_slice: int = 8
    init_pi: float = 2.0
    lr: float = 0.05
    steps: int = 200
    batch_size: int = 32
    mask_prob: float = 0.15

    def __post_init__(self):
        if not (self.gamma < 0 and self.zeta > 1 and 0 < self.beta < 1):
            raise ValueError("Hard Concrete needs gamma < 0 < 1 < zeta and 0 < beta < 1")
        if self.lam < 0 or self.embed_slice < 1 or self.steps < 0:
            raise ValueError("lam >= 0, embed_slice >= 1 and steps >= 0 required")


def hard_concrete_gate(pi, u, cfg: HardConcreteConfig = HardConcreteConfig()) -> np.ndarray:
    """Stretched, clamped binary-concrete sample; ``u`` strictly inside (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-(np.log(u) - np.log1p(-u) + np.asarray(pi, dtype=np.float64)) / cfg.beta))
    # interpolation form keeps gate(0, 0.5) at exactly 0.5 (zeta - gamma rounds up)
    return np.clip(s * cfg.zeta + (1.0 - s) * cfg.gamma, 0.0, 1.0)


def _gate_tensor(pi: Tensor, u: np.ndarray, cfg: HardConcreteConfig) -> Tensor:
    noise = ad.Tensor(np.log(u) - np.log1p(-u))
    s = ad.sigmoid(ad.scale(pi + noise, 1.0 / cfg.beta))
    rest = ad.sub(ad.Tensor(np.ones(pi.shape)), s)
    return ad.clip(ad.scale(s, cfg.zeta) + ad.scale(rest, cfg.gamma), 0.0, 1.0)


def _l0_shift(cfg: HardConcreteConfig) -> float:
    return cfg.beta * math.log(-cfg.gamma / cfg.zeta)


def expected_l0(pi, cfg: HardConcreteConfig = HardConcreteConfig()) -> float:
    """Sum over groups of P(gate > 0) = sigmoid(pi - beta * ln(-gamma / zeta))."""
    x = np.asarray(pi, dtype=np.float64) - _l0_shift(cfg)
    return float(np.sum(0.5 * (1.0 + np.tanh(0.5 * x))))


def _expected_l0_tensor(pi: Tensor, cfg: HardConcreteConfig) -> Tensor:
    return ad.sum_(ad.sigmoid(pi + ad.Tensor(np.full(pi.shape, -_l0_shift(cfg)))))


# ---------------------------------------------------------------- mask groups

Group = tuple[int, str, int]  # (layer, block type, group id); embeddings use layer -1


@dataclass
class MaskLayout:
    """``groups[g]`` names gate ``g``; ``index[param]`` maps every entry of
    that parameter to its gate, or -1 for entries without one."""

    groups: list[Group]
    index: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.groups)


def transformer_layout(model: MultilingualMLM, lang: str, embed_slice: int = 8) -> MaskLayout:
    """One gate per ffn hidden unit, per attention head, per embedding slice."""
    c = model.cfg
    d, dh = c.d_model, c.d_model // c.n_heads
    groups: list[Group] = []
    index: dict[str, np.ndarray] = {}

    def new(layer, block, gid):
        groups.append((layer, block, gid))
        return len(groups) - 1

    n_slices = math.ceil(d / embed_slice)
    slice_ids = np.array([new(-1, "embedding", s) for s in range(n_slices)])
    per_dim = np.repeat(slice_ids, embed_slice)[:d]
    index["embed.tokens"] = np.broadcast_to(per_dim, (c.vocab_size, d)).copy()
    index["embed.positions"] = np.broadcast_to(per_dim, (c.max_seq_len, d)).copy()
    for layer in range(c.n_layers):
        pre = model._pick(None, layer, "attn", lang)
        head_ids = np.array([new(layer, "attention", h) for h in range(c.n_heads)])
        per_col = np.repeat(head_ids, dh)
        for m in ("q", "k", "v"):
            index[f"{pre}.w{m}"] = np.broadcast_to(per_col, (d, d)).copy()
            index[f"{pre}.b{m}"] = per_col.copy()
        index[f"{pre}.wo"] = np.broadcast_to(per_col[:, None], (d, d)).copy()
        pre = model._pick(None, layer, "ffn", lang)
        unit_ids = np.array([new(layer, "feedforward", u) for u in range(c.d_ffn)])
        index[f"{pre}.w1"] = np.broadcast_to(unit_ids, (d, c.d_ffn)).copy()
        index[f"{pre}.b1"] = unit_ids.copy()
        index[f"{pre}.w2"] = np.broadcast_to(unit_ids[:, None], (c.d_ffn, d)).copy()
    return MaskLayout(groups, index)


def layout_for(model, lang: str, cfg: HardConcreteConfig) -> MaskLayout:
    if isinstance(model, MultilingualMLM):
        return transformer_layout(model, lang, cfg.embed_slice)
    return model.mask_layout(lang)


def masked_tensors(model, layout: MaskLayout, z: Tensor) -> dict[str, Tensor]:
    """Frozen weights as constants, gated entries multiplied by ``z``."""
    t = model.tensors()
    zext = ad.concat([z, ad.Tensor(np.ones(1))])
    g = len(layout)
    for name, idx in layout.index.items():
        t[name] = t[name] * ad.gather(zext, np.where(idx < 0, g, idx))
    return t


def masked_values(model, layout: MaskLayout, z: np.ndarray) -> dict[str, np.ndarray]:
    values = dict(model.params)
    zext = np.concatenate([np.asarray(z, dtype=np.float64), [1.0]])
    for name, idx in layout.index.items():
        values[name] = model.params[name] * zext[np.where(idx < 0, len(layout), idx)]
    return values


# ---------------------------------------------------------------- mask learning


@dataclass
class MaskParams:
    lang: str
    pi: np.ndarray
    groups: list[Group]

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.shape != (len(self.groups),):
            raise ValueError(f"{self.pi.shape[0]} mask values for {len(self.groups)} groups")
        if not np.isfinite(self.pi).all():
            raise NumericError("mask parameters must be finite")

    def eval_gates(self, cfg: HardConcreteConfig = HardConcreteConfig()) -> np.ndarray:
        return hard_concrete_gate(self.pi, np.full(self.pi.shape, 0.5), cfg)

    def expected_l0(self, cfg: HardConcreteConfig = HardConcreteConfig()) -> float:
        return expected_l0(self.pi, cfg)


def _weights_digest(model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


def mlm_batch_fn(corpus: EncodedCorpus, vocab_size: int, batch_size: int, mask_prob: float = 0.15,
                 split: str = "train") -> Callable[[np.random.Generator], tuple]:
    lo, hi = corpus.splits[split]

    def draw(rng):
        ids = pad_batch([corpus.ids[int(i)] for i in rng.integers(lo, hi, size=batch_size)])
        inputs, targets, _ = mask_for_mlm(ids, mask_prob, rng, vocab_size)
        return inputs, targets

    return draw


def learn_masks(model, batch_fn: Callable[[np.random.Generator], tuple], lang: str,
                cfg: HardConcreteConfig = HardConcreteConfig(), seed: int = 0,
                steps: int | None = None) -> MaskParams:
    """Minimize ``loss(f(x; theta * z)) + lam * E[L0]`` over ``pi`` with the
    model frozen.  Gates are resampled every step (reparameterized)."""
    steps = cfg.steps if steps is None else steps
    layout = layout_for(model, lang, cfg)
    before = _weights_digest(model)
    rng = np.random.default_rng(seed)
    pi = {"pi": np.full(len(layout), cfg.init_pi)}
    opt = AdamState()
    for _ in range(steps):
        batch = batch_fn(rng)
        u = rng.uniform(1e-6, 1.0 - 1e-6, size=len(layout))
        p = ad.Tensor(pi["pi"], requires_grad=True, name="pi")
        z = _gate_tensor(p, u, cfg)
        loss = model.mlm_loss(masked_tensors(model, layout, z), *batch, lang)
        total = loss + ad.scale(_expected_l0_tensor(p, cfg), cfg.lam)
        if not math.isfinite(total.item()):
            raise NumericError("non-finite mask-learning loss")
        (g,) = ad.gradients(total, [p])
        adam_step(pi, {"pi": g}, opt, cfg.lr)
    if _weights_digest(model) != before:
        raise AssertionError("mask learning modified the frozen model weights")
    return MaskParams(lang, pi["pi"].copy(), list(layout.groups))


def masked_perplexity(model: MultilingualMLM, masks: MaskParams, corpus: EncodedCorpus, split: str = "val",
                      cfg: HardConcreteConfig = HardConcreteConfig()) -> float:
    layout = layout_for(model, masks.lang, cfg)
    return perplexity(model, corpus, split, masks.lang, values=masked_values(model, layout, masks.eval_gates(cfg)))


@dataclass
class LambdaChoice:
    lam: float
    masks: MaskParams
    table: list[dict] = field(default_factory=list)


def select_lambda(model: MultilingualMLM, corpus: EncodedCorpus, lang: str, cfg: HardConcreteConfig,
                  grid: Sequence[float] = (1e-4, 1e-3, 1e-2), seed: int = 0,
                  max_ratio: float = 1.1, min_sparsity: float = 0.1) -> LambdaChoice:
    """Largest-sparsity lambda whose masked perplexity stays within ``max_ratio``
    of the unmasked one with at least ``min_sparsity`` expected sparsity.  If
    no lambda qualifies, the one with the lowest masked perplexity wins."""
    base = perplexity(model, corpus, "val", lang)
    batch_fn = mlm_batch_fn(corpus, model.cfg.vocab_size, cfg.batch_size, cfg.mask_prob)
    rows = []
    for lam in grid:
        c = HardConcreteConfig(**{**cfg.__dict__, "lam": lam})
        m = learn_masks(model, batch_fn, lang, c, seed)
        sparsity = 1.0 - m.expected_l0(c) / len(m.groups)
        ppl = masked_perplexity(model, m, corpus, "val", c)
        rows.append({"lam": lam, "sparsity": sparsity, "masked_ppl": ppl, "base_ppl": base, "masks": m})
    ok = [r for r in rows if r["masked_ppl"] <= max_ratio * base and r["sparsity"] >= min_sparsity]
    best = max(ok, key=lambda r: r["sparsity"]) if ok else min(rows, key=lambda r: r["masked_ppl"])
    return LambdaChoice(best["lam"], best["masks"], [{k: v for k, v in r.items() if k != "masks"} for r in rows])


# ---------------------------------------------------------------- analytics


def _check_aligned(a: MaskParams, b: MaskParams) -> None:
    if a.groups != b.groups:
        raise ValueError("mask parameters index different groups")


def mask_similarity_by_layer(a: MaskParams, b: MaskParams) -> dict[tuple[int, str], float]:
    """Cosine of the two pi vectors restricted to each (layer, attention|feedforward)."""
    _check_aligned(a, b)
    keys = sorted({(layer, block) for layer, block, _ in a.groups if block in ("attention", "feedforward")})
    out = {}
    for key in keys:
        sel = np.array([(g[0], g[1]) == key for g in a.groups])
        out[key] = flat_cosine(a.pi[sel], b.pi[sel])
    return out


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def classify(pa: float, pb: float) -> str:
    if pa > 0 and pb > 0:
        return "universal"
    if pa > 0 >= pb:
        return "specific_a"
    if pb > 0 >= pa:
        return "specific_b"
    return "pruned"


def top_k_groups(a: MaskParams, b: MaskParams, k: int) -> list[dict]:
    """Top ``k`` groups by ``|pi_a|`` with a sharing label and min-max normalized values."""
    _check_aligned(a, b)
    if not 0 <= k <= len(a.groups):
        raise ValueError(f"k must be in [0, {len(a.groups)}]")
    na, nb = _minmax(a.pi), _minmax(b.pi)
    order = np.argsort(-np.abs(a.pi), kind="stable")[:k]
    return [{"group": a.groups[i], "pi_a": float(a.pi[i]), "pi_b": float(b.pi[i]),
             "norm_a": float(na[i]), "norm_b": float(nb[i]), "label": classify(a.pi[i], b.pi[i])}
            for i in order]


# ---------------------------------------------------------------- persistence

MASK_COLUMNS = ("language", "layer", "block_type", "group_id", "pi")


def write_masks(path, masks: Iterable[MaskParams]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(MASK_COLUMNS)
        for m in masks:
            for (layer, block, gid), v in zip(m.groups, m.pi):
                w.writerow([m.lang, layer, block, gid, repr(float(v))])


def read_masks(path) -> dict[str, MaskParams]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        r = csv.DictReader(fh, delimiter="\t")
        if tuple(r.fieldnames or ()) != MASK_COLUMNS:
            raise ValueError(f"mask file columns must be {MASK_COLUMNS}")
        for row in r:
            rows.setdefault(row["language"], []).append(
                ((int(row["layer"]), row["block_type"], int(row["group_id"])), float(row["pi"])))
    return {lang: MaskParams(lang, np.array([v for _, v in items]), [g for g, _ in items])
            for lang, items in rows.items()}


class HardConcreteMasker(TransformerMixin, BaseEstimator):
    """Learns one language's mask over a frozen model.

    ``fit(corpus)`` takes an :class:`EncodedCorpus`; ``transform`` returns the
    deterministic (u = 0.5) gate vector.
    """

    def __init__(self, model=None, lang: str | None = None, lam: float = 1e-3, steps: int = 200,
                 lr: float = 0.05, init_pi: float = 2.0, random_state: int = 0):
        self.model = model
        self.lang = lang
        self.lam = lam
        self.steps = steps
        self.lr = lr
        self.init_pi = init_pi
        self.random_state = random_state

    def _cfg(self) -> HardConcreteConfig:
        return HardConcreteConfig(lam=self.lam, steps=self.steps, lr=self.lr, init_pi=self.init_pi)

    def fit(self, X: EncodedCorpus, y=None):
        if self.model is None:
            raise ValueError("HardConcreteMasker needs a model")
        lang = self.lang or X.lang
        cfg = self._cfg()
        fn = mlm_batch_fn(X, self.model.cfg.vocab_size, cfg.batch_size, cfg.mask_prob)
        self.masks_ = learn_masks(self.model, fn, lang, cfg, self.random_state)
        return self

    def transform(self, X=None) -> np.ndarray:
        check_is_fitted(self, "masks_")
        return self.masks_.eval_gates(self._cfg())
