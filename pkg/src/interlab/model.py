"""Post-LN transformer encoder with an MLM head and language-specific capacity.

Weights live in a flat ``{name: ndarray}`` dict.  Names containing ``@lang``
belong to that language's specific parameters (phi_lang); everything else is
shared (theta).  Forward functions take a ``{name: Tensor}`` map so callers
can substitute perturbed or masked weights without touching the model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutStream, Tensor
from .tokenizer import PAD


class CapacityMode(str, enum.Enum):
    SHARED_ONLY = "shared_only"
    LANG_FFN = "lang_ffn"
    LANG_ATTN = "lang_attn"
    LANG_ADAPTER = "lang_adapter"
    SHARED_ADAPTER = "shared_adapter"

    @property
    def language_specific(self) -> bool:
        return self.value.startswith("lang_")


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    max_seq_len: int = 64
    vocab_size: int = 1000
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        for k in ("n_layers", "n_heads", "d_model", "d_ffn", "max_seq_len", "vocab_size"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 (adapter bottleneck d/4)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def paper_scale(cls, vocab_size: int = 32000) -> "TransformerConfig":
        return cls(n_layers=8, n_heads=12, d_model=512, d_ffn=2048, max_seq_len=256, vocab_size=vocab_size)


@dataclass
class ModelParams:
    theta: dict[str, np.ndarray]
    phi: dict[str, dict[str, np.ndarray]]

    def names(self) -> list[str]:
        out = list(self.theta)
        for lang in self.phi:
            out.extend(self.phi[lang])
        return out


def owner_language(name: str) -> str | None:
    """``"layers.0.ffn@en.w1" -> "en"``; ``None`` for shared parameters."""
    if "@" not in name:
        return None
    return name.split("@", 1)[1].split(".", 1)[0]


def adapter_apply(z: Tensor, wz: Tensor, wh: Tensor, activation=ad.relu) -> Tensor:
    """Bottleneck residual adapter: ``o = g(z @ Wz) @ Wh + z``."""
    if z.shape[-1] != wz.shape[0] or wh.shape != (wz.shape[1], wz.shape[0]):
        raise ad.ShapeError(f"adapter: input {z.shape} incompatible with Wz {wz.shape}, Wh {wh.shape}")
    return activation(z @ wz) @ wh + z


class MultilingualMLM:
    def __init__(self, cfg: TransformerConfig, mode: CapacityMode | str = CapacityMode.SHARED_ONLY,
                 languages: Sequence[str] = (), seed: int = 0):
        self.cfg = cfg
        self.mode = CapacityMode(mode)
        self.languages = tuple(languages)
        if self.mode.language_specific and not self.languages:
            raise ValueError(f"{self.mode.value} needs at least one language")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError("duplicate language ids")
        for lang in self.languages:
            if "@" in lang or "." in lang:
                raise ValueError(f"language id {lang!r} may not contain '@' or '.'")
        self.seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------------- structure
    def _block_names(self, layer: int, block: str, lang: str | None) -> str:
        base = f"layers.{layer}.{block}"
        return f"{base}@{lang}" if lang is not None else base

    def _owners(self, block: str) -> list[str | None]:
        """Which copies of a block exist: ``[None]`` (shared) or one per language."""
        routed = {"attn": CapacityMode.LANG_ATTN, "ffn": CapacityMode.LANG_FFN,
                  "adapter_attn": CapacityMode.LANG_ADAPTER, "adapter_ffn": CapacityMode.LANG_ADAPTER}
        if block.startswith("adapter") and self.mode not in (CapacityMode.LANG_ADAPTER, CapacityMode.SHARED_ADAPTER):
            return []
        return list(self.languages) if self.mode == routed[block] else [None]

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.cfg
        d, f, std = c.d_model, c.d_ffn, c.init_std
        p: dict[str, np.ndarray] = {}

        def normal(*shape):
            return rng.standard_normal(shape) * std

        p["embed.tokens"] = normal(c.vocab_size, d)
        p["embed.positions"] = normal(c.max_seq_len, d)
        p["embed.norm.g"], p["embed.norm.b"] = np.ones(d), np.zeros(d)
        for layer in range(c.n_layers):
            for owner in self._owners("attn"):
                pre = self._block_names(layer, "attn", owner)
                for m in ("q", "k", "v", "o"):
                    p[f"{pre}.w{m}"], p[f"{pre}.b{m}"] = normal(d, d), np.zeros(d)
            p[f"layers.{layer}.norm1.g"], p[f"layers.{layer}.norm1.b"] = np.ones(d), np.zeros(d)
            for owner in self._owners("adapter_attn"):
                pre = self._block_names(layer, "adapter_attn", owner)
                p[f"{pre}.wz"], p[f"{pre}.wh"] = normal(d, d // 4), np.zeros((d // 4, d))
            for owner in self._owners("ffn"):
                pre = self._block_names(layer, "ffn", owner)
                p[f"{pre}.w1"], p[f"{pre}.b1"] = normal(d, f), np.zeros(f)
                p[f"{pre}.w2"], p[f"{pre}.b2"] = normal(f, d), np.zeros(d)
            p[f"layers.{layer}.norm2.g"], p[f"layers.{layer}.norm2.b"] = np.ones(d), np.zeros(d)
            for owner in self._owners("adapter_ffn"):
                pre = self._block_names(layer, "adapter_ffn", owner)
                p[f"{pre}.wz"], p[f"{pre}.wh"] = normal(d, d // 4), np.zeros((d // 4, d))
        p["head.bias"] = np.zeros(c.vocab_size)
        return p

    def partition_params(self) -> ModelParams:
        theta = {k: v for k, v in self.params.items() if "@" not in k}
        phi = {}
        if self.mode.language_specific:
            phi = {lang: {k: v for k, v in self.params.items() if owner_language(k) == lang}
                   for lang in self.languages}
        return ModelParams(theta, phi)

    def theta_names(self) -> list[str]:
        return [k for k in self.params if "@" not in k]

    def phi_names(self, lang: str) -> list[str]:
        self.check_language(lang)
        return [k for k in self.params if owner_language(k) == lang]

    def check_language(self, lang: str) -> None:
        if self.mode.language_specific and lang not in self.languages:
            raise KeyError(f"language {lang!r} is not registered (have {list(self.languages)})")

    def routed_names(self, lang: str) -> list[str]:
        """Every parameter that takes part in a forward pass for ``lang``."""
        self.check_language(lang)
        return self.theta_names() + (self.phi_names(lang) if self.mode.language_specific else [])

    def n_parameters(self) -> dict[str, int]:
        part = self.partition_params()
        out = {"theta": int(sum(v.size for v in part.theta.values()))}
        for lang, group in part.phi.items():
            out[f"phi[{lang}]"] = int(sum(v.size for v in group.values()))
        out["total"] = int(sum(v.size for v in self.params.values()))
        return out

    def copy(self) -> "MultilingualMLM":
        other = MultilingualMLM.__new__(MultilingualMLM)
        other.cfg, other.mode, other.languages, other.seed = self.cfg, self.mode, self.languages, self.seed
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def describe(self) -> dict:
        return {"config": asdict(self.cfg), "mode": self.mode.value, "languages": list(self.languages),
                "seed": self.seed}

    # ---------------------------------------------------------------- forward
    def _pick(self, t: Mapping[str, Tensor], layer: int, block: str, lang: str) -> str | None:
        owners = self._owners(block)
        if not owners:
            return None
        return self._block_names(layer, block, lang if owners[0] is not None else None)

    def _attention(self, t, pre: str, x: Tensor, bias: np.ndarray, stream) -> Tensor:
        B, T, d = x.shape
        H = self.cfg.n_heads
        dh = d // H

        def heads(m):
            y = x @ t[f"{pre}.w{m}"] + t[f"{pre}.b{m}"]
            return ad.transpose(ad.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)) + bias
        attn = ad.dropout(ad.softmax(scores, axis=-1), self.cfg.dropout, stream)
        ctx = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (B, T, d))
        return ctx @ t[f"{pre}.wo"] + t[f"{pre}.bo"]

    def _ffn(self, t, pre: str, x: Tensor, stream) -> Tensor:
        h = ad.gelu(x @ t[f"{pre}.w1"] + t[f"{pre}.b1"])
        return ad.dropout(h, self.cfg.dropout, stream) @ t[f"{pre}.w2"] + t[f"{pre}.b2"]

    def encode(self, t: Mapping[str, Tensor], ids: np.ndarray, lang: str,
               stream: DropoutStream | None = None) -> Tensor:
        """Hidden states ``(B, T, d)`` for padded token ids routed through ``lang``."""
        self.check_language(lang)
        ids = np.asarray(ids)
        B, T = ids.shape
        if T > self.cfg.max_seq_len:
            raise ad.ShapeError(f"sequence length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        p = self.cfg.dropout
        pos = ad.embedding(t["embed.positions"], np.broadcast_to(np.arange(T), (B, T)))
        x = ad.embedding(t["embed.tokens"], ids) + pos
        x = ad.dropout(ad.layer_norm(x, t["embed.norm.g"], t["embed.norm.b"]), p, stream)
        pad = ids == PAD
        bias = np.where(pad[:, None, None, :], -1e9, 0.0)
        bias = np.ascontiguousarray(np.broadcast_to(bias, (B, self.cfg.n_heads, T, T)))
        for layer in range(self.cfg.n_layers):
            attn = self._attention(t, self._pick(t, layer, "attn", lang), x, bias, stream)
            x = ad.layer_norm(x + ad.dropout(attn, p, stream),
                              t[f"layers.{layer}.norm1.g"], t[f"layers.{layer}.norm1.b"])
            pre = self._pick(t, layer, "adapter_attn", lang)
            if pre is not None:
                x = adapter_apply(x, t[f"{pre}.wz"], t[f"{pre}.wh"])
            ff = self._ffn(t, self._pick(t, layer, "ffn", lang), x, stream)
            x = ad.layer_norm(x + ad.dropout(ff, p, stream),
                              t[f"layers.{layer}.norm2.g"], t[f"layers.{layer}.norm2.b"])
            pre = self._pick(t, layer, "adapter_ffn", lang)
            if pre is not None:
                x = adapter_apply(x, t[f"{pre}.wz"], t[f"{pre}.wh"])
        return x

    def mlm_logits(self, t: Mapping[str, Tensor], hidden: Tensor, rows: np.ndarray) -> Tensor:
        """Tied-embedding output logits for the flattened positions ``rows``."""
        d = self.cfg.d_model
        flat = ad.reshape(hidden, (-1, d))
        picked = ad.take_rows(flat, rows)
        return picked @ ad.transpose(t["embed.tokens"]) + t["head.bias"]

    def mlm_loss(self, t: Mapping[str, Tensor], inputs: np.ndarray, targets: np.ndarray, lang: str,
                 stream: DropoutStream | None = None) -> Tensor:
        """Mean cross-entropy over the selected (``targets >= 0``) positions."""
        flat_targets = np.asarray(targets).reshape(-1)
        rows = np.nonzero(flat_targets >= 0)[0]
        hidden = self.encode(t, inputs, lang, stream)
        if rows.size == 0:
            return ad.scale(ad.sum_(hidden), 0.0)
        return ad.cross_entropy(self.mlm_logits(t, hidden, rows), flat_targets[rows])

    # ---------------------------------------------------------------- conveniences
    def tensors(self, values: Mapping[str, np.ndarray] | None = None, wrt: Sequence[str] = ()) -> dict[str, Tensor]:
        values = self.params if values is None else values
        return ad.parameters(values, wrt)

    def loss_and_grads(self, inputs, targets, lang: str, wrt: Sequence[str] | None = None,
                       values: Mapping[str, np.ndarray] | None = None,
                       dropout_key=None) -> tuple[float, dict[str, np.ndarray]]:
        """MLM loss and its gradient w.r.t. ``wrt`` (default: every routed parameter)."""
        wrt = self.routed_names(lang) if wrt is None else list(wrt)
        t = self.tensors(values, wrt)
        stream = None if dropout_key is None else DropoutStream(dropout_key)
        loss = self.mlm_loss(t, inputs, targets, lang, stream)
        grads = ad.gradients(loss, {k: t[k] for k in wrt}, allow_unused=True)
        return loss.item(), grads

    def loss(self, inputs, targets, lang: str, values=None, dropout_key=None) -> float:
        stream = None if dropout_key is None else DropoutStream(dropout_key)
        return self.mlm_loss(self.tensors(values), inputs, targets, lang, stream).item()


def build_model(cfg: TransformerConfig, mode: CapacityMode | str, languages: Sequence[str],
                seed: int = 0) -> MultilingualMLM:
    return MultilingualMLM(cfg, mode, languages, seed)


def forward_mlm(model: MultilingualMLM, inputs, targets, lang: str) -> float:
    return model.loss(inputs, targets, lang)


def partition_params(model: MultilingualMLM) -> ModelParams:
    return model.partition_params()
