"""Small closed-form models used as oracles for the bilevel and pruning code.

Each toy mimics the slice of the :class:`~interlab.model.MultilingualMLM`
interface the trainers rely on: ``params``, ``languages``, ``theta_names()``,
``phi_names(lang)`` and ``loss_and_grads(*batch, lang, wrt=, values=, dropout_key=)``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad


class _ToyBase:
    languages: tuple[str, ...]
    params: dict[str, np.ndarray]

    def theta_names(self) -> list[str]:
        return [k for k in self.params if "@" not in k]

    def phi_names(self, lang: str) -> list[str]:
        if lang not in self.languages:
            raise KeyError(lang)
        return [k for k in self.params if k.endswith(f"@{lang}")]

    def routed_names(self, lang: str) -> list[str]:
        return self.theta_names() + self.phi_names(lang)

    def loss_and_grads(self, *args, wrt=None, values=None, dropout_key=None):
        *batch, lang = args
        wrt = self.routed_names(lang) if wrt is None else list(wrt)
        t = ad.parameters(self.params if values is None else values, wrt)
        loss = self._loss(t, tuple(batch), lang)
        return loss.item(), ad.gradients(loss, {k: t[k] for k in wrt}, allow_unused=True)

    def loss(self, *args, values=None, dropout_key=None) -> float:
        *batch, lang = args
        return self._loss(ad.parameters(self.params if values is None else values), tuple(batch), lang).item()


class BilinearToy(_ToyBase):
    """``L_train^i = <theta, phi_i>`` and ``L_val^j = 0.5 * ||theta - c_j||^2``.

    Batches are ``("train",)`` or ``("val",)``.  The hypergradient of
    ``phi_i`` through one SGD lookahead is ``-beta * mean_j(theta' - c_j)``.
    """

    def __init__(self, theta, phis: Mapping[str, Sequence[float]], targets: Mapping[str, Sequence[float]] | None = None):
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        self.languages = tuple(phis)
        self.params = {"theta": theta.copy()}
        for lang, phi in phis.items():
            self.params[f"phi@{lang}"] = np.atleast_1d(np.asarray(phi, dtype=np.float64)).copy()
        targets = targets or {}
        self.targets = {lang: np.broadcast_to(np.asarray(targets.get(lang, 0.0), dtype=np.float64), theta.shape).copy()
                        for lang in self.languages}

    def _loss(self, t, batch, lang):
        if batch == ("train",):
            return ad.sum_(t["theta"] * t[f"phi@{lang}"])
        if batch == ("val",):
            d = t["theta"] - ad.Tensor(self.targets[lang])
            return ad.scale(ad.sum_(d * d), 0.5)
        raise ValueError(f"unknown toy batch {batch!r}")


class TinyMLP(_ToyBase):
    """3 -> 4 (tanh) -> 2 softmax classifier with a per-language hidden scale.

    ``theta``: ``w1 (3,4) b1 (4) w2 (4,2) b2 (2)`` (26 numbers); ``phi_lang``:
    a 4-vector that multiplies the hidden layer by ``1 + phi``.  Batches are
    ``(x, y)`` arrays.
    """

    def __init__(self, languages: Sequence[str] = ("a", "b"), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.languages = tuple(languages)
        self.params = {"w1": rng.standard_normal((3, 4)) * 0.8, "b1": rng.standard_normal(4) * 0.1,
                       "w2": rng.standard_normal((4, 2)) * 0.8, "b2": np.zeros(2)}
        for lang in self.languages:
            self.params[f"scale@{lang}"] = rng.standard_normal(4) * 0.3

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _loss(self, t, batch, lang):
        x, y = batch
        h = ad.tanh(ad.Tensor(np.asarray(x, dtype=np.float64)) @ t["w1"] + t["b1"])
        h = h * (t[f"scale@{lang}"] + ad.Tensor(np.ones(4)))
        return ad.cross_entropy(h @ t["w2"] + t["b2"], np.asarray(y))

    @staticmethod
    def make_batch(rng: np.random.Generator, n: int, shift: float = 0.0):
        x = rng.standard_normal((n, 3)) + shift
        y = (x[:, 0] + 0.5 * x[:, 1] - x[:, 2] > shift).astype(np.int64)
        return x, y


class PlantedBilingualMLP:
    """Frozen one-hidden-layer tagger with planted language-specific units.

    Inputs have ``k`` features private to language ``a``, ``k`` shared and
    ``k`` private to ``b``; a language's batches are zero on the other's
    private features.  Hidden units come in three blocks of ``units`` reading
    only a-private, shared or b-private features, so the a-block receives no
    gradient from ``b`` batches.  Labels are the model's own argmax, so every
    active unit matters to the language that can reach it.
    """

    def __init__(self, k: int = 4, units: int = 8, n_classes: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.languages = ("a", "b")
        self.k, self.units = k, units
        w1 = np.zeros((3 * k, 3 * units))
        for blk in range(3):
            w1[blk * k:(blk + 1) * k, blk * units:(blk + 1) * units] = rng.standard_normal((k, units)) * 1.2
        self.params = {"w1": w1, "b1": np.zeros(3 * units), "w2": rng.standard_normal((3 * units, n_classes)) * 1.5,
                       "b2": np.zeros(n_classes)}

    def planted(self, lang: str) -> list[int]:
        blk = {"a": 0, "b": 2}[lang]
        return list(range(blk * self.units, (blk + 1) * self.units))

    def theta_names(self) -> list[str]:
        return list(self.params)

    def tensors(self, values=None, wrt=()):
        return ad.parameters(self.params if values is None else values, wrt)

    def mask_layout(self, lang: str):
        from .probes import MaskLayout

        n = 3 * self.units
        ids = np.arange(n)
        index = {"w1": np.broadcast_to(ids, self.params["w1"].shape).copy(), "b1": ids.copy(),
                 "w2": np.broadcast_to(ids[:, None], self.params["w2"].shape).copy()}
        return MaskLayout([(0, "feedforward", u) for u in range(n)], index)

    def _logits(self, t, x):
        h = ad.tanh(ad.Tensor(x) @ t["w1"] + t["b1"])
        return h @ t["w2"] + t["b2"]

    def inputs(self, rng: np.random.Generator, lang: str, n: int) -> np.ndarray:
        k = self.k
        x = rng.standard_normal((n, 3 * k))
        x[:, (2 * k if lang == "a" else 0):(3 * k if lang == "a" else k)] = 0.0
        return x

    def batch(self, rng: np.random.Generator, lang: str, n: int = 64):
        x = self.inputs(rng, lang, n)
        y = np.argmax(self._logits(self.tensors(), x).data, axis=1)
        return x, y

    def mlm_loss(self, t, x, y, lang, stream=None):
        return ad.cross_entropy(self._logits(t, x), y)
