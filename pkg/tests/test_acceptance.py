"""End-to-end acceptance checks C1 to C10.

Each test prints one ``C<n> PASS|FAIL`` line with the measured numbers, then
asserts.  C5 to C8 and C10 train small models and dominate the runtime.
"""

import math

import numpy as np
import pytest
from conftest import masked_batch, tiny_config
from test_autodiff import PRIMITIVES, check_op
from test_meta import mlp_batches
from test_pipeline_cli import tiny_raw

import interlab.pretrain as pretrain_mod
from interlab import autodiff as ad
from interlab import experiments as E
from interlab.checkpoint import load_checkpoint
from interlab.config import parse_config
from interlab.meta import hypergrad_fd, reference_hypergrad
from interlab.metrics import metrics_digest
from interlab.model import build_model
from interlab.pipeline import run_pipeline
from interlab.probes import HardConcreteConfig, expected_l0, hard_concrete_gate, learn_masks
from interlab.toys import BilinearToy, PlantedBilingualMLP, TinyMLP

SEEDS = (0, 1, 2)
CHANCE = 1.0 / 6.0  # six tags, uniform guess


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def majority(flags) -> bool:
    return sum(bool(f) for f in flags) >= 2


# ---------------------------------------------------------------- C1


def test_c1_autodiff_matches_finite_differences(capsys, tiny_lab):
    for name, (fn, inputs) in PRIMITIVES.items():
        check_op(fn, inputs, tol=1e-5)
    _, bpe, enc = tiny_lab
    cfg = tiny_config(bpe.vocab_size, n_layers=2, d_model=8, d_ffn=8, n_heads=2, dropout=0.1)
    m = build_model(cfg, "lang_adapter", ["aa", "bb"], seed=1)
    rng = np.random.default_rng(0)
    for k in m.params:
        m.params[k] = m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape)
    inputs, targets = masked_batch(enc["aa"], n=3, vocab_size=bpe.vocab_size)
    names = m.routed_names("aa")
    key = (5, 1)
    _, g = m.loss_and_grads(inputs, targets, "aa", wrt=names, dropout_key=key)

    def f(vals):
        return m.loss(inputs, targets, "aa", values={**m.params, **vals}, dropout_key=key)

    fd = ad.finite_difference_grad(f, {k: m.params[k] for k in names})
    # per-tensor relative error; key biases have an exactly zero gradient (softmax ignores a per-row
    # shift) and their differences are pure roundoff, so denominators are floored at 1e-3 of the
    # largest gradient entry
    floor = 1e-3 * max(float(np.abs(fd[k]).max()) for k in names)
    worst = max(float(np.abs(g[k] - fd[k]).max()) / max(float(np.abs(fd[k]).max()), floor) for k in names)
    n = sum(m.params[k].size for k in names)
    verdict(capsys, "C1", worst < 1e-5,
            f"{len(PRIMITIVES)} primitives ok; transformer ({n} params) max relative error {worst:.2e} < 1e-5")


# ---------------------------------------------------------------- C2


def test_c2_hypergradient_oracles(capsys):
    beta = 0.1
    toy = BilinearToy([1.3], {"a": [0.7], "b": [-0.4]})
    hg = hypergrad_fd(toy, toy.params, "a", ("train",), {"a": ("val",), "b": ("val",)}, beta)
    exact = -beta * (toy.params["theta"] - beta * toy.params["phi@a"])
    bil = float(np.abs(hg.grads["phi@a"] - exact).max() / np.abs(exact).max())

    mlp_errs, ratios = [], []
    for seed in SEEDS:
        toy = TinyMLP(seed=seed)
        train_b, val_b = mlp_batches(seed)
        ref = reference_hypergrad(toy, toy.params, "a", train_b, val_b, 0.5)["scale@a"]
        hg = hypergrad_fd(toy, toy.params, "a", train_b, val_b, 0.5)
        scale = np.abs(ref).max()
        mlp_errs.append(float(np.abs(hg.grads["scale@a"] - ref).max() / scale))
        # the direct term is exact, so the remaining error is the second-order term's
        half = hypergrad_fd(toy, toy.params, "a", train_b, val_b, 0.5, eps=hg.eps / 2)
        ratios.append(mlp_errs[-1] / float(np.abs(half.grads["scale@a"] - ref).max() / scale))
    n_params = TinyMLP().n_parameters()
    ok = bil < 1e-3 and max(mlp_errs) < 1e-3 and min(ratios) >= 3.0
    verdict(capsys, "C2", ok, f"bilinear rel err {bil:.1e}; MLP ({n_params} params) rel err max {max(mlp_errs):.1e}; "
                              f"halving eps shrinks error by {min(ratios):.2f}x (>= 3)")


# ---------------------------------------------------------------- C3


def test_c3_hard_concrete(capsys):
    rng = np.random.default_rng(2024)
    n = 100_000
    worst = 0.0
    for pi in (-2.0, 0.0, 2.0):
        u = rng.uniform(np.nextafter(0, 1), 1.0, n)
        hits = float((hard_concrete_gate(np.full(n, pi), u) > 0).mean())
        p = expected_l0(np.array([pi]))
        worst = max(worst, abs(hits - p) / math.sqrt(p * (1 - p) / n))
    z = float(hard_concrete_gate(0.0, 0.5))
    ok = worst < 3.0 and z == 0.5
    verdict(capsys, "C3", ok, f"largest Monte Carlo deviation {worst:.2f} sigma (< 3); gate(0, 0.5) = {z!r}")


# ---------------------------------------------------------------- C4


def test_c4_planted_structure_recovered(capsys):
    toy = PlantedBilingualMLP(seed=0)
    cfg = HardConcreteConfig(lam=0.01, steps=300)
    masks = {lang: learn_masks(toy, lambda rng, lang=lang: toy.batch(rng, lang, 64), lang, cfg, seed=1)
             for lang in "ab"}
    planted = toy.planted("a")
    hit = sum(masks["a"].pi[i] > 0 > masks["b"].pi[i] for i in planted) / len(planted)
    verdict(capsys, "C4", hit >= 0.9, f"{hit:.0%} of planted a-only groups have pi_a > 0 > pi_b (>= 90%)")


# ---------------------------------------------------------------- C5


def test_c5_gradient_conflict_ordering(capsys):
    far = E.gradient_conflict(0.0, seed=0)
    near = E.gradient_conflict(1.0, seed=0)
    lo, hi = E.bootstrap_mean_ci(far.paired_diffs)
    sf, sn = E.summarize_probes(far), E.summarize_probes(near)
    ok = sf["n"] >= 100 and lo > 0 and sf["cross"] < sn["cross"]
    verdict(capsys, "C5", ok, f"s=0: within {sf['within']:.3f} vs cross {sf['cross']:.3f} over {sf['n']} probes, "
                              f"paired diff 95% CI [{lo:.3f}, {hi:.3f}]; cross s=0 {sf['cross']:.3f} "
                              f"< s=1 {sn['cross']:.3f}")


# ---------------------------------------------------------------- C6


def test_c6_interference_direction(capsys):
    runs = [E.interference(seed) for seed in SEEDS]
    ample = {lang: [r["ample"][lang]["mono"] < r["ample"][lang]["joint"] for r in runs] for lang in ("aa", "bb")}
    low = [r["low"]["aa"]["joint"] <= r["low"]["aa"]["mono"] for r in runs]
    ok = majority(ample["aa"]) and majority(ample["bb"]) and majority(low)

    def fmt(part, lang):
        return ", ".join(f"{r[part][lang]['mono']:.1f}/{r[part][lang]['joint']:.1f}" for r in runs)

    verdict(capsys, "C6", ok, f"mono/joint ppl ample aa [{fmt('ample', 'aa')}] bb [{fmt('ample', 'bb')}]; "
                              f"low-resource aa [{fmt('low', 'aa')}] (each needs >= 2 of 3 seeds)")


# ---------------------------------------------------------------- C7


def test_c7_capacity_mode_orderings(capsys):
    runs = [E.capacity_modes(seed) for seed in SEEDS]
    claims = {
        "ffn within > joint": [r["lang_ffn"]["within"] > r["shared_only"]["within"] for r in runs],
        "ffn zero-shot < chance+5": [r["lang_ffn"]["zero_shot"] < CHANCE + 0.05 for r in runs],
        "meta within > joint": [r["meta_adapter"]["within"] > r["shared_only"]["within"] for r in runs],
        "meta zero-shot > joint": [r["meta_adapter"]["zero_shot"] > r["shared_only"]["zero_shot"] for r in runs],
        "meta zero-shot > adapter": [r["meta_adapter"]["zero_shot"] > r["lang_adapter"]["zero_shot"] for r in runs],
    }
    with capsys.disabled():
        for mode in E.CAPACITY_MODES:
            if mode in runs[0]:
                w = ", ".join(f"{r[mode]['within']:.3f}" for r in runs)
                z = ", ".join(f"{r[mode]['zero_shot']:.3f}" for r in runs)
                print(f"\n  C7 {mode}: within [{w}] zero-shot [{z}]", end="")
        for claim, flags in claims.items():
            print(f"\n  C7 {claim}: {sum(flags)}/3 seeds {'ok' if majority(flags) else 'fails'}", end="")
    ok = all(majority(f) for f in claims.values())
    failed = [c for c, f in claims.items() if not majority(f)]
    verdict(capsys, "C7", ok, "all orderings hold on >= 2 of 3 seeds" if ok else f"failing: {'; '.join(failed)}")


# ---------------------------------------------------------------- C8


def test_c8_trilingual(capsys):
    runs = [E.trilingual(seed) for seed in SEEDS]
    flags = [abs(r["tri"]["within"] - r["pair"]["within"]) <= 0.015 and r["tri"]["zero_shot"] > r["pair"]["zero_shot"]
             for r in runs]
    detail = "; ".join(f"within {r['pair']['within']:.3f}->{r['tri']['within']:.3f} "
                       f"zero-shot {r['pair']['zero_shot']:.3f}->{r['tri']['zero_shot']:.3f}" for r in runs)
    verdict(capsys, "C8", majority(flags), f"{sum(flags)}/3 seeds ({detail})")


# ---------------------------------------------------------------- C9


def test_c9_engineering_invariants(capsys, tiny_lab, tmp_path, monkeypatch):
    raw = tiny_raw()
    out = {d: tmp_path / d for d in ("a", "b", "c")}
    run_pipeline(parse_config(raw, out_dir=str(out["a"])))
    run_pipeline(parse_config(raw, out_dir=str(out["b"])))
    deterministic = metrics_digest(out["a"] / "metrics.csv") == metrics_digest(out["b"] / "metrics.csv")

    ck_path = out["a"] / "models/joint/final.ckpt"
    round_trip = load_checkpoint(ck_path).to_bytes() == ck_path.read_bytes()

    real = pretrain_mod.plain_step

    def crash(model, corpora, state, cfg, samp):
        if state.step == 7:
            raise KeyboardInterrupt
        return real(model, corpora, state, cfg, samp)

    monkeypatch.setattr(pretrain_mod, "plain_step", crash)
    with pytest.raises(KeyboardInterrupt):
        run_pipeline(parse_config(raw, out_dir=str(out["c"])))
    monkeypatch.setattr(pretrain_mod, "plain_step", real)
    run_pipeline(parse_config(raw, out_dir=str(out["c"])), resume=True)
    resumed = (metrics_digest(out["a"] / "metrics.csv") == metrics_digest(out["c"] / "metrics.csv")
               and (out["c"] / "models/joint/final.ckpt").read_bytes() == ck_path.read_bytes())

    _, bpe, enc = tiny_lab
    isolated = True
    for mode in ("lang_ffn", "lang_attn", "lang_adapter"):
        m = build_model(tiny_config(bpe.vocab_size), mode, ["aa", "bb"], seed=0)
        inputs, targets = masked_batch(enc["aa"], vocab_size=bpe.vocab_size)
        _, g = m.loss_and_grads(inputs, targets, "aa", wrt=list(m.params))
        isolated &= all(np.all(g[k] == 0.0) for k in m.phi_names("bb"))
    ok = deterministic and round_trip and resumed and isolated
    verdict(capsys, "C9", ok, f"checkpoint round trip {round_trip}, resume equivalence {resumed}, "
                              f"determinism {deterministic}, routing isolation {isolated}")


# ---------------------------------------------------------------- C10


def test_c10_mask_similarity(capsys):
    r = E.mask_similarity(seed=0)
    rows = [(key, r["within"][key], r["cross"][key]) for key in sorted(r["within"])]
    ok = all(w > c for _, w, c in rows)
    detail = "; ".join(f"L{layer} {block[:4]} {w:.3f}>{c:.3f}" for (layer, block), w, c in rows)
    verdict(capsys, "C10", ok, f"within vs cross per layer: {detail}")
