import math

import numpy as np
import pytest
from conftest import masked_batch, tiny_config

from interlab.autodiff import NumericError
from interlab.model import build_model
from interlab.probes import (GradientProbeConfig, HardConcreteConfig, HardConcreteMasker, MaskParams, classify,
                             expected_l0, flat_cosine, gradient_cosine, hard_concrete_gate, learn_masks,
                             mask_similarity_by_layer, masked_perplexity, probe_pair, read_masks, top_k_groups,
                             transformer_layout, write_masks)
from interlab.pretrain import perplexity
from interlab.toys import PlantedBilingualMLP

# ---------------------------------------------------------------- gates


def test_gate_at_zero_logit_and_median_noise():
    assert float(hard_concrete_gate(0.0, 0.5)) == 0.5


def test_gate_saturates():
    u = np.linspace(0.01, 0.99, 50)
    assert np.all(hard_concrete_gate(np.full(50, 20.0), u) == 1.0)
    assert np.all(hard_concrete_gate(np.full(50, -20.0), u) == 0.0)


def test_gate_rejects_noise_outside_open_interval():
    with pytest.raises(ValueError):
        hard_concrete_gate(0.0, 1.0)


def test_expected_l0_at_zero():
    assert expected_l0(np.zeros(1)) == pytest.approx(0.8318, abs=1e-4)


def test_expected_l0_matches_monte_carlo():
    rng = np.random.default_rng(0)
    n = 200_000
    for pi in (-1.0, 0.0, 1.5):
        hits = (hard_concrete_gate(np.full(n, pi), rng.uniform(1e-12, 1 - 1e-12, n)) > 0).mean()
        p = expected_l0(np.array([pi]))
        assert abs(hits - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_expected_l0_limits_and_additivity():
    assert expected_l0(np.array([-50.0])) < 1e-20
    a, b = np.array([0.3, -1.0]), np.array([2.0])
    assert expected_l0(np.concatenate([a, b])) == pytest.approx(expected_l0(a) + expected_l0(b))


def test_config_validation():
    for kw in ({"gamma": 0.1}, {"zeta": 0.9}, {"beta": 1.5}, {"lam": -1.0}):
        with pytest.raises(ValueError):
            HardConcreteConfig(**kw)


# ---------------------------------------------------------------- mask learning on the planted toy


@pytest.fixture(scope="module")
def planted():
    toy = PlantedBilingualMLP(seed=0)
    cfg = HardConcreteConfig(lam=0.01, steps=300)
    masks = {lang: learn_masks(toy, lambda rng, lang=lang: toy.batch(rng, lang, 64), lang, cfg, seed=1)
             for lang in "ab"}
    return toy, masks


def test_planted_private_units_are_recovered(planted):
    toy, masks = planted
    a_only, b_only = toy.planted("a"), toy.planted("b")
    assert all(masks["a"].pi[i] > 0 >= masks["b"].pi[i] for i in a_only)
    assert all(masks["b"].pi[i] > 0 >= masks["a"].pi[i] for i in b_only)
    labels = [classify(masks["a"].pi[i], masks["b"].pi[i]) for i in range(len(masks["a"].groups))]
    assert [labels[i] for i in a_only] == ["specific_a"] * len(a_only)
    assert [labels[i] for i in b_only] == ["specific_b"] * len(b_only)
    shared = [i for i in range(len(labels)) if i not in a_only + b_only]
    assert sum(labels[i] == "universal" for i in shared) >= len(shared) - 2


def test_planted_groups_lead_top_k_as_language_specific(planted):
    toy, masks = planted
    rows = top_k_groups(masks["a"], masks["b"], len(masks["a"].groups))
    label = {r["group"][2]: r["label"] for r in rows}
    assert all(label[i] == "specific_a" for i in toy.planted("a"))
    assert all(label[i] == "specific_b" for i in toy.planted("b"))
    # b's private units are pruned hardest under a's mask, so they lead the |pi_a| ranking
    assert {r["group"][2] for r in rows[:toy.units]} == set(toy.planted("b"))


def test_mask_learning_leaves_weights_alone(planted):
    toy, _ = planted
    assert np.array_equal(PlantedBilingualMLP(seed=0).params["w1"], toy.params["w1"])


def test_large_lambda_prunes_everything():
    toy = PlantedBilingualMLP(seed=0)
    cfg = HardConcreteConfig(lam=50.0, steps=300)
    m = learn_masks(toy, lambda rng: toy.batch(rng, "a", 64), "a", cfg, seed=1)
    assert m.expected_l0(cfg) < 0.05 * len(m.groups)


def test_expected_l0_is_non_increasing_in_lambda():
    toy = PlantedBilingualMLP(seed=0)
    l0 = []
    for lam in (0.0, 0.01, 0.1, 1.0):
        cfg = HardConcreteConfig(lam=lam, steps=200)
        l0.append(learn_masks(toy, lambda rng: toy.batch(rng, "a", 64), "a", cfg, seed=1).expected_l0(cfg))
    assert all(x >= y - 1e-9 for x, y in zip(l0, l0[1:]))


def test_zero_lambda_does_not_prune_on_average():
    toy = PlantedBilingualMLP(seed=0)
    cfg = HardConcreteConfig(lam=0.0, steps=200, init_pi=0.0)
    init = expected_l0(np.full(3 * toy.units, cfg.init_pi), cfg)
    l0 = [learn_masks(toy, lambda rng: toy.batch(rng, "a", 64), "a", cfg, seed=s).expected_l0(cfg) for s in (1, 2)]
    assert np.mean(l0) >= init


def test_zero_steps_returns_initial_logits():
    toy = PlantedBilingualMLP(seed=0)
    m = learn_masks(toy, lambda rng: toy.batch(rng, "a", 8), "a", HardConcreteConfig(steps=0, init_pi=1.5))
    assert np.all(m.pi == 1.5)


# ---------------------------------------------------------------- analytics


def groups(n):
    return [(0, "attention", i) for i in range(n)] + [(0, "feedforward", i) for i in range(n)]


def test_similarity_of_identical_and_negated_masks():
    pi = np.random.default_rng(0).standard_normal(8)
    a = MaskParams("a", pi, groups(4))
    assert all(v == pytest.approx(1.0) for v in mask_similarity_by_layer(a, MaskParams("b", pi, groups(4))).values())
    assert all(v == pytest.approx(-1.0) for v in mask_similarity_by_layer(a, MaskParams("b", -pi, groups(4))).values())


def test_similarity_requires_aligned_groups():
    with pytest.raises(ValueError):
        mask_similarity_by_layer(MaskParams("a", np.ones(8), groups(4)), MaskParams("b", np.ones(6), groups(3)))


def test_top_k_all_universal_and_ordering():
    a = MaskParams("a", [1.0, 3.0, 2.0, 0.5], groups(2))
    b = MaskParams("b", [1.0, 1.0, 1.0, 1.0], groups(2))
    rows = top_k_groups(a, b, 3)
    assert [r["pi_a"] for r in rows] == [3.0, 2.0, 1.0]
    assert {r["label"] for r in rows} == {"universal"}
    assert rows[0]["norm_a"] == 1.0
    assert top_k_groups(a, b, 0) == []
    with pytest.raises(ValueError):
        top_k_groups(a, b, 5)


def test_classify_cases():
    assert classify(1, 1) == "universal"
    assert classify(1, -1) == "specific_a"
    assert classify(-1, 1) == "specific_b"
    assert classify(-1, 0) == "pruned"


def test_non_finite_mask_is_rejected():
    with pytest.raises(NumericError):
        MaskParams("a", [np.nan, 0.0], groups(1))


def test_masks_round_trip(tmp_path):
    ms = [MaskParams("a", np.random.default_rng(1).standard_normal(4), groups(2)),
          MaskParams("b", np.array([0.1, 1 / 3, -2.0, 1e-9]), groups(2))]
    write_masks(tmp_path / "m.tsv", ms)
    back = read_masks(tmp_path / "m.tsv")
    for m in ms:
        assert back[m.lang].groups == m.groups and np.array_equal(back[m.lang].pi, m.pi)


# ---------------------------------------------------------------- on the transformer


def test_transformer_layout_counts(tiny_lab):
    _, bpe, _ = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "lang_ffn", ["aa", "bb"])
    layout = transformer_layout(m, "aa", embed_slice=8)
    c = m.cfg
    assert len(layout) == math.ceil(c.d_model / 8) + c.n_layers * (c.n_heads + c.d_ffn)
    ffn = {name for name in layout.index if ".ffn" in name}
    assert ffn and ffn <= set(m.phi_names("aa"))


def test_all_open_gates_keep_perplexity(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"], seed=1)
    layout = transformer_layout(m, "aa")
    open_ = MaskParams("aa", np.full(len(layout), 50.0), list(layout.groups))
    assert masked_perplexity(m, open_, enc["aa"]) == pytest.approx(perplexity(m, enc["aa"], "val", "aa"), rel=1e-12)


def test_gradient_cosine_identities(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"], seed=2)
    batch = masked_batch(enc["aa"], vocab_size=bpe.vocab_size)
    assert gradient_cosine(m, [batch], "aa", [batch], "aa") == pytest.approx(1.0, abs=1e-12)
    g = np.random.default_rng(0).standard_normal(10)
    assert flat_cosine(g, -g) == pytest.approx(-1.0)
    assert math.isnan(flat_cosine(g, np.zeros(10)))


def test_probe_pair_is_deterministic(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"], seed=2)
    cfg = GradientProbeConfig(micro_batches=2, batch_size=4)
    a = probe_pair(m, enc, "aa", "bb", cfg, np.random.default_rng(7))
    b = probe_pair(m, enc, "aa", "bb", cfg, np.random.default_rng(7))
    assert a == b and -1 <= a["cross"] <= 1 and -1 <= a["within"] <= 1


def test_probe_config_validation():
    with pytest.raises(ValueError):
        GradientProbeConfig(interval=0)
    assert GradientProbeConfig(micro_batches=4, batch_size=32).effective_batch == 128


def test_masker_estimator(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"], seed=1)
    est = HardConcreteMasker(m, steps=3).fit(enc["aa"])
    gates = est.transform(enc["aa"])
    assert gates.shape == (len(transformer_layout(m, "aa")),)
    assert np.all((gates >= 0) & (gates <= 1))


def test_gate_tensor_matches_numpy_gate():
    from interlab import autodiff as ad
    from interlab.probes import _gate_tensor

    rng = np.random.default_rng(3)
    pi, u = rng.standard_normal(50) * 3, rng.uniform(0.01, 0.99, 50)
    cfg = HardConcreteConfig()
    np.testing.assert_allclose(_gate_tensor(ad.Tensor(pi), u, cfg).data, hard_concrete_gate(pi, u, cfg), atol=1e-14)
