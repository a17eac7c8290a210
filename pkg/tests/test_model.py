import math

import numpy as np
import pytest
from conftest import masked_batch, tiny_config

from interlab import autodiff as ad
from interlab.autodiff import Tensor
from interlab.model import CapacityMode, TransformerConfig, adapter_apply, build_model, partition_params


def adapter_prefixes(names):
    return {n.rsplit(".", 1)[0] for n in names if ".adapter_" in n}


def test_shared_only_has_no_phi():
    m = build_model(tiny_config(50), "shared_only", ["aa", "bb"])
    p = partition_params(m)
    assert p.phi == {} and p.theta
    assert m.n_parameters()["total"] == sum(v.size for v in m.params.values())


def test_lang_adapter_counts():
    m = build_model(tiny_config(50), "lang_adapter", ["aa", "bb"])
    assert len(adapter_prefixes(m.params)) == 2 * 2 * 2
    assert len(adapter_prefixes(m.phi_names("aa"))) == 4
    assert len(adapter_prefixes(m.phi_names("bb"))) == 4
    assert not set(m.phi_names("aa")) & set(m.phi_names("bb"))


def test_shared_adapter_is_theta():
    m = build_model(tiny_config(50), "shared_adapter", ["aa", "bb"])
    assert len(adapter_prefixes(m.theta_names())) == 4
    assert partition_params(m).phi == {}


def test_lang_ffn_theta_differs_only_in_ffn():
    shared = set(build_model(tiny_config(50), "shared_only", ["aa", "bb"]).theta_names())
    ffn = set(build_model(tiny_config(50), "lang_ffn", ["aa", "bb"]).theta_names())
    assert ffn < shared
    assert all(".ffn." in n for n in shared - ffn)


def test_lang_attn_duplicates_whole_block():
    m = build_model(tiny_config(50), "lang_attn", ["aa", "bb"])
    assert sorted(n.rsplit(".", 1)[1] for n in m.phi_names("aa") if n.startswith("layers.0.")) == \
        ["bk", "bo", "bq", "bv", "wk", "wo", "wq", "wv"]


def test_invalid_configs():
    with pytest.raises(ValueError):
        TransformerConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        TransformerConfig(n_layers=0)
    with pytest.raises(ValueError):
        build_model(tiny_config(50), "lang_ffn", [])
    with pytest.raises(ValueError):
        build_model(tiny_config(50), "not_a_mode", ["aa"])
    with pytest.raises(ValueError):
        build_model(tiny_config(50), "lang_ffn", ["a@b"])


def test_untrained_loss_near_log_v(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"])
    inputs, targets = masked_batch(enc["aa"], vocab_size=bpe.vocab_size)
    assert abs(m.loss(inputs, targets, "aa") - math.log(bpe.vocab_size)) < 0.1


def test_zero_adapters_match_shared_model(tiny_lab):
    _, bpe, enc = tiny_lab
    shared = build_model(tiny_config(bpe.vocab_size), "shared_only", ["aa", "bb"], seed=3)
    adpt = build_model(tiny_config(bpe.vocab_size), "lang_adapter", ["aa", "bb"], seed=3)
    for k in shared.params:
        adpt.params[k] = shared.params[k].copy()
    inputs, targets = masked_batch(enc["bb"], vocab_size=bpe.vocab_size)
    assert adpt.loss(inputs, targets, "bb") == shared.loss(inputs, targets, "bb")


@pytest.mark.parametrize("mode", ["lang_ffn", "lang_attn", "lang_adapter"])
def test_routing_isolation_is_exact(tiny_lab, mode):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), mode, ["aa", "bb"])
    for k in m.phi_names("bb"):
        if k.endswith(".wh"):
            m.params[k] = np.random.default_rng(0).standard_normal(m.params[k].shape)
    inputs, targets = masked_batch(enc["aa"], vocab_size=bpe.vocab_size)
    _, g = m.loss_and_grads(inputs, targets, "aa", wrt=list(m.params))
    assert all(np.all(g[k] == 0.0) for k in m.phi_names("bb"))
    assert any(np.any(g[k] != 0.0) for k in m.phi_names("aa"))


def test_unregistered_language_is_rejected(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size), "lang_ffn", ["aa"])
    inputs, targets = masked_batch(enc["bb"], vocab_size=bpe.vocab_size)
    with pytest.raises(KeyError):
        m.loss(inputs, targets, "bb")


def test_dropout_key_replays_exactly(tiny_lab):
    _, bpe, enc = tiny_lab
    m = build_model(tiny_config(bpe.vocab_size, dropout=0.2), "shared_only", ["aa"])
    inputs, targets = masked_batch(enc["aa"], vocab_size=bpe.vocab_size)
    a = m.loss(inputs, targets, "aa", dropout_key=(1, 2))
    assert a == m.loss(inputs, targets, "aa", dropout_key=(1, 2))
    assert a != m.loss(inputs, targets, "aa", dropout_key=(1, 3))


def test_transformer_gradients_match_finite_differences(tiny_lab):
    _, bpe, enc = tiny_lab
    cfg = tiny_config(bpe.vocab_size, n_layers=1, d_model=8, d_ffn=8, n_heads=2)
    m = build_model(cfg, "lang_adapter", ["aa", "bb"], seed=1)
    rng = np.random.default_rng(0)
    for k in m.params:
        m.params[k] = m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape)
    inputs, targets = masked_batch(enc["aa"], n=3, vocab_size=bpe.vocab_size)
    _, g = m.loss_and_grads(inputs, targets, "aa")
    # spot-check 5 coordinates of every routed tensor
    for name in m.routed_names("aa"):
        flat = m.params[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = m.loss(inputs, targets, "aa")
            flat[i] = orig - 1e-5
            fm = m.loss(inputs, targets, "aa")
            flat[i] = orig
            fd = (fp - fm) / 2e-5
            assert abs(g[name].reshape(-1)[i] - fd) <= 1e-5 * max(1.0, abs(fd)), name


# ---------------------------------------------------------------- adapters


def test_adapter_zero_weights_is_identity():
    z = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8)))
    out = adapter_apply(z, Tensor(np.zeros((8, 2))), Tensor(np.zeros((2, 8))))
    np.testing.assert_array_equal(out.data, z.data)


def test_adapter_negative_preactivations_is_identity():
    z = Tensor(np.abs(np.random.default_rng(0).standard_normal((2, 4))))
    wz = Tensor(-np.ones((4, 1)))
    out = adapter_apply(z, wz, Tensor(np.full((1, 4), 5.0)))
    np.testing.assert_array_equal(out.data, z.data)


def test_adapter_matches_dense_algebra():
    rng = np.random.default_rng(4)
    z, wz, wh = rng.standard_normal((2, 4)), rng.standard_normal((4, 1)), rng.standard_normal((1, 4))
    hand = np.zeros((2, 4))
    for i in range(2):
        h = max(0.0, sum(z[i, j] * wz[j, 0] for j in range(4)))
        for j in range(4):
            hand[i, j] = h * wh[0, j] + z[i, j]
    out = adapter_apply(Tensor(z), Tensor(wz), Tensor(wh))
    np.testing.assert_allclose(out.data, hand, rtol=1e-14)


def test_adapter_shape_check():
    with pytest.raises(ad.ShapeError):
        adapter_apply(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 1))), Tensor(np.ones((1, 3))))


def test_capacity_mode_flags():
    assert not CapacityMode("shared_only").language_specific
    assert not CapacityMode("shared_adapter").language_specific
    assert all(CapacityMode(m).language_specific for m in ("lang_ffn", "lang_attn", "lang_adapter"))
