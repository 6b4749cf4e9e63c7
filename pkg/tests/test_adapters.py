"""Adapters: residual identity, matrix oracle, MLM specialization."""

import numpy as np
import pytest
from scipy.special import erf

from polytag.adapters import (
    AdapterBank,
    BottleneckAdapter,
    LaTrainConfig,
    adapter_forward,
    train_language_adapter,
)
from polytag.checkpoint import params_state, state_checksum
from polytag.data import DataError
from polytag.encoder import Encoder, EncoderConfig, MlmConfig, eval_mlm_loss, mlm_pretrain
from polytag.tensor import Tensor

CFG = EncoderConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, vocab_size=128, max_len=16)


def test_bottleneck_width():
    ad = BottleneckAdapter("xx", n_layers=1, d_model=12, rf=3)
    assert ad.width == 4
    ad4 = BottleneckAdapter("xx", n_layers=1, d_model=13, rf=4)
    assert ad4.width == 3  # floor
    with pytest.raises(ValueError, match="reduction factor"):
        BottleneckAdapter("xx", n_layers=1, d_model=4, rf=8)


def test_fresh_adapter_is_identity():
    ad = BottleneckAdapter("xx", n_layers=2, d_model=16, rf=4, seed=3)
    h = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    out = ad.forward(0, h)
    assert np.array_equal(out.data, h.data)  # W_up starts at zero


def test_adapter_forward_matches_hand_matrices():
    ad = BottleneckAdapter("xx", n_layers=1, d_model=4, rf=2, seed=1)
    rng = np.random.default_rng(5)
    p = ad.layers[0]
    p["Wup"].value = Tensor(rng.normal(size=(2, 4)))
    p["bup"].value = Tensor(rng.normal(size=4))
    p["bdown"].value = Tensor(rng.normal(size=2))
    h = rng.normal(size=(3, 4))
    z = h @ p["Wdown"].value.data + p["bdown"].value.data
    z = 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    expect = h + z @ p["Wup"].value.data + p["bup"].value.data
    got = adapter_forward(Tensor(h), ad, 0)
    assert np.max(np.abs(got.data - expect)) < 1e-12


def test_adapter_vector_input_and_layer_range():
    ad = BottleneckAdapter("xx", n_layers=2, d_model=8, rf=2, seed=0)
    v = Tensor(np.arange(8.0))
    out = ad.forward(1, v)
    assert out.shape == (8,)
    with pytest.raises(IndexError, match="layer"):
        ad.forward(2, v)


def test_bank_unique_codes_and_shape_agreement():
    a = BottleneckAdapter("aa", 2, 16, rf=4)
    b = BottleneckAdapter("bb", 2, 16, rf=4)
    bank = AdapterBank([a, b])
    assert bank.codes == ("aa", "bb")
    assert bank["aa"] is a
    with pytest.raises(ValueError, match="duplicate"):
        bank.add(BottleneckAdapter("aa", 2, 16))
    with pytest.raises(ValueError, match="share"):
        bank.add(BottleneckAdapter("cc", 3, 16))
    with pytest.raises(KeyError):
        bank["zz"]


def test_adapter_save_load_roundtrip_uses_pinned_names(tmp_path):
    ad = BottleneckAdapter("sw", n_layers=2, d_model=16, rf=4, seed=8)
    names = {p.name for p in ad.parameters()}
    assert "la.sw.layer0.Wdown" in names
    assert "la.sw.layer1.bup" in names
    path = tmp_path / "la.ckpt"
    ad.save(path)
    back = BottleneckAdapter.load(path)
    assert back.code == "sw" and back.rf == 4
    assert state_checksum(params_state(back.parameters())) == state_checksum(
        params_state(ad.parameters())
    )


def _corpus(seed, lo, hi, n=40):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(lo, hi, size=int(rng.integers(4, 12)))) for _ in range(n)]


@pytest.fixture(scope="module")
def pretrained():
    corpus_a = _corpus(0, 3, 60)
    corpus_b = _corpus(1, 60, 120)
    enc, _ = mlm_pretrain(corpus_a + corpus_b, CFG, MlmConfig(steps=150, lr=2e-3, seed=0))
    return enc, corpus_a, corpus_b


def test_train_language_adapter_freezes_encoder(pretrained):
    enc, corpus_a, _ = pretrained
    before = state_checksum(params_state(enc.parameters()))
    ad, losses = train_language_adapter(enc, corpus_a, LaTrainConfig(code="aa", steps=30, seed=1))
    assert state_checksum(params_state(enc.parameters())) == before
    assert len(losses) == 30
    # adapter actually moved off its zero-init
    assert any(np.abs(p.value.data).max() > 0 for p in ad.parameters() if "Wup" in p.name)


def test_train_language_adapter_zero_steps_unchanged(pretrained):
    enc, corpus_a, _ = pretrained
    ad, _ = train_language_adapter(enc, corpus_a, LaTrainConfig(code="aa", steps=0, seed=1))
    fresh = BottleneckAdapter("aa", CFG.n_layers, CFG.d_model, rf=3, seed=1)
    assert state_checksum(params_state(ad.parameters())) == state_checksum(
        params_state(fresh.parameters())
    )


def test_train_language_adapter_empty_corpus(pretrained):
    enc, _, _ = pretrained
    with pytest.raises(DataError, match="empty"):
        train_language_adapter(enc, [], LaTrainConfig(code="aa", steps=1))


def test_language_adapters_specialize(pretrained):
    # 2x2 grid: each LA should model its own language best
    enc, corpus_a, corpus_b = pretrained
    la_a, _ = train_language_adapter(
        enc, corpus_a, LaTrainConfig(code="aa", steps=250, lr=2e-3, seed=2)
    )
    la_b, _ = train_language_adapter(
        enc, corpus_b, LaTrainConfig(code="bb", steps=250, lr=2e-3, seed=3)
    )
    aa = eval_mlm_loss(enc, corpus_a, seed=9, hook=la_a.forward)
    ab = eval_mlm_loss(enc, corpus_b, seed=9, hook=la_a.forward)
    ba = eval_mlm_loss(enc, corpus_a, seed=9, hook=la_b.forward)
    bb = eval_mlm_loss(enc, corpus_b, seed=9, hook=la_b.forward)
    assert aa < ba
    assert bb < ab
