"""Shared fixtures: deterministic tiny models with nontrivial adapters."""

import numpy as np

from polytag.adapters import AdapterBank, BottleneckAdapter
from polytag.data import LabelMap, LanguageProfile
from polytag.encoder import Encoder, EncoderConfig
from polytag.fusion import build_madx, build_zgul
from polytag.tensor import Rng, Tensor

TINY_ENC = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=16, vocab_size=64, max_len=12)


def make_adapter(code, seed, cfg=TINY_ENC, rf=4, up_std=0.05, bias_std=0.0):
    """Adapter with random (deterministic) up-projections, i.e. non-identity.

    bias_std > 0 also randomizes the down-projection bias, which keeps the
    bottleneck active even where the encoder FFN output is near zero."""
    la = BottleneckAdapter(code, cfg.n_layers, cfg.d_model, rf=rf, seed=seed)
    for p in la.parameters():
        if "Wup" in p.name:
            p.value = Tensor(Rng(seed).child(p.name).normal(p.shape, std=up_std))
        elif bias_std > 0 and "bdown" in p.name:
            p.value = Tensor(Rng(seed).child(p.name).normal(p.shape, std=bias_std))
    return la


def make_profile(code, seed):
    bits = (Rng(seed).child("lf").random((103,)) < 0.5).astype(float)
    return LanguageProfile(code, bits)


def _seed_for(code):
    # keyed by code, not position, so reordering a bank keeps each adapter
    return 3 + sum(ord(ch) for ch in code)


def tiny_zgul(seed=5, codes=("aa", "bb"), cfg=TINY_ENC, init=None, d_lang=8,
              labels=("A", "B", "C"), adapter_kwargs=None):
    enc = Encoder(cfg, seed=1)
    kw = adapter_kwargs or {}
    bank = AdapterBank([make_adapter(c, _seed_for(c), cfg, **kw) for c in codes])
    profiles = {c: make_profile(c, _seed_for(c)) for c in codes}
    profiles["tt"] = make_profile("tt", 99)
    model = build_zgul(enc, bank, LabelMap(list(labels)), profiles, d_lang=d_lang, seed=seed, init=init)
    return model, profiles


def tiny_madx(seed=5, codes=("aa", "bb"), cfg=TINY_ENC, labels=("A", "B", "C"),
              adapter_kwargs=None):
    enc = Encoder(cfg, seed=1)
    kw = adapter_kwargs or {}
    bank = AdapterBank([make_adapter(c, _seed_for(c), cfg, **kw) for c in codes])
    return build_madx(enc, bank, LabelMap(list(labels)), seed=seed)
