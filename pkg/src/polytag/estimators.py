"""Scikit-learn style wrappers around the tagging pipeline.

These keep the sklearn contract (constructor stores params verbatim,
`fit` returns self, fitted state lives in trailing-underscore attributes)
so the taggers compose with `clone`, grid search and pipelines. The
multi-source estimators take a language code per sentence as a fit/predict
argument, which sklearn treats as routed metadata.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .adapters import AdapterBank, LaTrainConfig, train_language_adapter
from .data import DataError, Encoded, LabelMap, LanguageProfile, Vocab, LANGVEC_DIM
from .em import EMConfig, em_tune
from .encoder import Encoder, EncoderConfig
from .fusion import build_madx, build_sft, build_zgul
from .metrics import micro_f1
from .tensor import Rng
from .training import TrainConfig, predict_sentence, train_task
from .validation import (
    check_is_fitted,
    check_label_sequences,
    check_languages,
    check_token_sequences,
)


def _pseudo_profile(code):
    """Stand-in binary typology vector derived from the code alone.

    Deterministic but structureless; supply real profiles when relatedness
    between languages should mean anything.
    """
    bits = Rng(7).child(f"profile.{code}").random((LANGVEC_DIM,)) < 0.5
    return LanguageProfile(code, bits.astype(np.float64))


class _TaggerCore(BaseEstimator):
    """Shared config surface and glue; subclasses build the model in fit."""

    def __init__(self, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_len=64,
                 vocab_size=512, scheme="token", lr=1e-3, epochs=5, batch_size=16,
                 seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.scheme = scheme
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _encoder_config(self):
        return EncoderConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            d_ff=self.d_ff, vocab_size=self.vocab_size, max_len=self.max_len,
        )

    def _fit_maps(self, sentences, labels):
        self.vocab_ = Vocab.from_corpus(sentences, max_size=self.vocab_size)
        tags = sorted({t for seq in labels for t in seq})
        self.labels_ = LabelMap(tags, scheme=self.scheme)

    def _encode(self, sentences, labels=None, languages=None):
        out = []
        for i, toks in enumerate(sentences):
            lab = self.labels_.encode(labels[i]) if labels is not None else None
            code = languages[i] if languages is not None else "xx"
            out.append(Encoded(self.vocab_.encode(toks), lab, code))
        return out

    def _predict_encoded(self, encoded, profiles=None):
        preds = []
        for ex in encoded:
            ids = predict_sentence(self.model_, ex, profiles)
            preds.append(self.labels_.decode(ids))
        return preds

    def score(self, X, y, **kw):
        preds = self.predict(X, **kw)
        golds = [list(seq) for seq in y]
        return micro_f1(preds, golds, self.scheme).f1


class SftTagger(_TaggerCore):
    """Single model, full fine-tuning, no adapters."""

    def fit(self, X, y):
        sentences = check_token_sequences(X)
        labels = check_label_sequences(sentences, y)
        self._fit_maps(sentences, labels)
        enc = Encoder(self._encoder_config(), seed=self.seed)
        model = build_sft(enc, self.labels_, languages=("xx",), seed=self.seed)
        data = {"xx": {"train": self._encode(sentences, labels, ["xx"] * len(sentences))}}
        cfg = TrainConfig(mode="sft", lr=self.lr, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed, sources=("xx",))
        result = train_task(model, data, cfg)
        self.model_ = result.model
        self.history_ = result.log
        return self

    def predict(self, X):
        check_is_fitted(self)
        sentences = check_token_sequences(X)
        return self._predict_encoded(self._encode(sentences))


class _MultiSourceCore(_TaggerCore):
    """Adapter-per-language estimators; adds the LA pretraining stage."""

    def __init__(self, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_len=64,
                 vocab_size=512, scheme="token", lr=1e-3, epochs=5, batch_size=16,
                 seed=0, rf=3, la_steps=0, la_lr=1e-3):
        super().__init__(d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                         d_ff=d_ff, max_len=max_len, vocab_size=vocab_size,
                         scheme=scheme, lr=lr, epochs=epochs,
                         batch_size=batch_size, seed=seed)
        self.rf = rf
        self.la_steps = la_steps
        self.la_lr = la_lr

    def _fit_bank(self, encoder, grouped):
        adapters = []
        for code in sorted(grouped):
            cfg = LaTrainConfig(code=code, steps=self.la_steps, lr=self.la_lr,
                                seed=self.seed, rf=self.rf)
            adapter, _ = train_language_adapter(
                encoder, [ex.ids for ex in grouped[code]["train"]], cfg,
            )
            adapters.append(adapter)
        return AdapterBank(adapters)

    def _grouped_fit_data(self, X, y, languages):
        sentences = check_token_sequences(X)
        labels = check_label_sequences(sentences, y)
        codes = check_languages(sentences, languages)
        self._fit_maps(sentences, labels)
        encoded = self._encode(sentences, labels, codes)
        grouped = {}
        for ex in encoded:
            grouped.setdefault(ex.language, {"train": []})["train"].append(ex)
        return grouped


class MadxTagger(_MultiSourceCore):
    """One frozen language adapter per source plus a shared task adapter."""

    def fit(self, X, y, languages=None):
        grouped = self._grouped_fit_data(X, y, languages)
        enc = Encoder(self._encoder_config(), seed=self.seed)
        bank = self._fit_bank(enc, grouped)
        model = build_madx(enc, bank, self.labels_, rf=self.rf, seed=self.seed)
        cfg = TrainConfig(mode="madx_multi", lr=self.lr, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed,
                          sources=tuple(sorted(grouped)))
        result = train_task(model, grouped, cfg)
        self.model_ = result.model
        self.history_ = result.log
        return self

    def predict(self, X, languages=None, fallback_language=None):
        check_is_fitted(self)
        sentences = check_token_sequences(X)
        codes = check_languages(sentences, languages)
        routed = []
        for code in codes:
            if code in self.model_.languages:
                routed.append(code)
            elif fallback_language is not None:
                routed.append(fallback_language)
            else:
                raise DataError(
                    f"no language adapter for {code!r}; pass fallback_language"
                )
        return self._predict_encoded(self._encode(sentences, languages=routed))


class ZgulTagger(_MultiSourceCore):
    """Fused multi-source tagger with optional test-time tuning.

    profiles maps language code to a binary typology feature vector; codes
    without one get a deterministic stand-in, which removes any genuine
    relatedness signal from the typology attention but keeps shapes honest.
    em_iterations > 0 turns on per-sentence tuning of the source weights.
    """

    def __init__(self, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_len=64,
                 vocab_size=512, scheme="token", lr=1e-3, epochs=5, batch_size=16,
                 seed=0, rf=3, la_steps=0, la_lr=1e-3, d_lang=16, profiles=None,
                 em_iterations=0, em_lr=0.1):
        super().__init__(d_model=d_model, n_layers=n_layers, n_heads=n_heads,
                         d_ff=d_ff, max_len=max_len, vocab_size=vocab_size,
                         scheme=scheme, lr=lr, epochs=epochs,
                         batch_size=batch_size, seed=seed, rf=rf,
                         la_steps=la_steps, la_lr=la_lr)
        self.d_lang = d_lang
        self.profiles = profiles
        self.em_iterations = em_iterations
        self.em_lr = em_lr

    def _profile_for(self, code):
        given = self.profiles or {}
        if code in given:
            feats = given[code]
            if isinstance(feats, LanguageProfile):
                return feats
            return LanguageProfile(code, np.asarray(feats, dtype=np.float64))
        return _pseudo_profile(code)

    def fit(self, X, y, languages=None):
        grouped = self._grouped_fit_data(X, y, languages)
        enc = Encoder(self._encoder_config(), seed=self.seed)
        bank = self._fit_bank(enc, grouped)
        profs = {code: self._profile_for(code) for code in sorted(grouped)}
        model = build_zgul(enc, bank, self.labels_, profs, d_lang=self.d_lang,
                           rf=self.rf, seed=self.seed)
        cfg = TrainConfig(mode="zgul", lr=self.lr, epochs=self.epochs,
                          batch_size=self.batch_size, seed=self.seed,
                          sources=tuple(sorted(grouped)))
        result = train_task(model, grouped, cfg)
        self.model_ = result.model
        self.history_ = result.log
        return self

    def predict(self, X, languages=None):
        check_is_fitted(self)
        sentences = check_token_sequences(X)
        codes = check_languages(sentences, languages)
        encoded = self._encode(sentences, languages=codes)
        profiles = {c: self._profile_for(c) for c in set(codes)}
        if self.em_iterations <= 0:
            return self._predict_encoded(encoded, profiles)
        cfg = EMConfig(iterations=self.em_iterations, lr=self.em_lr)
        preds = []
        for k, ex in enumerate(encoded):
            res = em_tune(self.model_, ex.ids, cfg, profile=profiles[ex.language],
                          sentence_id=k)
            preds.append(self.labels_.decode(res.pred_ids))
        return preds
