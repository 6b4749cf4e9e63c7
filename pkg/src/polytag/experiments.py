"""Desk-scale zero-shot transfer pipeline shared by the CLI and the
acceptance suite.

One run builds everything from a synthetic corpus: MLM-pretrained encoder,
per-source language adapters, the fused multi-source tagger and the plain
adapter-ensemble baseline, then scores eval strategies on the unseen mixture
target. Numbers here are directional; the corpus knobs below were calibrated
once (docs/calibration.md) so the expected orderings hold with margin across
seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AdapterBank, LaTrainConfig, train_language_adapter
from .analyze import NETWORKS, aggregate_attention, collect_traces
from .checkpoint import load_params_state
from .data import (
    DataError,
    Encoded,
    LabelMap,
    Vocab,
    mean_relatedness,
)
from .em import EMConfig, em_grid_search, em_tune
from .encoder import EncoderConfig, MlmConfig, continued_pretrain, mlm_pretrain
from .fusion import build_madx, build_zgul, madx_forward, zgul_forward
from .metrics import micro_f1, pearson
from .synth import MixtureSpec, SynthSpec, generate
from .training import TrainConfig, evaluate, select_model, train_task

STRATEGIES = ("zgul", "em", "uniform", "emea", "madx-en", "madx-rel")


@dataclass
class DeskConfig:
    """Bundled synthetic transfer setup: three sources, one mixture target."""

    sources: tuple = ("aa", "bb", "cc")
    target: str = "tt"
    # aa-bb overlap high so shared context words cannot betray the language;
    # with homonyms conflicting at full rate, the typology profile is the
    # only cheap signal left for tagging the shared-but-conflicting types
    related_pair: float = 0.75
    unrelated: float = 0.05         # everything involving cc
    mixture_weights: tuple = (0.65, 0.35)
    novelty: float = 0.25
    inventory_size: int = 60
    n_train: int = 240
    n_dev: int = 60
    n_test: int = 80
    n_unlabeled: int = 600
    label_noise: float = 0.02
    homonym_rate: float = 1.0
    # model
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 512       # encoder table, with headroom for target growth
    corpus_vocab_cap: int = 120  # training vocab; rarer types become <unk>
    max_len: int = 32
    d_lang: int = 16
    rf: int = 3
    # schedules
    encoder_steps: int = 240
    la_steps: int = 400
    mlm_lr: float = 1e-3
    epochs: int = 10
    lr: float = 5e-3
    # attention scores move ~25x slower than the rest: under Adam the score
    # softmax otherwise saturates on batch noise inside the first epoch,
    # before the classifier is settled enough to reward routing correctly
    head_lr: float = 2e-4
    batch_size: int = 8
    # test-time tuning
    em_grid_iterations: tuple = (1, 5)
    em_grid_lr: tuple = (0.05, 0.1, 0.5)
    em_dev_limit: int = 12
    # target-side extension; the continued pretraining budget is the lever
    # that teaches the grown vocab entries anything at all
    pp_encoder_steps: int = 600
    pp_la_steps: int = 400
    pivot: str = "cc"  # designated high-resource source for the madx-en analog
    seed: int = 0

    def encoder_config(self):
        return EncoderConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            d_ff=self.d_ff, vocab_size=self.vocab_size, max_len=self.max_len,
        )


def desk_synth_spec(cfg):
    n = len(cfg.sources)
    rel = np.full((n, n), cfg.unrelated)
    np.fill_diagonal(rel, 1.0)
    rel[0, 1] = rel[1, 0] = cfg.related_pair
    parents = dict(zip(cfg.sources[:2], cfg.mixture_weights))
    return SynthSpec(
        languages=cfg.sources,
        relatedness=rel,
        inventory_size=cfg.inventory_size,
        n_train=cfg.n_train,
        n_dev=cfg.n_dev,
        n_test=cfg.n_test,
        n_unlabeled=cfg.n_unlabeled,
        label_noise=cfg.label_noise,
        homonym_rate=cfg.homonym_rate,
        mixtures={cfg.target: MixtureSpec(parents=parents, novelty=cfg.novelty)},
        seed=cfg.seed,
    )


def _encode_labeled(examples, vocab, labels):
    return [
        Encoded(vocab.encode(ex.tokens), labels.encode(ex.labels), ex.language)
        for ex in examples
    ]


def _encode_unlabeled(sentences, vocab):
    return [vocab.encode(toks) for toks in sentences]


@dataclass
class Pipeline:
    """Everything one seed produces; the CLI persists parts of this."""

    cfg: DeskConfig
    dataset: object
    vocab: Vocab
    labels: LabelMap
    relatedness: object
    encoder: object
    bank: AdapterBank
    zgul: object
    madx: object
    em_choice: object = None
    emea_choice: object = None
    timings: dict = field(default_factory=dict)

    def encoded_test(self, code, vocab=None):
        v = vocab or self.vocab
        return _encode_labeled(self.dataset.languages[code]["test"], v, self.labels)


def build_pipeline(cfg, dataset=None):
    """Corpus to trained models for one seed; timings are kept per stage."""
    t0 = time.time()
    timings = {}
    spec = desk_synth_spec(cfg)
    ds = dataset if dataset is not None else generate(spec)
    relatedness = mean_relatedness(ds.genetic, ds.syntactic)

    source_sents = []
    for code in cfg.sources:
        for name in ("train", "dev", "test"):
            source_sents.extend(ex.tokens for ex in ds.languages[code][name])
        source_sents.extend(ds.languages[code]["unlabeled"])
    # cap below the full source inventory: rare types train the <unk> path,
    # which is what lets context carry unseen target words later
    vocab = Vocab.from_corpus(source_sents, max_size=cfg.corpus_vocab_cap)
    labels = LabelMap(sorted(spec.tags))
    timings["corpus"] = time.time() - t0

    t0 = time.time()
    unlabeled = {
        code: _encode_unlabeled(ds.languages[code]["unlabeled"], vocab)
        for code in cfg.sources
    }
    pool = [s for corpus in unlabeled.values() for s in corpus]
    encoder, _ = mlm_pretrain(
        pool, cfg.encoder_config(),
        MlmConfig(steps=cfg.encoder_steps, lr=cfg.mlm_lr, seed=cfg.seed),
    )
    timings["encoder_mlm"] = time.time() - t0

    t0 = time.time()
    adapters = []
    for k, code in enumerate(cfg.sources):
        la_cfg = LaTrainConfig(
            code=code, steps=cfg.la_steps, lr=cfg.mlm_lr,
            seed=cfg.seed * 1000 + k, rf=cfg.rf,
        )
        adapter, _ = train_language_adapter(encoder, unlabeled[code], la_cfg)
        adapters.append(adapter)
    bank = AdapterBank(adapters)
    timings["language_adapters"] = time.time() - t0

    t0 = time.time()
    data = {
        code: {
            "train": _encode_labeled(ds.languages[code]["train"], vocab, labels),
            "dev": _encode_labeled(ds.languages[code]["dev"], vocab, labels),
        }
        for code in cfg.sources
    }
    source_dev = [ex for code in cfg.sources for ex in data[code]["dev"]]

    zgul = build_zgul(
        encoder, bank, labels, dict(ds.profiles),
        d_lang=cfg.d_lang, rf=cfg.rf, seed=cfg.seed,
    )
    task_cfg = TrainConfig(
        mode="zgul", lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, sources=cfg.sources, rf=cfg.rf, head_lr=cfg.head_lr,
    )
    zres = train_task(zgul, data, task_cfg)
    picked = select_model(zgul, zres.checkpoints, source_dev)
    load_params_state(zgul.parameters(), picked.state)
    timings["train_zgul"] = time.time() - t0

    t0 = time.time()
    madx = build_madx(encoder, bank, labels, rf=cfg.rf, seed=cfg.seed)
    mres = train_task(madx, data, replace(task_cfg, mode="madx_multi"))
    picked = select_model(madx, mres.checkpoints, source_dev)
    load_params_state(madx.parameters(), picked.state)
    timings["train_madx"] = time.time() - t0

    return Pipeline(
        cfg=cfg, dataset=ds, vocab=vocab, labels=labels, relatedness=relatedness,
        encoder=encoder, bank=bank, zgul=zgul, madx=madx, timings=timings,
    )


def _related_dev(pipe):
    """Dev subset of the source most related to the target, for EM selection."""
    cfg = pipe.cfg
    related = pipe.relatedness.most_related(cfg.target, list(cfg.sources))
    dev = _encode_labeled(
        pipe.dataset.languages[related]["dev"], pipe.vocab, pipe.labels
    )
    return dev[: cfg.em_dev_limit]


def tune_em(pipe):
    """Grid-search (T, lr) for both tuned strategies on related-source dev."""
    dev = _related_dev(pipe)
    cfg = pipe.cfg
    pipe.em_choice = em_grid_search(
        pipe.zgul, dev, "related_source_dev",
        grid_iterations=cfg.em_grid_iterations, grid_lr=cfg.em_grid_lr,
    )
    pipe.emea_choice = em_grid_search(
        pipe.madx, dev, "related_source_dev",
        grid_iterations=cfg.em_grid_iterations, grid_lr=cfg.em_grid_lr,
    )
    return pipe.em_choice, pipe.emea_choice


def predict_strategy(pipe, strategy, encoded, profile=None):
    """Tag id sequences for one eval strategy over encoded target sentences."""
    cfg = pipe.cfg
    profile = profile or pipe.dataset.profiles.get(cfg.target)
    preds = []
    if strategy == "zgul":
        for ex in encoded:
            logits, _ = zgul_forward(ex.ids, profile, pipe.zgul)
            preds.append(np.argmax(logits.data, axis=1))
    elif strategy == "em":
        if pipe.em_choice is None:
            tune_em(pipe)
        em_cfg = EMConfig(
            iterations=pipe.em_choice.iterations, lr=pipe.em_choice.lr,
        )
        for k, ex in enumerate(encoded):
            res = em_tune(pipe.zgul, ex.ids, em_cfg, profile=profile, sentence_id=k)
            preds.append(res.pred_ids)
    elif strategy == "uniform":
        cfg0 = EMConfig(iterations=0, init="uniform")
        for k, ex in enumerate(encoded):
            res = em_tune(pipe.madx, ex.ids, cfg0, sentence_id=k)
            preds.append(res.pred_ids)
    elif strategy == "emea":
        if pipe.emea_choice is None:
            tune_em(pipe)
        em_cfg = EMConfig(
            iterations=pipe.emea_choice.iterations, lr=pipe.emea_choice.lr,
            init="uniform",
        )
        for k, ex in enumerate(encoded):
            res = em_tune(pipe.madx, ex.ids, em_cfg, sentence_id=k)
            preds.append(res.pred_ids)
    elif strategy == "madx-en":
        # route through the designated pivot adapter (the English-pivot analog)
        for ex in encoded:
            logits = madx_forward(ex.ids, pipe.madx, cfg.pivot)
            preds.append(np.argmax(logits.data, axis=1))
    elif strategy == "madx-rel":
        related = pipe.relatedness.most_related(cfg.target, list(cfg.sources))
        for ex in encoded:
            logits = madx_forward(ex.ids, pipe.madx, related)
            preds.append(np.argmax(logits.data, axis=1))
    else:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    return preds


def score_strategy(pipe, strategy, encoded=None):
    encoded = encoded if encoded is not None else pipe.encoded_test(pipe.cfg.target)
    pred_ids = predict_strategy(pipe, strategy, encoded)
    preds = [pipe.labels.decode(p) for p in pred_ids]
    golds = [pipe.labels.decode(ex.label_ids) for ex in encoded]
    return micro_f1(preds, golds, pipe.labels.scheme).f1


def evaluate_strategies(pipe, strategies=STRATEGIES):
    t0 = time.time()
    encoded = pipe.encoded_test(pipe.cfg.target)
    scores = {s: score_strategy(pipe, s, encoded) for s in strategies}
    pipe.timings["evaluate"] = time.time() - t0
    return scores


def attention_relatedness(pipe, limit=24):
    """Mean Pearson r per attention network against planted relatedness.

    Each language with a test split is traced with its own typology profile;
    attention is averaged over tokens and layers, and the per-source weights
    are correlated with that language's planted row. The mean over languages
    is much steadier than the single target row, which has only three points.
    """
    cfg = pipe.cfg
    sources = list(pipe.zgul.languages)
    codes = list(cfg.sources) + [cfg.target]
    per_network = {network: [] for network in NETWORKS}
    for code in codes:
        encoded = pipe.encoded_test(code)
        traces = collect_traces(
            pipe.zgul, encoded, profiles=pipe.dataset.profiles, limit=limit
        )
        row = pipe.relatedness.row(code, sources)
        for network in NETWORKS:
            weights = aggregate_attention(traces, network)
            per_network[network].append(float(pearson(weights, row)))
    return {n: float(np.mean(rs)) for n, rs in per_network.items()}


def extend_with_target(pipe):
    """Target-side extension: grow the vocab over the target's unlabeled text,
    continue encoder MLM there, train a target adapter, retrain the fused head.

    Source adapters stay as trained against the original encoder, which is the
    usual off-the-shelf-adapter situation; only the target adapter sees the
    continued encoder.
    """
    cfg = pipe.cfg
    ds = pipe.dataset
    target_raw = ds.languages[cfg.target]["unlabeled"]
    if not target_raw:
        raise DataError("target language has no unlabeled data")
    vocab = Vocab(pipe.vocab.tokens[3:])  # copy; specials re-reserved
    vocab.extend_from(target_raw, max_size=cfg.vocab_size)
    target_ids = _encode_unlabeled(target_raw, vocab)

    encoder, _ = continued_pretrain(
        pipe.encoder, target_ids,
        MlmConfig(steps=cfg.pp_encoder_steps, lr=cfg.mlm_lr, seed=cfg.seed + 17),
    )
    la_cfg = LaTrainConfig(
        code=cfg.target, steps=cfg.pp_la_steps, lr=cfg.mlm_lr,
        seed=cfg.seed + 23, rf=cfg.rf,
    )
    target_adapter, _ = train_language_adapter(encoder, target_ids, la_cfg)
    bank = AdapterBank(list(pipe.bank.adapters) + [target_adapter])

    data = {
        code: {
            "train": _encode_labeled(ds.languages[code]["train"], vocab, pipe.labels),
            "dev": _encode_labeled(ds.languages[code]["dev"], vocab, pipe.labels),
        }
        for code in cfg.sources
    }
    source_dev = [ex for code in cfg.sources for ex in data[code]["dev"]]
    model = build_zgul(
        encoder, bank, pipe.labels, dict(ds.profiles),
        d_lang=cfg.d_lang, rf=cfg.rf, seed=cfg.seed,
    )
    task_cfg = TrainConfig(
        mode="zgul", lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, sources=cfg.sources, rf=cfg.rf, head_lr=cfg.head_lr,
    )
    result = train_task(model, data, task_cfg)
    picked = select_model(model, result.checkpoints, source_dev)
    load_params_state(model.parameters(), picked.state)

    extended = Pipeline(
        cfg=cfg, dataset=ds, vocab=vocab, labels=pipe.labels,
        relatedness=pipe.relatedness, encoder=encoder, bank=bank,
        zgul=model, madx=pipe.madx,
    )
    return extended


def zero_shot_f1(pipe):
    encoded = pipe.encoded_test(pipe.cfg.target)
    return evaluate(pipe.zgul, encoded, profiles=pipe.dataset.profiles).f1


@dataclass
class SeedOutcome:
    seed: int
    scores: dict
    correlations: dict
    extended_f1: float | None = None


def run_seed(cfg, seed, with_extension=True, strategies=STRATEGIES):
    pipe = build_pipeline(replace(cfg, seed=seed))
    scores = evaluate_strategies(pipe, strategies)
    correlations = attention_relatedness(pipe)
    extended_f1 = None
    if with_extension:
        extended_f1 = zero_shot_f1(extend_with_target(pipe))
    return SeedOutcome(seed, scores, correlations, extended_f1), pipe


def summarize(outcomes):
    """Seed-mean scores and correlations; the acceptance gate reads these."""
    if not outcomes:
        raise ValueError("no outcomes to summarize")
    strategies = outcomes[0].scores.keys()
    mean_scores = {
        s: float(np.mean([o.scores[s] for o in outcomes])) for s in strategies
    }
    mean_corr = {
        n: float(np.mean([o.correlations[n] for o in outcomes])) for n in NETWORKS
    }
    mean_ext = None
    if all(o.extended_f1 is not None for o in outcomes):
        mean_ext = float(np.mean([o.extended_f1 for o in outcomes]))
    return mean_scores, mean_corr, mean_ext
