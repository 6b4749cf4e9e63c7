"""Task training for the three model kinds, model selection, few-shot tuning.

Zero-shot hygiene is enforced here: training and selection only ever see
source-language data, and anything else in the input is an error rather
than a silent skip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_params_state, params_state
from .data import DataError
from .fusion import KINDS, madx_forward, sft_forward, zgul_forward
from .metrics import micro_f1
from .optim import Optimizer, OptimizerConfig
from .tensor import Rng, Tape, cross_entropy

# search spaces for the desk-scale experiments; defaults sit inside them
GRID_ADAPTER_LR = (5e-5, 1e-4)
GRID_EPOCHS_SPAN = 10   # NER-style tasks
GRID_EPOCHS_TOKEN = 5   # POS-style tasks
GRID_RF = (3, 4)
GRID_BATCH = (16, 32)

FEWSHOT_GRID_LR = (1e-5, 5e-5, 1e-4)
FEWSHOT_GRID_EPOCHS = (1, 5, 10)
FEWSHOT_GRID_BATCH = (1, 4, 8)
FEWSHOT_BINS = (10, 30, 70, 100)


@dataclass
class TrainConfig:
    mode: str = "zgul"
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    sources: tuple = ()
    rf: int = 3
    train_encoder: bool | None = None  # None: sft trains it, others freeze
    head_lr: float | None = None  # attention-score params; None: same as lr

    def __post_init__(self):
        if self.mode not in KINDS:
            raise ValueError(f"mode must be one of {KINDS}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.head_lr is not None and self.head_lr <= 0:
            raise ValueError("head_lr must be positive when set")
        self.sources = tuple(self.sources)


@dataclass
class FewShotConfig:
    n_examples: int = 10
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad few-shot config")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float | None
    micro_f1: float | None


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # full state per epoch
    dev_f1: list = field(default_factory=list)


def predict_sentence(model, ex, profiles=None):
    """Mode-faithful label ids for one encoded sentence."""
    if model.kind == "zgul":
        lookup = dict(model.profiles)
        if profiles:
            lookup.update(profiles)
        profile = lookup.get(ex.language)
        if profile is None:
            raise DataError(f"no typology profile for language {ex.language!r}")
        logits, _ = zgul_forward(ex.ids, profile, model)
    elif model.kind == "madx_multi":
        logits = madx_forward(ex.ids, model, ex.language)
    else:
        logits = sft_forward(ex.ids, model)
    return np.argmax(logits.data, axis=1)


def evaluate(model, examples, profiles=None):
    """Micro-F1 of mode-faithful predictions over encoded sentences."""
    preds, golds = [], []
    for ex in examples:
        if ex.label_ids is None:
            raise DataError("evaluation needs labeled examples")
        pred = predict_sentence(model, ex, profiles)
        preds.append(model.labels.decode(pred))
        golds.append(model.labels.decode(ex.label_ids))
    return micro_f1(preds, golds, model.labels.scheme)


def _sentence_loss(model, ex):
    if model.kind == "zgul":
        profile = model.profiles.get(ex.language)
        if profile is None:
            raise DataError(f"no typology profile for language {ex.language!r}")
        logits, _ = zgul_forward(ex.ids, profile, model)
    elif model.kind == "madx_multi":
        logits = madx_forward(ex.ids, model, ex.language)
    else:
        logits = sft_forward(ex.ids, model)
    return cross_entropy(logits, ex.label_ids)


def _check_sources(model, data, config):
    sources = config.sources or tuple(sorted(data))
    extra = set(data) - set(sources)
    if extra:
        raise DataError(
            f"non-source languages {sorted(extra)} passed to zero-shot training"
        )
    for code in sources:
        if code not in data:
            raise DataError(f"source language {code!r} has no data")
        if model.kind in ("zgul", "madx_multi") and code not in model.bank:
            raise DataError(f"no language adapter for source {code!r}")
        for split_name, examples in data[code].items():
            for ex in examples:
                if ex.language != code:
                    raise DataError(
                        f"example tagged {ex.language!r} under source {code!r}"
                    )
    return sources


def train_task(model, data, config):
    """Word-level cross-entropy training over the concatenated source data.

    data: {source code: {"train": [Encoded], "dev": [Encoded]}}. The model is
    updated in place; per-epoch snapshots go to the result for selection.
    """
    if config.mode != model.kind:
        raise ValueError(f"config mode {config.mode!r} does not match model kind {model.kind!r}")
    sources = _check_sources(model, data, config)
    train_set = [ex for code in sources for ex in data[code].get("train", ())]
    dev_set = [ex for code in sources for ex in data[code].get("dev", ())]
    if not train_set:
        raise DataError("no training examples")
    for ex in train_set:
        if ex.label_ids is None:
            raise DataError("unlabeled example in training data")

    model.apply_trainability(train_encoder=config.train_encoder)
    params = list(model.trainable_parameters())
    score = set()
    if config.head_lr is not None and model.kind == "zgul":
        score = {id(p) for p in model.head.score_parameters()}
    if score:
        opts = [
            Optimizer([p for p in params if id(p) not in score],
                      OptimizerConfig(kind="adam", lr=config.lr)),
            Optimizer([p for p in params if id(p) in score],
                      OptimizerConfig(kind="adam", lr=config.head_lr)),
        ]
    else:
        opts = [Optimizer(params, OptimizerConfig(kind="adam", lr=config.lr))]
    rng = Rng(config.seed).child("train_task")

    result = TrainResult(model=model)
    for epoch in range(1, config.epochs + 1):
        order = rng.child(f"epoch{epoch}").permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            with Tape() as tape:
                losses = [_sentence_loss(model, ex) for ex in batch]
                loss = losses[0] if len(losses) == 1 else _mean_loss(losses)
            grads = tape.backward(loss)
            for opt in opts:
                opt.step(grads)
            epoch_loss += loss.item() * len(batch)
        epoch_loss /= len(train_set)
        result.log.append(EpochRecord(epoch, "train", epoch_loss, None))
        if dev_set:
            f1 = evaluate(model, dev_set).f1
            result.dev_f1.append(f1)
            result.log.append(EpochRecord(epoch, "dev", None, f1))
        result.checkpoints.append(params_state(model.parameters()))
    return result


def _mean_loss(losses):
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


@dataclass
class SelectionResult:
    epoch: int          # 1-based position among the checkpoints
    f1: float
    scores: list
    state: dict


def select_model(model, checkpoints, dev_sets):
    """Best checkpoint by combined source-language dev F1, earliest epoch on ties.

    dev_sets: encoded examples from source languages only; target-language
    data here would leak zero-shot evaluation and is rejected.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    dev = [ex for ex in dev_sets]
    if not dev:
        raise DataError("empty dev set")
    if not model.languages:
        raise DataError("model has no declared source languages")
    off_source = {ex.language for ex in dev} - set(model.languages)
    if off_source:
        raise DataError("target dev forbidden in zero-shot mode")
    keep = params_state(model.parameters())
    scores = []
    try:
        for state in checkpoints:
            load_params_state(model.parameters(), state)
            scores.append(evaluate(model, dev).f1)
    finally:
        load_params_state(model.parameters(), keep)
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return SelectionResult(best + 1, scores[best], scores, checkpoints[best])


def few_shot_finetune(model, examples, config, profile=None):
    """Fine-tune a copy on a seed-reproducible sample of target examples.

    The target profile becomes available in the few-shot setting, so it is
    registered on the copy for fused forwards."""
    from .fusion import copy_model

    pool = list(examples)
    if config.n_examples > len(pool):
        raise DataError(
            f"requested {config.n_examples} examples but only {len(pool)} available"
        )
    tuned = copy_model(model)
    if profile is not None:
        tuned.profiles[profile.code] = profile
    if config.n_examples == 0 or config.epochs == 0:
        return tuned
    rng = Rng(config.seed).child("few_shot")
    picked = [pool[i] for i in sorted(rng.sample(range(len(pool)), config.n_examples))]
    for ex in picked:
        if ex.label_ids is None:
            raise DataError("unlabeled example in few-shot data")
        if tuned.kind == "zgul" and ex.language not in tuned.profiles:
            raise DataError(f"no typology profile for language {ex.language!r}")

    params = tuned.trainable_parameters()
    opt = Optimizer(params, OptimizerConfig(kind="adam", lr=config.lr))
    for epoch in range(1, config.epochs + 1):
        order = rng.child(f"epoch{epoch}").permutation(len(picked))
        for start in range(0, len(order), config.batch_size):
            batch = [picked[i] for i in order[start:start + config.batch_size]]
            with Tape() as tape:
                losses = [_sentence_loss(tuned, ex) for ex in batch]
                loss = losses[0] if len(losses) == 1 else _mean_loss(losses)
            grads = tape.backward(loss)
            opt.step(grads)
    return tuned


def few_shot_table(model, train_pool, test_set, config, profile=None, bins=FEWSHOT_BINS):
    """F1 per bin size over a shared sample pool (growing-prefix style)."""
    rows = []
    for n in bins:
        cfg = FewShotConfig(n_examples=n, lr=config.lr, epochs=config.epochs,
                            batch_size=config.batch_size, seed=config.seed)
        tuned = few_shot_finetune(model, train_pool, cfg, profile=profile)
        rows.append((n, evaluate(tuned, test_set).f1))
    return rows


def write_training_log_csv(path, records):
    """CSV of (epoch, split, loss, micro_f1); blanks where not applicable."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "micro_f1"])
        for r in records:
            w.writerow([
                r.epoch, r.split,
                "" if r.loss is None else f"{r.loss:.6f}",
                "" if r.micro_f1 is None else f"{r.micro_f1:.6f}",
            ])
