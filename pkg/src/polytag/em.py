"""Test-time entropy minimization over the attention mixture weights.

Per sentence, the mixing distributions of every layer (and, untied, every
token) become free logit variables. Each iteration recomputes the forward
pass under beta = softmax(alpha), measures mean per-word prediction entropy,
and takes one SGD step on alpha. The model's trained parameters never change.

Fused models tune both mixing networks at once; plain multi-adapter models
tune a single ensemble weight set starting from uniform, which is the
uniform-init baseline this module also serves as.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import DataError
from .fusion import _fused_pass, ensemble_forward
from .metrics import micro_f1
from .tensor import Tape, Tensor, _softmax_np

GRID_ITERATIONS = (1, 5, 10)
GRID_LR = (0.05, 0.1, 0.5, 1.0)

INITS = ("learned", "uniform")
TIES = ("token_untied", "layer_tied")
GRID_MODES = ("related_source_dev", "target_dev")


@dataclass
class EMConfig:
    iterations: int = 1
    lr: float = 0.05
    init: str = "learned"
    tie: str = "token_untied"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.tie not in TIES:
            raise ValueError(f"tie must be one of {TIES}")


@dataclass
class EMState:
    """Per-layer mixing logits; fused models carry two sets, ensembles one."""

    alpha_f: list = field(default_factory=list)
    alpha_l: list | None = None  # None for the single-network ensemble path

    def betas(self):
        """Normalized weights as plain arrays (rows on the simplex)."""
        bf = [_softmax_np(a, -1) for a in self.alpha_f]
        bl = [_softmax_np(a, -1) for a in self.alpha_l] if self.alpha_l is not None else None
        return bf, bl


def _entropy_tensor(logits):
    """Mean per-row Shannon entropy (natural log) as a differentiable scalar."""
    probs = logits.softmax(-1)
    ls = logits.log_softmax(-1)
    return -((probs * ls).sum(axis=1).mean())


def _entropy_np(logits):
    p = _softmax_np(logits, -1)
    ls = logits - logits.max(axis=-1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(axis=-1, keepdims=True))
    return float(np.mean(-np.sum(p * ls, axis=-1)))


def _init_state(model, ids, profile, config):
    n = len(model.languages) if model.languages else len(model.bank.codes)
    n_layers = model.encoder.config.n_layers
    tokens = len(ids)
    rows = 1 if config.tie == "layer_tied" else tokens
    if model.kind == "zgul":
        if config.init == "learned":
            res = _fused_pass(model, ids, profile, want_logits=True)
            af, al = [], []
            for logits_f, logits_l in res.attn_logits:
                if config.tie == "layer_tied":
                    af.append(logits_f.mean(axis=0, keepdims=True))
                    al.append(logits_l.copy())
                else:
                    af.append(logits_f.copy())
                    al.append(np.broadcast_to(logits_l, (tokens, n)).copy())
            return EMState(af, al)
        zero = lambda: [np.zeros((rows, n)) for _ in range(n_layers)]
        return EMState(zero(), zero())
    if model.kind == "madx_multi":
        # no learned scores exist on this path; always start uniform
        return EMState([np.zeros((rows, n)) for _ in range(n_layers)])
    raise ValueError("entropy minimization needs a multi-source model")


def _state_forward(model, ids, profile, state, tracked=False, want_trace=False, sentence_id=0):
    """Forward under the state's betas; returns (logits, leaves_f, leaves_l, trace)."""
    leaves_f = [Tensor(a, requires_grad=tracked) for a in state.alpha_f]
    if state.alpha_l is not None:
        leaves_l = [Tensor(a, requires_grad=tracked) for a in state.alpha_l]
        overrides = {
            i: (leaves_f[i].softmax(-1), leaves_l[i].softmax(-1)) for i in range(len(leaves_f))
        }
        res = _fused_pass(
            model, ids, profile, overrides=overrides, want_trace=want_trace,
            sentence_id=sentence_id,
        )
        return res.logits, leaves_f, leaves_l, res.trace
    overrides = {i: leaves_f[i].softmax(-1) for i in range(len(leaves_f))}
    logits = ensemble_forward(ids, model, None, _override=overrides)
    return logits, leaves_f, None, None


@dataclass
class EMResult:
    pred_ids: np.ndarray
    entropies: list
    state: EMState
    logits: np.ndarray
    trace: object = None
    sentence_id: int = 0


def sentence_entropy(model, ids, profile=None, state=None):
    """Mean per-word entropy of the label distribution for one sentence."""
    if len(ids) == 0:
        raise DataError("empty sentence")
    if state is not None:
        logits, _, _, _ = _state_forward(model, ids, profile, state)
    elif model.kind == "zgul":
        logits = _fused_pass(model, ids, profile).logits
    elif model.kind == "madx_multi":
        n = len(model.bank.codes)
        logits = ensemble_forward(ids, model, np.full(n, 1.0 / n))
    else:
        from .fusion import sft_forward

        logits = sft_forward(ids, model)
    return _entropy_np(logits.data)


def em_tune(model, ids, config, profile=None, sentence_id=0, want_trace=False):
    """Algorithm: T entropy-descent steps on the mixing logits, then predict."""
    if len(ids) == 0:
        raise DataError("empty sentence")
    state = _init_state(model, ids, profile, config)
    entropies = []
    for step in range(config.iterations):
        try:
            with Tape() as tape:
                logits, leaves_f, leaves_l, _ = _state_forward(
                    model, ids, profile, state, tracked=True
                )
                h = _entropy_tensor(logits)
            grads = tape.backward(h)
        except FloatingPointError as e:
            raise FloatingPointError(
                f"non-finite entropy during EM step {step} (sentence {sentence_id}): {e}"
            ) from None
        entropies.append(h.item())
        for i, leaf in enumerate(leaves_f):
            g = grads.get(leaf)
            if g is not None:
                state.alpha_f[i] = state.alpha_f[i] - config.lr * g
        if leaves_l is not None:
            for i, leaf in enumerate(leaves_l):
                g = grads.get(leaf)
                if g is not None:
                    state.alpha_l[i] = state.alpha_l[i] - config.lr * g
    logits, _, _, trace = _state_forward(
        model, ids, profile, state, want_trace=want_trace, sentence_id=sentence_id
    )
    entropies.append(_entropy_np(logits.data))
    return EMResult(
        pred_ids=np.argmax(logits.data, axis=1),
        entropies=entropies,
        state=state,
        logits=logits.data,
        trace=trace,
        sentence_id=sentence_id,
    )


def halving_descent_lr(model, ids, config, profile=None, start_lr=0.05, max_halvings=40):
    """Smallest-effort halving line search; returns an lr that lowers H, or None
    when the entropy gradient is (numerically) zero."""
    state = _init_state(model, ids, profile, config)
    with Tape() as tape:
        logits, leaves_f, leaves_l, _ = _state_forward(model, ids, profile, state, tracked=True)
        h = _entropy_tensor(logits)
    grads = tape.backward(h)
    h0 = h.item()
    leaves = leaves_f + (leaves_l or [])
    gs = [grads.get(leaf) for leaf in leaves]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gs if g is not None)))
    if norm <= 1e-6:
        return None
    lr = start_lr
    for _ in range(max_halvings):
        trial = EMState(
            [a - lr * (g if g is not None else 0.0) for a, g in zip(state.alpha_f, gs)],
            None
            if state.alpha_l is None
            else [
                a - lr * (g if g is not None else 0.0)
                for a, g in zip(state.alpha_l, gs[len(state.alpha_f):])
            ],
        )
        logits, _, _, _ = _state_forward(model, ids, profile, trial)
        if _entropy_np(logits.data) < h0:
            return lr
        lr *= 0.5
    return None


@dataclass
class EMGridResult:
    iterations: int
    lr: float
    table: dict  # (iterations, lr) -> dev micro-F1


def em_grid_search(model, dev, mode, profiles=None, grid_iterations=GRID_ITERATIONS,
                   grid_lr=GRID_LR, base=None):
    """Pick (T, lr) maximizing dev micro-F1; ties break to smaller T, then lr.

    dev is a list of Encoded sentences with gold label ids. In
    related_source_dev mode every dev sentence must come from a model source
    language; target_dev mode is the anytime-dev variant.
    """
    if not dev:
        raise ValueError("empty dev set")
    if not grid_iterations or not grid_lr:
        raise ValueError("empty grid")
    if mode not in GRID_MODES:
        raise ValueError(f"mode must be one of {GRID_MODES}")
    if mode == "related_source_dev":
        off_source = {e.language for e in dev} - set(model.languages)
        if off_source:
            raise ValueError(
                f"related_source_dev mode requires source-language dev data, got {sorted(off_source)}"
            )
    lookup = dict(model.profiles)
    if profiles:
        lookup.update(profiles)
    base = base or EMConfig()
    golds = [[model.labels.tag(i) for i in e.label_ids] for e in dev]
    best = None
    table = {}
    for t, lr in itertools.product(sorted(grid_iterations), sorted(grid_lr)):
        cfg = EMConfig(iterations=t, lr=lr, init=base.init, tie=base.tie)
        preds = []
        for e in dev:
            profile = lookup.get(e.language) if model.kind == "zgul" else None
            if model.kind == "zgul" and profile is None:
                raise DataError(f"no typology profile for dev language {e.language!r}")
            res = em_tune(model, e.ids, cfg, profile=profile)
            preds.append([model.labels.tag(i) for i in res.pred_ids])
        f1 = micro_f1(preds, golds, model.labels.scheme).f1
        table[(t, lr)] = f1
        if best is None or f1 > best[0]:
            best = (f1, t, lr)
    return EMGridResult(iterations=best[1], lr=best[2], table=table)


def write_em_trajectory_csv(path, results):
    """CSV of (sentence_id, step, entropy) per EM result."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sentence_id", "step", "entropy"])
        for r in results:
            for step, h in enumerate(r.entropies):
                w.writerow([r.sentence_id, step, h])
