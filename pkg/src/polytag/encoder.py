"""Compact transformer encoder with an MLM head.

Layers are post-norm: attention, add+norm, FFN, add+norm. The activation each
adapter stack consumes is the raw FFN output, before the residual add and the
second norm; `encode` exposes it through an optional per-layer hook and also
returns it per layer for inspection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import load_params_state, params_state
from .data import DataError
from .optim import Optimizer, OptimizerConfig
from .tensor import (
    Parameter,
    Rng,
    Tape,
    Tensor,
    cross_entropy,
    gather_rows,
    layer_norm,
    scale,
    stack,
)

MASK_ID = 2  # fixed by the Vocab specials layout


@dataclass
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 2048
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be at least d_model")
        for f in ("n_layers", "d_model", "n_heads", "vocab_size", "max_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EncodeResult:
    ffn_acts: list
    hidden: Tensor


class Encoder:
    """Token/position embeddings, n_layers transformer blocks, MLM head."""

    INIT_STD = 0.02

    def __init__(self, config, seed=0):
        self.config = config
        rng = Rng(seed).child("encoder")
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        def normal(name, shape):
            return Parameter(name, rng.child(name).normal(shape, std=self.INIT_STD))

        def zeros(name, shape):
            return Parameter(name, np.zeros(shape))

        def ones(name, shape):
            return Parameter(name, np.ones(shape))

        self.tok_emb = normal("enc.tok_emb", (v, d))
        self.pos_emb = normal("enc.pos_emb", (config.max_len, d))
        self.layers = []
        for i in range(config.n_layers):
            p = f"enc.layer{i}"
            self.layers.append(
                {
                    "Wq": normal(f"{p}.Wq", (d, d)),
                    "bq": zeros(f"{p}.bq", (d,)),
                    "Wk": normal(f"{p}.Wk", (d, d)),
                    "bk": zeros(f"{p}.bk", (d,)),
                    "Wv": normal(f"{p}.Wv", (d, d)),
                    "bv": zeros(f"{p}.bv", (d,)),
                    "Wo": normal(f"{p}.Wo", (d, d)),
                    "bo": zeros(f"{p}.bo", (d,)),
                    "ln1_g": ones(f"{p}.ln1_g", (d,)),
                    "ln1_b": zeros(f"{p}.ln1_b", (d,)),
                    "W1": normal(f"{p}.W1", (d, ff)),
                    "b1": zeros(f"{p}.b1", (ff,)),
                    "W2": normal(f"{p}.W2", (ff, d)),
                    "b2": zeros(f"{p}.b2", (d,)),
                    "ln2_g": ones(f"{p}.ln2_g", (d,)),
                    "ln2_b": zeros(f"{p}.ln2_b", (d,)),
                }
            )
        self.mlm_W = normal("enc.mlm_W", (d, v))
        self.mlm_b = zeros("enc.mlm_b", (v,))

    def parameters(self):
        yield self.tok_emb
        yield self.pos_emb
        for layer in self.layers:
            yield from layer.values()
        yield self.mlm_W
        yield self.mlm_b

    def body_parameters(self):
        """Everything except the MLM head."""
        for p in self.parameters():
            if not p.name.startswith("enc.mlm_"):
                yield p

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag

    def copy(self):
        """Fresh Encoder sharing no Parameters; tensors alias (immutable)."""
        out = Encoder(self.config, seed=0)
        load_params_state(out.parameters(), params_state(self.parameters()))
        for mine, theirs in zip(self.parameters(), out.parameters()):
            theirs.trainable = mine.trainable
        return out

    def _attention(self, layer, x, n_tokens):
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        q = x @ layer["Wq"].value + layer["bq"].value
        k = x @ layer["Wk"].value + layer["bk"].value
        v = x @ layer["Wv"].value + layer["bv"].value

        def heads(t):
            return t.reshape(n_tokens, cfg.n_heads, dh).transpose((1, 0, 2))

        q, k, v = heads(q), heads(k), heads(v)
        scores = scale(q @ k.transpose((0, 2, 1)), 1.0 / np.sqrt(dh))
        ctx = scores.softmax(-1) @ v
        ctx = ctx.transpose((1, 0, 2)).reshape(n_tokens, cfg.d_model)
        return ctx @ layer["Wo"].value + layer["bo"].value

    def encode(self, token_ids, hook=None):
        """Run the stack; hook(layer_index, ffn_act) may replace each layer's
        FFN output (that is where adapters and fusion attach)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("encode expects a non-empty 1-D id sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise DataError("token id out of range for this encoder")
        if ids.size > self.config.max_len:
            raise DataError(f"sentence length {ids.size} exceeds max_len {self.config.max_len}")
        n = ids.size
        x = gather_rows(self.tok_emb.value, ids) + gather_rows(
            self.pos_emb.value, np.arange(n)
        )
        ffn_acts = []
        for i, layer in enumerate(self.layers):
            a = self._attention(layer, x, n)
            x1 = layer_norm(x + a, layer["ln1_g"].value, layer["ln1_b"].value)
            f = (x1 @ layer["W1"].value + layer["b1"].value).gelu() @ layer["W2"].value
            f = f + layer["b2"].value
            ffn_acts.append(f)
            if hook is not None:
                f = hook(i, f)
            x = layer_norm(x1 + f, layer["ln2_g"].value, layer["ln2_b"].value)
        return EncodeResult(ffn_acts, x)

    def mlm_logits(self, hidden):
        return hidden @ self.mlm_W.value + self.mlm_b.value


# -- MLM training --------------------------------------------------------


@dataclass
class MlmConfig:
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    mask_rate: float = 0.15
    batch_size: int = 8
    optimizer: str = "adam"


def _mask_sentence(ids, rng, mask_rate, pool):
    """80/10/10 masking; at least one position is always selected."""
    n = ids.size
    sel = rng.random(n) < mask_rate
    if not sel.any():
        sel[int(rng.integers(0, n))] = True
    kind = rng.random(n)
    repl = pool[rng.integers(0, len(pool), n)]
    inputs = ids.copy()
    masked = sel & (kind < 0.8)
    random_sub = sel & (kind >= 0.8) & (kind < 0.9)
    inputs[masked] = MASK_ID
    inputs[random_sub] = repl[random_sub]
    return inputs, sel


def mlm_loss(encoder, ids, rng, mask_rate, pool, hook=None):
    """Masked-prediction cross entropy for one sentence."""
    if mask_rate <= 0:
        raise ValueError("nothing to predict (mask_rate must be positive)")
    ids = np.asarray(ids, dtype=np.int64)
    inputs, sel = _mask_sentence(ids, rng, mask_rate, pool)
    out = encoder.encode(inputs, hook)
    return cross_entropy(encoder.mlm_logits(out.hidden), ids, sel)


def _check_corpus(corpus, vocab_size):
    if not corpus:
        raise DataError("empty corpus")
    top = max(int(np.max(s)) for s in corpus if len(s))
    if top >= vocab_size:
        raise DataError("vocabulary of corpus exceeds encoder vocab_size")


def _token_pool(corpus):
    return np.unique(np.concatenate([np.asarray(s, dtype=np.int64) for s in corpus]))


def mlm_train_loop(encoder, corpus, config, params, hook=None):
    """Shared MLM loop for encoder pretraining and LA training."""
    _check_corpus(corpus, encoder.config.vocab_size)
    if config.steps > 0 and config.mask_rate <= 0:
        raise ValueError("nothing to predict (mask_rate must be positive)")
    corpus = [np.asarray(s, dtype=np.int64) for s in corpus]
    pool = _token_pool(corpus)
    rng = Rng(config.seed).child("mlm")
    opt = Optimizer(list(params), OptimizerConfig(kind=config.optimizer, lr=config.lr))
    losses = []
    for step in range(config.steps):
        srng = rng.child(f"step{step}")
        picks = srng.integers(0, len(corpus), config.batch_size)
        with Tape() as tape:
            per_sent = [
                mlm_loss(encoder, corpus[i], srng.child(f"sent{j}"), config.mask_rate, pool, hook)
                for j, i in enumerate(picks)
            ]
            loss = stack(per_sent).mean()
        opt.step(tape.backward(loss))
        losses.append(loss.item())
    return losses


def mlm_pretrain(corpus, enc_config, config):
    """Train a fresh encoder on token-id sentences; returns (encoder, losses)."""
    encoder = Encoder(enc_config, seed=config.seed)
    losses = mlm_train_loop(encoder, corpus, config, encoder.parameters())
    return encoder, losses


def continued_pretrain(encoder, corpus, config):
    """Keep training a copy of an existing encoder on a new corpus."""
    out = encoder.copy()
    out.set_trainable(True)
    losses = mlm_train_loop(out, corpus, config, out.parameters())
    return out, losses


def eval_mlm_loss(encoder, corpus, mask_rate=0.15, seed=0, hook=None):
    """Deterministic held-out MLM loss (fixed masking per sentence index)."""
    _check_corpus(corpus, encoder.config.vocab_size)
    corpus = [np.asarray(s, dtype=np.int64) for s in corpus]
    pool = _token_pool(corpus)
    rng = Rng(seed).child("mlm-eval")
    vals = [
        mlm_loss(encoder, s, rng.child(f"sent{i}"), mask_rate, pool, hook).item()
        for i, s in enumerate(corpus)
    ]
    return float(np.mean(vals))
