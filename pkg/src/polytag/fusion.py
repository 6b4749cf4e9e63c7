"""Multi-source adapter fusion: token attention, typology attention, combine.

A fused model runs every source language adapter on each layer's FFN output,
mixes the projected outputs twice (a per-token dot-product attention and a
sentence-global typology-vector attention), concatenates the two mixtures
through a linear combine layer, and feeds the result to the task adapter in
place of the original activation. The same module also provides the
single-adapter path and the fixed-weight ensemble path used by baselines.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterBank, BottleneckAdapter
from .checkpoint import (
    load_params_state,
    params_state,
    read_container,
    write_container,
)
from .data import LANGVEC_DIM, DataError, LabelMap, LanguageProfile
from .encoder import Encoder, EncoderConfig
from .tensor import Parameter, Rng, Tensor, as_tensor, concat, stack

DEFAULT_D_LANG = 32

SIMPLEX_TOL = 1e-9


@dataclass
class HeadInit:
    """Initialization scales for the fusion head.

    The defaults start near the identity: value projection I plus tiny noise,
    combine layer 0.5*[I | I] plus tiny noise, typology bilinear map I plus
    tiny noise so the initial typology attention is plain profile similarity.
    `exact_identity` drops the noise so a single-source model collapses onto
    the plain adapter path bit-for-bit up to float associativity.
    """

    attn_std: float = 0.02
    value_noise: float = 1e-3
    combine_noise: float = 1e-3

    @classmethod
    def exact_identity(cls):
        return cls(value_noise=0.0, combine_noise=0.0)


class FusionParams:
    """Per-layer query/key/value projections for the token-level attention."""

    def __init__(self, d_model, n_layers, seed=0, init=None, prefix="fus"):
        init = init or HeadInit()
        rng = Rng(seed).child(prefix)
        self.d_model = d_model
        self.n_layers = n_layers
        self.layers = []
        eye = np.eye(d_model)
        for i in range(n_layers):
            p = f"{prefix}.layer{i}"
            self.layers.append(
                {
                    "Wq": Parameter(f"{p}.Wq", rng.child(f"{i}.Wq").normal((d_model, d_model), std=init.attn_std)),
                    "Wk": Parameter(f"{p}.Wk", rng.child(f"{i}.Wk").normal((d_model, d_model), std=init.attn_std)),
                    "Wv": Parameter(
                        f"{p}.Wv",
                        eye + rng.child(f"{i}.Wv").normal((d_model, d_model), std=init.value_noise),
                    ),
                }
            )

    def layer(self, i):
        if not 0 <= i < self.n_layers:
            raise IndexError(f"layer {i} out of range")
        return self.layers[i]

    def parameters(self):
        for layer in self.layers:
            yield from layer.values()


class LangVecParams:
    """One shared linear map for typology vectors plus per-layer bilinear maps.

    The bilinear maps start at the identity, so the initial typology attention
    scores are profile-similarity dot products; anything sharper has to be
    learned. A zero-mean random start instead tends to blow up toward a single
    profile-independent winner before the task signal can shape the routing.
    """

    def __init__(self, d_lang, n_layers, in_dim=LANGVEC_DIM, seed=0, init=None, prefix="l2v"):
        init = init or HeadInit()
        rng = Rng(seed).child(prefix)
        self.d_lang = d_lang
        self.in_dim = in_dim
        self.n_layers = n_layers
        self.mlp_W = Parameter(f"{prefix}.mlp_W", rng.child("mlp_W").normal((in_dim, d_lang), std=init.attn_std))
        self.mlp_b = Parameter(f"{prefix}.mlp_b", np.zeros(d_lang))
        self.layers = []
        eye = np.eye(d_lang)
        for i in range(n_layers):
            self.layers.append(
                {
                    "WL": Parameter(
                        f"{prefix}.layer{i}.WL",
                        eye + rng.child(f"{i}.WL").normal((d_lang, d_lang), std=init.value_noise),
                    )
                }
            )

    def layer(self, i):
        if not 0 <= i < self.n_layers:
            raise IndexError(f"layer {i} out of range")
        return self.layers[i]

    def embed(self, lf_matrix):
        """Rows of typology vectors -> rows of language embeddings."""
        return as_tensor(lf_matrix) @ self.mlp_W.value + self.mlp_b.value

    def parameters(self):
        yield self.mlp_W
        yield self.mlp_b
        for layer in self.layers:
            yield from layer.values()


class CombineParams:
    """Per-layer linear map from concat(token-mix, typology-mix) back to d."""

    def __init__(self, d_model, n_layers, seed=0, init=None, prefix="cmb"):
        init = init or HeadInit()
        rng = Rng(seed).child(prefix)
        self.d_model = d_model
        self.n_layers = n_layers
        half = 0.5 * np.eye(d_model)
        base = np.concatenate([half, half], axis=0)
        self.layers = []
        for i in range(n_layers):
            p = f"{prefix}.layer{i}"
            noise = rng.child(f"{i}.W").normal((2 * d_model, d_model), std=init.combine_noise)
            self.layers.append(
                {
                    "W": Parameter(f"{p}.W", base + noise),
                    "b": Parameter(f"{p}.b", np.zeros(d_model)),
                }
            )

    def layer(self, i):
        if not 0 <= i < self.n_layers:
            raise IndexError(f"layer {i} out of range")
        return self.layers[i]

    def parameters(self):
        for layer in self.layers:
            yield from layer.values()


class ZgulHead:
    """Fusion, typology, and combine parameters as one unit."""

    def __init__(self, d_model, n_layers, d_lang=DEFAULT_D_LANG, in_dim=LANGVEC_DIM, seed=0, init=None):
        self.d_model = d_model
        self.n_layers = n_layers
        self.d_lang = d_lang
        self.in_dim = in_dim
        self.fusion = FusionParams(d_model, n_layers, seed=seed, init=init)
        self.langvec = LangVecParams(d_lang, n_layers, in_dim=in_dim, seed=seed, init=init)
        self.combine = CombineParams(d_model, n_layers, seed=seed, init=init)

    def parameters(self):
        yield from self.fusion.parameters()
        yield from self.langvec.parameters()
        yield from self.combine.parameters()

    def score_parameters(self):
        """Parameters that feed attention logits rather than value payloads.

        These get their own learning rate during task training: under Adam the
        softmax-score path amplifies batch noise until it saturates, so it has
        to move slower than the payload path."""
        for layer in self.fusion.layers:
            yield layer["Wq"]
            yield layer["Wk"]
        yield from self.langvec.parameters()

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag


# -- attention math (shared by the public ops and the model forward) -----


def _token_attn_logits(f, V, Wq, Wk):
    """f: (T,d) queries, V: (n,T,d) per-source values -> logits (T,n)."""
    pq = f @ Wq
    pk = V @ Wk
    return (pk * pq).sum(axis=2).transpose()


def _weighted_sum(PV, alpha):
    """PV: (n,T,d); alpha: (T,n) per-token or (1,n) global -> (T,d)."""
    n = PV.shape[0]
    w = alpha.transpose().reshape(n, -1, 1)
    return (PV * w).sum(axis=0)


def fusion_attention(q, adapter_outputs, head, layer):
    """Token-level attention over source adapter outputs for one token.

    Returns (alpha, mixed) where alpha is the n-simplex weight vector and
    mixed is the value-projected convex combination.
    """
    A = as_tensor(adapter_outputs)
    if A.ndim != 2 or A.shape[0] == 0:
        raise ValueError("empty adapter bank")
    lay = head.fusion.layer(layer)
    f = as_tensor(q).reshape(1, -1)
    V = A.reshape(A.shape[0], 1, A.shape[1])
    logits = _token_attn_logits(f, V, lay["Wq"].value, lay["Wk"].value)
    alpha = logits.softmax(-1)
    mixed = _weighted_sum(V @ lay["Wv"].value, alpha)
    return alpha.reshape(-1), mixed.reshape(-1)


def langvec_attention(lf_input, source_profiles, adapter_outputs, head, layer):
    """Typology-vector attention; the query ignores the token entirely."""
    A = as_tensor(adapter_outputs)
    if A.ndim != 2 or A.shape[0] == 0:
        raise ValueError("empty adapter bank")
    if lf_input is None:
        raise ValueError("language profile required for typology attention")
    lf_src = _profile_matrix(source_profiles)
    if lf_src.shape[0] != A.shape[0]:
        raise ValueError("one profile required per adapter output")
    lf_inp = np.asarray(
        lf_input.features if isinstance(lf_input, LanguageProfile) else lf_input,
        dtype=np.float64,
    ).reshape(1, -1)
    if lf_inp.shape[1] != head.langvec.in_dim or lf_src.shape[1] != head.langvec.in_dim:
        raise ValueError("typology vector width does not match the head")
    l_inp = head.langvec.embed(lf_inp)
    l_src = head.langvec.embed(lf_src)
    logits = (l_inp @ head.langvec.layer(layer)["WL"].value) @ l_src.transpose()
    alpha = logits.softmax(-1)
    V = A.reshape(A.shape[0], 1, A.shape[1])
    mixed = _weighted_sum(V @ head.fusion.layer(layer)["Wv"].value, alpha)
    return alpha.reshape(-1), mixed.reshape(-1)


def combine_and_task(o_f, o_l, head, task_adapter, layer):
    """Linear combine of the two mixtures, then the task adapter."""
    o_f, o_l = as_tensor(o_f), as_tensor(o_l)
    if o_f.shape != o_l.shape:
        raise ValueError("mixture widths disagree")
    flat = o_f.ndim == 1
    if flat:
        o_f = o_f.reshape(1, -1)
        o_l = o_l.reshape(1, -1)
    lay = head.combine.layer(layer)
    if o_f.shape[1] * 2 != lay["W"].value.shape[0]:
        raise ValueError("mixture width does not match the combine layer")
    o = concat([o_f, o_l], axis=1) @ lay["W"].value + lay["b"].value
    out = task_adapter.forward(layer, o)
    return out.reshape(-1) if flat else out


def _profile_matrix(profiles):
    rows = []
    for p in profiles:
        rows.append(p.features if isinstance(p, LanguageProfile) else np.asarray(p, dtype=np.float64))
    return np.stack(rows, axis=0)


# -- attention traces ----------------------------------------------------


@dataclass
class TraceEntry:
    layer: int
    alpha_f: np.ndarray  # (tokens, sources)
    alpha_l: np.ndarray  # (tokens, sources); rows identical for plain forwards


@dataclass
class AttentionTrace:
    sources: tuple
    sentence_id: int = 0
    entries: list = field(default_factory=list)

    def rows(self):
        """Yield (sentence_id, layer, token_idx, network, source_lang, weight)."""
        for e in self.entries:
            for net, mat in (("F", e.alpha_f), ("L", e.alpha_l)):
                for t in range(mat.shape[0]):
                    for j, code in enumerate(self.sources):
                        yield (self.sentence_id, e.layer, t, net, code, float(mat[t, j]))


def write_trace_csv(path, traces):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sentence_id", "layer", "token_idx", "network", "source_lang", "weight"])
        for trace in traces:
            for row in trace.rows():
                w.writerow(row)


# -- model ---------------------------------------------------------------


KINDS = ("zgul", "sft", "madx_multi")


class TaggerModel:
    """Encoder plus whatever heads the chosen mode needs."""

    def __init__(self, kind, encoder, labels, bank=None, task_adapter=None, head=None,
                 profiles=None, languages=None, seed=0):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.encoder = encoder
        self.labels = labels
        self.bank = bank
        self.task_adapter = task_adapter
        self.head = head
        self.profiles = dict(profiles or {})
        if languages is None:
            languages = bank.codes if bank is not None else ()
        self.languages = tuple(languages)
        d = encoder.config.d_model
        rng = Rng(seed).child("cls")
        self.cls_W = Parameter("cls.W", rng.child("W").normal((d, len(labels)), std=0.02))
        self.cls_b = Parameter("cls.b", np.zeros(len(labels)))
        if kind == "zgul":
            if bank is None or head is None:
                raise ValueError("zgul model needs an adapter bank and a fusion head")
            missing = [c for c in self.languages if c not in self.profiles]
            if missing:
                raise ValueError(f"missing language profiles for {missing}")
        if kind == "madx_multi" and bank is None:
            raise ValueError("madx_multi model needs an adapter bank")
        if kind in ("zgul", "madx_multi") and task_adapter is None:
            raise ValueError(f"{kind} model needs a task adapter")
        self.apply_trainability()

    # parameter groups

    def parameters(self):
        yield from self.encoder.parameters()
        if self.bank is not None:
            yield from self.bank.parameters()
        if self.task_adapter is not None:
            yield from self.task_adapter.parameters()
        if self.head is not None:
            yield from self.head.parameters()
        yield self.cls_W
        yield self.cls_b

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def apply_trainability(self, train_encoder=None):
        """Default trainability partition for the model's kind."""
        if train_encoder is None:
            train_encoder = self.kind == "sft"
        self.encoder.set_trainable(train_encoder)
        if train_encoder:
            # the MLM head takes no part in task training
            self.encoder.mlm_W.trainable = False
            self.encoder.mlm_b.trainable = False
        if self.bank is not None:
            self.bank.set_trainable(False)  # source adapters stay frozen
        if self.task_adapter is not None:
            self.task_adapter.set_trainable(True)
        if self.head is not None:
            self.head.set_trainable(True)
        self.cls_W.trainable = True
        self.cls_b.trainable = True

    def classify(self, hidden):
        return hidden @ self.cls_W.value + self.cls_b.value

    def profile_for(self, language):
        if isinstance(language, LanguageProfile):
            return language
        if language in self.profiles:
            return self.profiles[language]
        raise DataError(f"no typology profile for language {language!r}")

    def source_profile_matrix(self):
        return _profile_matrix([self.profiles[c] for c in self.languages])


def build_zgul(encoder, bank, labels, profiles, d_lang=DEFAULT_D_LANG, rf=None, seed=0, init=None):
    """Assemble a fused multi-source model over a frozen encoder and bank."""
    cfg = encoder.config
    rf = rf if rf is not None else (bank.adapters[0].rf if len(bank) else 3)
    head = ZgulHead(cfg.d_model, cfg.n_layers, d_lang=d_lang, seed=seed, init=init)
    ta = BottleneckAdapter("task", cfg.n_layers, cfg.d_model, rf=rf, seed=seed, prefix="ta")
    return TaggerModel(
        "zgul", encoder, labels, bank=bank, task_adapter=ta, head=head,
        profiles=profiles, seed=seed,
    )


def build_madx(encoder, bank, labels, rf=None, seed=0):
    cfg = encoder.config
    rf = rf if rf is not None else (bank.adapters[0].rf if len(bank) else 3)
    ta = BottleneckAdapter("task", cfg.n_layers, cfg.d_model, rf=rf, seed=seed, prefix="ta")
    return TaggerModel("madx_multi", encoder, labels, bank=bank, task_adapter=ta, seed=seed)


def build_sft(encoder, labels, languages=(), seed=0):
    # languages records the source set for zero-shot selection hygiene
    return TaggerModel("sft", encoder, labels, languages=languages, seed=seed)


# -- forward passes ------------------------------------------------------


@dataclass
class FusedResult:
    logits: Tensor
    trace: AttentionTrace | None = None
    attn_logits: list | None = None  # per layer (logits_f (T,n), logits_l (1,n))


def _fused_pass(model, ids, profile=None, overrides=None, want_trace=False,
                want_logits=False, sentence_id=0, uniform_langvec=False):
    """One fused forward; overrides[layer] = (beta_f, beta_l) replaces both
    attention distributions with externally supplied (already softmaxed,
    possibly tracked) weight tensors."""
    if model.kind != "zgul":
        raise ValueError("fused forward needs a zgul model")
    n = len(model.languages)
    if n == 0:
        raise ValueError("empty adapter bank")
    trace = AttentionTrace(model.languages, sentence_id) if want_trace else None
    attn_logits = [] if want_logits else None

    if overrides is None:
        if profile is None and not uniform_langvec:
            raise DataError("language profile required (or enable the uniform fallback)")
        if profile is not None:
            lf_inp = np.asarray(
                profile.features if isinstance(profile, LanguageProfile) else profile,
                dtype=np.float64,
            ).reshape(1, -1)
            if lf_inp.shape[1] != model.head.langvec.in_dim:
                raise DataError("typology vector width does not match the model")
        lf_src = model.source_profile_matrix()

    def hook(layer, f):
        V = stack([model.bank[c].forward(layer, f) for c in model.languages], axis=0)
        fus = model.head.fusion.layer(layer)
        if overrides is not None:
            alpha_f, alpha_l = overrides[layer]
        else:
            logits_f = _token_attn_logits(f, V, fus["Wq"].value, fus["Wk"].value)
            alpha_f = logits_f.softmax(-1)
            if uniform_langvec and profile is None:
                logits_l = Tensor(np.zeros((1, n)))
            else:
                l_inp = model.head.langvec.embed(lf_inp)
                l_src = model.head.langvec.embed(lf_src)
                logits_l = (l_inp @ model.head.langvec.layer(layer)["WL"].value) @ l_src.transpose()
            alpha_l = logits_l.softmax(-1)
            if attn_logits is not None:
                attn_logits.append((logits_f.data.copy(), logits_l.data.copy()))
        PV = V @ fus["Wv"].value
        o_f = _weighted_sum(PV, alpha_f)
        o_l = _weighted_sum(PV, alpha_l)
        cmb = model.head.combine.layer(layer)
        o = concat([o_f, o_l], axis=1) @ cmb["W"].value + cmb["b"].value
        if trace is not None:
            tcount = f.shape[0]
            trace.entries.append(
                TraceEntry(
                    layer,
                    np.broadcast_to(alpha_f.data, (tcount, n)).copy(),
                    np.broadcast_to(alpha_l.data, (tcount, n)).copy(),
                )
            )
        return model.task_adapter.forward(layer, o)

    out = model.encoder.encode(ids, hook)
    return FusedResult(model.classify(out.hidden), trace, attn_logits)


def zgul_forward(ids, profile, model, trace=False, sentence_id=0, uniform_langvec=False):
    """Fused forward; returns (per-token label logits, optional trace)."""
    res = _fused_pass(
        model, ids, profile, want_trace=trace, sentence_id=sentence_id,
        uniform_langvec=uniform_langvec,
    )
    return res.logits, res.trace


def madx_forward(ids, model, la_code):
    """Single adapter path: encoder, chosen LA, task adapter, classifier."""
    if model.bank is None or la_code not in model.bank:
        raise KeyError(f"no adapter for language {la_code!r}")
    la = model.bank[la_code]

    def hook(layer, f):
        return model.task_adapter.forward(layer, la.forward(layer, f))

    out = model.encoder.encode(ids, hook)
    return model.classify(out.hidden)


def sft_forward(ids, model):
    out = model.encoder.encode(ids)
    return model.classify(out.hidden)


def check_simplex(w, tol=SIMPLEX_TOL, what="weights"):
    w = np.asarray(w, dtype=np.float64)
    if (w < -tol).any() or abs(float(w.sum()) - 1.0) > tol:
        raise ValueError(f"{what} off the simplex beyond {tol}")
    return w


def ensemble_forward(ids, model, weights, _override=None):
    """Mix raw adapter outputs with fixed weights, then task adapter.

    weights: (n,) shared across layers or (n_layers, n) per layer.
    """
    if model.bank is None or len(model.bank) == 0:
        raise ValueError("empty adapter bank")
    codes = model.languages if model.languages else model.bank.codes
    n = len(codes)
    n_layers = model.encoder.config.n_layers
    if _override is None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape == (n,):
            w = np.tile(w, (n_layers, 1))
        if w.shape != (n_layers, n):
            raise ValueError("ensemble weights must be (n,) or (n_layers, n)")
        for row in w:
            check_simplex(row, what="ensemble weights")

    def hook(layer, f):
        V = stack([model.bank[c].forward(layer, f) for c in codes], axis=0)
        if _override is not None:
            alpha = _override[layer]
        else:
            alpha = Tensor(w[layer].reshape(1, n))
        mixed = _weighted_sum(V, alpha)
        return model.task_adapter.forward(layer, mixed)

    out = model.encoder.encode(ids, hook)
    return model.classify(out.hidden)


# -- serialization -------------------------------------------------------


def model_header(model):
    header = {
        "format": "tagger",
        "kind": model.kind,
        "labels": list(model.labels.tags),
        "scheme": model.labels.scheme,
        "languages": list(model.languages),
        "encoder": model.encoder.config.as_dict(),
        "profiles": {c: [int(v) for v in p.features] for c, p in model.profiles.items()},
    }
    if model.task_adapter is not None:
        header["task_rf"] = model.task_adapter.rf
    if model.bank is not None:
        header["bank_rf"] = [a.rf for a in model.bank.adapters]
    if model.head is not None:
        header["d_lang"] = model.head.d_lang
    return header


def build_from_header(header):
    enc = Encoder(EncoderConfig.from_dict(header["encoder"]), seed=0)
    labels = LabelMap(header["labels"], header["scheme"])
    profiles = {
        c: LanguageProfile(c, np.array(v, dtype=np.float64))
        for c, v in header.get("profiles", {}).items()
    }
    kind = header["kind"]
    cfg = enc.config
    bank = None
    if "bank_rf" in header:
        bank = AdapterBank(
            [
                BottleneckAdapter(code, cfg.n_layers, cfg.d_model, rf=rf)
                for code, rf in zip(header["languages"], header["bank_rf"])
            ]
        )
    ta = None
    if "task_rf" in header:
        ta = BottleneckAdapter("task", cfg.n_layers, cfg.d_model, rf=header["task_rf"], prefix="ta")
    head = None
    if kind == "zgul":
        head = ZgulHead(cfg.d_model, cfg.n_layers, d_lang=header["d_lang"])
    return TaggerModel(
        kind, enc, labels, bank=bank, task_adapter=ta, head=head,
        profiles=profiles, languages=header["languages"],
    )


def save_model(model, path):
    write_container(path, model_header(model), params_state(model.parameters()))


def load_model(path):
    header, tensors = read_container(path)
    if header.get("format") != "tagger":
        raise DataError(f"{path}: not a tagger checkpoint")
    model = build_from_header(header)
    load_params_state(model.parameters(), tensors, where=str(path))
    model.apply_trainability()
    return model


def copy_model(model):
    """Deep copy via the serialization path; trainability flags preserved."""
    out = build_from_header(model_header(model))
    load_params_state(out.parameters(), params_state(model.parameters()))
    for a, b in zip(model.parameters(), out.parameters()):
        b.trainable = a.trainable
    return out
