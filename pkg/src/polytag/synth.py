"""Synthetic multilingual corpora with planted relatedness.

Each base language gets a word inventory of a fixed size. For every language
pair a dedicated block of word types is shared between the two inventories,
sized so the inventory intersection-over-union equals the planted relatedness
value exactly: s = 2*m*r/(1+r) solves s/(2m-s) = r. Words carry a tag in each
language that uses them; a small fraction of shared words disagree on the tag
across the pair (scaled down for closely related pairs), which is what gives
per-token source attention something to decide.

Typology vectors are thresholded correlated Gaussians whose correlation
matrix is the planted relatedness, so profile similarity and relatedness
agree in expectation. Mixture targets are generated sentence-wise from their
parents with a tag-preserving novel-word rate, and their planted relatedness
row is the novelty-discounted mixture of the parents' rows.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import (
    LANGVEC_DIM,
    DataError,
    Dataset,
    Example,
    LanguageProfile,
    RelatednessMatrix,
    write_conll,
    write_langvec,
    write_relatedness,
    write_text,
)
from .tensor import Rng

DEFAULT_TAGS = ("DET", "NOUN", "VERB", "ADJ", "ADV", "ADP")

DEFAULT_TEMPLATES = (
    ("DET", "NOUN", "VERB"),
    ("DET", "NOUN", "VERB", "ADV"),
    ("DET", "ADJ", "NOUN", "VERB"),
    ("NOUN", "VERB", "ADP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "ADP", "NOUN"),
    ("ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN"),
)


@dataclass
class MixtureSpec:
    """A target language drawn from parent languages plus novel vocabulary."""

    parents: dict
    novelty: float = 0.25

    def __post_init__(self):
        if not self.parents:
            raise DataError("mixture needs at least one parent")
        weights = np.array(list(self.parents.values()), dtype=np.float64)
        if (weights <= 0).any() or abs(weights.sum() - 1.0) > 1e-9:
            raise DataError("mixture weights must be positive and sum to 1")
        if not 0.0 <= self.novelty < 1.0:
            raise DataError("novelty must be in [0, 1)")


@dataclass
class SynthSpec:
    languages: tuple
    relatedness: np.ndarray  # over the base languages, symmetric, unit diagonal
    inventory_size: int = 60
    tags: tuple = DEFAULT_TAGS
    templates: tuple = DEFAULT_TEMPLATES
    n_train: int = 240
    n_dev: int = 60
    n_test: int = 80
    n_unlabeled: int = 400
    label_noise: float = 0.02
    homonym_rate: float = 0.15
    mixtures: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.tags = tuple(self.tags)
        arr = np.asarray(self.relatedness, dtype=np.float64)
        n = len(self.languages)
        if arr.shape != (n, n):
            raise DataError("relatedness shape does not match language list")
        if not np.allclose(arr, arr.T, atol=1e-12):
            raise DataError("relatedness must be symmetric")
        if not np.allclose(np.diag(arr), 1.0, atol=1e-12):
            raise DataError("relatedness diagonal must be 1")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("relatedness values must be in [0, 1]")
        self.relatedness = arr
        for code, mix in self.mixtures.items():
            if code in self.languages:
                raise DataError(f"mixture target {code!r} clashes with a base language")
            for p in mix.parents:
                if p not in self.languages:
                    raise DataError(f"mixture parent {p!r} is not a base language")
        for tpl in self.templates:
            for t in tpl:
                if t not in self.tags:
                    raise DataError(f"template tag {t!r} not in the tag set")
        if not 0.0 <= self.label_noise < 1.0:
            raise DataError("label_noise must be in [0, 1)")
        if not 0.0 <= self.homonym_rate <= 1.0:
            raise DataError("homonym_rate must be in [0, 1]")

    @property
    def codes(self):
        return self.languages + tuple(sorted(self.mixtures))


def planted_relatedness(spec):
    """Full matrix over base plus mixture codes, unit diagonal."""
    codes = list(spec.codes)
    n = len(codes)
    base_ix = {c: i for i, c in enumerate(spec.languages)}
    out = np.eye(n)
    out[: len(spec.languages), : len(spec.languages)] = spec.relatedness

    def mix_row(code):
        mix = spec.mixtures[code]
        row = np.zeros(len(spec.languages))
        for p, w in mix.parents.items():
            row += w * (1.0 - mix.novelty) * spec.relatedness[base_ix[p]]
        return row

    for i, code in enumerate(codes):
        if code in spec.mixtures:
            out[i, : len(spec.languages)] = mix_row(code)
            out[: len(spec.languages), i] = out[i, : len(spec.languages)]
    # mixture-mixture entries: novelty-discounted parent cross terms
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            if i < j and a in spec.mixtures and b in spec.mixtures:
                ma, mb = spec.mixtures[a], spec.mixtures[b]
                val = sum(
                    wa * wb * (1 - ma.novelty) * (1 - mb.novelty)
                    * spec.relatedness[base_ix[pa], base_ix[pb]]
                    for pa, wa in ma.parents.items()
                    for pb, wb in mb.parents.items()
                )
                out[i, j] = out[j, i] = val
    return RelatednessMatrix(tuple(codes), out)


def _shared_block_sizes(spec):
    n = len(spec.languages)
    m = spec.inventory_size
    sizes = {}
    for i in range(n):
        for j in range(i + 1, n):
            r = spec.relatedness[i, j]
            sizes[(i, j)] = int(round(2.0 * m * r / (1.0 + r)))
    for i in range(n):
        budget = sum(s for (a, b), s in sizes.items() if i in (a, b))
        if budget > m:
            raise DataError(
                f"language {spec.languages[i]!r}: shared blocks need {budget} types "
                f"but the inventory holds {m}; raise inventory_size or lower relatedness"
            )
    return sizes


def _deal_tags(tokens, tags, rng):
    """Round-robin tag assignment over a shuffled token list: balanced pools."""
    order = rng.shuffled(tokens)
    return {tok: tags[k % len(tags)] for k, tok in enumerate(order)}


def _build_lexicons(spec, rng):
    """Per-language token -> tag maps with exact pairwise overlap."""
    sizes = _shared_block_sizes(spec)
    counter = 0

    def fresh(k):
        nonlocal counter
        out = [f"w{counter + t:04d}" for t in range(k)]
        counter += k
        return out

    lexicons = {c: {} for c in spec.languages}
    for (i, j), size in sorted(sizes.items()):
        if size == 0:
            continue
        a, b = spec.languages[i], spec.languages[j]
        block = fresh(size)
        tags = _deal_tags(block, spec.tags, rng.child(f"block.{a}.{b}"))
        conflict_rate = spec.homonym_rate * (1.0 - spec.relatedness[i, j])
        flip = rng.child(f"conflict.{a}.{b}")
        for tok in block:
            lexicons[a][tok] = tags[tok]
            if flip.random(()) < conflict_rate:
                others = [t for t in spec.tags if t != tags[tok]]
                lexicons[b][tok] = others[int(flip.integers(0, len(others)))]
            else:
                lexicons[b][tok] = tags[tok]
    for code in spec.languages:
        private = fresh(spec.inventory_size - len(lexicons[code]))
        lexicons[code].update(_deal_tags(private, spec.tags, rng.child(f"private.{code}")))
    for code, mix in sorted(spec.mixtures.items()):
        novel = fresh(int(round(mix.novelty * spec.inventory_size)))
        lexicons[code] = _deal_tags(novel, spec.tags, rng.child(f"novel.{code}"))
    for code, lex in lexicons.items():
        pools = {t: [w for w, tag in lex.items() if tag == t] for t in spec.tags}
        missing = [t for t, pool in pools.items() if not pool and code not in spec.mixtures]
        if missing:
            raise DataError(
                f"language {code!r}: no words for tags {missing}; raise inventory_size"
            )
    return lexicons


def _pools(lexicon, tags):
    return {t: sorted(w for w, tag in lexicon.items() if tag == t) for t in tags}


def _profiles(planted, rng):
    """Threshold correlated Gaussians; correlation = planted relatedness."""
    codes = planted.codes
    r = planted.values
    vals, vecs = np.linalg.eigh(r)
    factor = vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))
    g = rng.child("langvec").normal((LANGVEC_DIM, len(codes)))
    z = g @ factor.T
    bits = (z > 0.0).astype(np.float64)
    return {c: LanguageProfile(c, bits[:, i]) for i, c in enumerate(codes)}


def _make_sentence(spec, pools, rng):
    tpl = spec.templates[int(rng.integers(0, len(spec.templates)))]
    toks = [pools[t][int(rng.integers(0, len(pools[t])))] for t in tpl]
    return toks, list(tpl)


def _apply_noise(labels, noise, tags, rng):
    out = []
    for tag in labels:
        if noise > 0 and rng.random(()) < noise:
            others = [t for t in tags if t != tag]
            out.append(others[int(rng.integers(0, len(others)))])
        else:
            out.append(tag)
    return out


def _gen_language(spec, code, pools_by_code, rng):
    """All splits for one language; mixtures defer to their parents per sentence."""
    mix = spec.mixtures.get(code)
    novel_pools = pools_by_code[code] if mix else None

    def sentence(stream):
        if mix is None:
            return _make_sentence(spec, pools_by_code[code], stream)
        parents = sorted(mix.parents)
        weights = np.array([mix.parents[p] for p in parents])
        pick = parents[int(np.searchsorted(np.cumsum(weights), stream.random(())))]
        toks, labels = _make_sentence(spec, pools_by_code[pick], stream)
        for k in range(len(toks)):
            pool = novel_pools.get(labels[k], ())
            if pool and stream.random(()) < mix.novelty:
                toks[k] = pool[int(stream.integers(0, len(pool)))]
        return toks, labels

    splits = {}
    for name, count in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        stream = rng.child(f"{code}.{name}")
        # separate noise stream: the noise rate must not perturb token draws
        noise = rng.child(f"{code}.{name}.noise")
        examples = []
        for k in range(count):
            toks, labels = sentence(stream)
            if name == "train":
                labels = _apply_noise(labels, spec.label_noise, spec.tags, noise)
            examples.append(Example(toks, labels, code, name))
        splits[name] = examples
    stream = rng.child(f"{code}.unlabeled")
    splits["unlabeled"] = [sentence(stream)[0] for _ in range(spec.n_unlabeled)]
    return splits


def generate(spec):
    """Deterministic Dataset for the spec; same spec, same corpus."""
    rng = Rng(spec.seed).child("synth")
    planted = planted_relatedness(spec)
    lexicons = _build_lexicons(spec, rng)
    pools_by_code = {c: _pools(lex, spec.tags) for c, lex in lexicons.items()}
    ds = Dataset()
    ds.profiles = _profiles(planted, rng)
    ds.genetic = planted
    ds.syntactic = RelatednessMatrix(planted.codes, planted.values.copy())
    for code in planted.codes:
        ds.languages[code] = _gen_language(spec, code, pools_by_code, rng)
    return ds


def write_dataset_dir(ds, root):
    """Lay a Dataset out as the on-disk corpus directory format."""
    os.makedirs(root, exist_ok=True)
    if ds.profiles:
        write_langvec(os.path.join(root, "langvec.tsv"), ds.profiles)
    if ds.genetic is not None:
        write_relatedness(os.path.join(root, "relatedness_genetic.tsv"), ds.genetic)
    if ds.syntactic is not None:
        write_relatedness(os.path.join(root, "relatedness_syntactic.tsv"), ds.syntactic)
    for code, splits in ds.languages.items():
        sub = os.path.join(root, code)
        os.makedirs(sub, exist_ok=True)
        for name in ("train", "dev", "test"):
            if name in splits:
                write_conll(os.path.join(sub, f"{name}.tsv"), splits[name])
        if "unlabeled" in splits:
            write_text(os.path.join(sub, "unlabeled.txt"), splits["unlabeled"])


def observed_vocab(splits):
    """Every token type that actually occurs in a language's emitted data."""
    vocab = set()
    for name, examples in splits.items():
        if name == "unlabeled":
            for toks in examples:
                vocab.update(toks)
        else:
            for ex in examples:
                vocab.update(ex.tokens)
    return vocab


def inventory_iou(a, b):
    union = a | b
    if not union:
        raise DataError("both vocabularies are empty")
    return len(a & b) / len(union)
