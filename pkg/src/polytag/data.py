"""Corpus IO: CoNLL readers, vocabularies, label maps, typology vectors.

All readers raise DataError (path and line number in the message) so the CLI
can map data problems to its own exit code.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

LANGVEC_DIM = 103

PAD, UNK, MASK = "<pad>", "<unk>", "<mask>"
N_SPECIALS = 3

# Universal POS inventory used for real-data label maps and docs; synthetic
# corpora use whatever tags their templates mention.
UPOS_TAGS = (
    "PART", "CONJ", "ADJ", "ADP", "ADV", "VERB", "DET", "INTJ",
    "NOUN", "PRON", "PROPN", "NUM", "PUNCT", "AUX", "SYM", "X",
)


class DataError(ValueError):
    """A problem with input data or files, as opposed to a usage error."""


@dataclass
class Example:
    tokens: list
    labels: list | None
    language: str
    split: str = ""

    def __post_init__(self):
        if not self.tokens:
            raise DataError("empty sentence")
        if self.labels is not None and len(self.labels) != len(self.tokens):
            raise DataError("labels do not align with tokens")


# -- CoNLL ---------------------------------------------------------------


def read_conll(path, fmt="two_col", language="", split="", bio_policy=None):
    """Read a labeled corpus; fmt is two_col (token TAB tag) or conllu."""
    if fmt not in ("two_col", "conllu"):
        raise DataError(f"unknown corpus format {fmt!r}")
    examples = []
    tokens, labels = [], []

    def flush():
        if tokens:
            examples.append(Example(list(tokens), list(labels), language, split))
            tokens.clear()
            labels.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if fmt == "two_col":
                if len(cols) != 2 or not cols[0] or not cols[1]:
                    raise DataError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
                tokens.append(cols[0])
                labels.append(cols[1])
            else:
                if len(cols) < 4:
                    raise DataError(f"{path}:{lineno}: ragged conllu row")
                wid = cols[0]
                if "-" in wid or "." in wid:
                    continue  # multiword ranges and empty nodes carry no tag
                tokens.append(cols[1])
                labels.append(cols[3])
    flush()
    if bio_policy is not None:
        from .metrics import repair_bio

        strict = bio_policy == "strict"
        fixed = []
        for ex in examples:
            tags, n_fixed = repair_bio(ex.labels, strict=strict)
            if n_fixed and strict:
                raise DataError(f"{path}: ill-formed BIO sequence")
            fixed.append(Example(ex.tokens, tags, ex.language, ex.split))
        examples = fixed
    return examples


def write_conll(path, examples):
    """Write two_col format; one blank line between sentences."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            labels = ex.labels if ex.labels is not None else ["O"] * len(ex.tokens)
            for tok, tag in zip(ex.tokens, labels):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


def read_text(path):
    """Unlabeled corpus: one whitespace-tokenized sentence per line."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                sentences.append(toks)
    return sentences


def write_text(path, sentences):
    with open(path, "w", encoding="utf-8") as fh:
        for toks in sentences:
            fh.write(" ".join(toks) + "\n")


# -- vocabulary ----------------------------------------------------------


class Vocab:
    """Token to id map with <pad>/<unk>/<mask> reserved at 0/1/2."""

    def __init__(self, tokens=()):
        self._tokens = [PAD, UNK, MASK]
        self._index = {t: i for i, t in enumerate(self._tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self._index:
            self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return self._index[token]

    @classmethod
    def from_corpus(cls, sentences, max_size=None):
        """Frequency-then-lexicographic order; deterministic for a fixed corpus."""
        counts = {}
        for toks in sentences:
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            if max_size < N_SPECIALS:
                raise DataError("vocab max_size smaller than reserved specials")
            ordered = ordered[: max_size - N_SPECIALS]
        return cls(ordered)

    def extend_from(self, sentences, max_size):
        """Append unseen types in frequency order; error if the cap is hit."""
        counts = {}
        for toks in sentences:
            for t in toks:
                if t not in self._index:
                    counts[t] = counts.get(t, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if len(self._tokens) + len(ordered) > max_size:
            raise DataError("vocabulary exceeds configured size")
        added = [self.add(t) for t in ordered]
        return added

    def encode(self, tokens):
        unk = self._index[UNK]
        return np.array([self._index.get(t, unk) for t in tokens], dtype=np.int64)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token):
        return self._index.get(token, self._index[UNK])

    def token(self, i):
        return self._tokens[i]

    @property
    def tokens(self):
        return tuple(self._tokens)

    @property
    def mask_id(self):
        return self._index[MASK]

    @property
    def unk_id(self):
        return self._index[UNK]


class LabelMap:
    """Tag to id map plus the evaluation scheme the tags live under."""

    def __init__(self, tags, scheme="token"):
        if scheme not in ("token", "bio_span"):
            raise DataError(f"unknown labeling scheme {scheme!r}")
        tags = list(tags)
        if len(set(tags)) != len(tags):
            raise DataError("duplicate tags in label map")
        if not tags:
            raise DataError("empty label map")
        self.tags = tuple(tags)
        self.scheme = scheme
        self._index = {t: i for i, t in enumerate(tags)}

    @classmethod
    def from_examples(cls, examples, scheme="token"):
        seen = set()
        for ex in examples:
            if ex.labels:
                seen.update(ex.labels)
        return cls(sorted(seen), scheme)

    def id(self, tag):
        if tag not in self._index:
            raise DataError(f"unknown tag {tag!r}")
        return self._index[tag]

    def tag(self, i):
        return self.tags[i]

    def encode(self, labels):
        return np.array([self.id(t) for t in labels], dtype=np.int64)

    def decode(self, ids):
        return [self.tags[int(i)] for i in ids]

    def __len__(self):
        return len(self.tags)


@dataclass
class Encoded:
    ids: np.ndarray
    label_ids: np.ndarray | None
    language: str


def encode_examples(examples, vocab, labels=None):
    out = []
    for ex in examples:
        lab = labels.encode(ex.labels) if (labels is not None and ex.labels is not None) else None
        out.append(Encoded(vocab.encode(ex.tokens), lab, ex.language))
    return out


# -- typology vectors ----------------------------------------------------


@dataclass
class LanguageProfile:
    """A language code plus its binary syntax-feature vector."""

    code: str
    features: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float64)
        if arr.shape != (LANGVEC_DIM,):
            raise DataError(
                f"language {self.code!r}: expected {LANGVEC_DIM} features, got {arr.shape}"
            )
        if not np.isin(arr, (0.0, 1.0)).all():
            raise DataError(f"language {self.code!r}: features must be 0 or 1")
        self.features = arr


def read_langvec(path):
    """TSV of code TAB comma-separated features; '--' imputes to 0."""
    profiles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 'code<TAB>features'")
            code, feats = cols
            if code in profiles:
                raise DataError(f"{path}:{lineno}: duplicate language {code!r}")
            vals = []
            for item in feats.split(","):
                item = item.strip()
                if item == "--":
                    vals.append(0.0)  # unknown features impute to 0
                elif item in ("0", "1"):
                    vals.append(float(item))
                else:
                    raise DataError(f"{path}:{lineno}: bad feature value {item!r}")
            if len(vals) != LANGVEC_DIM:
                raise DataError(
                    f"{path}:{lineno}: language {code!r} has {len(vals)} features, "
                    f"expected {LANGVEC_DIM}"
                )
            profiles[code] = LanguageProfile(code, np.array(vals))
    return profiles


def write_langvec(path, profiles):
    with open(path, "w", encoding="utf-8") as fh:
        for code in sorted(profiles):
            feats = ",".join(str(int(v)) for v in profiles[code].features)
            fh.write(f"{code}\t{feats}\n")


# -- relatedness matrices ------------------------------------------------


@dataclass
class RelatednessMatrix:
    """Symmetric similarity matrix over language codes, unit diagonal."""

    codes: tuple
    values: np.ndarray

    def __post_init__(self):
        self.codes = tuple(self.codes)
        arr = np.asarray(self.values, dtype=np.float64)
        n = len(self.codes)
        if arr.shape != (n, n):
            raise DataError("relatedness matrix shape does not match code list")
        if not np.allclose(arr, arr.T, atol=1e-12):
            raise DataError("relatedness matrix must be symmetric")
        self.values = arr

    def get(self, a, b):
        try:
            return float(self.values[self.codes.index(a), self.codes.index(b)])
        except ValueError:
            raise DataError(f"language pair ({a!r}, {b!r}) not in relatedness matrix") from None

    def row(self, code, others):
        return np.array([self.get(code, o) for o in others])

    def most_related(self, target, candidates):
        """Highest-similarity candidate; ties break on code order for determinism."""
        if not candidates:
            raise DataError("no candidate languages")
        best = max(candidates, key=lambda c: (self.get(target, c), -candidates.index(c)))
        return best


def mean_relatedness(a, b):
    """Average two matrices over their shared code order."""
    if a.codes != b.codes:
        raise DataError("relatedness matrices disagree on language codes")
    return RelatednessMatrix(a.codes, 0.5 * (a.values + b.values))


def read_relatedness(path):
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    if not lines:
        raise DataError(f"{path}: empty relatedness matrix")
    header = lines[0].split("\t")
    if header[0] != "":
        raise DataError(f"{path}: first header cell must be empty")
    codes = header[1:]
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        cols = line.split("\t")
        if len(cols) != len(codes) + 1:
            raise DataError(f"{path}:{lineno}: ragged matrix row")
        if cols[0] != codes[lineno - 2]:
            raise DataError(f"{path}:{lineno}: row order must match header order")
        rows.append([float(v) for v in cols[1:]])
    return RelatednessMatrix(tuple(codes), np.array(rows))


def write_relatedness(path, matrix):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t" + "\t".join(matrix.codes) + "\n")
        for i, code in enumerate(matrix.codes):
            vals = "\t".join(f"{v:.6f}" for v in matrix.values[i])
            fh.write(f"{code}\t{vals}\n")


# -- dataset directories -------------------------------------------------


@dataclass
class Dataset:
    """Contents of one generated corpus directory."""

    languages: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)
    genetic: RelatednessMatrix | None = None
    syntactic: RelatednessMatrix | None = None

    def split(self, code, name):
        try:
            return self.languages[code][name]
        except KeyError:
            raise DataError(f"no {name!r} split for language {code!r}") from None

    def relatedness(self):
        if self.genetic is None or self.syntactic is None:
            raise DataError("dataset has no relatedness matrices")
        return mean_relatedness(self.genetic, self.syntactic)


def load_dataset_dir(root):
    """Load a corpus directory produced by the synth generator."""
    ds = Dataset()
    langvec = os.path.join(root, "langvec.tsv")
    if os.path.exists(langvec):
        ds.profiles = read_langvec(langvec)
    gen = os.path.join(root, "relatedness_genetic.tsv")
    if os.path.exists(gen):
        ds.genetic = read_relatedness(gen)
    syn = os.path.join(root, "relatedness_syntactic.tsv")
    if os.path.exists(syn):
        ds.syntactic = read_relatedness(syn)
    for code in sorted(os.listdir(root)):
        sub = os.path.join(root, code)
        if not os.path.isdir(sub):
            continue
        splits = {}
        for name in ("train", "dev", "test"):
            p = os.path.join(sub, f"{name}.tsv")
            if os.path.exists(p):
                splits[name] = read_conll(p, language=code, split=name)
        unl = os.path.join(sub, "unlabeled.txt")
        if os.path.exists(unl):
            splits["unlabeled"] = read_text(unl)
        if splits:
            ds.languages[code] = splits
    if not ds.languages:
        raise DataError(f"{root}: no language subdirectories found")
    return ds
