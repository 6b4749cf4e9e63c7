"""Bottleneck adapters: per-language stacks trained by MLM, plus task adapters.

Each adapter owns one bottleneck per encoder layer, applied to the layer's FFN
output with a residual connection. Up-projections start at zero, so a fresh
adapter stack is exactly the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_params_state, params_state, read_container, write_container
from .data import DataError
from .encoder import mlm_train_loop
from .tensor import Parameter, Rng

DEFAULT_RF = 3


class BottleneckAdapter:
    """Residual bottleneck (down, GELU, up) for every encoder layer."""

    def __init__(self, code, n_layers, d_model, rf=DEFAULT_RF, seed=0, prefix=None):
        width = d_model // rf
        if width < 1:
            raise ValueError("reduction factor too large for d_model")
        self.code = code
        self.n_layers = n_layers
        self.d_model = d_model
        self.rf = rf
        self.width = width
        prefix = prefix if prefix is not None else f"la.{code}"
        rng = Rng(seed).child(prefix)
        self.layers = []
        for i in range(n_layers):
            p = f"{prefix}.layer{i}"
            self.layers.append(
                {
                    "Wdown": Parameter(
                        f"{p}.Wdown", rng.child(f"{i}.Wdown").normal((d_model, width), std=0.02)
                    ),
                    "bdown": Parameter(f"{p}.bdown", np.zeros(width)),
                    "Wup": Parameter(f"{p}.Wup", np.zeros((width, d_model))),
                    "bup": Parameter(f"{p}.bup", np.zeros(d_model)),
                }
            )

    def forward(self, layer, h):
        """h + Wup·gelu(Wdown·h + bdown) + bup; h is (tokens, d) or (d,)."""
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers}-layer adapter")
        p = self.layers[layer]
        flat = h.ndim == 1
        if flat:
            h = h.reshape(1, self.d_model)
        z = (h @ p["Wdown"].value + p["bdown"].value).gelu() @ p["Wup"].value
        out = h + z + p["bup"].value
        return out.reshape(self.d_model) if flat else out

    def parameters(self):
        for layer in self.layers:
            yield from layer.values()

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag

    def state(self):
        return params_state(self.parameters())

    def save(self, path):
        header = {
            "kind": "language_adapter",
            "code": self.code,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "rf": self.rf,
        }
        write_container(path, header, self.state())

    @classmethod
    def load(cls, path):
        header, tensors = read_container(path)
        if header.get("kind") != "language_adapter":
            raise DataError(f"{path}: not a language adapter checkpoint")
        ad = cls(header["code"], header["n_layers"], header["d_model"], header["rf"])
        load_params_state(ad.parameters(), tensors, where=path)
        return ad


def adapter_forward(h, adapter, layer):
    """Functional wrapper over BottleneckAdapter.forward."""
    return adapter.forward(layer, h)


class AdapterBank:
    """Ordered collection of language adapters with unique codes."""

    def __init__(self, adapters=()):
        self.adapters = []
        self._by_code = {}
        for a in adapters:
            self.add(a)

    def add(self, adapter):
        if adapter.code in self._by_code:
            raise ValueError(f"duplicate language code {adapter.code!r} in bank")
        if self.adapters:
            first = self.adapters[0]
            if (adapter.n_layers, adapter.d_model) != (first.n_layers, first.d_model):
                raise ValueError("all adapters in a bank must share (n_layers, d_model)")
        self.adapters.append(adapter)
        self._by_code[adapter.code] = adapter

    def __getitem__(self, code):
        try:
            return self._by_code[code]
        except KeyError:
            raise KeyError(f"no adapter for language {code!r}") from None

    def __contains__(self, code):
        return code in self._by_code

    def __len__(self):
        return len(self.adapters)

    @property
    def codes(self):
        return tuple(a.code for a in self.adapters)

    def parameters(self):
        for a in self.adapters:
            yield from a.parameters()

    def set_trainable(self, flag):
        for a in self.adapters:
            a.set_trainable(flag)


@dataclass
class LaTrainConfig:
    code: str
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    mask_rate: float = 0.15
    batch_size: int = 8
    rf: int = DEFAULT_RF
    optimizer: str = "adam"
    train_head: bool = False  # MLM head frozen by default during LA training


def train_language_adapter(encoder, corpus, config):
    """MLM-train one language adapter against a frozen encoder.

    Freezes the whole encoder (the precondition for language adapters) and
    returns (adapter, losses).
    """
    if not corpus:
        raise DataError("empty corpus")
    encoder.set_trainable(False)
    adapter = BottleneckAdapter(
        config.code,
        encoder.config.n_layers,
        encoder.config.d_model,
        rf=config.rf,
        seed=config.seed,
    )
    params = list(adapter.parameters())
    if config.train_head:
        encoder.mlm_W.trainable = True
        encoder.mlm_b.trainable = True
        params += [encoder.mlm_W, encoder.mlm_b]
    losses = mlm_train_loop(encoder, corpus, config, params, hook=adapter.forward)
    return adapter, losses
