"""Model assembly: parameter registry, adapter-aware linear application, and
the combined encoder-stack + decoder used by training and evaluation.
"""

from __future__ import annotations

import math

import numpy as np

from .decoder import Decoder, DecoderConfig
from .encoders import EncoderConfig, EncoderStack
from .seeding import substream
from .tensor import DTYPE, Tensor, matmul, scale, transpose


class Params:
    """Ordered name -> Tensor registry; init draws are seeded per name, so a
    parameter's initial value never depends on registration order."""

    def __init__(self, seed: int):
        self.seed = seed
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init: str = "normal", std: float = 0.02,
            fan_in: int | None = None) -> Tensor:
        if name in self._store:
            raise KeyError(f"parameter {name!r} already registered")
        rng = substream(self.seed, "init", name)
        if init == "normal":
            data = rng.normal(0.0, std, shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform_fan":
            bound = 1.0 / math.sqrt(fan_in if fan_in else shape[-1])
            data = rng.uniform(-bound, bound, shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(DTYPE), requires_grad=True, name=name)
        self._store[name] = t
        return t

    def remove(self, name: str):
        del self._store[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def total_count(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def zero_grads(self):
        for t in self._store.values():
            t.grad = None


class M3FModel:
    """Encoders + projector + specials + decoder behind one parameter registry."""

    def __init__(self, enc_cfg: EncoderConfig | None = None,
                 dec_cfg: DecoderConfig | None = None, seed: int = 0):
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.dec_cfg = dec_cfg or DecoderConfig()
        self.seed = seed
        self.params = Params(seed)
        self.decoder = Decoder(self, self.dec_cfg)
        self.encoders = EncoderStack(self, self.enc_cfg)
        self.adapters: dict[str, "LowRankAdapter"] = {}  # noqa: F821 - set by adapters.attach
        self.meta: dict = {"stages_completed": [], "train_classes": []}

    def linear(self, wname: str, x: Tensor, bname: str | None = None) -> Tensor:
        """x @ W (+ b), routed through a low-rank adapter when one is attached.

        With a freshly attached adapter (B = 0) the output is bitwise the
        base product.
        """
        y = matmul(x, self.params[wname])
        ad = self.adapters.get(wname)
        if ad is not None:
            delta = matmul(matmul(x, transpose(ad.a)), transpose(ad.b))
            y = y + scale(delta, ad.alpha / ad.rank)
        if bname is not None:
            y = y + self.params[bname]
        return y

    def media_tokens(self, sample, spec=None):
        return self.encoders.media_tokens(sample, spec)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for name in list(self.params.names()):
            if name not in snap:
                self.params.remove(name)
                self.adapters.pop(_adapter_target(name), None)
        for name, data in snap.items():
            if name in self.params:
                self.params[name].data = data.copy()
                self.params[name].grad = None
            else:
                raise KeyError(f"snapshot parameter {name!r} missing from model")


def _adapter_target(param_name: str) -> str:
    # adapter params are named adapter.<target>.a / adapter.<target>.b
    if param_name.startswith("adapter.") and param_name.endswith((".a", ".b")):
        return param_name[len("adapter.") : -2]
    return ""
