"""Declarative network descriptions and static shape checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

LAYER_KINDS = ("conv", "maxpool", "upsample", "dense", "batchnorm", "relu",
               "sigmoid", "softmax_dense", "dropout", "flatten", "ordinal_head")


class BuildError(ValueError):
    """Raised when a network spec fails to shape-check; names the bad layer."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a unique name, a kind, and kind-specific parameters.

    Recognised params by kind:
      conv          kernels, kernel_size (kh, kw), stride, padding, l2
      maxpool       kernel_size, stride
      upsample      factor
      dense         units, l2
      softmax_dense units, l2
      batchnorm     momentum, eps
      dropout       rate
      ordinal_head  fixed_weights
    """

    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"{self.name}: unknown layer kind {self.kind!r}")
        rate = self.params.get("rate")
        if rate is not None and not 0.0 <= rate < 1.0:
            raise BuildError(f"{self.name}: dropout rate must be in [0, 1), got {rate}")
        l2 = self.params.get("l2", 0.0)
        if l2 < 0:
            raise BuildError(f"{self.name}: l2 penalty must be >= 0, got {l2}")


@dataclass(frozen=True)
class HeadSpec:
    """A named output branch; ``source`` is "trunk" or another head's name."""

    source: str
    layers: tuple


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape plus an ordered trunk and zero or more named heads."""

    name: str
    input_shape: tuple        # (C, H, W) without the batch axis
    trunk: tuple              # tuple[LayerSpec]
    heads: dict = field(default_factory=dict)   # name -> HeadSpec

    def all_layer_specs(self):
        specs = list(self.trunk)
        for head in self.heads.values():
            specs.extend(head.layers)
        return specs

    def layer_names(self):
        return [s.name for s in self.all_layer_specs()]

    def validate(self):
        names = self.layer_names()
        if len(names) != len(set(names)):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise BuildError(f"duplicate layer names: {dup}")
        self.shape_chain()

    def shape_chain(self):
        """Per-layer output shapes (batch axis omitted); raises BuildError on
        the first layer whose input shape does not fit."""
        chain = []
        shape = tuple(self.input_shape)
        for spec in self.trunk:
            shape = _layer_out_shape(spec, shape)
            chain.append((spec.name, shape))
        trunk_out = shape
        head_out = {}
        for head_name, head in self.heads.items():
            if head.source == "trunk":
                shape = trunk_out
            elif head.source in head_out:
                shape = head_out[head.source]
            else:
                raise BuildError(f"head {head_name}: unknown source {head.source!r} "
                                 "(heads must be declared after their source)")
            for spec in head.layers:
                shape = _layer_out_shape(spec, shape)
                chain.append((spec.name, shape))
            head_out[head_name] = shape
        return chain

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "trunk": [_spec_dict(s) for s in self.trunk],
            "heads": {k: {"source": h.source, "layers": [_spec_dict(s) for s in h.layers]}
                      for k, h in self.heads.items()},
        }

    @staticmethod
    def from_dict(d):
        return NetworkSpec(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            trunk=tuple(_spec_from_dict(s) for s in d["trunk"]),
            heads={k: HeadSpec(source=h["source"],
                               layers=tuple(_spec_from_dict(s) for s in h["layers"]))
                   for k, h in d["heads"].items()},
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _spec_dict(s: LayerSpec):
    params = {}
    for k, v in s.params.items():
        params[k] = list(v) if isinstance(v, tuple) else v
    return {"name": s.name, "kind": s.kind, "params": params}


def _spec_from_dict(d):
    params = {}
    for k, v in d["params"].items():
        params[k] = tuple(v) if isinstance(v, list) else v
    return LayerSpec(name=d["name"], kind=d["kind"], params=params)


def _layer_out_shape(spec: LayerSpec, shape):
    kind = spec.kind
    p = spec.params
    if kind == "conv":
        if len(shape) != 3:
            raise BuildError(f"{spec.name}: conv needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        kh, kw = p["kernel_size"]
        stride = p.get("stride", 1)
        padding = p.get("padding", "same")
        if padding == "valid" and (h < kh or w < kw):
            raise BuildError(f"{spec.name}: kernel {kh}x{kw} larger than input {h}x{w}")
        from ..tensor import conv_output_extent
        return (p["kernels"],
                conv_output_extent(h, kh, stride, padding),
                conv_output_extent(w, kw, stride, padding))
    if kind == "maxpool":
        if len(shape) != 3:
            raise BuildError(f"{spec.name}: maxpool needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        kh, kw = p["kernel_size"]
        s = p["stride"]
        if h < kh or w < kw:
            raise BuildError(f"{spec.name}: window {kh}x{kw} larger than input {h}x{w}")
        return (c, (h - kh) // s + 1, (w - kw) // s + 1)
    if kind == "upsample":
        if len(shape) != 3:
            raise BuildError(f"{spec.name}: upsample needs a (C,H,W) input, got {shape}")
        c, h, w = shape
        f = p["factor"]
        return (c, h * f, w * f)
    if kind == "flatten":
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if kind in ("dense", "softmax_dense"):
        if len(shape) != 1:
            raise BuildError(f"{spec.name}: dense needs a flat (D,) input, got {shape} "
                             "(insert a flatten layer)")
        return (p["units"],)
    if kind == "ordinal_head":
        k = len(p.get("fixed_weights", (0, 1, 2, 3, 4)))
        if shape != (k,):
            raise BuildError(f"{spec.name}: ordinal head needs a ({k},) probability "
                             f"input, got {shape}")
        return (1,)
    if kind in ("batchnorm", "relu", "sigmoid", "dropout"):
        if kind == "batchnorm" and len(shape) != 3:
            raise BuildError(f"{spec.name}: batchnorm needs a (C,H,W) input, got {shape}")
        return shape
    raise BuildError(f"{spec.name}: unknown layer kind {kind!r}")
