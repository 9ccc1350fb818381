"""Receptive-field (effective aperture) calculator for conv/pool/upsample
chains.

Folds r <- r + (k - 1) * j and j <- j * s over the trunk up to and including
the named layer, where k is the spatial kernel extent (the block size for
upsampling) and j the accumulated input jump.  Activation, batch-norm and
dropout layers are transparent.
"""

from __future__ import annotations

from .specs import NetworkSpec

_TRANSPARENT = ("relu", "sigmoid", "batchnorm", "dropout")


def receptive_field(spec: NetworkSpec, layer_name: str) -> int:
    r = 1
    j = 1
    for layer in spec.trunk:
        kind = layer.kind
        if kind in _TRANSPARENT:
            if layer.name == layer_name:
                return r
            continue
        if kind == "conv":
            kh, kw = layer.params["kernel_size"]
            k = max(kh, kw)
            s = layer.params.get("stride", 1)
        elif kind == "maxpool":
            kh, kw = layer.params["kernel_size"]
            k = max(kh, kw)
            s = layer.params["stride"]
        elif kind == "upsample":
            k = layer.params["factor"]
            s = 1
        else:
            raise ValueError(f"receptive field undefined past layer "
                             f"{layer.name!r} of kind {kind!r}")
        r = r + (k - 1) * j
        j = j * s
        if layer.name == layer_name:
            return r
    raise KeyError(f"no trunk layer named {layer_name!r}")


def last_conv_before_upsample(spec: NetworkSpec) -> str:
    """Default layer for aperture reports: the final conv preceding the first
    upsampling stage, or the final conv when nothing upsamples."""
    last_conv = None
    for layer in spec.trunk:
        if layer.kind == "upsample" and last_conv is not None:
            return last_conv
        if layer.kind == "conv":
            last_conv = layer.name
    if last_conv is None:
        raise ValueError(f"{spec.name}: no conv layer in trunk")
    return last_conv
