"""Reference architectures and seed-deterministic model construction.

Three families are provided:

* ``lenet5``  — two 5x5 conv layers (20/50 filters by default) with 2x2 max
  pooling, one 500-wide hidden dense layer, 10 classes, 1x28x28 inputs.
* ``alexnet`` — five 3x3 conv layers (64/192/384/256/256 by default) adapted
  to 3x32x32 inputs: pooling after conv1, conv2 and conv5, dense head 512/256.
* ``toy``     — two small conv layers (8/16) on 1x16x16 inputs; the desk-scale
  fixture used throughout the test suite.

Filter counts are overridable so non-default variants (e.g. a 394-filter
third conv layer) can be built without editing code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StructureError
from .network import Network, build_layers


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int
    pad: int = 0
    stride: int = 1
    pool: int | None = None


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int]
    conv_blocks: tuple[ConvBlock, ...]
    dense_widths: tuple[int, ...]
    n_classes: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "conv_blocks": [
                {"filters": b.filters, "kernel": b.kernel, "pad": b.pad,
                 "stride": b.stride, "pool": b.pool}
                for b in self.conv_blocks
            ],
            "dense_widths": list(self.dense_widths),
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchitectureSpec":
        return ArchitectureSpec(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            conv_blocks=tuple(ConvBlock(**b) for b in d["conv_blocks"]),
            dense_widths=tuple(d["dense_widths"]),
            n_classes=d["n_classes"],
        )


def lenet5_spec(conv_filters=(20, 50), n_classes: int = 10) -> ArchitectureSpec:
    f1, f2 = conv_filters
    return ArchitectureSpec(
        name="lenet5",
        input_shape=(1, 28, 28),
        conv_blocks=(ConvBlock(f1, 5, pool=2), ConvBlock(f2, 5, pool=2)),
        dense_widths=(500,),
        n_classes=n_classes,
    )


def alexnet_spec(conv_filters=(64, 192, 384, 256, 256), n_classes: int = 10) -> ArchitectureSpec:
    f = tuple(conv_filters)
    if len(f) != 5:
        raise StructureError("alexnet variant needs exactly 5 conv filter counts")
    return ArchitectureSpec(
        name="alexnet",
        input_shape=(3, 32, 32),
        conv_blocks=(
            ConvBlock(f[0], 3, pad=1, pool=2),
            ConvBlock(f[1], 3, pad=1, pool=2),
            ConvBlock(f[2], 3, pad=1),
            ConvBlock(f[3], 3, pad=1),
            ConvBlock(f[4], 3, pad=1, pool=2),
        ),
        dense_widths=(512, 256),
        n_classes=n_classes,
    )


def toy_spec(conv_filters=(8, 16), n_classes: int = 2) -> ArchitectureSpec:
    f1, f2 = conv_filters
    return ArchitectureSpec(
        name="toy",
        input_shape=(1, 16, 16),
        conv_blocks=(ConvBlock(f1, 3, pad=1, pool=2), ConvBlock(f2, 3, pad=1, pool=2)),
        dense_widths=(32,),
        n_classes=n_classes,
    )


_BUILDERS = {"lenet5": lenet5_spec, "alexnet": alexnet_spec, "toy": toy_spec}


def architecture_spec(name: str, conv_filters=None, n_classes: int | None = None) -> ArchitectureSpec:
    """Resolve an architecture by name with optional overrides."""
    if name not in _BUILDERS:
        raise StructureError(f"unknown architecture {name!r}; known: {sorted(_BUILDERS)}")
    kwargs = {}
    if conv_filters is not None:
        kwargs["conv_filters"] = tuple(conv_filters)
    if n_classes is not None:
        kwargs["n_classes"] = n_classes
    return _BUILDERS[name](**kwargs)


def build_model(spec: ArchitectureSpec, seed: int) -> Network:
    """Build a network with fan-in-uniform weights drawn from ``seed``.

    The same (spec, seed) pair always yields bit-identical parameters.
    """
    for b in spec.conv_blocks:
        if b.filters < 1 or b.kernel < 1:
            raise StructureError(f"invalid conv block {b}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    layers = build_layers(spec.input_shape, spec.conv_blocks, spec.dense_widths,
                          spec.n_classes, rng)
    return Network(layers, spec.input_shape, spec.n_classes, arch=spec)
