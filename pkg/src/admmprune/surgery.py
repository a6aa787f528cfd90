"""Structural filter removal and network reconciliation.

Removing filter j from a conv layer shrinks its weight tensor and bias along
axis 0; the immediate successor is repaired in the same pass: a following
conv layer loses the matching input channels (axis 1), and at the flatten
boundary the first dense layer loses every column fed by the removed maps
(the flatten order is row-major channel/height/width). Pooling and ReLU pass
channel changes through untouched. Surgery never mutates its input model.

Because ReLU and max pooling map zero to zero, removing exactly-zero filters
leaves the network function unchanged up to float reassociation; that
equivalence is the correctness oracle for everything in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PruneSpecError, StructureError
from .network import Network


@dataclass
class SurgeryPlan:
    """Record of one surgery pass: what was removed and what remained."""

    prune_sets: dict[str, list[int]] = field(default_factory=dict)
    result_counts: dict[str, int] = field(default_factory=dict)
    flatten_kept_columns: list[int] | None = None
    flatten_dropped_columns: int = 0

    def to_dict(self) -> dict:
        return {
            "prune_sets": {k: list(map(int, v)) for k, v in self.prune_sets.items()},
            "result_counts": dict(self.result_counts),
            "flatten_dropped_columns": int(self.flatten_dropped_columns),
            "flatten_kept_columns": (None if self.flatten_kept_columns is None
                                     else list(map(int, self.flatten_kept_columns))),
        }


def _checked_indices(prune_indices, n_filters: int, layer_id: str) -> np.ndarray:
    idx = np.unique(np.asarray(list(prune_indices), dtype=np.int64))
    if len(idx) and (idx.min() < 0 or idx.max() >= n_filters):
        raise ValueError(f"{layer_id}: prune index out of range [0, {n_filters})")
    if len(idx) >= n_filters:
        raise PruneSpecError(f"{layer_id}: pruning all {n_filters} filters")
    return idx


def prune_conv_layer(model: Network, layer_id: str, prune_indices,
                     plan: SurgeryPlan | None = None) -> Network:
    """Return a copy of ``model`` with the listed filters physically removed.

    Surviving parameters are copied bit-exactly. The successor conv layer (or
    the first dense layer across the flatten boundary) loses the inputs the
    removed maps used to feed; dense biases are never touched.
    """
    conv_src = model.conv_layer(layer_id)
    idx = _checked_indices(prune_indices, conv_src.w.shape[0], layer_id)
    new = model.clone()
    if len(idx) == 0:
        return new
    conv = new.conv_layer(layer_id)
    keep = np.setdiff1d(np.arange(conv.w.shape[0]), idx)
    pos = new.layers.index(conv)
    conv.w = np.ascontiguousarray(conv.w[keep])
    conv.b = np.ascontiguousarray(conv.b[keep])
    conv.n_out = len(keep)

    for nxt in new.layers[pos + 1:]:
        if nxt.kind == "conv":
            nxt.w = np.ascontiguousarray(nxt.w[:, keep, :, :])
            nxt.n_in = len(keep)
            break
        if nxt.kind == "flatten":
            last_conv, channels, positions = model.flatten_boundary()
            if last_conv != layer_id:
                raise StructureError(
                    f"{layer_id} feeds flatten but boundary belongs to {last_conv}")
            dense = next(l for l in new.layers[pos + 1:] if l.kind == "dense")
            col_keep = np.flatnonzero(np.repeat(np.isin(
                np.arange(channels), keep), positions))
            dense.w = np.ascontiguousarray(dense.w[:, col_keep])
            dense.n_in = len(col_keep)
            if plan is not None:
                plan.flatten_kept_columns = col_keep.tolist()
                plan.flatten_dropped_columns = channels * positions - len(col_keep)
            break
    if plan is not None:
        plan.prune_sets[layer_id] = idx.tolist()
        plan.result_counts[layer_id] = int(conv.w.shape[0])
    return new


def apply_surgery(model: Network, prune_sets: dict) -> tuple[Network, SurgeryPlan]:
    """Prune several layers in one pass; per-layer indices refer to the
    original model."""
    plan = SurgeryPlan()
    out = model
    for layer_id in [l.name for l in model.conv_layers()]:
        if layer_id in prune_sets and len(prune_sets[layer_id]):
            out = prune_conv_layer(out, layer_id, prune_sets[layer_id], plan=plan)
        else:
            plan.prune_sets[layer_id] = []
            plan.result_counts[layer_id] = int(out.conv_layer(layer_id).w.shape[0])
    return out, plan


def zero_out_filters(model: Network, layer_id: str, prune_indices) -> Network:
    """Set the listed filters' weights and biases to exactly zero, in place.

    Shapes are unchanged; returns the same model for chaining.
    """
    conv = model.conv_layer(layer_id)
    idx = _checked_indices(prune_indices, conv.w.shape[0], layer_id)
    conv.w[idx] = 0.0
    conv.b[idx] = 0.0
    return model


def validate_structure(model: Network) -> list[str]:
    """Check channel agreement along the network; returns violation strings."""
    violations = []
    c, h, w = model.input_shape
    flat_width = None
    prev = "input"
    for layer in model.layers:
        if layer.kind == "conv":
            n_out, n_in, kh, kw = layer.w.shape
            if n_in != c:
                violations.append(
                    f"{layer.name}: expects {n_in} input channels but {prev} provides {c}")
            if layer.b.shape != (n_out,):
                violations.append(f"{layer.name}: bias length {layer.b.shape[0]} != {n_out}")
            h = (h + 2 * layer.pad - kh) // layer.stride + 1
            w = (w + 2 * layer.pad - kw) // layer.stride + 1
            if h <= 0 or w <= 0:
                violations.append(f"{layer.name}: spatial size collapsed to {h}x{w}")
            c = n_out
            prev = layer.name
        elif layer.kind == "pool":
            if h % layer.size or w % layer.size:
                violations.append(f"pool after {prev}: window {layer.size} "
                                  f"does not divide {h}x{w}")
            h, w = h // layer.size, w // layer.size
        elif layer.kind == "flatten":
            flat_width = c * h * w
            prev = "flatten"
        elif layer.kind == "dense":
            expected = flat_width if flat_width is not None else None
            if expected is not None and layer.w.shape[1] != expected:
                violations.append(
                    f"{layer.name}: input width {layer.w.shape[1]} but {prev} "
                    f"provides {expected}")
            if layer.b.shape != (layer.w.shape[0],):
                violations.append(
                    f"{layer.name}: bias length {layer.b.shape[0]} != {layer.w.shape[0]}")
            flat_width = layer.w.shape[0]
            prev = layer.name
    return violations
