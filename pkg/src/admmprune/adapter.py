"""Uniform access to a trainable classifier: named conv layers, weight get/set,
SGD steps with injectable extra gradient terms, evaluation, and checkpoints.

Everything downstream (sparsity training, criteria, surgery, pipelines) talks
to models through this module, so the tensor substrate stays a private detail
of ``layers``/``network``.
"""

from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import (CheckpointError, NumericError, ShapeError, StructureError,
                     UnknownLayerError)
from .layers import DTYPE
from .models import ArchitectureSpec, build_model
from .network import Network

CHECKPOINT_FORMAT_VERSION = 1
_TENSOR_MAGIC = b"FT32"


@dataclass(frozen=True)
class FilterTensor:
    """One conv layer's 4-D weight array [n_out, n_in, kh, kw] plus its id."""

    data: np.ndarray
    layer_id: str

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"{self.layer_id}: filter tensor must be 4-D, got {self.data.ndim}-D")
        if min(self.data.shape) < 1:
            raise ShapeError(f"{self.layer_id}: degenerate shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError(f"{self.layer_id}: non-finite filter weights",
                               layer_id=self.layer_id)

    @property
    def n_filters(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LayerHandle:
    layer_id: str
    n_filters: int
    successor_kind: str  # "conv" | "flatten-to-dense" | "none"
    has_bias: bool


def list_conv_layers(model: Network) -> list[LayerHandle]:
    """All conv layers in forward order, with their successor kind."""
    handles = []
    layers = model.layers
    conv_positions = [i for i, l in enumerate(layers) if l.kind == "conv"]
    if not conv_positions:
        raise StructureError("model has no conv layers")
    for pos in conv_positions:
        succ = "none"
        for nxt in layers[pos + 1:]:
            if nxt.kind == "conv":
                succ = "conv"
                break
            if nxt.kind == "flatten":
                succ = "flatten-to-dense"
                break
        conv = layers[pos]
        handles.append(LayerHandle(layer_id=conv.name, n_filters=conv.w.shape[0],
                                   successor_kind=succ, has_bias=True))
    return handles


def get_weights(model: Network, layer_id: str) -> FilterTensor:
    conv = model.conv_layer(layer_id)
    return FilterTensor(data=conv.w.copy(), layer_id=layer_id)


def set_weights(model: Network, layer_id: str, tensor) -> None:
    """Replace one conv layer's weights; other layers are untouched."""
    conv = model.conv_layer(layer_id)
    data = tensor.data if isinstance(tensor, FilterTensor) else np.asarray(tensor)
    if isinstance(tensor, FilterTensor) and tensor.layer_id != layer_id:
        raise UnknownLayerError(
            f"tensor is tagged {tensor.layer_id!r}, target is {layer_id!r}")
    if data.shape != conv.w.shape:
        raise ShapeError(f"{layer_id}: shape {data.shape} != current {conv.w.shape}")
    if not np.isfinite(data).all():
        raise NumericError(f"{layer_id}: non-finite weights", layer_id=layer_id)
    conv.w = data.astype(DTYPE, copy=True)


def train_step(model: Network, batch, learning_rate: float,
               extra_grads: dict | None = None, weight_decay: float = 0.0) -> float:
    """One SGD step: P <- P - lr * (dLoss/dP + extra_grad_P).

    ``extra_grads`` maps conv layer ids to arrays added to that layer's weight
    gradient (the ADMM regularizer term); absent layers get zero. The returned
    loss is the pre-update cross-entropy plus the weight-decay penalty.
    """
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    extra = dict(extra_grads or {})
    loss = model.loss_and_grads(x, y)
    if weight_decay:
        penalty = 0.0
        for l in model.param_layers():
            penalty += float(np.sum(l.w.astype(np.float64) ** 2))
            l.grad_w += weight_decay * l.w
        loss += 0.5 * weight_decay * penalty
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss ({loss})", layer_id=_first_bad_layer(model))
    for l in model.param_layers():
        if l.kind == "conv" and l.name in extra:
            g = extra.pop(l.name)
            g = g.data if isinstance(g, FilterTensor) else np.asarray(g)
            if g.shape != l.w.shape:
                raise ShapeError(f"extra grad for {l.name}: {g.shape} != {l.w.shape}")
            l.grad_w += g
        l.w -= learning_rate * l.grad_w
        l.b -= learning_rate * l.grad_b
    if extra:
        raise UnknownLayerError(f"extra_grads for unknown conv layers: {sorted(extra)}")
    return float(loss)


def _first_bad_layer(model: Network) -> str | None:
    for l in model.param_layers():
        if l.grad_w is not None and not np.isfinite(l.grad_w).all():
            return l.name
    return None


def evaluate(model: Network, dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions; deterministic for fixed inputs."""
    if hasattr(dataset, "eval_batches"):
        batches = dataset.eval_batches(batch_size)
    else:
        batches = iter(dataset)
    correct = 0
    total = 0
    for x, y in batches:
        pred = model.predict(x)
        correct += int((pred == y).sum())
        total += len(y)
    if total == 0:
        raise ValueError("evaluate: empty dataset")
    return correct / total


# ------------------------------------------------------------- checkpointing

def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = _TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def _unpack_tensor(raw: bytes, name: str) -> np.ndarray:
    if raw[:4] != _TENSOR_MAGIC:
        raise CheckpointError(f"tensor {name}: bad magic {raw[:4]!r}")
    ndim = struct.unpack("<I", raw[4:8])[0]
    shape = struct.unpack(f"<{ndim}I", raw[8:8 + 4 * ndim])
    data = np.frombuffer(raw[8 + 4 * ndim:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name}: payload/shape mismatch")
    return data.reshape(shape).copy()


def save_checkpoint(model: Network, path, metadata: dict, admm_state=None) -> None:
    """Write a single-archive checkpoint (manifest + portable tensors).

    ``metadata`` must provide architecture/stage/seed/epoch; extra string
    keys are preserved. When ``admm_state`` is given its Z/U tensors and
    iteration counter are embedded so sparsity training can resume.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.arch.name if model.arch else "custom",
    }
    meta.update(metadata)
    manifest = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.txt", manifest)
        if model.arch is not None:
            zf.writestr("arch.json", json.dumps(model.arch.to_dict(), indent=1))
        for name, arr in sorted(model.named_tensors().items()):
            zf.writestr(f"tensors/{name}", _pack_tensor(arr))
        if admm_state is not None:
            zf.writestr("admm.json", json.dumps(admm_state.meta_dict(), indent=1))
            for layer_id in sorted(admm_state.z):
                zf.writestr(f"tensors/admm.{layer_id}.z", _pack_tensor(admm_state.z[layer_id]))
                zf.writestr(f"tensors/admm.{layer_id}.u", _pack_tensor(admm_state.u[layer_id]))


def load_checkpoint(path, expect_architecture: str | None = None):
    """Load (model, metadata, admm_state-or-None) from a checkpoint archive."""
    from .admm import AdmmState, LayerSparsitySpec  # local import avoids a cycle

    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        bad = zf.testzip()
        if bad is not None:
            raise CheckpointError(f"corrupt checkpoint member: {bad}")
        names = set(zf.namelist())
        for required in ("manifest.txt", "arch.json"):
            if required not in names:
                raise CheckpointError(f"checkpoint missing {required}")
        metadata = {}
        for line in zf.read("manifest.txt").decode().splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                metadata[k] = v
        if expect_architecture and metadata.get("architecture") != expect_architecture:
            raise StructureError(
                f"checkpoint holds {metadata.get('architecture')!r}, "
                f"expected {expect_architecture!r}")
        spec = ArchitectureSpec.from_dict(json.loads(zf.read("arch.json")))
        model = build_model(spec, seed=0)
        for name, arr in model.named_tensors().items():
            member = f"tensors/{name}"
            if member not in names:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            stored = _unpack_tensor(zf.read(member), name)
            if stored.shape != arr.shape:
                raise StructureError(
                    f"tensor {name}: stored {stored.shape} != architecture {arr.shape}")
            arr[...] = stored
        state = None
        if "admm.json" in names:
            meta = json.loads(zf.read("admm.json"))
            specs = {s["layer_id"]: LayerSparsitySpec(**s) for s in meta["specs"]}
            z = {}
            u = {}
            for layer_id in specs:
                z[layer_id] = _unpack_tensor(zf.read(f"tensors/admm.{layer_id}.z"), "z")
                u[layer_id] = _unpack_tensor(zf.read(f"tensors/admm.{layer_id}.u"), "u")
            state = AdmmState(z=z, u=u, specs=specs, norm=meta["norm"],
                              iteration=meta["iteration"])
    return model, metadata, state
