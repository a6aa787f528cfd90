"""Sequential classifier container built from the layer zoo.

A ``Network`` is a plain list of layers plus enough bookkeeping to rebuild it
from a checkpoint (architecture spec, class count, input shape). Conv layers
are the unit every other module works on; they are addressed by ``layer.name``
(``conv1``, ``conv2``, ...).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StructureError
from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU, softmax_cross_entropy


class Network:
    def __init__(self, layers, input_shape, n_classes, arch=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.arch = arch  # ArchitectureSpec used to build this net, if any

    # ------------------------------------------------------------------ core

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Forward + backward on one batch; leaves grads on the layers."""
        logits = self.forward(x, cache=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x, cache=False), axis=1)

    # ------------------------------------------------------- introspection

    def conv_layers(self) -> list[Conv2d]:
        return [l for l in self.layers if l.kind == "conv"]

    def conv_layer(self, layer_id: str) -> Conv2d:
        for l in self.layers:
            if l.kind == "conv" and l.name == layer_id:
                return l
        from .errors import UnknownLayerError

        raise UnknownLayerError(f"no conv layer named {layer_id!r}")

    def param_layers(self):
        return [l for l in self.layers if l.kind in ("conv", "dense")]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Checkpoint view: weight and bias arrays keyed by layer name."""
        out = {}
        for l in self.param_layers():
            out[f"{l.name}.w"] = l.w
            out[f"{l.name}.b"] = l.b
        return out

    def parameter_count(self) -> int:
        return int(sum(l.w.size + l.b.size for l in self.param_layers()))

    def shapes_along(self) -> list[tuple]:
        """(C, H, W) after every layer, starting from the input shape.

        Raises StructureError if a conv/pool stage produces a non-positive
        spatial size; weight-vs-channel disagreements are reported by
        ``surgery.validate_structure`` instead of raised here.
        """
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        flat = None
        for l in self.layers:
            if l.kind == "conv":
                h, w = l.out_spatial(h, w)
                if h <= 0 or w <= 0:
                    raise StructureError(f"{l.name}: spatial size collapsed to {h}x{w}")
                c = l.w.shape[0]
            elif l.kind == "pool":
                h, w = h // l.size, w // l.size
            elif l.kind == "flatten":
                flat = c * h * w
            elif l.kind == "dense":
                flat = l.w.shape[0]
            if l.kind in ("flatten", "dense"):
                shapes.append((flat,))
            else:
                shapes.append((c, h, w))
        return shapes

    def flatten_boundary(self) -> tuple[str, int, int]:
        """(last conv id, channels, spatial positions per channel) at Flatten.

        The first dense layer consumes channels*positions inputs laid out
        row-major by (channel, height, width).
        """
        c, h, w = self.input_shape
        last_conv = None
        for l in self.layers:
            if l.kind == "conv":
                h, w = l.out_spatial(h, w)
                c = l.w.shape[0]
                last_conv = l.name
            elif l.kind == "pool":
                h, w = h // l.size, w // l.size
            elif l.kind == "flatten":
                if last_conv is None:
                    raise StructureError("flatten with no preceding conv layer")
                return last_conv, c, h * w
        raise StructureError("network has no flatten boundary")

    # ------------------------------------------------------------- copying

    def clone(self) -> "Network":
        return Network([l.clone() for l in self.layers], self.input_shape,
                       self.n_classes, arch=self.arch)

    # -------------------------------------------------- activation capture

    def conv_stats(self, x: np.ndarray, labels: np.ndarray | None = None) -> dict:
        """Post-ReLU activation maps (and their loss gradients) per conv layer.

        Returns {layer_id: (act, grad)} where ``act`` is the ReLU output of
        shape [N, n_filters, H, W] and ``grad`` is dLoss/d(act) for the
        mean-reduced cross-entropy (None when ``labels`` is None). Parameters
        are not updated.
        """
        conv_relus = [l for l in self.layers if l.kind == "relu" and l.source]
        for r in conv_relus:
            r.capture = True
            r.act = None
            r.grad_out = None
        try:
            logits = self.forward(x, cache=True)
            if labels is not None:
                _, dlogits = softmax_cross_entropy(logits, labels)
                self.backward(dlogits)
        finally:
            for r in conv_relus:
                r.capture = False
        return {r.source: (r.act, r.grad_out) for r in conv_relus}


def build_layers(input_shape, conv_blocks, dense_widths, n_classes,
                 rng: np.random.Generator) -> list:
    """Assemble conv/relu/pool blocks, a flatten, and the dense head."""
    c, h, w = input_shape
    layers = []
    for i, blk in enumerate(conv_blocks, start=1):
        name = f"conv{i}"
        conv = Conv2d(name, c, blk.filters, blk.kernel, stride=blk.stride,
                      pad=blk.pad, rng=rng)
        layers.append(conv)
        layers.append(ReLU(source=name))
        h, w = conv.out_spatial(h, w)
        if h <= 0 or w <= 0:
            raise StructureError(f"{name}: spatial size collapsed to {h}x{w}")
        c = blk.filters
        if blk.pool:
            if h % blk.pool or w % blk.pool:
                raise StructureError(
                    f"{name}: pool {blk.pool} does not divide {h}x{w}")
            layers.append(MaxPool2d(blk.pool))
            h, w = h // blk.pool, w // blk.pool
    layers.append(Flatten())
    width = c * h * w
    for j, dw in enumerate(dense_widths, start=1):
        layers.append(Dense(f"fc{j}", width, dw, rng=rng))
        layers.append(ReLU())
        width = dw
    layers.append(Dense(f"fc{len(dense_widths) + 1}", width, n_classes, rng=rng))
    return layers
