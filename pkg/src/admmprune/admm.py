"""ADMM building blocks for cardinality-constrained sparsity training.

The constrained problem "minimize loss subject to at most B nonzero filters
per conv layer" is split into a differentiable subproblem (the quadratic
regularizer whose gradient ``admm_regularizer`` returns) and a projection
subproblem with the closed-form solution ``project_cardinality``. A scaled
dual tensor U accumulates the running constraint violation W - Z.

All functions here are pure tensor-in/tensor-out; the training loop that owns
an ``AdmmState`` is the only writer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NumericError, PruneSpecError, ShapeError

DEFAULT_RHO = 1e-2
DEFAULT_EPS_PER_ELEMENT = 1e-3
FILTER = "filter"
WEIGHT = "weight"


def round_half_up(x: float) -> int:
    """round() with deterministic .5-away-from-zero ties (not banker's)."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class LayerSparsitySpec:
    """Per-layer sparsity contract: keep ``keep_count`` filters (or weights).

    ``keep_count`` is n - round(prune_rate * n), clamped to at least 1, where
    n is the filter count (granularity "filter") or the element count
    (granularity "weight"). ``tolerance`` bounds the squared Frobenius
    distances in the stopping test; ``penalty`` is the quadratic coupling
    strength rho.
    """

    layer_id: str
    prune_rate: float
    keep_count: int
    tolerance: float
    penalty: float
    granularity: str = FILTER

    def __post_init__(self):
        if not (0.0 <= self.prune_rate < 1.0):
            raise PruneSpecError(f"{self.layer_id}: prune_rate {self.prune_rate} not in [0, 1)")
        if self.keep_count < 1:
            raise PruneSpecError(f"{self.layer_id}: keep_count must be >= 1")
        if not (np.isfinite(self.tolerance) and self.tolerance > 0):
            raise PruneSpecError(f"{self.layer_id}: tolerance must be positive and finite")
        if not (np.isfinite(self.penalty) and self.penalty > 0):
            raise PruneSpecError(f"{self.layer_id}: penalty must be positive and finite")
        if self.granularity not in (FILTER, WEIGHT):
            raise PruneSpecError(f"{self.layer_id}: granularity {self.granularity!r}")


def make_layer_spec(layer_id: str, shape, prune_rate: float,
                    penalty: float = DEFAULT_RHO, tolerance: float | None = None,
                    granularity: str = FILTER,
                    eps_per_element: float = DEFAULT_EPS_PER_ELEMENT) -> LayerSparsitySpec:
    """Derive a LayerSparsitySpec from a weight shape and a prune rate.

    The default tolerance scales with the element count so the stopping test
    stays meaningful across layers of very different sizes.
    """
    shape = tuple(shape)
    n_elements = int(np.prod(shape))
    n_units = shape[0] if granularity == FILTER else n_elements
    keep = max(1, n_units - round_half_up(prune_rate * n_units))
    if tolerance is None:
        tolerance = eps_per_element * n_elements
    return LayerSparsitySpec(layer_id=layer_id, prune_rate=prune_rate,
                             keep_count=keep, tolerance=float(tolerance),
                             penalty=float(penalty), granularity=granularity)


@dataclass
class AdmmState:
    """Auxiliary (Z) and scaled dual (U) tensors plus the outer iteration k."""

    z: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    specs: dict[str, LayerSparsitySpec]
    norm: str = "l1"
    iteration: int = 0

    def meta_dict(self) -> dict:
        return {"iteration": self.iteration, "norm": self.norm,
                "specs": [asdict(s) for s in self.specs.values()]}


def filter_norms(t: np.ndarray, norm: str = "l1") -> np.ndarray:
    """Per-filter l1 or l2 norm of a 4-D weight tensor (bias excluded)."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeError(f"filter_norms expects 4-D, got {t.ndim}-D")
    if not np.isfinite(t).all():
        raise NumericError("filter_norms: non-finite input")
    if norm == "l1":
        return np.abs(t).sum(axis=(1, 2, 3), dtype=np.float64)
    if norm == "l2":
        return np.sqrt((t.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
    raise ValueError(f"unknown norm {norm!r}")


def project_cardinality(t: np.ndarray, spec: LayerSparsitySpec,
                        norm: str = "l1") -> np.ndarray:
    """Nearest member of the cardinality set: keep the top-keep_count units.

    Filter granularity keeps the filters of largest ``norm``; weight
    granularity keeps the elements of largest magnitude. Kept entries are
    copied bit-exactly, everything else becomes zero. Ties keep the lower
    index, stably.
    """
    t = np.asarray(t)
    out = np.zeros_like(t)
    if spec.granularity == FILTER:
        if spec.keep_count > t.shape[0]:
            raise PruneSpecError(
                f"{spec.layer_id}: keep_count {spec.keep_count} > {t.shape[0]} filters")
        scores = filter_norms(t, norm)
        order = np.argsort(-scores, kind="stable")
        keep = order[:spec.keep_count]
        out[keep] = t[keep]
    else:
        flat = t.reshape(-1)
        if spec.keep_count > flat.size:
            raise PruneSpecError(
                f"{spec.layer_id}: keep_count {spec.keep_count} > {flat.size} elements")
        order = np.argsort(-np.abs(flat), kind="stable")
        keep = order[:spec.keep_count]
        out.reshape(-1)[keep] = flat[keep]
    return out


def admm_regularizer(w: np.ndarray, z: np.ndarray, u: np.ndarray, rho: float):
    """Quadratic coupling term: returns (grad, penalty).

    penalty = (rho/2) * ||W - Z + U||_F^2 and grad = rho * (W - Z + U) is its
    exact derivative w.r.t. W.
    """
    if not (w.shape == z.shape == u.shape):
        raise ShapeError(f"shape mismatch: W{w.shape} Z{z.shape} U{u.shape}")
    d = w - z + u
    grad = rho * d
    penalty = 0.5 * rho * float(np.sum(d.astype(np.float64) ** 2))
    return grad, penalty


def step_z(w: np.ndarray, u: np.ndarray, spec: LayerSparsitySpec,
           norm: str = "l1") -> np.ndarray:
    """Auxiliary update: project W + U onto the cardinality set."""
    if w.shape != u.shape:
        raise ShapeError(f"shape mismatch: W{w.shape} U{u.shape}")
    return project_cardinality(w + u, spec, norm)


def step_u(u: np.ndarray, w_next: np.ndarray, z_next: np.ndarray) -> np.ndarray:
    """Scaled dual update: U + W - Z, elementwise."""
    if not (u.shape == w_next.shape == z_next.shape):
        raise ShapeError(f"shape mismatch: U{u.shape} W{w_next.shape} Z{z_next.shape}")
    return (u + w_next) - z_next


def squared_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_F^2 with a float64 accumulator."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).astype(np.float64)
    return float(np.sum(d * d))


def converged(w: np.ndarray, z: np.ndarray, z_prev: np.ndarray, eps: float,
              mode: str = "both") -> bool:
    """Stopping test on the squared primal distance and the Z movement.

    mode="both" requires ||W-Z||_F^2 <= eps and ||Z-Z_prev||_F^2 <= eps
    (non-strict at the boundary); mode="either" accepts one of the two.
    """
    primal = squared_frobenius(w, z) <= eps
    drift = squared_frobenius(z, z_prev) <= eps
    if mode == "both":
        return primal and drift
    if mode == "either":
        return primal or drift
    raise ValueError(f"unknown convergence mode {mode!r}")


def init_state(model, specs, norm: str = "l1") -> AdmmState:
    """Project each layer's weights for Z, zero U, reset the counter."""
    if not isinstance(specs, dict):
        specs = {s.layer_id: s for s in specs}
    conv_ids = [l.name for l in model.conv_layers()]
    if sorted(specs) != sorted(conv_ids):
        raise ConfigError(
            f"specs cover {sorted(specs)} but model has conv layers {sorted(conv_ids)}")
    z = {}
    u = {}
    for layer in model.conv_layers():
        z[layer.name] = project_cardinality(layer.w, specs[layer.name], norm)
        u[layer.name] = np.zeros_like(layer.w)
    return AdmmState(z=z, u=u, specs=specs, norm=norm, iteration=0)
