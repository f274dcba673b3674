"""Dense numerical core: shared feature trunk with two classification heads.

The trunk is two per-pixel affine layers with ReLU (1x1 receptive field), each
head one affine layer followed by a row-wise softmax. Gradients are derived
analytically; ``grad_check`` verifies them against central finite differences.

Layer sharing between the class head ("cls") and the subclass head ("sub") is
controlled by ``share_mode``:

* ``all``  - both trunk layers shared,
* ``low``  - first trunk layer shared, second duplicated per head,
* ``none`` - fully duplicated trunks.

Parameters are stored as a flat name -> array dict so that gradients, momentum
buffers, finite differences, and serialization all walk the same canonical
ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError
from .grids import FeatureGrid, LabelGrid, ProbGrid

SHARE_MODES = ("none", "low", "all")
HEADS = ("cls", "sub")
PROB_FLOOR = 1e-12
PARAMS_MAGIC = b"USRNPM1"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    # biases drawn from the same symmetric range: keeps dead-input pixels off
    # the exact ReLU kink, where finite differences are undefined
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)), rng.uniform(-a, a, size=fan_out)


def _layer_plan(share_mode: str) -> dict[str, list[str]]:
    """Trunk layer-name sequence for each head, first layer to last."""
    if share_mode == "all":
        return {"cls": ["trunk0", "trunk1"], "sub": ["trunk0", "trunk1"]}
    if share_mode == "low":
        return {"cls": ["trunk0", "cls1"], "sub": ["trunk0", "sub1"]}
    if share_mode == "none":
        return {"cls": ["cls0", "cls1"], "sub": ["sub0", "sub1"]}
    raise ConfigurationError(f"share_mode must be one of {SHARE_MODES}, got {share_mode!r}")


@dataclass
class ModelParams:
    """Trunk + two head parameter sets, keyed by canonical layer names."""

    share_mode: str
    in_dim: int
    trunk_width: int
    num_classes: int
    num_subclasses: int
    arrays: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        _layer_plan(self.share_mode)  # validates mode
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"parameter {name!r} contains non-finite values")
        unknown = set(self.frozen) - set(self.arrays)
        if unknown:
            raise ConfigurationError(f"frozen names not present in params: {sorted(unknown)}")

    def names(self) -> list[str]:
        return list(self.arrays)

    def trunk_layers(self, head: str) -> list[str]:
        if head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {head!r}")
        return _layer_plan(self.share_mode)[head]

    def head_layer(self, head: str) -> str:
        return "head_cls" if head == "cls" else "head_sub"

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.share_mode, self.in_dim, self.trunk_width,
            self.num_classes, self.num_subclasses,
            {k: v.copy() for k, v in self.arrays.items()}, self.frozen,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(in_dim: int, trunk_width: int, num_classes: int, num_subclasses: int,
                share_mode: str = "low", seed: int = 0) -> ModelParams:
    """Seeded symmetric-uniform init, range sqrt(6/(fan_in+fan_out)) per layer."""
    if min(in_dim, trunk_width, num_classes, num_subclasses) < 1:
        raise ConfigurationError("all model dimensions must be >= 1")
    plan = _layer_plan(share_mode)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    # fixed creation order keeps init bit-reproducible across runs
    trunk_names = sorted({name for path in plan.values() for name in path},
                         key=lambda n: (n[-1], n[:-1]))
    for name in trunk_names:
        fan_in = in_dim if name.endswith("0") else trunk_width
        arrays[f"{name}.W"], arrays[f"{name}.b"] = _glorot(rng, fan_in, trunk_width)
    for head, out in (("cls", num_classes), ("sub", num_subclasses)):
        arrays[f"head_{head}.W"], arrays[f"head_{head}.b"] = _glorot(rng, trunk_width, out)
    return ModelParams(share_mode, in_dim, trunk_width, num_classes, num_subclasses, arrays)


@dataclass
class GradientSet:
    """Accumulated partial derivatives, shape-congruent with a ModelParams."""

    arrays: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "GradientSet":
        return cls(params.zeros_like())

    def add_(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for name, arr in other.arrays.items():
            self.arrays[name] += scale * arr
        return self

    def scale_(self, factor: float) -> "GradientSet":
        for arr in self.arrays.values():
            arr *= factor
        return self

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) if a.size else 0.0) for a in self.arrays.values())

    def congruent_with(self, params: ModelParams) -> bool:
        return (set(self.arrays) == set(params.arrays)
                and all(self.arrays[k].shape == params.arrays[k].shape for k in self.arrays))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(params: ModelParams, grid: FeatureGrid) -> None:
    if grid.dim != params.in_dim:
        raise ConfigurationError(f"input dim {grid.dim} does not match trunk input dim {params.in_dim}")


def _forward_flat(params: ModelParams, grid: FeatureGrid, head: str):
    """Run the pixel MLP; returns (probs, caches) with caches holding each layer input."""
    _check_input(params, grid)
    x = grid.data.reshape(-1, params.in_dim)
    caches = []
    for name in params.trunk_layers(head):
        caches.append(x)
        x = np.maximum(x @ params.arrays[f"{name}.W"] + params.arrays[f"{name}.b"], 0.0)
    caches.append(x)
    hname = params.head_layer(head)
    logits = x @ params.arrays[f"{hname}.W"] + params.arrays[f"{hname}.b"]
    if not np.all(np.isfinite(logits)):
        raise NumericalError("forward pass produced non-finite logits")
    return softmax_rows(logits), caches


def forward(params: ModelParams, grid: FeatureGrid, head: str) -> ProbGrid:
    """Per-pixel class (head="cls") or subclass (head="sub") probabilities."""
    probs, _ = _forward_flat(params, grid, head)
    k = params.num_classes if head == "cls" else params.num_subclasses
    return ProbGrid(probs.reshape(grid.height, grid.width, k))


def trunk_features(params: ModelParams, grid: FeatureGrid, head: str = "cls") -> np.ndarray:
    """Last-trunk-layer activations, shape (H, W, trunk_width)."""
    _check_input(params, grid)
    x = grid.data.reshape(-1, params.in_dim)
    for name in params.trunk_layers(head):
        x = np.maximum(x @ params.arrays[f"{name}.W"] + params.arrays[f"{name}.b"], 0.0)
    return x.reshape(grid.height, grid.width, params.trunk_width)


@dataclass
class LossValue:
    """Scalar loss plus the number of pixels that contributed."""

    value: float
    pixels: int

    @property
    def empty(self) -> bool:
        return self.pixels == 0


def cross_entropy(pred: ProbGrid, target: LabelGrid) -> LossValue:
    """Mean -log p[target] over non-IGNORE pixels; 0 with empty flag if none."""
    if (pred.height, pred.width) != (target.height, target.width):
        raise DataError(f"pred {pred.height}x{pred.width} and target {target.height}x{target.width} differ")
    if target.num_classes != pred.classes:
        raise DataError(f"target indexes {target.num_classes} classes but pred has {pred.classes}")
    mask = target.valid_mask()
    n = int(mask.sum())
    if n == 0:
        return LossValue(0.0, 0)
    flat_p = pred.data.reshape(-1, pred.classes)
    flat_t = target.data.reshape(-1)
    keep = mask.reshape(-1)
    picked = flat_p[np.flatnonzero(keep), flat_t[keep]]
    losses = -np.log(np.maximum(picked, PROB_FLOOR))
    return LossValue(float(losses.sum() / n), n)


def ce_loss_and_grad(params: ModelParams, grid: FeatureGrid, target: LabelGrid,
                     head: str, weight: float = 1.0) -> tuple[LossValue, GradientSet]:
    """Value and analytic gradient of weight * cross_entropy(forward(...), target)."""
    probs, caches = _forward_flat(params, grid, head)
    k = probs.shape[1]
    pg = ProbGrid(probs.reshape(grid.height, grid.width, k))
    loss = cross_entropy(pg, target)
    grads = GradientSet.zeros(params)
    if weight == 0.0 or loss.empty:
        return LossValue(weight * loss.value, loss.pixels), grads

    flat_t = target.data.reshape(-1)
    keep = target.valid_mask().reshape(-1)
    # softmax + CE: dL/dlogits = (p - onehot) / n at contributing pixels
    dlogits = probs.copy()
    rows = np.flatnonzero(keep)
    dlogits[rows, flat_t[rows]] -= 1.0
    dlogits[~keep] = 0.0
    dlogits *= weight / loss.pixels

    hname = params.head_layer(head)
    grads.arrays[f"{hname}.W"][:] = caches[-1].T @ dlogits
    grads.arrays[f"{hname}.b"][:] = dlogits.sum(axis=0)
    dx = dlogits @ params.arrays[f"{hname}.W"].T
    trunk = params.trunk_layers(head)
    for i in range(len(trunk) - 1, -1, -1):
        name = trunk[i]
        x_in = caches[i]
        # caches[i+1] is this layer's ReLU output; its positivity is the ReLU mask
        dz = dx * (caches[i + 1] > 0.0)
        grads.arrays[f"{name}.W"][:] += x_in.T @ dz
        grads.arrays[f"{name}.b"][:] += dz.sum(axis=0)
        if i > 0:
            dx = dz @ params.arrays[f"{name}.W"].T
    for name in params.frozen:
        grads.arrays[name][:] = 0.0
    return LossValue(weight * loss.value, loss.pixels), grads


def backward(params: ModelParams, grid: FeatureGrid, target: LabelGrid,
             head: str, weight: float = 1.0) -> GradientSet:
    """Analytic gradient of weight * cross-entropy; frozen entries stay zero."""
    _, grads = ce_loss_and_grad(params, grid, target, head, weight)
    return grads


@dataclass
class SgdState:
    """Momentum buffers, shape-congruent with the params they update."""

    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "SgdState":
        return cls(params.zeros_like())


def sgd_step(params: ModelParams, grads: GradientSet, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4, state: SgdState | None = None) -> tuple[ModelParams, SgdState]:
    """One SGD update with momentum and decoupled weight decay.

    v <- momentum * v + g;  p <- p - lr * v - lr * weight_decay * p.
    Frozen parameters are left untouched. Deterministic.
    """
    if lr <= 0:
        raise ConfigurationError(f"lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ConfigurationError(f"weight_decay must be >= 0, got {weight_decay}")
    if not grads.congruent_with(params):
        raise ConfigurationError("gradient set is not shape-congruent with params")
    for name, g in grads.arrays.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}; aborting step")
    if state is None:
        state = SgdState.zeros(params)
    new = params.copy()
    for name in params.arrays:
        v = momentum * state.velocity[name] + grads.arrays[name]
        state.velocity[name] = v
        if name in params.frozen:
            continue
        new.arrays[name] -= lr * v + lr * weight_decay * params.arrays[name]
    return new, state


def grad_check(params: ModelParams, grid: FeatureGrid, target: LabelGrid,
               head: str, step: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences.

    Relative error per parameter: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    _, analytic = ce_loss_and_grad(params, grid, target, head, 1.0)
    worst = 0.0
    work = params.copy()
    for name in work.arrays:
        if name in params.frozen:
            continue
        arr = work.arrays[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = cross_entropy(forward(work, grid, head), target).value
            arr[idx] = orig - step
            down = cross_entropy(forward(work, grid, head), target).value
            arr[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic.arrays[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def save_params(params: ModelParams, path) -> None:
    """Flat binary: magic "USRNPM1", u32 array count, per-array name+shape header,
    then little-endian float64 payloads in header order."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(params.arrays)))
        for name, arr in params.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in params.arrays.values():
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    """Inverse of save_params; share_mode is inferred from the layer names."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise DataError("bad magic; not a params file")
    off = len(PARAMS_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        shapes.append((name, tuple(shape)))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    names = set(arrays)
    if "cls0.W" in names:
        share_mode = "none"
    elif "cls1.W" in names:
        share_mode = "low"
    else:
        share_mode = "all"
    first = "trunk0.W" if share_mode in ("low", "all") else "cls0.W"
    return ModelParams(
        share_mode=share_mode,
        in_dim=arrays[first].shape[0],
        trunk_width=arrays[first].shape[1],
        num_classes=arrays["head_cls.b"].shape[0],
        num_subclasses=arrays["head_sub.b"].shape[0],
        arrays=arrays,
    )
