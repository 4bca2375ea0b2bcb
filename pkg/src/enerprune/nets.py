"""Minimal dense CNN engine: layer geometry, forward/backward, evaluation.

Every CONV/FC layer is evaluated as a matrix product: the input feature
maps are rearranged into a patch matrix X (one row per output position,
one column per weight of a filter), so the layer output is X @ A + bias.
FC layers are the special case with a filter covering the whole input.

All tensor math runs in float32 by default; pass dtype=np.float64 where
extra precision is needed (e.g. finite-difference gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import NumericError, ShapeError

CONV = "CONV"
FC = "FC"


@dataclass(frozen=True)
class LayerShape:
    """Geometric configuration of one CONV or FC layer."""

    kind: str  # CONV or FC
    in_h: int
    in_w: int
    in_c: int
    filt_h: int
    filt_w: int
    num_filters: int
    stride: int = 1
    pad: int = 0
    batch: int = 1

    def __post_init__(self) -> None:
        if self.kind not in (CONV, FC):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        for name in ("in_h", "in_w", "in_c", "filt_h", "filt_w", "stride", "batch"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_filters < 0:
            raise ShapeError(f"num_filters must be >= 0, got {self.num_filters}")
        if self.pad < 0:
            raise ShapeError(f"pad must be >= 0, got {self.pad}")
        if self.kind == FC and (
            self.filt_h != self.in_h
            or self.filt_w != self.in_w
            or self.stride != 1
            or self.pad != 0
        ):
            raise ShapeError("FC layer requires filt == input extent, stride 1, pad 0")
        if self.out_h < 1 or self.out_w < 1:
            raise ShapeError(
                f"filter {self.filt_h}x{self.filt_w} stride {self.stride} does not fit "
                f"input {self.in_h}x{self.in_w} pad {self.pad}"
            )

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad - self.filt_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad - self.filt_w) // self.stride + 1

    @property
    def m(self) -> int:
        """Weights per filter."""
        return self.filt_h * self.filt_w * self.in_c

    @property
    def n(self) -> int:
        return self.num_filters

    def with_batch(self, batch: int) -> "LayerShape":
        return replace(self, batch=batch)


@dataclass(frozen=True)
class PostOp:
    """Element-wise nonlinearity plus optional max-pooling after a layer."""

    relu: bool = False
    pool_size: int = 0  # 0 = no pooling
    pool_stride: int = 0  # defaults to pool_size (non-overlapping)

    def __post_init__(self) -> None:
        if self.pool_size and not self.pool_stride:
            object.__setattr__(self, "pool_stride", self.pool_size)
        if self.pool_size < 0 or self.pool_stride < 0:
            raise ShapeError("pool parameters must be >= 0")
        if self.pool_size and not self.relu:
            raise ShapeError("pooling is only supported after ReLU")

    @property
    def name(self) -> str:
        if self.pool_size:
            return f"relu+maxpool({self.pool_size},{self.pool_stride})"
        return "relu" if self.relu else "identity"

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if not self.pool_size:
            return h, w
        oh = (h - self.pool_size) // self.pool_stride + 1
        ow = (w - self.pool_size) // self.pool_stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool {self.pool_size}/{self.pool_stride} does not fit {h}x{w}")
        return oh, ow


IDENTITY = PostOp()
RELU = PostOp(relu=True)


def relu_pool(size: int, stride: int = 0) -> PostOp:
    return PostOp(relu=True, pool_size=size, pool_stride=stride or size)


def post_op_from_name(name: str) -> PostOp:
    """Parse 'identity', 'relu' or 'relu+maxpool(p,s)'."""
    name = name.strip().lower()
    if name == "identity":
        return IDENTITY
    if name == "relu":
        return RELU
    if name.startswith("relu+maxpool(") and name.endswith(")"):
        parts = name[len("relu+maxpool(") : -1].split(",")
        nums = [int(p) for p in parts]
        if len(nums) == 1:
            return relu_pool(nums[0])
        if len(nums) == 2:
            return relu_pool(nums[0], nums[1])
    raise ShapeError(f"unknown post-op {name!r}")


@dataclass
class FilterBank:
    """Weights of one layer: matrix A (m x n), bias (n,), retained-weight mask."""

    shape: LayerShape
    weights: np.ndarray  # (m, n), column i = filter i
    bias: np.ndarray  # (n,)
    mask: np.ndarray  # (m, n) bool, False => weight pinned to zero

    def __post_init__(self) -> None:
        m, n = self.shape.m, self.shape.n
        if self.weights.shape != (m, n):
            raise ShapeError(f"weights must be {(m, n)}, got {self.weights.shape}")
        if self.bias.shape != (n,):
            raise ShapeError(f"bias must be ({n},), got {self.bias.shape}")
        if self.mask.shape != (m, n):
            raise ShapeError(f"mask must be {(m, n)}, got {self.mask.shape}")

    @property
    def nnz(self) -> int:
        return int(self.mask.sum())

    @property
    def compression_ratio(self) -> float:
        """Removed weights / total weights, in [0, 1]."""
        total = self.mask.size
        return 1.0 - self.nnz / total if total else 0.0

    @property
    def weight_density(self) -> float:
        return 1.0 - self.compression_ratio

    def clone(self) -> "FilterBank":
        return FilterBank(self.shape, self.weights.copy(), self.bias.copy(), self.mask.copy())

    def apply_mask(self) -> None:
        self.weights[~self.mask] = 0.0


def init_bank(shape: LayerShape, rng: np.random.Generator, dtype=np.float32) -> FilterBank:
    """He-style initialisation, all weights retained."""
    m, n = shape.m, shape.n
    w = rng.standard_normal((m, n)) * np.sqrt(2.0 / m)
    return FilterBank(
        shape,
        w.astype(dtype),
        np.zeros(n, dtype=dtype),
        np.ones((m, n), dtype=bool),
    )


@dataclass
class Layer:
    name: str
    bank: FilterBank
    post: PostOp = IDENTITY


@dataclass
class Network:
    """Ordered CONV/FC layers; the last layer's outputs are the class logits."""

    layers: list[Layer] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].bank.shape.n

    def clone(self) -> "Network":
        return Network([Layer(l.name, l.bank.clone(), l.post) for l in self.layers])

    def validate_chain(self) -> None:
        """Each layer's post-op output must match the next layer's input dims."""
        for prev, nxt in zip(self.layers, self.layers[1:]):
            s = prev.bank.shape
            oh, ow = prev.post.out_hw(s.out_h, s.out_w)
            t = nxt.bank.shape
            got = (t.in_c, t.in_h, t.in_w)
            want = (s.n, oh, ow)
            if got != want:
                raise ShapeError(
                    f"layer {nxt.name}: expects input {got}, "
                    f"but {prev.name} produces {want}"
                )

    def total_weights(self) -> int:
        return sum(l.bank.mask.size for l in self.layers)

    def total_nnz(self) -> int:
        return sum(l.bank.nnz for l in self.layers)


# ---------------------------------------------------------------------------
# im2col / col2im


@lru_cache(maxsize=256)
def _patch_indices(shape: LayerShape) -> np.ndarray:
    """Gather indices [out_h*out_w, m] into the flattened padded input (c,hp,wp)."""
    hp = shape.in_h + 2 * shape.pad
    wp = shape.in_w + 2 * shape.pad
    oy = np.arange(shape.out_h) * shape.stride
    ox = np.arange(shape.out_w) * shape.stride
    ci = np.arange(shape.in_c)
    fy = np.arange(shape.filt_h)
    fx = np.arange(shape.filt_w)
    # column order (ci, fy, fx) matches the per-filter weight layout
    col = (ci[:, None, None] * hp * wp + fy[None, :, None] * wp + fx[None, None, :]).reshape(-1)
    row = (oy[:, None] * wp + ox[None, :]).reshape(-1)
    return (row[:, None] + col[None, :]).astype(np.int64)


def _pad_input(x: np.ndarray, shape: LayerShape) -> np.ndarray:
    if shape.pad == 0:
        return x
    p = shape.pad
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_input(x: np.ndarray, shape: LayerShape) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be [k,c,h,w], got rank {x.ndim}")
    k, c, h, w = x.shape
    if (c, h, w) != (shape.in_c, shape.in_h, shape.in_w):
        for dim, got, want in (
            ("channels", c, shape.in_c),
            ("height", h, shape.in_h),
            ("width", w, shape.in_w),
        ):
            if got != want:
                raise ShapeError(f"input {dim} {got} != expected {want}")


def im2col(x: np.ndarray, shape: LayerShape) -> np.ndarray:
    """Rearrange [k,c,h,w] into the patch matrix [k*out_h*out_w, m].

    Row (img, oy, ox) holds the zero-padded receptive field of output
    position (oy, ox); columns follow the (channel, fy, fx) weight order,
    so conv reduces to ``im2col(x) @ weights``.
    """
    _check_input(x, shape)
    k = x.shape[0]
    padded = _pad_input(x, shape).reshape(k, -1)
    idx = _patch_indices(shape)
    return padded[:, idx].reshape(k * shape.out_h * shape.out_w, shape.m)


def col2im(grad_rows: np.ndarray, shape: LayerShape, k: int, dtype=np.float32) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch-matrix gradients back to [k,c,h,w]."""
    hp = shape.in_h + 2 * shape.pad
    wp = shape.in_w + 2 * shape.pad
    idx = _patch_indices(shape)
    grad = grad_rows.reshape(k, shape.out_h * shape.out_w, shape.m)
    out = np.zeros((k, shape.in_c * hp * wp), dtype=dtype)
    np.add.at(out, (np.arange(k)[:, None, None], idx[None, :, :]), grad)
    out = out.reshape(k, shape.in_c, hp, wp)
    if shape.pad:
        p = shape.pad
        out = out[:, :, p : p + shape.in_h, p : p + shape.in_w]
    return np.ascontiguousarray(out)


def layer_forward(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    """X @ A + bias, reshaped to [k, n, out_h, out_w] (post-op NOT applied)."""
    s = bank.shape
    k = x.shape[0]
    rows = im2col(x, s)
    z = rows @ bank.weights + bank.bias
    return z.reshape(k, s.out_h, s.out_w, s.n).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# post-ops


def _pool_windows(y: np.ndarray, post: PostOp) -> np.ndarray:
    p, s = post.pool_size, post.pool_stride
    win = np.lib.stride_tricks.sliding_window_view(y, (p, p), axis=(2, 3))
    return win[:, :, ::s, ::s, :, :]


def apply_post(y: np.ndarray, post: PostOp) -> np.ndarray:
    if post.relu:
        y = np.maximum(y, 0.0)
    if post.pool_size:
        win = _pool_windows(y, post)
        y = win.max(axis=(4, 5))
    return np.ascontiguousarray(y)


def _post_backward(grad_out: np.ndarray, pre: np.ndarray, post: PostOp) -> np.ndarray:
    """Gradient through the post-op; ``pre`` is the pre-post-op activation."""
    if post.pool_size:
        p, s = post.pool_size, post.pool_stride
        act = np.maximum(pre, 0.0)
        win = _pool_windows(act, post).reshape(grad_out.shape + (p * p,))
        am = win.argmax(axis=-1)  # first max wins: deterministic
        k, n, ph, pw = grad_out.shape
        dy = np.zeros_like(pre)
        py, px = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
        src_y = py[None, None] * s + am // p
        src_x = px[None, None] * s + am % p
        ki = np.arange(k)[:, None, None, None]
        ni = np.arange(n)[None, :, None, None]
        np.add.at(dy, (ki, ni, src_y, src_x), grad_out)
        grad_out = dy
    if post.relu:
        grad_out = np.where(pre > 0, grad_out, 0.0)
    return grad_out


# ---------------------------------------------------------------------------
# network forward / training / evaluation


@dataclass
class LayerRecord:
    """Per-layer observations captured during a recording forward pass."""

    x_rows: np.ndarray | None  # sampled im2col rows (k' x m)
    row_idx: np.ndarray | None  # indices of the sampled rows
    input_density: float  # nonzero fraction of the layer input tensor
    output_density: float  # nonzero fraction after the post-op


def network_forward(
    net: Network,
    batch: np.ndarray,
    record_rows: list[np.ndarray | None] | None = None,
    record_stats: bool = False,
) -> tuple[np.ndarray, list[LayerRecord] | None]:
    """Run the network, returning logits [k, n_classes].

    ``record_rows`` gives, per layer, the im2col row indices to capture
    (None = capture nothing for that layer); with ``record_stats`` the
    exact-zero densities of layer inputs/outputs are measured as well.
    Recording either way returns one LayerRecord per layer.
    """
    recording = record_rows is not None or record_stats
    records: list[LayerRecord] | None = [] if recording else None
    x = batch
    for li, layer in enumerate(net.layers):
        s = layer.bank.shape
        try:
            _check_input(x, s)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name}: {exc}") from exc
        k = x.shape[0]
        rows = im2col(x, s)
        z = (rows @ layer.bank.weights + layer.bank.bias).reshape(
            k, s.out_h, s.out_w, s.n
        ).transpose(0, 3, 1, 2)
        out = apply_post(z, layer.post)
        if recording:
            idx = record_rows[li] if record_rows is not None else None
            records.append(
                LayerRecord(
                    x_rows=rows[idx].copy() if idx is not None else None,
                    row_idx=idx,
                    input_density=_density(x) if record_stats else 1.0,
                    output_density=_density(out) if record_stats else 1.0,
                )
            )
        x = out
    logits = x.reshape(x.shape[0], -1)
    return logits, records


def _density(t: np.ndarray) -> float:
    return float(np.count_nonzero(t)) / t.size


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss and gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    k = logits.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(k), labels], 1e-30))
    grad = probs
    grad[np.arange(k), labels] -= 1.0
    return float(nll.mean()), grad / k


def backprop(
    net: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    mask_frozen: bool = True,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy loss plus per-layer (dweights, dbias).

    With ``mask_frozen`` the gradient at masked-out weights is zeroed.
    """
    labels = np.asarray(labels)
    n_classes = net.n_classes
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ShapeError(f"labels must lie in [0, {n_classes})")

    # forward, keeping per-layer patch matrices and pre-activations
    x = batch
    cache: list[tuple[np.ndarray, np.ndarray]] = []  # (rows, pre_post)
    for layer in net.layers:
        s = layer.bank.shape
        try:
            _check_input(x, s)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name}: {exc}") from exc
        k = x.shape[0]
        rows = im2col(x, s)
        z = (rows @ layer.bank.weights + layer.bank.bias).reshape(
            k, s.out_h, s.out_w, s.n
        ).transpose(0, 3, 1, 2)
        cache.append((rows, z))
        x = apply_post(z, layer.post)

    loss, dlogits = softmax_cross_entropy(x.reshape(x.shape[0], -1), labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")

    s_last = net.layers[-1].bank.shape
    k = batch.shape[0]
    oh, ow = net.layers[-1].post.out_hw(s_last.out_h, s_last.out_w)
    grad = dlogits.reshape(k, s_last.n, oh, ow)
    grads_rev: list[tuple[np.ndarray, np.ndarray]] = []
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        s = layer.bank.shape
        rows, z = cache[li]
        dz = _post_backward(grad, z, layer.post)
        dz_rows = dz.transpose(0, 2, 3, 1).reshape(-1, s.n)
        dw = rows.T @ dz_rows
        db = dz_rows.sum(axis=0)
        if mask_frozen:
            dw[~layer.bank.mask] = 0.0
        grads_rev.append((dw, db))
        if li > 0:
            dx_rows = dz_rows @ layer.bank.weights.T
            grad = col2im(dx_rows, s, k, dtype=dz_rows.dtype)
    return loss, grads_rev[::-1]


def train_step(
    net: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    lr: float,
    mask_frozen: bool = True,
) -> float:
    """One SGD step on softmax cross-entropy; returns the pre-step mean loss.

    With ``mask_frozen`` the gradient at masked-out weights is zeroed, so
    pruned weights stay exactly 0.
    """
    loss, grads = backprop(net, batch, labels, mask_frozen=mask_frozen)
    for layer, (dw, db) in zip(net.layers, grads):
        layer.bank.weights -= (lr * dw).astype(layer.bank.weights.dtype)
        layer.bank.bias -= (lr * db).astype(layer.bank.bias.dtype)
    return loss


def evaluate(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    topk: int = 5,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Top-1 and top-k accuracy; ties resolved toward the lowest class index."""
    if images.shape[0] == 0:
        raise ShapeError("evaluate: empty dataset")
    topk = min(topk, net.n_classes)
    hits1 = 0
    hitsk = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, _ = network_forward(net, xb)
        pred = logits.argmax(axis=1)  # first max = lowest index
        hits1 += int((pred == yb).sum())
        order = np.argsort(-logits, axis=1, kind="stable")[:, :topk]
        hitsk += int((order == yb[:, None]).any(axis=1).sum())
    n = images.shape[0]
    return hits1 / n, hitsk / n
