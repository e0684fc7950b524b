"""A miniature single-shot grid detector with hand-written backprop.

Classification and localization happen in one pass: the network maps an
image to a grid_s x grid_s map where every cell predicts one box
(objectness logit, center/size logits) plus class logits.

Layer arithmetic for the default 32px / 4-cell configuration:

    32 --conv 3x3 pad 1--> 32 --relu, avgpool 2x2--> 16
       --conv 3x3 pad 1--> 16 --relu, avgpool 2x2--> 8
       --avgpool 2x2 (extra)--> 4 --conv 1x1 head--> 4 x 4 x (5 + K)

After the two conv blocks the map is image_size/4; extra 2x2 average pools
bring it down to grid_s, so image_size/4 must equal grid_s times a power
of two. Head channel order per cell: [objectness, tx, ty, tw, th, class
logits]. Weight init is uniform in [-r, r] with r = sqrt(6/(fan_in +
fan_out)); biases start at zero.

Box parameterization (see :func:`decode`): the cell (row, col) predicts
center ((col + sigmoid(tx))/grid_s, (row + sigmoid(ty))/grid_s) and size
(sigmoid(tw), sigmoid(th)), keeping everything in (0, 1).

All operations are pure functions of their inputs plus an owned Rng, so
callers may train many clients concurrently on distinct data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FedodError
from .params import ParamSet, Rng, Tensor
from .synthdata import BBox, Sample

DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_NMS_IOU = 0.45


class ConfigInvalid(FedodError):
    """DetectorConfig values cannot produce a valid network."""


class ShapeMismatch(FedodError):
    """An input image or weight set has the wrong shape."""


class MultipleObjectsInCell(FedodError):
    """Two ground-truth centers fall into the same grid cell."""


class EmptyDataset(FedodError):
    """train_local was called with no samples."""


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    grid_s: int = 4
    num_classes: int = 2
    conv1_channels: int = 8
    conv2_channels: int = 16
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    # 0.05 makes the epoch loss oscillate at its plateau and the round
    # averages destroy one client's features; 0.01 trains both stably
    learning_rate: float = 0.01
    batch_size: int = 8
    local_epochs: int = 15  # may be 0 to skip training entirely
    momentum: float = 0.9

    def validate(self) -> None:
        counts = {
            "image_size": self.image_size,
            "grid_s": self.grid_s,
            "num_classes": self.num_classes,
            "conv1_channels": self.conv1_channels,
            "conv2_channels": self.conv2_channels,
            "batch_size": self.batch_size,
        }
        for name, v in counts.items():
            if v < 1:
                raise ConfigInvalid(f"{name} must be >= 1, got {v}")
        if self.local_epochs < 0:
            raise ConfigInvalid(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.lambda_coord <= 0 or self.lambda_noobj <= 0:
            raise ConfigInvalid("loss weights must be positive")
        if self.image_size % self.grid_s != 0:
            raise ConfigInvalid(
                f"image_size {self.image_size} not divisible by grid_s {self.grid_s}"
            )
        if self.image_size % 4 != 0:
            raise ConfigInvalid("image_size must be divisible by 4 (two 2x2 pools)")
        ratio = (self.image_size // 4) / self.grid_s
        if ratio < 1 or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
            raise ConfigInvalid(
                f"image_size/4 = {self.image_size // 4} must be grid_s x a power "
                f"of two to reach a {self.grid_s}x{self.grid_s} map by 2x2 pooling"
            )

    @property
    def extra_pools(self) -> int:
        return int(math.log2((self.image_size // 4) // self.grid_s))

    @property
    def head_channels(self) -> int:
        return 5 + self.num_classes


@dataclass(frozen=True)
class CellPrediction:
    """Raw per-cell outputs, all pre-sigmoid."""

    objectness_logit: float
    tx: float
    ty: float
    tw: float
    th: float
    class_logits: np.ndarray


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float


@dataclass
class TrainStats:
    """Per-epoch mean loss, one entry per local epoch."""

    epoch_losses: list[float] = field(default_factory=list)

    def to_json_lines(self) -> str:
        return "".join(
            json.dumps({"epoch": i, "mean_loss": loss}) + "\n"
            for i, loss in enumerate(self.epoch_losses)
        )


# ---------------------------------------------------------------- numerics

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(x, target):
    # max(x,0) - x*t + log(1+exp(-|x|)), stable for large |x|
    return np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))


def _conv3x3(x, w, b):
    """Same-padded 3x3 convolution via im2col. Returns (out, cols) with
    cols of shape [B, C*9, H*W] cached for the backward pass."""
    batch, chans, height, width = x.shape
    out_c = w.shape[0]
    xp = np.zeros((batch, chans, height + 2, width + 2), x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((batch, chans, 9, height, width), x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + height, dj : dj + width]
            k += 1
    cols = cols.reshape(batch, chans * 9, height * width)
    out = np.matmul(w.reshape(out_c, -1)[None], cols)
    out += b[:, None]
    return out.reshape(batch, out_c, height, width), cols


def _conv3x3_backward(dout, cols, w, x_shape):
    batch, chans, height, width = x_shape
    out_c = w.shape[0]
    dm = dout.reshape(batch, out_c, height * width)
    dw = np.tensordot(dm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dm.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(out_c, -1).T[None], dm)
    dcols = dcols.reshape(batch, chans, 9, height, width)
    dxp = np.zeros((batch, chans, height + 2, width + 2), dout.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + height, dj : dj + width] += dcols[:, :, k]
            k += 1
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _pool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _unpool2(d):
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25


_TENSOR_NAMES = (
    "conv1.weight", "conv1.bias",
    "conv2.weight", "conv2.bias",
    "head.weight", "head.bias",
)


def _net_forward(w: dict, x: np.ndarray, cfg: DetectorConfig):
    """Raw grid logits [B, 5+K, G, G] plus the cache for backprop.
    Computation dtype follows the dtype of `x` and the weight arrays."""
    z1, cols1 = _conv3x3(x, w["conv1.weight"], w["conv1.bias"])
    a1 = np.maximum(z1, 0.0)
    p1 = _pool2(a1)
    z2, cols2 = _conv3x3(p1, w["conv2.weight"], w["conv2.bias"])
    a2 = np.maximum(z2, 0.0)
    q = _pool2(a2)
    pools = []
    for _ in range(cfg.extra_pools):
        pools.append(q)
        q = _pool2(q)
    hw = w["head.weight"].reshape(cfg.head_channels, cfg.conv2_channels)
    out = np.einsum("oc,bchw->bohw", hw, q) + w["head.bias"][:, None, None]
    cache = (x.shape, cols1, z1, p1.shape, cols2, z2, q)
    return out, cache


def _net_backward(w: dict, cache, dout: np.ndarray, cfg: DetectorConfig) -> dict:
    x_shape, cols1, z1, p1_shape, cols2, z2, q = cache
    hw = w["head.weight"].reshape(cfg.head_channels, cfg.conv2_channels)
    dw3 = np.einsum("bohw,bchw->oc", dout, q).reshape(w["head.weight"].shape)
    db3 = dout.sum(axis=(0, 2, 3))
    dq = np.einsum("oc,bohw->bchw", hw, dout)
    for _ in range(cfg.extra_pools):
        dq = _unpool2(dq)
    da2 = _unpool2(dq)
    dz2 = da2 * (z2 > 0)
    dw2, db2, dp1 = _conv3x3_backward(dz2, cols2, w["conv2.weight"], p1_shape)
    da1 = _unpool2(dp1)
    dz1 = da1 * (z1 > 0)
    dw1, db1, _ = _conv3x3_backward(dz1, cols1, w["conv1.weight"], x_shape)
    return {
        "conv1.weight": dw1, "conv1.bias": db1,
        "conv2.weight": dw2, "conv2.bias": db2,
        "head.weight": dw3, "head.bias": db3,
    }


def _build_targets(truth_lists, cfg: DetectorConfig):
    """Per-sample responsibility mask, coordinate targets, class targets.

    The target for a responsible cell (r, c) inverts decode(): gx = cx*G - c,
    gy = cy*G - r, gw = w, gh = h.
    """
    g = cfg.grid_s
    batch = len(truth_lists)
    resp = np.zeros((batch, g, g), bool)
    coords = np.zeros((batch, 4, g, g), np.float64)
    classes = np.zeros((batch, g, g), np.int64)
    for i, boxes in enumerate(truth_lists):
        for box in boxes:
            col = min(int(box.cx * g), g - 1)
            row = min(int(box.cy * g), g - 1)
            if resp[i, row, col]:
                raise MultipleObjectsInCell(
                    f"sample {i}: two object centers in grid cell ({row}, {col})"
                )
            if not 0 <= box.class_id < cfg.num_classes:
                raise ShapeMismatch(
                    f"class id {box.class_id} outside [0, {cfg.num_classes})"
                )
            resp[i, row, col] = True
            coords[i, :, row, col] = (box.cx * g - col, box.cy * g - row, box.w, box.h)
            classes[i, row, col] = box.class_id
    return resp, coords, classes


def _loss_and_grad(out, resp, coords, classes, cfg: DetectorConfig):
    """Per-sample losses [B] and d(sum of per-sample losses)/d(out)."""
    obj = out[:, 0]
    txy = out[:, 1:5]
    cls = out[:, 5:]
    dtype = out.dtype

    sig_obj = _sigmoid(obj)
    respf = resp.astype(dtype)
    obj_terms = np.where(
        resp,
        _bce_with_logits(obj, 1.0),
        cfg.lambda_noobj * _bce_with_logits(obj, 0.0),
    )
    dobj = np.where(resp, sig_obj - 1.0, cfg.lambda_noobj * sig_obj)

    sig_t = _sigmoid(txy)
    diff = sig_t - coords.astype(dtype)
    coord_terms = cfg.lambda_coord * (diff**2).sum(axis=1) * respf
    dtxy = (cfg.lambda_coord * 2.0 * diff * sig_t * (1.0 - sig_t)) * respf[:, None]

    shifted = cls - cls.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + cls.max(axis=1)
    onehot = np.zeros_like(cls)
    b_idx, r_idx, c_idx = np.nonzero(resp)
    onehot[b_idx, classes[resp], r_idx, c_idx] = 1.0
    picked = (cls * onehot).sum(axis=1)
    class_terms = (lse - picked) * respf
    softmax = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dcls = (softmax - onehot) * respf[:, None]

    per_sample = (obj_terms + coord_terms + class_terms).sum(axis=(1, 2))
    dout = np.concatenate([dobj[:, None], dtxy, dcls], axis=1)
    return per_sample, dout


def _weights_dict(p: ParamSet, cfg: DetectorConfig) -> dict:
    names = [t.name for t in p]
    if names != list(_TENSOR_NAMES):
        raise ShapeMismatch(f"unexpected weight schema {names}")
    return {t.name: t.values for t in p}


INPUT_SHIFT = 0.5  # pixels arrive in [0,1]; the net sees them centered


def _image_to_input(image, cfg: DetectorConfig, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(image)
    if arr.shape != (cfg.image_size, cfg.image_size, 3):
        raise ShapeMismatch(
            f"image shape {arr.shape}, expected "
            f"({cfg.image_size}, {cfg.image_size}, 3)"
        )
    return arr.astype(dtype).transpose(2, 0, 1)[None] - dtype(INPUT_SHIFT)


# ------------------------------------------------------------- operations

def init_params(cfg: DetectorConfig, rng: Rng) -> ParamSet:
    """Fresh weights for the three-layer grid detector (6 tensors)."""
    cfg.validate()
    c1, c2, oc = cfg.conv1_channels, cfg.conv2_channels, cfg.head_channels

    def glorot(shape, fan_in, fan_out):
        r = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, shape).astype(np.float32)

    tensors = [
        Tensor("conv1.weight", (c1, 3, 3, 3), glorot((c1, 3, 3, 3), 3 * 9, c1 * 9)),
        Tensor("conv1.bias", (c1,), np.zeros(c1, np.float32)),
        Tensor("conv2.weight", (c2, c1, 3, 3), glorot((c2, c1, 3, 3), c1 * 9, c2 * 9)),
        Tensor("conv2.bias", (c2,), np.zeros(c2, np.float32)),
        Tensor("head.weight", (oc, c2, 1, 1), glorot((oc, c2, 1, 1), c2, oc)),
        Tensor("head.bias", (oc,), np.zeros(oc, np.float32)),
    ]
    return ParamSet(tensors)


def forward(p: ParamSet, image, cfg: DetectorConfig) -> list[list[CellPrediction]]:
    """Run the network on one image; grid[row][col] is that cell's prediction."""
    w = _weights_dict(p, cfg)
    x = _image_to_input(image, cfg)
    out, _ = _net_forward(w, x, cfg)
    out = out[0]
    grid = []
    for r in range(cfg.grid_s):
        row = []
        for c in range(cfg.grid_s):
            row.append(
                CellPrediction(
                    objectness_logit=float(out[0, r, c]),
                    tx=float(out[1, r, c]),
                    ty=float(out[2, r, c]),
                    tw=float(out[3, r, c]),
                    th=float(out[4, r, c]),
                    class_logits=out[5:, r, c].copy(),
                )
            )
        grid.append(row)
    return grid


def decode(cell: CellPrediction, row: int, col: int, cfg: DetectorConfig) -> Detection:
    """Turn one cell's logits into a Detection in normalized coordinates."""
    g = cfg.grid_s
    sx = 1.0 / (1.0 + math.exp(-cell.tx))
    sy = 1.0 / (1.0 + math.exp(-cell.ty))
    logits = np.asarray(cell.class_logits, np.float64)
    class_id = int(np.argmax(logits))  # ties resolve to the lowest index
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    conf = 1.0 / (1.0 + math.exp(-cell.objectness_logit)) * float(probs.max())
    return Detection(
        bbox=BBox(
            class_id=class_id,
            cx=(col + sx) / g,
            cy=(row + sy) / g,
            w=1.0 / (1.0 + math.exp(-cell.tw)),
            h=1.0 / (1.0 + math.exp(-cell.th)),
        ),
        class_id=class_id,
        confidence=conf,
    )


def _grid_to_raw(pred_grid, cfg: DetectorConfig) -> np.ndarray:
    g = cfg.grid_s
    out = np.zeros((1, cfg.head_channels, g, g), np.float64)
    for r in range(g):
        for c in range(g):
            cell = pred_grid[r][c]
            out[0, :5, r, c] = (cell.objectness_logit, cell.tx, cell.ty, cell.tw, cell.th)
            out[0, 5:, r, c] = cell.class_logits
    return out


def loss(pred_grid, truth: list[BBox], cfg: DetectorConfig):
    """Composite detection loss for one image.

    Responsible cells (the cell holding each truth center) pay
    BCE(objectness, 1) + lambda_coord * squared coordinate error +
    cross-entropy on the class logits; every other cell pays
    lambda_noobj * BCE(objectness, 0). Returns (loss, responsibility map).
    """
    out = _grid_to_raw(pred_grid, cfg)
    resp, coords, classes = _build_targets([truth], cfg)
    per_sample, _ = _loss_and_grad(out, resp, coords, classes, cfg)
    return float(per_sample[0]), resp[0]


def backward(p: ParamSet, image, truth: list[BBox], cfg: DetectorConfig) -> ParamSet:
    """Gradient of loss(forward(p, image), truth) w.r.t. every parameter."""
    w = _weights_dict(p, cfg)
    x = _image_to_input(image, cfg)
    out, cache = _net_forward(w, x, cfg)
    resp, coords, classes = _build_targets([truth], cfg)
    _, dout = _loss_and_grad(out, resp, coords, classes, cfg)
    grads = _net_backward(w, cache, dout.astype(out.dtype), cfg)
    return ParamSet(
        Tensor(name, grads[name].shape, grads[name].astype(np.float32))
        for name in _TENSOR_NAMES
    )


def train_local(p: ParamSet, data: list[Sample], cfg: DetectorConfig, rng: Rng):
    """Mini-batch SGD with momentum for cfg.local_epochs epochs.

    Each epoch visits the whole dataset in a fresh rng-shuffled order
    (final short batch included). Deterministic given (p, data order,
    cfg, rng seed). Returns (trained weights, TrainStats).
    """
    if not data:
        raise EmptyDataset("train_local needs at least one sample")
    cfg.validate()
    w = {t.name: t.values.astype(np.float32) for t in p}
    if list(w) != list(_TENSOR_NAMES):
        raise ShapeMismatch(f"unexpected weight schema {list(w)}")
    x_all = np.stack(
        [s.image.transpose(2, 0, 1) for s in data]
    ).astype(np.float32) - np.float32(INPUT_SHIFT)
    resp, coords, classes = _build_targets([s.boxes for s in data], cfg)

    vel = {name: np.zeros_like(arr) for name, arr in w.items()}
    lr, mu = cfg.learning_rate, cfg.momentum
    stats = TrainStats()
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, cache = _net_forward(w, x_all[idx], cfg)
            per_sample, dout = _loss_and_grad(out, resp[idx], coords[idx], classes[idx], cfg)
            total += float(per_sample.sum())
            dout = (dout / len(idx)).astype(np.float32)
            grads = _net_backward(w, cache, dout, cfg)
            for name in w:
                vel[name] = mu * vel[name] - lr * grads[name]
                w[name] = w[name] + vel[name]
        stats.epoch_losses.append(total / n)
    trained = ParamSet(Tensor(name, w[name].shape, w[name]) for name in _TENSOR_NAMES)
    return trained, stats


def infer(
    p: ParamSet,
    image,
    cfg: DetectorConfig,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
) -> list[Detection]:
    """Decode every cell, keep confidence >= conf_threshold, then greedy
    per-class NMS (suppress IoU > nms_iou). Sorted by descending confidence,
    ties in original decode order."""
    from .detmetrics import iou

    grid = forward(p, image, cfg)
    dets = [
        decode(grid[r][c], r, c, cfg)
        for r in range(cfg.grid_s)
        for c in range(cfg.grid_s)
    ]
    dets = [d for d in dets if d.confidence >= conf_threshold]
    dets.sort(key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for d in dets:
        if any(
            k.class_id == d.class_id and iou(k.bbox, d.bbox) > nms_iou for k in kept
        ):
            continue
        kept.append(d)
    return kept
