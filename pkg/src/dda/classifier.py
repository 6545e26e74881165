"""Small NumPy classifiers trained from scratch.

Two architectures are available:

``tiny_cnn``
    conv(8, 5x5) -> maxpool 2 -> ReLU -> conv(16, 5x5) -> maxpool 2 -> ReLU
    -> FC(64) -> ReLU -> FC(K) -> softmax
``logistic``
    flatten -> FC(K) -> softmax

Inputs are ``(N, C, H, W)`` batches.  Convolutions are valid (no padding),
stride 1; pooling is 2x2 with stride 2 and drops an odd trailing row/column.
"""

import dataclasses
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import core
from .core import TransformConfig, image_rng

log = logging.getLogger(__name__)

__all__ = [
    "ModelParams",
    "OptimState",
    "TrainConfig",
    "TrainReport",
    "EvalSet",
    "TrainingError",
    "init_params",
    "forward",
    "cross_entropy",
    "loss_and_grad",
    "adam_step",
    "augment",
    "train",
    "evaluate",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("logistic", "tiny_cnn")
KERNEL = 5


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    kind: str
    input_shape: tuple
    num_classes: int
    params: dict
    widths: tuple = (8, 16, 64)

    def copy(self):
        return ModelParams(self.kind, self.input_shape, self.num_classes,
                           {k: v.copy() for k, v in self.params.items()}, self.widths)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model, **hyper):
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()}, **hyper)


def _conv_out(n):
    return n - KERNEL + 1


def _layer_shapes(kind, input_shape, num_classes, widths):
    c, h, w = input_shape
    if kind == "logistic":
        return {"fc.w": (c * h * w, num_classes), "fc.b": (num_classes,)}
    if kind != "tiny_cnn":
        raise ValueError(f"unknown classifier kind {kind!r}; choose from {KINDS}")
    f1, f2, hidden = widths
    h1, w1 = _conv_out(h) // 2, _conv_out(w) // 2
    h2, w2 = _conv_out(h1) // 2, _conv_out(w1) // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"input {h}x{w} is too small for tiny_cnn")
    return {
        "conv1.w": (f1, c, KERNEL, KERNEL), "conv1.b": (f1,),
        "conv2.w": (f2, f1, KERNEL, KERNEL), "conv2.b": (f2,),
        "fc1.w": (f2 * h2 * w2, hidden), "fc1.b": (hidden,),
        "fc2.w": (hidden, num_classes), "fc2.b": (num_classes,),
    }


def init_params(kind, input_shape, seed, num_classes=10, widths=(8, 16, 64)):
    """Glorot-uniform weights, zero biases."""
    shapes = _layer_shapes(kind, tuple(input_shape), num_classes, tuple(widths))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, 0x1A17]))
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(kind, tuple(input_shape), num_classes, params, tuple(widths))


# -- layers -----------------------------------------------------------------

def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    f = w.shape[0]
    oh, ow = _conv_out(h), _conv_out(wd)
    cols = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * KERNEL * KERNEL)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, cols, w, need_dx=True):
    n, c, h, wd = x_shape
    f = w.shape[0]
    oh, ow = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, oh, ow, c, KERNEL, KERNEL)
    dx = np.zeros(x_shape)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(z):
    n, c, h, w = z.shape
    h2, w2 = h // 2, w // 2
    blocks = z[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, z_shape):
    n, c, h, w = z_shape
    h2, w2 = h // 2, w // 2
    blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dz = np.zeros(z_shape)
    dz[:, :, :2 * h2, :2 * w2] = blocks
    return dz


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(m, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[1:] != tuple(m.input_shape):
        raise ValueError(f"batch geometry {batch.shape[1:]} does not match model input {tuple(m.input_shape)}")
    return batch


def _logits(m, x, keep=False):
    p = m.params
    n = x.shape[0]
    if m.kind == "logistic":
        flat = x.reshape(n, -1)
        logits = flat @ p["fc.w"] + p["fc.b"]
        return (logits, {"flat": flat}) if keep else logits
    z1, cols1 = _conv_forward(x, p["conv1.w"], p["conv1.b"])
    q1, idx1 = _pool_forward(z1)
    a1 = np.maximum(q1, 0)
    z2, cols2 = _conv_forward(a1, p["conv2.w"], p["conv2.b"])
    q2, idx2 = _pool_forward(z2)
    a2 = np.maximum(q2, 0)
    flat = a2.reshape(n, -1)
    u = flat @ p["fc1.w"] + p["fc1.b"]
    hidden = np.maximum(u, 0)
    logits = hidden @ p["fc2.w"] + p["fc2.b"]
    if not keep:
        return logits
    cache = dict(x_shape=x.shape, cols1=cols1, z1_shape=z1.shape, idx1=idx1, q1=q1, a1=a1,
                 cols2=cols2, z2_shape=z2.shape, idx2=idx2, q2=q2, flat=flat, u=u, hidden=hidden)
    return logits, cache


def forward(m, batch):
    """Class probabilities, one row per image."""
    return _softmax(_logits(m, _check_batch(m, batch)))


def predict(m, batch, chunk=256):
    batch = _check_batch(m, batch)
    out = [np.argmax(_logits(m, batch[i:i + chunk]), axis=1) for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of ``labels`` under ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(labels.size), labels]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(picked)))


def loss_and_grad(m, batch, labels):
    """Mean cross-entropy over the batch and its exact gradient."""
    x = _check_batch(m, batch)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= m.num_classes):
        bad = labels[(labels < 0) | (labels >= m.num_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {m.num_classes})")
    n = x.shape[0]
    logits, cache = _logits(m, x, keep=True)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    p = m.params
    grads = {}
    if m.kind == "logistic":
        grads["fc.w"] = cache["flat"].T @ dlogits
        grads["fc.b"] = dlogits.sum(axis=0)
        return loss, grads

    grads["fc2.w"] = cache["hidden"].T @ dlogits
    grads["fc2.b"] = dlogits.sum(axis=0)
    du = (dlogits @ p["fc2.w"].T) * (cache["u"] > 0)
    grads["fc1.w"] = cache["flat"].T @ du
    grads["fc1.b"] = du.sum(axis=0)
    dq2 = (du @ p["fc1.w"].T).reshape(cache["q2"].shape) * (cache["q2"] > 0)
    dz2 = _pool_backward(dq2, cache["idx2"], cache["z2_shape"])
    da1, grads["conv2.w"], grads["conv2.b"] = _conv_backward(dz2, cache["a1"].shape, cache["cols2"], p["conv2.w"])
    dq1 = da1 * (cache["q1"] > 0)
    dz1 = _pool_backward(dq1, cache["idx1"], cache["z1_shape"])
    _, grads["conv1.w"], grads["conv1.b"] = _conv_backward(dz1, cache["x_shape"], cache["cols1"], p["conv1.w"],
                                                           need_dx=False)
    return loss, {k: grads[k] for k in p}


def adam_step(m, g, s):
    """One Adam update with bias correction; returns new (params, state)."""
    if set(g) != set(m.params):
        raise ValueError(f"gradient keys {sorted(g)} do not match parameters {sorted(m.params)}")
    for k, gk in g.items():
        if gk.shape != m.params[k].shape:
            raise ValueError(f"gradient {k} has shape {gk.shape}, parameter has {m.params[k].shape}")
        if not np.all(np.isfinite(gk)):
            raise TrainingError(f"non-finite gradient in {k}")
    step = s.step + 1
    c1 = 1.0 - s.beta1 ** step
    c2 = 1.0 - s.beta2 ** step
    new_m, new_v, new_p = {}, {}, {}
    for k, p in m.params.items():
        gk = g[k]
        mk = s.beta1 * s.m[k] + (1.0 - s.beta1) * gk
        vk = s.beta2 * s.v[k] + (1.0 - s.beta2) * gk * gk
        new_p[k] = p - s.lr * (mk / c1) / (np.sqrt(vk / c2) + s.eps)
        new_m[k], new_v[k] = mk, vk
    model = ModelParams(m.kind, m.input_shape, m.num_classes, new_p, m.widths)
    state = OptimState(new_m, new_v, step, s.lr, s.beta1, s.beta2, s.eps)
    return model, state


def _augment_one(x, rng):
    if rng.random() < 0.5:
        x = -x
    if rng.random() < 0.5:
        x = x[rng.permutation(x.shape[0])]
    return x


def augment(batch, seed):
    """Random polarity reversal and channel shuffling, each with p = 0.5."""
    batch = np.asarray(batch, dtype=np.float64)
    return np.stack([_augment_one(x, image_rng(seed, j)) for j, x in enumerate(batch)])


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    kind: str = "tiny_cnn"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 42
    dda: bool = True
    augment: bool = True
    transform: TransformConfig = field(default_factory=TransformConfig)
    max_drop_fraction: float = 0.01


@dataclass
class EvalSet:
    """A dataset evaluated after every epoch.

    ``mode`` is ``raw``, ``dda_target`` or ``dda_source``; the DDA modes need
    the other domain's ``stats`` and this dataset's own ``mean_pixel``.
    """

    name: str
    data: object
    mode: str = "raw"
    stats: object = None
    mean_pixel: object = None


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    dropped: int = 0

    def columns(self):
        if not self.rows:
            return ["epoch", "train_loss", "train_acc"]
        return [k for k in self.rows[0] if k != "seconds"]

    def to_csv(self):
        cols = self.columns()
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def prepare_raw(images):
    """Network input without domain adaptation."""
    return core.prepare_inputs(images)


def prepare_inference(images, mean_pixel, other_stats, cfg=TransformConfig()):
    """Inference-side transform of ``[0, 1]`` images: scale by ``mean_pixel``,
    convolve with the other domain's mean auto-correlation, renormalize."""
    cfg = dataclasses.replace(cfg, renormalize=True)
    out, _ = core.inference_transform_batch(core.prepare_inputs(images), mean_pixel, other_stats, cfg)
    return out


def evaluate(m, data, mode="raw", stats=None, mean_pixel=None, cfg=TransformConfig()):
    """Argmax accuracy of ``m`` on ``data``."""
    if mode == "raw":
        if stats is not None:
            raise ValueError("raw evaluation takes no domain statistics")
        x = prepare_raw(data.images)
    elif mode in ("dda_target", "dda_source"):
        own = mode.split("_")[1]
        other = "source" if own == "target" else "target"
        if stats is None or mean_pixel is None:
            raise ValueError(f"{mode} evaluation needs {other} statistics and the {own} mean pixel")
        if data.domain_tag != own:
            raise ValueError(f"{mode} evaluation on a {data.domain_tag} dataset")
        if stats.domain and stats.domain != other:
            raise ValueError(f"{mode} evaluation needs {other} statistics, got {stats.domain}")
        x = prepare_inference(data.images, mean_pixel, stats, cfg)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(m, x) == data.labels))


def _source_batch(source_signed, index, epoch, target_stats, cfg):
    """On-the-fly training inputs for the images at ``index``."""
    n = source_signed.shape[0]
    rngs = [image_rng(cfg.seed, j, epoch) for j in index]
    if cfg.dda:
        donors = []
        for j, rng in zip(index, rngs):
            r = int(rng.integers(n - 1))
            donors.append(r + 1 if r >= j else r)
        x, ok = core.transform_source_batch(source_signed[index], source_signed[donors], target_stats,
                                            cfg.transform, rngs)
    else:
        x = source_signed[index]
        ok = np.any(x != 0, axis=(1, 2, 3))
    if cfg.augment:
        x = np.stack([_augment_one(xi, rng) for xi, rng in zip(x, rngs)])
    return x, ok


def train(source, target_stats, cfg, eval_sets=()):
    """Train a classifier on ``source`` and return ``(params, report)``.

    With ``cfg.dda`` every batch is passed through the source-side transform
    using fresh donors and pixel draws per epoch; otherwise images are only
    renormalized.  ``target_stats`` is ignored (and may be None) without DDA.
    """
    if source.domain_tag != "source":
        raise ValueError(f"training data must be tagged 'source', got {source.domain_tag!r}")
    if len(source) < 2:
        raise ValueError("training needs at least two source images")
    if cfg.dda:
        if target_stats is None:
            raise ValueError("DDA training needs target statistics")
        if target_stats.domain and target_stats.domain != "target":
            raise ValueError(f"DDA training needs target statistics, got {target_stats.domain}")
        target_stats.check_geometry(source.images)
    signed = core.prepare_inputs(source.images)
    labels = source.labels
    n = len(source)
    model = init_params(cfg.kind, source.geometry, cfg.seed)
    state = OptimState.zeros_like(model, lr=cfg.lr)
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([int(cfg.seed) % 2**64, epoch, 0x5EED])).permutation(n)
        loss_sum, seen, dropped = 0.0, 0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start:start + cfg.batch_size]
            x, ok = _source_batch(signed, index, epoch, target_stats, cfg)
            dropped += int(np.sum(~ok))
            x, y = x[ok], labels[index][ok]
            if x.shape[0] == 0:
                continue
            loss, grads = loss_and_grad(model, x, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                model, state = adam_step(model, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += loss * x.shape[0]
            seen += x.shape[0]
        if dropped > cfg.max_drop_fraction * n:
            raise TrainingError(f"epoch {epoch}: dropped {dropped} of {n} degenerate samples "
                                f"(limit {cfg.max_drop_fraction:.0%})")
        if dropped:
            log.warning("epoch %d: dropped %d degenerate transformed samples", epoch, dropped)
        report.dropped += dropped
        row = {"epoch": epoch, "train_loss": loss_sum / max(seen, 1)}
        row["train_acc"] = _train_accuracy(model, signed, labels, target_stats, cfg, epoch)
        for ev in eval_sets:
            row[f"{ev.name}_acc"] = evaluate(model, ev.data, ev.mode, ev.stats, ev.mean_pixel, cfg.transform)
        row["seconds"] = time.perf_counter() - t0
        log.info("epoch %d  loss %.4f  %s", epoch, row["train_loss"],
                 "  ".join(f"{k} {v:.3f}" for k, v in row.items() if k.endswith("_acc")))
        report.rows.append(row)
    return model, report


def _train_accuracy(model, signed, labels, target_stats, cfg, epoch):
    """Accuracy on this epoch's (transformed, un-augmented) training inputs."""
    plain = dataclasses.replace(cfg, augment=False)
    correct = total = 0
    index = np.arange(signed.shape[0])
    for start in range(0, index.size, 256):
        chunk = index[start:start + 256]
        x, ok = _source_batch(signed, chunk, epoch, target_stats, plain)
        if ok.any():
            correct += int(np.sum(predict(model, x[ok]) == labels[chunk][ok]))
            total += int(ok.sum())
    return correct / max(total, 1)


# -- checkpoints ------------------------------------------------------------

# "DDAMODEL", u32 version, u32 kind-name length, kind name, u32 C, H, W,
# u32 classes, u32 n widths, widths, u32 tensor count, then per tensor:
# u32 name length, name, u32 ndim, u32 dims, little-endian f64 payload.
MODEL_MAGIC = b"DDAMODEL"
MODEL_VERSION = 1


def save_checkpoint(path, m):
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<I", MODEL_VERSION)
    kind = m.kind.encode()
    out += struct.pack("<I", len(kind)) + kind
    out += struct.pack("<4I", *m.input_shape, m.num_classes)
    out += struct.pack("<I", len(m.widths)) + struct.pack(f"<{len(m.widths)}I", *m.widths)
    out += struct.pack("<I", len(m.params))
    for name, t in m.params.items():
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}")
    off = 8

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    (klen,) = take("<I")
    kind = blob[off:off + klen].decode()
    off += klen
    c, h, w, classes = take("<4I")
    (nw,) = take("<I")
    widths = take(f"<{nw}I")
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(blob, "<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return ModelParams(kind, (c, h, w), classes, params, tuple(widths))
