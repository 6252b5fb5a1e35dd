"""Compact pairwise-fusion classifier written directly in numpy.

Architecture for ``m`` scales of 12 features (defaults in brackets)::

    standardize the m*12 inputs
    for each adjacent scale pair (j, j+1):   concat rows -> 24
        shared FC 24 -> 12, leaky ReLU
    concat the m-1 fused vectors             -> 12 * (m-1)   [36]
    FC -> 24, leaky ReLU, dropout
    FC -> 16, leaky ReLU, dropout
    FC -> n_classes, softmax                                  [3, or 2 in 2c mode]

With four scales and three classes this has 1639 trainable parameters.
Training minimizes the focal loss with Adam on batches sampled with
replacement.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .features import FULL_MASK, N_COLUMNS
from .io import atomic_write_bytes

log = logging.getLogger(__name__)

FUSION_OUT = 12
HIDDEN = (24, 16)
PROB_FLOOR = 1e-12
STD_FLOOR = 1e-8
PARAM_NAMES = ("fusion_w", "fusion_b", "w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16384
    iterations: int = 3000
    gamma: float = 2.0
    dropout_p: float = 0.5
    runs: int = 5
    seed: int = 0
    leaky_slope: float = 0.01
    two_class: bool = False
    log_every: int = 100

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "adam_eps", "batch_size", "iterations", "runs", "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError("leaky_slope must be in [0, 1)")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class Model:
    params: dict
    mean: np.ndarray
    std: np.ndarray
    scales: tuple
    feature_mask: int = FULL_MASK
    two_class: bool = False
    leaky_slope: float = 0.01
    dropout_p: float = 0.5

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def n_classes(self) -> int:
        return self.params["b3"].shape[0]

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model({k: v.copy() for k, v in self.params.items()}, self.mean.copy(), self.std.copy(),
                     tuple(self.scales), self.feature_mask, self.two_class, self.leaky_slope, self.dropout_p)


def layer_shapes(n_scales: int, n_classes: int) -> dict:
    if n_scales < 2:
        raise ValueError("pairwise fusion needs at least two scales")
    fused = FUSION_OUT * (n_scales - 1)
    h1, h2 = HIDDEN
    return {
        "fusion_w": (2 * N_COLUMNS, FUSION_OUT), "fusion_b": (FUSION_OUT,),
        "w1": (fused, h1), "b1": (h1,),
        "w2": (h1, h2), "b2": (h2,),
        "w3": (h2, n_classes), "b3": (n_classes,),
    }


def init_model(scales=(128, 64, 32, 16), feature_mask: int = FULL_MASK, two_class: bool = False,
               rng=None, leaky_slope: float = 0.01, dropout_p: float = 0.5) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    rng = np.random.default_rng(rng)
    shapes = layer_shapes(len(scales), 2 if two_class else 3)
    params = {}
    for w, b in zip(PARAM_NAMES[::2], PARAM_NAMES[1::2]):
        fan_in = shapes[w][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[w] = rng.uniform(-bound, bound, shapes[w])
        params[b] = rng.uniform(-bound, bound, shapes[b])
    width = len(scales) * N_COLUMNS
    return Model(params, np.zeros(width), np.ones(width), tuple(scales), feature_mask, two_class,
                 leaky_slope, dropout_p)


def fit_standardization(model: Model, features) -> None:
    """Set per-column mean / std (floored) from a training pool of shape (n, m, 12)."""
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    model.mean = x.mean(axis=0)
    model.std = np.maximum(x.std(axis=0), STD_FLOOR)


def standardize(model: Model, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (model.n_scales, N_COLUMNS):
        raise ValueError(f"expected features of shape (n, {model.n_scales}, {N_COLUMNS}), got {x.shape}")
    z = (x.reshape(len(x), -1) - model.mean) / model.std
    return z.reshape(x.shape)


@nb.njit(cache=True, nogil=True)
def _bias_leaky(a, b, slope):
    """In place: ``a = leaky(a + b)``. The sign of the result matches the pre-activation."""
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            v = a[i, j] + b[j]
            a[i, j] = v if v > 0 else slope * v


@nb.njit(cache=True, nogil=True)
def _apply_dropout(h, mask, scale):
    for i in range(h.shape[0]):
        for j in range(h.shape[1]):
            h[i, j] = h[i, j] * scale if mask[i, j] else 0.0


@nb.njit(cache=True, nogil=True)
def _gate_grad(dh, h, slope, mask, scale, colsum):
    """In place: chain ``dh`` through dropout and leaky ReLU; column sums into ``colsum``.

    ``h`` is the layer output after dropout; where a unit was kept its sign
    is the sign of the pre-activation.
    """
    use_mask = mask.shape[0] > 0
    for j in range(dh.shape[1]):
        colsum[j] = 0.0
    for i in range(dh.shape[0]):
        for j in range(dh.shape[1]):
            g = dh[i, j]
            if use_mask:
                if not mask[i, j]:
                    g = 0.0
                else:
                    g *= scale
            if not h[i, j] > 0:
                g *= slope
            dh[i, j] = g
            colsum[j] += g


_NO_MASK = np.zeros((0, 0), dtype=np.bool_)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _scale_pairs(z):
    """(n, m, 12) standardized input -> (n, m-1, 24) adjacent scale pairs."""
    return np.concatenate([z[:, :-1], z[:, 1:]], axis=2)


def _dropout_masks(rng, shape, p):
    if p == 0.5:
        # one random bit per unit
        count = shape[0] * shape[1]
        bits = np.unpackbits(np.frombuffer(rng.bytes((count + 7) // 8), dtype=np.uint8), count=count)
        return bits.reshape(shape).view(np.bool_)
    return rng.random(shape) >= p


def _forward_pairs(model: Model, pairs, training=False, rng=None, masks=None):
    """Forward pass on scale pairs (n, m-1, 24); returns probabilities and a cache."""
    p = model.params
    slope = model.leaky_slope
    n = pairs.shape[0]
    flat = np.ascontiguousarray(pairs).reshape(-1, 2 * N_COLUMNS)
    h0 = flat @ p["fusion_w"]                                      # (n * (m-1), 12)
    _bias_leaky(h0, p["fusion_b"], slope)
    h0 = h0.reshape(n, -1)
    h1 = h0 @ p["w1"]
    _bias_leaky(h1, p["b1"], slope)
    dropout = training and model.dropout_p > 0
    scale = 1.0 / (1.0 - model.dropout_p)
    if dropout:
        if masks is None:
            if rng is None:
                raise ValueError("training mode needs an rng for dropout")
            masks = (_dropout_masks(rng, h1.shape, model.dropout_p),
                     _dropout_masks(rng, (n, p["w2"].shape[1]), model.dropout_p))
        _apply_dropout(h1, masks[0], scale)
    h2 = h1 @ p["w2"]
    _bias_leaky(h2, p["b2"], slope)
    if dropout:
        _apply_dropout(h2, masks[1], scale)
    logits = h2 @ p["w3"] + p["b3"]
    probs = _softmax(logits)
    return probs, (flat, h0, h1, h2, masks if dropout else None)


def _forward_z(model: Model, z, training=False, rng=None, masks=None):
    return _forward_pairs(model, _scale_pairs(z), training, rng, masks)


def forward(model: Model, features, training: bool = False, rng=None) -> np.ndarray:
    """Class probabilities for features of shape (n, m, 12) or a single (m, 12) matrix.

    Dropout (inverted) is only active with ``training=True``.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    probs, _ = _forward_z(model, standardize(model, x), training, rng)
    return probs[0] if single else probs


def focal_loss(probs, labels, gamma: float = 2.0) -> float:
    """Mean of -(1 - p_t)^gamma * log(p_t) with p_t floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pt = probs[np.arange(len(labels)), labels]
    return float(np.mean(-((1.0 - pt) ** gamma) * np.log(np.maximum(pt, PROB_FLOOR))))


def _focal_logit_grad(probs, labels, gamma):
    n = len(labels)
    rows = np.arange(n)
    pt = probs[rows, labels]
    one_minus = 1.0 - pt
    logpt = np.log(np.maximum(pt, PROB_FLOOR))
    above = pt > PROB_FLOOR
    # dL/dz_j = coef * (onehot_j - p_j)
    coef = -(one_minus ** gamma) * above
    if gamma != 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            powm1 = np.where(one_minus > 0, one_minus ** (gamma - 1.0), 0.0)
        coef = coef + gamma * powm1 * pt * logpt
    g = -probs * coef[:, None]
    g[rows, labels] += coef
    return g / n


def _backward_pairs(model: Model, pairs, labels, gamma, training, rng, masks=None):
    p = model.params
    slope = model.leaky_slope
    scale = 1.0 / (1.0 - model.dropout_p)
    probs, (flat, h0, h1, h2, masks) = _forward_pairs(model, pairs, training, rng, masks)
    m1, m2 = masks if masks is not None else (_NO_MASK, _NO_MASK)
    loss = focal_loss(probs, labels, gamma)
    g = {}
    d = _focal_logit_grad(probs, labels, gamma)
    g["w3"] = h2.T @ d
    g["b3"] = d.sum(axis=0)
    da = d @ p["w3"].T
    g["b2"] = np.empty(da.shape[1])
    _gate_grad(da, h2, slope, m2, scale, g["b2"])
    g["w2"] = h1.T @ da
    da = da @ p["w2"].T
    g["b1"] = np.empty(da.shape[1])
    _gate_grad(da, h1, slope, m1, scale, g["b1"])
    g["w1"] = h0.T @ da
    da0 = (da @ p["w1"].T).reshape(-1, FUSION_OUT)
    g["fusion_b"] = np.empty(FUSION_OUT)
    _gate_grad(da0, h0.reshape(-1, FUSION_OUT), slope, _NO_MASK, 1.0, g["fusion_b"])
    # the fusion map is shared by every pair: gradients add up
    g["fusion_w"] = flat.T @ da0
    return loss, g


def _backward_z(model: Model, z, labels, gamma, training, rng, masks=None):
    return _backward_pairs(model, _scale_pairs(z), labels, gamma, training, rng, masks)


def backward(model: Model, features, labels, rng=None, gamma: float = 2.0, training: bool = True,
             masks=None):
    """Mean focal loss and its gradient for every parameter.

    Dropout masks come from ``rng`` once and are shared by the forward and
    backward pass; ``masks`` may instead supply the two boolean keep masks,
    shapes (n, 24) and (n, 16). Returns ``(loss, grads)``.
    """
    z = standardize(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(z):
        raise ValueError("features and labels differ in length")
    if masks is not None:
        masks = tuple(np.asarray(m_, dtype=np.bool_) for m_ in masks)
    return _backward_z(model, z, labels, gamma, training, rng, masks)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in model.params.items()},
                   {k: np.zeros_like(v) for k, v in model.params.items()})


def adam_step(model: Model, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``model`` and ``state``."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, param in model.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def prepare_labels(labels, two_class: bool) -> np.ndarray:
    """Class targets for training; in 2c mode boundary points count as non-edge."""
    y = np.asarray(labels, dtype=np.int64)
    if two_class:
        y = np.where(y == 2, 0, y)
    return y


class TrainingError(RuntimeError):
    pass


@dataclass
class RunRecord:
    seed: int
    val_loss: float
    log: list = field(default_factory=list)   # (iteration, train_loss, val_loss)
    failed: str | None = None


@dataclass
class TrainResult:
    model: Model
    log: list
    runs: list
    best_run: int


def _train_one(model, z_train, y_train, z_val, y_val, config, rng):
    # z_train / z_val hold precomputed scale pairs
    state = AdamState.zeros_like(model)
    n = len(z_train)
    history = []
    for it in range(1, config.iterations + 1):
        batch = rng.integers(0, n, config.batch_size)
        loss, grads = _backward_pairs(model, z_train[batch], y_train[batch], config.gamma, True, rng)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at iteration {it}")
        adam_step(model, grads, state, config)
        if it % config.log_every == 0 or it == config.iterations:
            probs, _ = _forward_pairs(model, z_val)
            val = focal_loss(probs, y_val, config.gamma)
            if not np.isfinite(val):
                raise TrainingError(f"non-finite validation loss at iteration {it}")
            history.append((it, float(loss), float(val)))
    return history


def train(features, labels, val_features, val_labels, config: TrainConfig | None = None,
          scales=(128, 64, 32, 16), feature_mask: int = FULL_MASK) -> TrainResult:
    """Train ``config.runs`` models with distinct seeds; keep the lowest validation loss.

    Standardization statistics come from the training pool once and are
    shared by all runs.
    """
    config = config or TrainConfig()
    x = np.asarray(features)
    y = prepare_labels(labels, config.two_class)
    vy = prepare_labels(val_labels, config.two_class)
    n_classes = 2 if config.two_class else 3
    if len(x) == 0 or len(y) != len(x):
        raise ValueError("training features and labels must be non-empty and equal in length")
    if len(val_features) == 0 or len(vy) != len(val_features):
        raise ValueError("validation features and labels must be non-empty and equal in length")
    for arr in (y, vy):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    present = np.unique(y)
    if len(present) < 2:
        raise ValueError(f"training pool has a single class {present.tolist()}; need at least two")

    base = init_model(scales, feature_mask, config.two_class, rng=0,
                      leaky_slope=config.leaky_slope, dropout_p=config.dropout_p)
    fit_standardization(base, x)
    pairs_train = _scale_pairs(standardize(base, x))
    pairs_val = _scale_pairs(standardize(base, val_features))

    children = np.random.SeedSequence(config.seed).spawn(config.runs)
    records = []
    models = []
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        model = init_model(scales, feature_mask, config.two_class, rng=rng,
                           leaky_slope=config.leaky_slope, dropout_p=config.dropout_p)
        model.mean, model.std = base.mean.copy(), base.std.copy()
        seed_repr = int(child.generate_state(1)[0])
        try:
            history = _train_one(model, pairs_train, y, pairs_val, vy, config, rng)
        except TrainingError as exc:
            log.warning("run %d aborted: %s", r, exc)
            records.append(RunRecord(seed_repr, float("inf"), [], failed=str(exc)))
            models.append(None)
            continue
        records.append(RunRecord(seed_repr, history[-1][2], history))
        models.append(model)
        log.info("run %d: final validation loss %.6f", r, history[-1][2])
    finished = [i for i, m in enumerate(models) if m is not None]
    if not finished:
        raise TrainingError("every training run failed: " + "; ".join(r.failed for r in records))
    best = min(finished, key=lambda i: records[i].val_loss)
    return TrainResult(models[best], records[best].log, records, best)


def classify(model: Model, features, batch_size: int = 65536):
    """Predicted class per point (ties go to the lowest code) and the probabilities."""
    x = np.asarray(features)
    if x.ndim == 2:
        x = x[None]
    probs = np.empty((len(x), model.n_classes))
    for start in range(0, len(x), batch_size):
        probs[start:start + batch_size] = forward(model, x[start:start + batch_size])
    return probs.argmax(axis=1), probs


def write_log_csv(path, history) -> None:
    lines = ["iteration,train_loss,val_loss"]
    lines += [f"{it},{tl!r},{vl!r}" for it, tl, vl in history]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


# --------------------------------------------------------------------------
# Model file ("BNDM")
# --------------------------------------------------------------------------

MODEL_MAGIC = b"BNDM"
MODEL_VERSION = 1
_HEAD = struct.Struct("<4sIB6Idd")


class ModelFileError(ValueError):
    pass


def model_bytes(model: Model) -> bytes:
    p = model.params
    h1, h2 = p["w1"].shape[1], p["w2"].shape[1]
    out = [_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, int(model.two_class), model.n_scales, N_COLUMNS,
                      p["fusion_w"].shape[1], h1, h2, model.n_classes,
                      float(model.leaky_slope), float(model.dropout_p))]
    out.append(struct.pack(f"<{model.n_scales}I", *model.scales))
    out.append(struct.pack("<H", model.feature_mask))
    out.append(np.asarray(model.mean, dtype="<f8").tobytes())
    out.append(np.asarray(model.std, dtype="<f8").tobytes())
    for name in PARAM_NAMES:
        out.append(np.asarray(p[name], dtype="<f8").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: Model, path) -> None:
    atomic_write_bytes(path, model_bytes(model))


def load_model(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEAD.size + 4:
        raise ModelFileError(f"{path}: truncated model file")
    magic, version, two_class, m, ncol, fout, h1, h2, ncls, slope, dropout = _HEAD.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    if version != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported model version {version} (expected {MODEL_VERSION})")
    if ncol != N_COLUMNS or fout != FUSION_OUT or (h1, h2) != HIDDEN or ncls not in (2, 3) or m < 2:
        raise ModelFileError(f"{path}: unsupported architecture dims")
    shapes = layer_shapes(m, ncls)
    n_weights = sum(int(np.prod(s)) for s in shapes.values())
    expected = _HEAD.size + 4 * m + 2 + 8 * 2 * m * N_COLUMNS + 8 * n_weights + 4
    if len(data) != expected:
        raise ModelFileError(f"{path}: expected {expected} bytes, found {len(data)} (truncated or corrupted)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFileError(f"{path}: checksum mismatch (corrupted file)")
    pos = _HEAD.size
    scales = struct.unpack_from(f"<{m}I", data, pos)
    pos += 4 * m
    (mask,) = struct.unpack_from("<H", data, pos)
    pos += 2

    def take(count):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    mean = take(m * N_COLUMNS)
    std = take(m * N_COLUMNS)
    params = {name: take(int(np.prod(shapes[name]))).reshape(shapes[name]) for name in PARAM_NAMES}
    return Model(params, mean, std, tuple(scales), int(mask), bool(two_class), slope, dropout)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
