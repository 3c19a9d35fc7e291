"""Mini-batch training with Adam, patience-based early stopping and checkpoints."""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as unet
from .losses import dice_loss, dice_loss_backward, one_hot, reconstruct_labels
from .metrics import TISSUES
from .volume import tile_patches

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NTCKPT01"
HISTORY_COLUMNS = ["epoch", "loss", "val_mean_dsc", "dsc_bg", "dsc_csf", "dsc_gm", "dsc_wm",
                   "seconds"]

# rng streams derived from the training seed
_SPLIT_STREAM = 1
_SHUFFLE_STREAM = 2


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.2
    fixed_epochs: bool = False
    smooth: float = 1.0
    min_delta: float = 1e-5
    drop_background: bool = True
    normalize: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.fixed_epochs:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) with early stopping")
            if not 0 < self.patience < self.max_epochs:
                raise ValueError("patience must be positive and below max_epochs")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state, config):
    """One Adam update, in place.  Returns ``(params, state)``."""
    if set(grads) != set(params):
        raise ValueError(f"gradient names differ from parameter names: "
                         f"{sorted(set(grads) ^ set(params))}")
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_mean_dsc: float
    dsc: tuple          # per-class soft DSC on training batches, background first
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.epochs)

    @property
    def losses(self):
        return [e.loss for e in self.epochs]

    @property
    def val_scores(self):
        return [e.val_mean_dsc for e in self.epochs]

    def deterministic_view(self):
        """Everything except wall time."""
        return ([(e.epoch, e.loss, e.val_mean_dsc, tuple(e.dsc)) for e in self.epochs],
                self.best_epoch, self.stopped_early)

    def to_csv(self, include_time=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for e in self.epochs:
            val = "NA" if e.val_mean_dsc is None else repr(e.val_mean_dsc)
            secs = f"{e.seconds:.3f}" if include_time else "NA"
            w.writerow([e.epoch, repr(e.loss), val, *(repr(d) for d in e.dsc), secs])
        return buf.getvalue()


def validation_dsc(model, patches, batch_size=32):
    """Mean tissue DSC of argmax-reconstructed patches, pooled over the patch set."""
    pred = reconstruct_labels(unet.predict(model, patches.images(), batch_size))
    truth = patches.labels()
    scores = []
    for cid in TISSUES:
        a, b = pred == cid, truth == cid
        total = int(a.sum()) + int(b.sum())
        scores.append(1.0 if total == 0 else 2.0 * int((a & b).sum()) / total)
    return float(np.mean(scores))


def train(model, train_patches, val_patches, config, evaluate=None):
    """Train ``model`` in place and return ``(model, history)``.

    With early stopping the returned model is the best-validation snapshot.
    ``evaluate(model, epoch)`` overrides the validation metric.
    """
    if len(train_patches) == 0:
        raise ValueError("no training patches")
    early = not config.fixed_epochs
    if evaluate is None:
        if early and (val_patches is None or len(val_patches) == 0):
            raise ValueError("early stopping needs validation patches")
        if val_patches is not None and len(val_patches):
            def evaluate(m, epoch):
                return validation_dsc(m, val_patches, config.batch_size)

    images = train_patches.images().astype(np.float32)
    targets = one_hot(train_patches.labels(), model.config.num_classes)
    rng = np.random.default_rng([config.seed, _SHUFFLE_STREAM])
    state = AdamState.zeros_like(model.params)
    history = TrainHistory()
    best, best_params, since = -np.inf, None, 0
    n = len(images)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses, dscs = [], []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            probs, caches = unet.forward_train(model, images[idx])
            loss, lcache = dice_loss(probs, targets[idx], config.smooth)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            dprobs, _ = dice_loss_backward(1.0, lcache)
            grads = unet.backward(model, caches, dprobs)
            adam_step(model.params, grads, state, config)
            losses.append(float(loss))
            dscs.append(lcache[1].astype(np.float64))
        score = None if evaluate is None else float(evaluate(model, epoch))
        history.epochs.append(EpochRecord(
            epoch, float(np.mean(losses)), score,
            tuple(float(d) for d in np.mean(dscs, axis=0)), time.perf_counter() - t0))
        log.debug("epoch %d loss %.5f val %s", epoch, history.epochs[-1].loss, score)

        if not early:
            continue
        if score > best + config.min_delta:
            best, since = score, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            history.best_epoch = epoch
        else:
            since += 1
        if since >= config.patience:
            history.stopped_early = True
            break

    if early and best_params is not None:
        model.params = best_params
    elif not early:
        history.best_epoch = len(history.epochs)
    return model, history


def split_validation(volume_ids, fraction, seed):
    """Carve whole volumes (not patches) off for validation."""
    unique = sorted(set(volume_ids))
    if len(unique) < 2:
        raise ValueError("need at least two distinct volumes to carve a validation split")
    n_val = min(max(1, int(round(fraction * len(unique)))), len(unique) - 1)
    perm = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(len(unique))
    val = {unique[i] for i in perm[:n_val]}
    return [v for v in volume_ids if v not in val], sorted(val)


def patches_for(volumes, ids, patch_size=64, normalize=False):
    """Tile labelled volumes, keyed by id, into one patch set.  Repeated ids repeat patches."""
    out = None
    for n, vid in enumerate(ids):
        img, lab = volumes[vid]
        key = vid if ids.count(vid) == 1 else f"{vid}#{n}"
        ps = tile_patches(img, lab, volume_id=key, patch_size=patch_size, normalize=normalize)
        out = ps if out is None else out.extend(ps)
    return out


def fit(volumes, ids, model_config, train_config, patch_size=64):
    """Build a fresh model and train it on the listed labelled volumes."""
    ids = list(ids)
    if train_config.fixed_epochs:
        train_ids, val_ids = ids, []
    else:
        train_ids, val_ids = split_validation(ids, train_config.validation_fraction,
                                              train_config.seed)
    train_ps = patches_for(volumes, train_ids, patch_size, train_config.normalize)
    if train_config.drop_background:
        train_ps = train_ps.drop_background_slices()
    val_ps = patches_for(volumes, val_ids, patch_size, train_config.normalize) if val_ids else None
    model = unet.build(model_config)
    return train(model, train_ps, val_ps, train_config)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, adam_state=None, meta=None):
    names = list(model.params)
    header = {
        "config": model.config.to_dict(),
        "layers": [[n, list(model.params[n].shape)] for n in names],
        "adam_step": None if adam_state is None else adam_state.t,
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        groups = [model.params]
        if adam_state is not None:
            groups += [adam_state.m, adam_state.v]
        for group in groups:
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f4").tobytes())


def _layer_mismatch(expected, found):
    missing = [n for n in expected if n not in found]
    extra = [n for n in found if n not in expected]
    shape = [f"{n} {tuple(found[n])} != {tuple(expected[n])}"
             for n in expected if n in found and tuple(found[n]) != tuple(expected[n])]
    parts = []
    if missing:
        parts.append("missing: " + ", ".join(missing))
    if extra:
        parts.append("extra: " + ", ".join(extra))
    if shape:
        parts.append("shape mismatch: " + "; ".join(shape))
    return " | ".join(parts)


def load_checkpoint(path, expect=None):
    """Read a checkpoint.  Returns ``(model, adam_state_or_None)``.

    ``expect`` (a UNetConfig or UNetModel) rejects checkpoints whose layer
    names or shapes differ from that architecture.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    end = raw.find(b"\n", 8)
    if end < 0:
        raise CheckpointError(f"{path}: header line not terminated")
    header = json.loads(raw[8:end].decode("utf-8"))
    config = unet.UNetConfig(**header["config"])
    layers = {n: tuple(s) for n, s in header["layers"]}

    if expect is not None:
        ref = expect.config if isinstance(expect, unet.UNetModel) else expect
        problem = _layer_mismatch(unet.layer_shapes(ref), layers)
        if problem:
            raise CheckpointError(f"{path}: checkpoint does not fit the model ({problem})")
    problem = _layer_mismatch(unet.layer_shapes(config), layers)
    if problem:
        raise CheckpointError(f"{path}: layers inconsistent with stored config ({problem})")

    has_adam = header.get("adam_step") is not None
    sizes = [int(np.prod(s)) for s in layers.values()]
    expected = 4 * sum(sizes) * (3 if has_adam else 1)
    payload = raw[end + 1:]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype="<f4")

    def unpack(offset):
        out = {}
        for (name, shape), size in zip(layers.items(), sizes):
            out[name] = flat[offset:offset + size].reshape(shape).astype(np.float32)
            offset += size
        return out, offset

    params, off = unpack(0)
    state = None
    if has_adam:
        m, off = unpack(off)
        v, off = unpack(off)
        state = AdamState(m, v, header["adam_step"])
    return unet.UNetModel(config, params), state
