"""Central finite-difference checks for hand-written adjoints."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    n_checked: int = 0
    message: str = ""

    @property
    def passed(self):
        return np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.name:<24s} max_rel_err={self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.n_checked} coords)"
        return f"{line} {self.message}".rstrip()


_NOISE_ULPS = 1e3


def rel_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(forward, backward, inputs, *, name="op", tolerance=1e-4, step=1e-5,
               wrt=None, max_coords=None, seed=0, floor=1e-8, pattern=None):
    """Compare an adjoint against central differences.

    ``forward(*inputs)`` returns ``(out, cache)`` and ``backward(dout, cache)``
    returns one gradient per input (a bare array is accepted for one-input ops;
    ``None`` marks a non-differentiable input).  The scalar probed is
    ``sum(out * R)`` for a fixed seeded random ``R``.  ``max_coords`` caps the
    number of probed coordinates per input; the subset is drawn from ``seed``.

    Relative errors use a floor no smaller than the rounding noise of the
    difference quotient (about 1e3 ulps of the objective divided by ``step``).

    ``pattern(cache)`` may return bytes describing the active piece of a
    piecewise-smooth function (ReLU masks, pooling winners).  Coordinates whose
    probes land on a different piece than the base point are skipped, since a
    central difference across a kink measures nothing useful.
    """
    inputs = [np.array(a, dtype=np.float64, order="C") for a in inputs]
    rng = np.random.default_rng(seed)
    out, cache = forward(*inputs)
    out = np.asarray(out)
    base_piece = None if pattern is None else pattern(cache)
    proj = np.ones_like(out) if out.ndim == 0 else rng.standard_normal(out.shape)

    grads = backward(proj if out.ndim else 1.0, cache)
    if not isinstance(grads, (tuple, list)):
        grads = (grads,)
    if wrt is None:
        wrt = [i for i, g in enumerate(grads) if g is not None]

    # below this magnitude a central difference is rounding noise, not signal
    f0 = float(np.sum(out * proj))
    floor = max(floor, _NOISE_ULPS * np.finfo(np.float64).eps * max(abs(f0), 1.0) / step)

    def objective():
        y, c = forward(*inputs)
        same = pattern is None or pattern(c) == base_piece
        return float(np.sum(np.asarray(y) * proj)), same

    worst = 0.0
    per_input = {}
    n_checked = skipped = 0
    for i in wrt:
        g = np.asarray(grads[i], dtype=np.float64)
        if g.shape != inputs[i].shape:
            return GradCheckReport(name, tolerance, np.inf, per_input, n_checked,
                                   f"gradient shape {g.shape} != input shape {inputs[i].shape}")
        if not np.all(np.isfinite(g)):
            return GradCheckReport(name, tolerance, np.inf, per_input, n_checked,
                                   f"non-finite analytic gradient for input {i}")
        flat = inputs[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        smooth = np.ones(coords.size, dtype=bool)
        for n, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            fp, ok_p = objective()
            flat[c] = orig - step
            fm, ok_m = objective()
            flat[c] = orig
            numeric[n] = (fp - fm) / (2 * step)
            smooth[n] = ok_p and ok_m
        err = rel_error(g.reshape(-1)[coords][smooth], numeric[smooth], floor).max(initial=0.0)
        per_input[i] = float(err)
        worst = max(worst, float(err))
        n_checked += int(smooth.sum())
        skipped += int((~smooth).sum())
    message = f"{skipped} coords skipped at kinks" if skipped else ""
    if n_checked == 0:
        return GradCheckReport(name, tolerance, np.inf, per_input, 0, "no smooth coordinates")
    return GradCheckReport(name, tolerance, worst, per_input, n_checked, message)


PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


def _primitive_cases(rng):
    from . import losses, ops

    def u(*shape):
        return rng.uniform(-1, 1, size=shape)

    x_relu = u(2, 3, 4, 4)
    x_relu[np.abs(x_relu) < 0.05] = 0.5
    # distinct values keep every pooling window away from a tie
    x_pool = rng.permutation(72).reshape(2, 1, 6, 6) / 72.0
    target = losses.one_hot(rng.integers(0, 4, (2, 5, 5)), dtype=np.float64)

    def dice_fwd(pred):
        dsc, cache = losses.soft_dice(pred, target)
        return dsc, cache

    def loss_fwd(pred):
        return losses.dice_loss(pred, target)

    probs = rng.dirichlet(np.ones(4), size=(2, 5, 5)).transpose(0, 3, 1, 2)
    return [
        ("conv2d", ops.conv2d, ops.conv2d_backward, [u(2, 3, 5, 6), u(4, 3, 3, 3), u(4)]),
        ("conv1x1", ops.conv1x1, ops.conv1x1_backward, [u(2, 3, 4, 4), u(4, 3, 1, 1), u(4)]),
        ("relu", ops.relu, ops.relu_backward, [x_relu]),
        ("maxpool2", ops.maxpool2, ops.maxpool2_backward, [x_pool]),
        ("upconv2", ops.upconv2, ops.upconv2_backward, [u(2, 3, 3, 4), u(3, 2, 2, 2), u(2)]),
        ("concat_channels", ops.concat_channels, ops.concat_channels_backward,
         [u(2, 2, 3, 3), u(2, 3, 3, 3)]),
        ("softmax_channels", ops.softmax_channels, ops.softmax_channels_backward,
         [2 * u(2, 4, 3, 3)]),
        ("soft_dice", dice_fwd, lambda d, c: losses.soft_dice_backward(d, c)[0], [probs]),
        ("dice_loss", loss_fwd, lambda d, c: losses.dice_loss_backward(d, c)[0], [probs]),
    ]


def check_model(seed=0, tolerance=MODEL_TOL, step=1e-5):
    """Whole-network check: dice loss of a base-2, depth-2 U-Net against every parameter."""
    from . import losses, model

    rng = np.random.default_rng(seed)
    net = model.build(model.UNetConfig(base_channels=2, depth=2, seed=seed), dtype=np.float64)
    for k in net.params:
        if k.endswith("bias"):
            net.params[k] = rng.uniform(-0.1, 0.1, net.params[k].shape)
    x = rng.uniform(-1, 1, (2, 1, 16, 16))
    target = losses.one_hot(rng.integers(0, 4, (2, 16, 16)), dtype=np.float64)
    names = list(net.params)
    sizes = [net.params[k].size for k in names]

    def unflatten(theta):
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return {k: p.reshape(net.params[k].shape) for k, p in zip(names, parts)}

    def fwd(theta):
        net.params = unflatten(theta)
        probs, caches = model.forward_train(net, x)
        loss, lcache = losses.dice_loss(probs, target)
        return loss, (caches, lcache)

    def piece(cache):
        caches = cache[0]
        parts = [np.packbits(v) for k, v in caches.items() if k.endswith(".relu")]
        parts += [caches[k][0].astype(np.uint8) for k in caches if k.startswith("pool")]
        return b"".join(p.tobytes() for p in parts)

    def bwd(dloss, cache):
        caches, lcache = cache
        grads = model.backward(net, caches, losses.dice_loss_backward(dloss, lcache)[0])
        return np.concatenate([grads[k].reshape(-1) for k in names])

    theta = np.concatenate([net.params[k].reshape(-1) for k in names])
    return grad_check(fwd, bwd, [theta], name="unet_end_to_end", tolerance=tolerance, step=step,
                      pattern=piece)


def run_suite(seed=0, include_model=True):
    """Every primitive adjoint plus (optionally) the tiny end-to-end network."""
    rng = np.random.default_rng(seed)
    reports = [grad_check(f, b, inputs, name=name, tolerance=PRIMITIVE_TOL, seed=seed)
               for name, f, b, inputs in _primitive_cases(rng)]
    if include_model:
        reports.append(check_model(seed))
    return reports
