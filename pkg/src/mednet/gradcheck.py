"""Finite-difference verification of every analytic backward pass.

Each layer primitive gets a battery of seeded trials on randomized small
shapes at float64: the analytic gradients of a random scalar projection
``sum(output * R)`` are compared against central finite differences with
step ``h = 1e-5``, for the input and for every parameter tensor.  An
end-to-end check does the same through the full 44-conv graph (16x16
tiny variant) for a sample of individual scalar parameters against the
cross-entropy loss.

ReLU trial inputs are nudged away from the kink at 0 so the checks stay
well-posed; dropout trials re-seed the mask identically for every loss
evaluation.
"""

from dataclasses import dataclass

import numpy as np

from . import layers
from .graph import build_mednet, tiny_config
from .tensor import Rng

H = 1e-5
LAYER_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    """Outcome of one check battery."""

    name: str
    trials: int
    max_err: float
    tolerance: float

    @property
    def ok(self):
        return self.max_err < self.tolerance

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        return (f"{status}  {self.name:<18} trials={self.trials:<3} "
                f"max_err={self.max_err:.3e}  tol={self.tolerance:.0e}")


def _finite_diff(loss, x, h=H):
    """Central differences of a scalar function, perturbing x in place."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = loss()
        flat_x[i] = orig - h
        f_minus = loss()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def _max_rel_err(analytic, numeric):
    """Worst elementwise relative error, floored so near-zero pairs compare
    on an absolute scale (1e-7 when both magnitudes are below 1e-3)."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3)
    return float((diff / denom).max()) if diff.size else 0.0


def _project(y, r):
    return float(np.sum(y * r))


def _check_pairs(pairs):
    """Max relative error over (analytic, numeric) gradient pairs."""
    return max(_max_rel_err(a, n) for a, n in pairs)


def _conv_trial(rng):
    draw = rng.child(0)
    kernel = int(draw.integers(0, 4))
    kernel = (1, 3, 5, 7)[kernel]
    stride = int(draw.integers(1, 3))
    padding = "same" if draw.random() < 0.5 else "valid"
    cin = int(draw.integers(1, 3))
    cout = int(draw.integers(1, 3))
    n = int(draw.integers(1, 3))
    h = kernel + int(draw.integers(0, 3))
    w = kernel + int(draw.integers(0, 3))
    conv = layers.Conv2d(kernel, kernel, cin, cout, stride=stride,
                         padding=padding, use_bias=True,
                         rng=rng.child(1), dtype=np.float64)
    conv.params["bias"] = rng.child(2).normal(size=cout)
    x = rng.child(3).normal(size=(n, h, w, cin))
    r = rng.child(4).normal(size=conv.output_shape(x.shape))

    conv.forward(x)
    gin = conv.backward(r)
    analytic = {"x": gin, "kernel": conv.grads["kernel"].copy(),
                "bias": conv.grads["bias"].copy()}
    pairs = [
        (analytic["x"], _finite_diff(lambda: _project(conv.forward(x), r), x)),
        (analytic["kernel"],
         _finite_diff(lambda: _project(conv.forward(x), r), conv.params["kernel"])),
        (analytic["bias"],
         _finite_diff(lambda: _project(conv.forward(x), r), conv.params["bias"])),
    ]
    return _check_pairs(pairs)


def _batchnorm_trial(rng):
    draw = rng.child(0)
    c = int(draw.integers(1, 4))
    n = int(draw.integers(2, 4))
    h = int(draw.integers(2, 4))
    w = int(draw.integers(2, 4))
    bn = layers.BatchNorm2d(c, dtype=np.float64)
    bn.params["gamma"] = rng.child(1).uniform(0.5, 1.5, c)
    bn.params["beta"] = rng.child(2).normal(size=c)
    x = rng.child(3).normal(size=(n, h, w, c))
    r = rng.child(4).normal(size=(n, h, w, c))

    bn.forward(x, mode="train")
    gin = bn.backward(r)
    analytic = {"x": gin, "gamma": bn.grads["gamma"].copy(),
                "beta": bn.grads["beta"].copy()}
    # train-mode output does not read running stats, so their mutation
    # during the difference loop is harmless
    loss = lambda: _project(bn.forward(x, mode="train"), r)
    pairs = [
        (analytic["x"], _finite_diff(loss, x)),
        (analytic["gamma"], _finite_diff(loss, bn.params["gamma"])),
        (analytic["beta"], _finite_diff(loss, bn.params["beta"])),
    ]
    return _check_pairs(pairs)


def _batchnorm_frozen_trial(rng):
    draw = rng.child(0)
    c = int(draw.integers(1, 4))
    bn = layers.BatchNorm2d(c, dtype=np.float64)
    bn.frozen = True
    bn.params["gamma"] = rng.child(1).uniform(0.5, 1.5, c)
    bn.params["beta"] = rng.child(2).normal(size=c)
    bn.params["running_mean"] = rng.child(3).normal(size=c)
    bn.params["running_var"] = rng.child(4).uniform(0.5, 2.0, c)
    x = rng.child(5).normal(size=(2, 3, 3, c))
    r = rng.child(6).normal(size=(2, 3, 3, c))

    bn.forward(x, mode="train")
    gin = bn.backward(r)
    analytic = {"x": gin, "gamma": bn.grads["gamma"].copy(),
                "beta": bn.grads["beta"].copy()}
    loss = lambda: _project(bn.forward(x, mode="train"), r)
    pairs = [
        (analytic["x"], _finite_diff(loss, x)),
        (analytic["gamma"], _finite_diff(loss, bn.params["gamma"])),
        (analytic["beta"], _finite_diff(loss, bn.params["beta"])),
    ]
    return _check_pairs(pairs)


def _relu_trial(rng):
    relu = layers.Relu()
    x = rng.child(0).normal(size=(3, 4, 4, 2))
    x = x + 0.2 * np.sign(x)  # keep the difference step off the kink
    r = rng.child(1).normal(size=x.shape)
    relu.forward(x)
    gin = relu.backward(r)
    numeric = _finite_diff(lambda: _project(relu.forward(x), r), x)
    return _max_rel_err(gin, numeric)


def _dropout_trial(rng):
    rate = float(rng.child(0).random() * 0.6)
    drop = layers.Dropout(rate)
    x = rng.child(1).normal(size=(4, 6))
    r = rng.child(2).normal(size=x.shape)
    mask_seed = int(rng.child(3).integers(0, 2**31))

    def loss():
        return _project(drop.forward(x, mode="train", rng=Rng(mask_seed)), r)

    loss()  # populates the cache with the fixed-seed mask
    gin = drop.backward(r)
    return _max_rel_err(gin, _finite_diff(loss, x))


def _concat_trial(rng):
    draw = rng.child(0)
    k = int(draw.integers(2, 5))
    channels = [int(draw.integers(1, 4)) for _ in range(k)]
    xs = [rng.child(1 + i).normal(size=(2, 3, 3, c)) for i, c in enumerate(channels)]
    cat = layers.Concat()
    r = rng.child(9).normal(size=(2, 3, 3, sum(channels)))
    cat.forward(xs)
    gins = cat.backward(r)
    worst = 0.0
    for i, x in enumerate(xs):
        numeric = _finite_diff(lambda: _project(cat.forward(xs), r), x)
        worst = max(worst, _max_rel_err(gins[i], numeric))
    return worst


def _add_trial(rng):
    a = rng.child(0).normal(size=(2, 3, 3, 2))
    b = rng.child(1).normal(size=(2, 3, 3, 2))
    r = rng.child(2).normal(size=a.shape)
    add = layers.Add()
    add.forward([a, b])
    ga, gb = add.backward(r)
    worst = _max_rel_err(ga, _finite_diff(lambda: _project(add.forward([a, b]), r), a))
    worst = max(worst,
                _max_rel_err(gb, _finite_diff(lambda: _project(add.forward([a, b]), r), b)))
    return worst


def _gap_trial(rng):
    x = rng.child(0).normal(size=(2, 4, 4, 3))
    r = rng.child(1).normal(size=(2, 3))
    gap = layers.GlobalAvgPool()
    gap.forward(x)
    gin = gap.backward(r)
    return _max_rel_err(gin, _finite_diff(lambda: _project(gap.forward(x), r), x))


def _fully_connected_trial(rng):
    draw = rng.child(0)
    din = int(draw.integers(2, 6))
    dout = int(draw.integers(2, 6))
    n = int(draw.integers(1, 4))
    fc = layers.FullyConnected(din, dout, rng=rng.child(1), dtype=np.float64)
    fc.params["bias"] = rng.child(2).normal(size=dout)
    x = rng.child(3).normal(size=(n, din))
    r = rng.child(4).normal(size=(n, dout))
    fc.forward(x)
    gin = fc.backward(r)
    loss = lambda: _project(fc.forward(x), r)
    pairs = [
        (gin, _finite_diff(loss, x)),
        (fc.grads["weight"].copy(), _finite_diff(loss, fc.params["weight"])),
        (fc.grads["bias"].copy(), _finite_diff(loss, fc.params["bias"])),
    ]
    return _check_pairs(pairs)


def _softmax_cross_entropy_trial(rng):
    draw = rng.child(0)
    n = int(draw.integers(2, 5))
    k = int(draw.integers(2, 6))
    logits = rng.child(1).normal(size=(n, k))
    labels = rng.child(2).integers(0, k, size=n)
    _, _, grad = layers.softmax_cross_entropy(logits, labels)
    numeric = _finite_diff(
        lambda: layers.softmax_cross_entropy(logits, labels)[0], logits
    )
    return _max_rel_err(grad, numeric)


LAYER_CHECKS = (
    ("conv2d", _conv_trial),
    ("batchnorm", _batchnorm_trial),
    ("batchnorm_frozen", _batchnorm_frozen_trial),
    ("relu", _relu_trial),
    ("dropout", _dropout_trial),
    ("concat", _concat_trial),
    ("add", _add_trial),
    ("global_avg_pool", _gap_trial),
    ("fully_connected", _fully_connected_trial),
    ("softmax_xent", _softmax_cross_entropy_trial),
)


def run_layer_checks(seed=0, trials=20):
    """The per-primitive battery: ``trials`` randomized trials per layer."""
    results = []
    base = Rng(seed)
    for name, trial_fn in LAYER_CHECKS:
        worst = 0.0
        stream = base.child(hash_name(name))
        for t in range(trials):
            worst = max(worst, trial_fn(stream.child(t)))
        results.append(GradCheckResult(name, trials, worst, LAYER_TOLERANCE))
    return results


def hash_name(name):
    return sum(name.encode("ascii"))


def run_end_to_end_check(seed=0, n_params=10):
    """Loss gradients through the whole tiny 16x16 graph for sampled scalars."""
    g = build_mednet(tiny_config(num_classes=3), seed=seed, dtype=np.float64)
    rng = Rng(seed).child(999)
    x = rng.child(0).normal(size=(2, 16, 16, 1))
    labels = np.array([0, 2])

    def loss_value():
        g.set_mode("train")
        logits, _ = g.forward(x)
        return layers.softmax_cross_entropy(logits, labels)

    loss, _, grad_logits = loss_value()
    g.backward(grad_logits)
    grads = {k: v.copy() for k, v in g.named_grads().items()}

    params = g.named_params()
    names = g.trainable_names()
    pick = rng.child(1)
    worst = 0.0
    for _ in range(n_params):
        name = names[int(pick.integers(0, len(names)))]
        arr = params[name]
        idx = int(pick.integers(0, arr.size))
        orig = arr.flat[idx]
        arr.flat[idx] = orig + H
        f_plus = loss_value()[0]
        arr.flat[idx] = orig - H
        f_minus = loss_value()[0]
        arr.flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * H)
        worst = max(worst, _max_rel_err(np.array([grads[name].flat[idx]]),
                                        np.array([numeric])))
    return GradCheckResult("end_to_end", n_params, worst, END_TO_END_TOLERANCE)


def run_all(seed=0, trials=20, n_params=10):
    """Layer battery plus the end-to-end check."""
    results = run_layer_checks(seed=seed, trials=trials)
    results.append(run_end_to_end_check(seed=seed, n_params=n_params))
    return results


def all_ok(results):
    return all(r.ok for r in results)


def format_report(results):
    lines = [r.line() for r in results]
    verdict = "all gradient checks passed" if all_ok(results) \
        else "GRADIENT CHECKS FAILED"
    lines.append(verdict)
    return "\n".join(lines)
