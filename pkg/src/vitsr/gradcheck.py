"""Finite-difference verification of the autodiff ops.

Each check builds a random scalar objective ``sum(op(inputs) * probe)``
in 64-bit precision, differentiates it with :meth:`Tensor.backward`, and
compares against central differences element by element.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import diffcore as dc

STEP = 1e-5
# The end-to-end check uses a smaller step: at init many LeakyReLU inputs in
# the head sit within 1e-5 of the kink, which biases wider differences.
MODEL_STEP = 1e-7
FLOOR = 1e-6


@dataclasses.dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    seconds: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(objective, array, index, step=STEP):
    """Central difference of ``objective()`` w.r.t. ``array[index]`` (mutated in place)."""
    original = array[index]
    array[index] = original + step
    plus = objective()
    array[index] = original - step
    minus = objective()
    array[index] = original
    return (plus - minus) / (2 * step)


def check_op(fn, arrays, *, name="op", tolerance=1e-3, rng=None, max_elements=None,
             step=STEP):
    """Compare analytic and numeric gradients of ``fn`` w.r.t. every input.

    ``arrays`` are float64 numpy arrays; ``fn`` takes the matching tensors
    and returns a tensor. A fixed random probe turns the output into a
    scalar so every output element contributes.
    """
    rng = rng or np.random.default_rng(0)
    with dc.precision(np.float64):
        tensors = [dc.Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        probe = rng.uniform(-1.0, 1.0, size=out.shape)
        (out * probe).sum().backward()

        def objective():
            with dc.no_grad():
                fresh = [dc.Tensor(t.data) for t in tensors]
                return float((fn(*fresh).data * probe).sum())

        worst, checked = 0.0, 0
        for t in tensors:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, size=max_elements, replace=False)
            analytic = t.grad.reshape(-1)
            for i in idx:
                numeric = numeric_grad(objective, flat, i, step)
                worst = max(worst, float(relative_error(analytic[i], numeric)))
                checked += 1
    return GradCheckResult(name, worst, tolerance, checked)


def _uniform(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from_zero(rng, *shape, margin=0.05):
    x = _uniform(rng, *shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_cases():
    """(name, factory) pairs; a factory maps an rng to (fn, arrays)."""

    def attention(rng):
        d, heads = 8, 2
        arrays = [_uniform(rng, 5, d), _uniform(rng, 3 * d, d) * 0.5, _uniform(rng, 3 * d),
                  _uniform(rng, d, d) * 0.5, _uniform(rng, d)]
        return (lambda x, wq, bq, wo, bo: dc.multi_head_attention(x, heads, wq, bq, wo, bo),
                arrays)

    return [
        ("add", lambda r: (dc.add, [_uniform(r, 3, 4), _uniform(r, 4)])),
        ("sub", lambda r: (dc.sub, [_uniform(r, 3, 4), _uniform(r, 3, 1)])),
        ("mul", lambda r: (dc.mul, [_uniform(r, 2, 3, 4), _uniform(r, 3, 4)])),
        ("div", lambda r: (dc.div, [_uniform(r, 3, 4), 1.0 + np.abs(_uniform(r, 3, 4))])),
        ("abs", lambda r: (dc.abs, [_away_from_zero(r, 3, 5)])),
        ("sum", lambda r: (lambda x: dc.sum(x, axis=1), [_uniform(r, 3, 4, 2)])),
        ("mean", lambda r: (lambda x: dc.mean(x, axis=(0, 2), keepdims=True),
                            [_uniform(r, 3, 4, 2)])),
        ("reshape", lambda r: (lambda x: dc.reshape(x, (6, 4)), [_uniform(r, 2, 3, 4)])),
        ("transpose", lambda r: (lambda x: dc.transpose(x, (2, 0, 1)), [_uniform(r, 2, 3, 4)])),
        ("concat", lambda r: (lambda a, b: dc.concat([a, b], axis=1),
                              [_uniform(r, 2, 3), _uniform(r, 2, 5)])),
        ("getitem", lambda r: (lambda x: x[1], [_uniform(r, 3, 2, 4)])),
        ("matmul", lambda r: (dc.matmul, [_uniform(r, 2, 3, 4), _uniform(r, 4, 5)])),
        ("linear", lambda r: (dc.linear, [_uniform(r, 2, 3), _uniform(r, 4, 3), _uniform(r, 4)])),
        ("conv2d", lambda r: (lambda x, w, b: dc.conv2d(x, w, b, padding=1),
                              [_uniform(r, 2, 5, 5), _uniform(r, 3, 2, 3, 3), _uniform(r, 3)])),
        ("conv2d_batched", lambda r: (lambda x, w, b: dc.conv2d(x, w, b, padding=1),
                                      [_uniform(r, 2, 2, 4, 4), _uniform(r, 2, 2, 3, 3),
                                       _uniform(r, 2)])),
        ("layer_norm", lambda r: (dc.layer_norm, [_uniform(r, 4, 8), _uniform(r, 8),
                                                  _uniform(r, 8)])),
        ("softmax", lambda r: (dc.softmax, [_uniform(r, 3, 6)])),
        ("gelu", lambda r: (dc.gelu, [_uniform(r, 4, 5)])),
        ("leaky_relu", lambda r: (lambda x: dc.leaky_relu(x, 0.2), [_away_from_zero(r, 4, 5)])),
        ("pixel_shuffle", lambda r: (lambda x: dc.pixel_shuffle(x, 2), [_uniform(r, 8, 3, 2)])),
        ("pixel_unshuffle", lambda r: (lambda x: dc.pixel_unshuffle(x, 2),
                                       [_uniform(r, 2, 4, 6)])),
        ("multi_head_attention", attention),
    ]


def check_ops(instances=5, seed=0, tolerance=1e-3):
    """Run every op case on ``instances`` random draws; one result per op."""
    results = []
    for k, (name, factory) in enumerate(op_cases()):
        start = time.perf_counter()
        worst, checked = 0.0, 0
        for i in range(instances):
            rng = np.random.default_rng([seed, k, i])
            fn, arrays = factory(rng)
            res = check_op(fn, arrays, name=name, tolerance=tolerance, rng=rng)
            worst, checked = max(worst, res.max_rel_error), checked + res.checked
        results.append(GradCheckResult(name, worst, tolerance, checked,
                                       time.perf_counter() - start))
    return results


MICRO_CONFIG = dict(image_size=32, patch_size=8, embed_dim=32, encoder_depth=2,
                    decoder_depth=2, num_heads_encoder=2, num_heads_decoder=2)


def check_model(n_params=120, seed=0, tolerance=1e-2, batch=2):
    """Finite-difference check of the full network + composite loss.

    The final conv is given random weights so gradients reach every
    upstream parameter.
    """
    from .losses import LossConfig, composite_loss
    from .model import ModelConfig, ViTSR

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    with dc.precision(np.float64):
        cfg = ModelConfig(**MICRO_CONFIG, residual_mode="on")
        model = ViTSR(cfg, seed=seed)
        for name in ("head.final.weight", "head.final.bias"):
            p = model.params[name]
            p.data = rng.normal(0.0, 0.05, size=p.shape)
        s = cfg.image_size
        x = rng.uniform(0.0, 1.0, size=(batch, 3, s, s))
        y = rng.uniform(0.0, 1.0, size=(batch, 3, s, s))
        loss_cfg = LossConfig()

        def objective():
            with dc.no_grad():
                return float(composite_loss(model(dc.Tensor(x)), dc.Tensor(y), loss_cfg).data)

        model.zero_grad()
        composite_loss(model(dc.Tensor(x)), dc.Tensor(y), loss_cfg).backward()

        # sample parameters proportionally across tensors, at least one per tensor
        names = list(model.params)
        picks = [(name, int(rng.integers(model.params[name].size))) for name in names]
        sizes = np.array([model.params[n].size for n in names], dtype=float)
        extra = max(0, n_params - len(picks))
        for j in rng.choice(len(names), size=extra, p=sizes / sizes.sum()):
            picks.append((names[j], int(rng.integers(sizes[j]))))

        worst = 0.0
        for name, i in picks:
            p = model.params[name]
            numeric = numeric_grad(objective, p.data.reshape(-1), i, MODEL_STEP)
            analytic = p.grad.reshape(-1)[i]
            worst = max(worst, float(relative_error(analytic, numeric)))
    return GradCheckResult("vitsr_end_to_end", worst, tolerance, len(picks),
                           time.perf_counter() - start)


def run_suite(instances=5, n_params=120, seed=0):
    return check_ops(instances=instances, seed=seed) + [check_model(n_params, seed=seed)]
