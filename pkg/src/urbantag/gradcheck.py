"""Finite-difference verification of every autodiff primitive and of the
full system-1 model.

Each case builds a scalar loss from float64 tensors; central differences
with h=1e-5 are compared against the taped gradients coordinate by
coordinate. The model case runs a desk-scale configuration so the whole
sweep stays well under a minute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss as L
from . import tensor as T
from .nn import ModelConfig, build_model, metadata_to_array
from .taxonomy import LabelVector, load_taxonomy

FD_H = 1e-5
PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _relative_error(analytic, numeric):
    denom = np.maximum.reduce(
        [np.abs(analytic), np.abs(numeric), np.full_like(analytic, 1e-6)]
    )
    return np.abs(analytic - numeric) / denom


def check_case(loss_fn, params, h=FD_H, max_coords=None, seed=0):
    """Max relative error between taped and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current ``params`` data on
    every call. Large tensors are subsampled to ``max_coords`` randomly
    chosen coordinates (seeded, so the check is reproducible).
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = _relative_error(
                np.asarray(aflat[i], dtype=np.float64),
                np.asarray(numeric, dtype=np.float64),
            )
            worst = max(worst, float(err))
    return worst


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return T.parameter(rng.uniform(lo, hi, shape))


def _project(out, rng):
    """Reduce any op output to a scalar with a fixed random weighting."""
    r = rng.standard_normal(out.shape)
    return (out * r).sum()


def _case(build):
    """Wrap a builder so each case owns a deterministic rng."""

    def make():
        return build(np.random.default_rng(abs(hash(build.__name__)) % 2**32))

    make.__name__ = build.__name__
    return make


def _primitive_cases():
    cases = []

    def register(name):
        def deco(fn):
            cases.append((name, fn))
            return fn

        return deco

    @register("add")
    def case_add():
        rng = np.random.default_rng(1)
        a, b = _rand(rng, (5,)), _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: ((a + b) * r).sum(), [a, b]

    @register("add_broadcast")
    def case_add_broadcast():
        rng = np.random.default_rng(2)
        a, b = _rand(rng, (3, 4)), _rand(rng, (4,))
        r = rng.standard_normal((3, 4))
        return lambda: ((a + b) * r).sum(), [a, b]

    @register("mul")
    def case_mul():
        rng = np.random.default_rng(3)
        a, b = _rand(rng, (5,)), _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: ((a * b) * r).sum(), [a, b]

    @register("div")
    def case_div():
        rng = np.random.default_rng(4)
        a = _rand(rng, (5,))
        b = _rand(rng, (5,), lo=0.5, hi=1.5)
        r = rng.standard_normal((5,))
        return lambda: ((a / b) * r).sum(), [a, b]

    @register("matmul")
    def case_matmul():
        rng = np.random.default_rng(5)
        a, b = _rand(rng, (3, 4)), _rand(rng, (4, 2))
        r = rng.standard_normal((3, 2))
        return lambda: ((a @ b) * r).sum(), [a, b]

    @register("matmul_batched")
    def case_matmul_batched():
        rng = np.random.default_rng(6)
        a, b = _rand(rng, (2, 3, 4)), _rand(rng, (4, 2))
        r = rng.standard_normal((2, 3, 2))
        return lambda: ((a @ b) * r).sum(), [a, b]

    @register("conv2d_same")
    def case_conv_same():
        rng = np.random.default_rng(7)
        x, w = _rand(rng, (2, 2, 4, 5)), _rand(rng, (3, 2, 3, 3))
        r = rng.standard_normal((2, 3, 4, 5))
        return lambda: (T.conv2d(x, w, "same") * r).sum(), [x, w]

    @register("conv2d_valid")
    def case_conv_valid():
        rng = np.random.default_rng(8)
        x, w = _rand(rng, (2, 2, 5, 5)), _rand(rng, (3, 2, 3, 3))
        r = rng.standard_normal((2, 3, 3, 3))
        return lambda: (T.conv2d(x, w, "valid") * r).sum(), [x, w]

    @register("max_pool2d")
    def case_max_pool():
        rng = np.random.default_rng(9)
        x = _rand(rng, (2, 2, 4, 6))
        r = rng.standard_normal((2, 2, 2, 3))
        return lambda: (T.max_pool2d(x, (2, 2)) * r).sum(), [x]

    @register("relu")
    def case_relu():
        rng = np.random.default_rng(10)
        x = _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: (T.relu(x) * r).sum(), [x]

    @register("sigmoid")
    def case_sigmoid():
        rng = np.random.default_rng(11)
        x = _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: (T.sigmoid(x) * r).sum(), [x]

    @register("tanh")
    def case_tanh():
        rng = np.random.default_rng(12)
        x = _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: (T.tanh(x) * r).sum(), [x]

    @register("sin")
    def case_sin():
        rng = np.random.default_rng(13)
        x = _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: (T.sin(x) * r).sum(), [x]

    @register("exp")
    def case_exp():
        rng = np.random.default_rng(14)
        x = _rand(rng, (5,))
        r = rng.standard_normal((5,))
        return lambda: (T.exp(x) * r).sum(), [x]

    @register("log")
    def case_log():
        rng = np.random.default_rng(15)
        x = _rand(rng, (5,), lo=0.5, hi=1.5)
        r = rng.standard_normal((5,))
        return lambda: (T.log(x) * r).sum(), [x]

    @register("sqrt")
    def case_sqrt():
        rng = np.random.default_rng(16)
        x = _rand(rng, (5,), lo=0.5, hi=1.5)
        r = rng.standard_normal((5,))
        return lambda: (T.sqrt(x) * r).sum(), [x]

    @register("clip")
    def case_clip():
        rng = np.random.default_rng(17)
        x = _rand(rng, (5,), lo=-0.4, hi=0.4)  # away from the clip bounds
        r = rng.standard_normal((5,))
        return lambda: (T.clip(x, -0.75, 0.75) * r).sum(), [x]

    @register("softmax")
    def case_softmax():
        rng = np.random.default_rng(18)
        x = _rand(rng, (3, 5))
        r = rng.standard_normal((3, 5))
        return lambda: (T.softmax(x, axis=-1) * r).sum(), [x]

    @register("sum_axis")
    def case_sum():
        rng = np.random.default_rng(19)
        x = _rand(rng, (3, 4))
        r = rng.standard_normal((4,))
        return lambda: (x.sum(axis=0) * r).sum(), [x]

    @register("mean_axis")
    def case_mean():
        rng = np.random.default_rng(20)
        x = _rand(rng, (3, 4))
        r = rng.standard_normal((3,))
        return lambda: (x.mean(axis=1) * r).sum(), [x]

    @register("transpose")
    def case_transpose():
        rng = np.random.default_rng(21)
        x = _rand(rng, (2, 3, 4))
        r = rng.standard_normal((4, 2, 3))
        return lambda: (x.transpose(2, 0, 1) * r).sum(), [x]

    @register("reshape")
    def case_reshape():
        rng = np.random.default_rng(22)
        x = _rand(rng, (3, 4))
        r = rng.standard_normal((2, 6))
        return lambda: (x.reshape(2, 6) * r).sum(), [x]

    @register("slice")
    def case_slice():
        rng = np.random.default_rng(23)
        x = _rand(rng, (4, 6))
        r = rng.standard_normal((2, 3))
        return lambda: (x[1:3, ::2] * r).sum(), [x]

    @register("concat")
    def case_concat():
        rng = np.random.default_rng(24)
        a, b = _rand(rng, (2, 3)), _rand(rng, (2, 2))
        r = rng.standard_normal((2, 5))
        return lambda: (T.concat([a, b], axis=1) * r).sum(), [a, b]

    @register("layer_norm")
    def case_layer_norm():
        rng = np.random.default_rng(25)
        x = _rand(rng, (3, 5))
        gamma = _rand(rng, (5,), lo=0.5, hi=1.5)
        beta = _rand(rng, (5,))
        r = rng.standard_normal((3, 5))
        return lambda: (T.layer_norm(x, gamma, beta) * r).sum(), [x, gamma, beta]

    @register("embedding_lookup")
    def case_embedding():
        rng = np.random.default_rng(26)
        table = _rand(rng, (6, 4))
        ids = np.array([0, 3, 3, 5])
        r = rng.standard_normal((4, 4))
        return lambda: (T.embedding_lookup(table, ids) * r).sum(), [table]

    @register("mlp_composite")
    def case_mlp():
        rng = np.random.default_rng(27)
        x = _rand(rng, (3, 4))
        w1, b1 = _rand(rng, (4, 6)), _rand(rng, (6,))
        w2, b2 = _rand(rng, (6, 2)), _rand(rng, (2,))
        y = rng.integers(0, 2, (3, 2)).astype(np.float64)

        def f():
            h = T.relu(x @ w1 + b1.reshape(1, -1))
            p = T.sigmoid(h @ w2 + b2.reshape(1, -1))
            return L.bce(p, y)

        return f, [x, w1, b1, w2, b2]

    return cases


PRIMITIVE_CASES = _primitive_cases()


def tiny_model_config():
    return ModelConfig(
        system=1,
        d_model=8,
        n_heads=2,
        n_audio_layers=1,
        n_meta_layers=1,
        conv_channels=(2, 4, 4),
        pool_plan=((2, 2), (2, 2), (1, 2)),
        gn_groups=2,
        ff_mult=2,
        n_mels=16,
    )


def model_case(seed=0):
    """Scalar joint loss of a tiny float64 system-1 model on 2 clips."""
    tax = load_taxonomy()
    model = build_model(tiny_model_config(), tax, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    feats = rng.standard_normal((2, 8, 16))
    meta = metadata_to_array(
        [
            # week, day, hour, lat, lon within range
        ]
    )
    meta = np.array([[10, 2, 7, 40.7, -74.0], [45, 6, 23, 40.9, -73.8]], dtype=float)
    bundle = LabelVector(
        coarse=rng.integers(0, 2, (2, 8)).astype(float),
        fine=rng.integers(0, 2, (2, 23)).astype(float),
        fine_mask=(rng.uniform(size=(2, 23)) > 0.25).astype(float),
    )

    def f():
        out = model.forward(feats, meta)
        return L.joint_loss(1, out, bundle)

    params = model.named_params()
    return f, params


def run_primitive_checks(h=FD_H, tol=PRIMITIVE_TOL):
    results = []
    for name, case in PRIMITIVE_CASES:
        loss_fn, params = case()
        err = check_case(loss_fn, params, h=h)
        results.append(CheckResult(name=name, max_error=err, tolerance=tol))
    return results


def run_model_check(h=FD_H, tol=MODEL_TOL, max_coords=64, seed=0):
    loss_fn, params = model_case(seed=seed)
    err = check_case(loss_fn, [p for _, p in params], h=h, max_coords=max_coords)
    return CheckResult(name="system1_full_model", max_error=err, tolerance=tol)


def run_all(max_coords=64):
    """The complete table (primitives + full model); True iff all passed."""
    results = run_primitive_checks()
    results.append(run_model_check(max_coords=max_coords))
    return results, all(r.passed for r in results)
