"""Central finite-difference checks for every differentiable op and composite module.

An analytic gradient entry ``a`` passes against the numeric estimate ``f``
when ``|a - f| <= tol * max(1, |f|)``. Small tensors are checked entry by
entry; large ones get a random directional derivative plus a handful of
sampled coordinates, which keeps the full-model check to seconds.

A central difference whose two probes land on opposite sides of a relu
kink does not estimate the derivative there. For such an entry the base
point is shifted along that coordinate by a few steps until both probes
share one activation pattern, and the analytic gradient is recomputed at
the shifted point. ``kinks`` counts these relocations. An entry with no kink-free shift fails.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dcfpn import DCFPN, FusionWeights, LargeFieldConnection, fuse_layer, scale_aware_feature
from .layers import Conv2d, GroupNorm, TransposedConv2d, bilinear_resize
from .model import ModelConfig, SaNet
from .sfr import SFR, spatial_function
from .tensor import Tensor, backward, no_grad
from .train import cross_entropy_loss

SUITES = ("layers", "sfr", "dcfpn", "model")


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    passed: bool
    kinks: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" relocated={self.kinks}" if self.kinks else ""
        return f"{status} {self.name:<40} max_err={self.max_error:.3e} entries={self.checked}{extra}"


def projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """sum(out * weights): a scalar with a generic, non-degenerate gradient."""
    return T.sum_all(T.mul(out, Tensor(weights, dtype=out.dtype)))


_OFFSETS = (0.0, 2.5, -2.5, 5.5, -5.5, 11.5, -11.5, 23.5, -23.5)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[tuple[str, Tensor]],
                    eps: float = 1e-4, tol: float = 1e-4, full_limit: int = 256,
                    samples: int = 4, rng: np.random.Generator | None = None) -> list[CheckResult]:
    """Compare ``backward`` against central differences for each named tensor."""
    rng = rng if rng is not None else np.random.default_rng(0)
    for _, t in tensors:
        t.grad = None
    grads = backward(loss_fn(), [t for _, t in tensors])

    def value() -> tuple[float, list]:
        with no_grad(), T.record_relu_masks() as masks:
            return loss_fn().item(), masks

    def central(t: Tensor, base: np.ndarray, step: np.ndarray) -> float | None:
        """Central difference along ``step``, or None if the probes straddle a kink."""
        t.data[...] = base + step
        up, m_up = value()
        t.data[...] = base - step
        down, m_down = value()
        t.data[...] = base
        if any(not np.array_equal(x, y) for x, y in zip(m_up, m_down)):
            return None
        return (up - down) / (2 * eps)

    def analytic_at(t: Tensor, base: np.ndarray) -> np.ndarray:
        t.data[...] = base
        g = backward(loss_fn(), [t])[t]
        t.grad = None
        return g

    results = []
    for name, t in tensors:
        orig = t.data.copy()
        errs, kinks, unresolved = [], 0, 0
        probes = []
        idx = np.arange(t.size) if t.size <= full_limit else rng.choice(t.size, size=samples, replace=False)
        for i in idx:
            unit = np.zeros(t.shape)
            unit.reshape(-1)[i] = 1.0
            probes.append(unit)
        if t.size > full_limit:
            direction = rng.standard_normal(t.shape)
            probes.append(direction / np.linalg.norm(direction))
        for d in probes:
            for off in _OFFSETS:
                base = orig + off * eps * d
                num = central(t, base, eps * d)
                if num is not None:
                    break
            if num is None:
                t.data[...] = orig
                unresolved += 1
                continue
            if off:
                kinks += 1
                g = analytic_at(t, base)
            else:
                g = grads[t]
            t.data[...] = orig
            a = float(np.sum(g * d))
            errs.append(abs(a - num) / max(1.0, abs(num)))
        checked = len(probes)
        worst = float(max(errs)) if errs else float("inf")
        results.append(CheckResult(name, worst, checked, worst <= tol and not unresolved, kinks))
    return results


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(_rand(rng, shape, lo, hi), requires_grad=True)


def _named(prefix: str, module) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


def suite_layers(rng: np.random.Generator) -> list[CheckResult]:
    res: list[CheckResult] = []

    a, b = _leaf(rng, (3, 4, 5)), _leaf(rng, (3, 5, 2))
    w = _rand(rng, (3, 4, 2))
    res += check_gradients(lambda: projection_loss(T.matmul(a, b), w), [("matmul.a", a), ("matmul.b", b)],
                           tol=1e-5, rng=rng)

    x = _leaf(rng, (2, 7))
    w = _rand(rng, (2, 7))
    res += check_gradients(lambda: projection_loss(T.softmax_lastdim(x), w), [("softmax.x", x)], tol=1e-5, rng=rng)

    x, y = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (1, 2, 3, 3))
    s = _leaf(rng, (1,))
    w = _rand(rng, (1, 2, 3, 3))
    res += check_gradients(lambda: projection_loss(T.add(x, y), w), [("add.x", x), ("add.y", y)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.sub(x, y), w), [("sub.x", x), ("sub.y", y)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.mul(x, y), w), [("mul.x", x), ("mul.y", y)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.scale(x, s), w), [("scale.x", x), ("scale.s", s)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.relu(x), w), [("relu.x", x)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.sigmoid(x), w), [("sigmoid.x", x)], rng=rng)
    res += check_gradients(lambda: projection_loss(T.transpose(x, (0, 2, 3, 1)), w.transpose(0, 2, 3, 1)),
                           [("transpose.x", x)], rng=rng)
    w9 = _rand(rng, (1, 2, 9))
    res += check_gradients(lambda: projection_loss(T.reshape(x, (1, 2, 9)), w9), [("reshape.x", x)], rng=rng)
    v = _leaf(rng, (3,))
    res += check_gradients(lambda: T.sum_all(T.scale(x, T.take(v, 1))), [("take.v", v)], rng=rng)

    for (k, stride, pad, dil) in [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1), (3, 1, 6, 6)]:
        x = _leaf(rng, (1, 3, 7, 7))
        conv = Conv2d(3, 2, k, stride=stride, padding=pad, dilation=dil, rng=rng)
        out_shape = conv(x).shape
        w = _rand(rng, out_shape)
        res += check_gradients(lambda: projection_loss(conv(x), w),
                               [(f"conv{k}s{stride}d{dil}.x", x)] + _named(f"conv{k}s{stride}d{dil}", conv), rng=rng)

    x = _leaf(rng, (1, 3, 3, 4))
    deconv = TransposedConv2d(3, init="uniform", rng=rng)
    w = _rand(rng, (1, 3, 6, 8))
    res += check_gradients(lambda: projection_loss(deconv(x), w), [("deconv.x", x)] + _named("deconv", deconv), rng=rng)

    x = _leaf(rng, (2, 4, 3, 3))
    gn = GroupNorm(4, groups=2)
    gn.weight.data[...] = _rand(rng, 4)
    gn.bias.data[...] = _rand(rng, 4)
    w = _rand(rng, (2, 4, 3, 3))
    res += check_gradients(lambda: projection_loss(gn(x), w), [("groupnorm.x", x)] + _named("groupnorm", gn), rng=rng)

    x = _leaf(rng, (1, 2, 3, 4))
    for oh, ow in [(6, 8), (2, 3), (5, 7)]:
        w = _rand(rng, (1, 2, oh, ow))
        res += check_gradients(lambda: projection_loss(bilinear_resize(x, oh, ow), w),
                               [(f"bilinear{oh}x{ow}.x", x)], rng=rng)

    logits = _leaf(rng, (1, 6, 4, 4), -3, 3)
    truth = rng.integers(0, 6, size=(1, 4, 4))
    res += check_gradients(lambda: cross_entropy_loss(logits, truth), [("cross_entropy.logits", logits)],
                           tol=1e-5, rng=rng)
    return res


def suite_sfr(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    x = _leaf(rng, (1, 4, 3, 3))
    w = _rand(rng, (1, 4, 3, 3))
    res += check_gradients(lambda: projection_loss(spatial_function(x), w), [("spatial_function.x", x)], rng=rng)

    sfr = SFR(16, 8, rng=rng)
    # non-trivial deconv and mixing weight
    sfr.theta_deconv.weight.data[...] += 0.1 * _rand(rng, sfr.theta_deconv.weight.shape)
    sfr.alpha_logit.data[...] = 0.3
    x = _leaf(rng, (1, 16, 8, 8))
    w = _rand(rng, (1, 8, 8, 8))
    res += check_gradients(lambda: projection_loss(sfr(x), w), [("sfr.x", x)] + _named("sfr", sfr), rng=rng)
    return res


def _pyramid(rng, channels=(4, 6, 8), base=4):
    sizes = [base * 4, base * 2, base]
    return [_leaf(rng, (1, c, s, s)) for c, s in zip(channels, sizes)]


def suite_dcfpn(rng: np.random.Generator) -> list[CheckResult]:
    res = []
    c_prime = 4
    rf4 = _leaf(rng, (1, c_prime, 2, 2))
    for i in (1, 2, 3):
        lf = LargeFieldConnection(i, c_prime, rng=rng)
        for d in lf.deconvs:
            d.weight.data[...] += 0.1 * _rand(rng, d.weight.shape)
        out_shape = lf(rf4).shape
        w = _rand(rng, out_shape)
        res += check_gradients(lambda: projection_loss(lf(rf4), w), [(f"lf{i}.rf4", rf4)] + _named(f"lf{i}", lf),
                               rng=rng)

    rf_next = _leaf(rng, (1, c_prime, 2, 2))
    res_i = _leaf(rng, (1, 3, 4, 4))
    lf_i = _leaf(rng, (1, c_prime, 4, 4))
    fw = FusionWeights()
    fw.logits.data[...] = _rand(rng, 3)
    lateral = Conv2d(3, c_prime, 1, rng=rng)
    w = _rand(rng, (1, c_prime, 4, 4))
    res += check_gradients(lambda: projection_loss(fuse_layer(rf_next, res_i, lf_i, fw, lateral), w),
                           [("fuse.rf_next", rf_next), ("fuse.resblock", res_i), ("fuse.lf", lf_i)]
                           + _named("fuse.weights", fw) + _named("fuse.lateral", lateral), rng=rng)

    rfs = [_leaf(rng, (1, c_prime, s, s)) for s in (8, 4, 2, 2)]
    w = _rand(rng, (1, c_prime, 8, 8))
    res += check_gradients(lambda: projection_loss(scale_aware_feature(rfs), w),
                           [(f"sf.rf{i + 1}", t) for i, t in enumerate(rfs)], rng=rng)

    pyramid = _pyramid(rng, base=2)
    rf4 = _leaf(rng, (1, c_prime, 2, 2))
    net = DCFPN((4, 6, 8), c_prime, rng=rng)
    for f in net.fusion:
        f.logits.data[...] = _rand(rng, 3)
    w = _rand(rng, (1, c_prime, 8, 8))
    res += check_gradients(lambda: projection_loss(scale_aware_feature(net(pyramid, rf4)), w),
                           [("dcfpn.rf4", rf4)] + [(f"dcfpn.resblock{i + 1}", t) for i, t in enumerate(pyramid)]
                           + _named("dcfpn", net), rng=rng)
    return res


def _model_variant(rng: np.random.Generator, variant: str, size: int) -> list[CheckResult]:
    image = Tensor(rng.uniform(0, 1, size=(1, 3, size, size)), requires_grad=True)
    truth = rng.integers(0, 6, size=(1, size, size))
    model = SaNet(ModelConfig.variant(variant), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # move off the symmetric init so every path carries signal
    for name, p in model.named_parameters():
        if name.endswith("alpha_logit") or name.endswith("logits"):
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
        elif "deconv" in name and name.endswith("weight"):
            p.data[...] += 0.1 * rng.uniform(-1, 1, size=p.shape)
    return check_gradients(lambda: cross_entropy_loss(model(image), truth),
                           [(f"{variant}.image", image)] + _named(variant, model), rng=rng)


def suite_model(rng: np.random.Generator, variants: Sequence[str] = ("baseline", "sfr", "dcfpn", "sanet"),
                size: int = 32) -> list[CheckResult]:
    res = []
    for v in variants:
        res += _model_variant(rng, v, size)
    return res


_SUITE_FNS = {"layers": suite_layers, "sfr": suite_sfr, "dcfpn": suite_dcfpn}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    if name == "all":
        out = []
        for s in SUITES:
            out += run_suite(s, seed)
        return out
    if name == "model":
        return suite_model(rng)
    fn = _SUITE_FNS.get(name)
    if fn is None:
        raise ValueError(f"unknown gradcheck suite {name!r}; choose from all, {', '.join(SUITES)}")
    return fn(rng)


def main_report(name: str, seed: int = 0, stream=None) -> bool:
    stream = stream or sys.stdout
    start = time.perf_counter()
    results = run_suite(name, seed)
    for r in results:
        print(r.line(), file=stream)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s",
          file=stream)
    return not failed
