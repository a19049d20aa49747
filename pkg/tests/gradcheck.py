"""Finite-difference oracles shared by the model tests and the acceptance gate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from aedkit import nn


def rel_err(a, b, tiny=1e-8):
    return abs(a - b) / max(abs(a), abs(b), tiny)


def layer_type(module: nn.Module, key: str) -> str:
    if isinstance(module, nn.DepthwiseConv2d):
        return "depthwise"
    if isinstance(module, nn.Conv2d):
        return "pointwise" if module.params["weight"].shape[2:] == (1, 1) else "conv"
    if isinstance(module, nn.BatchNorm2d):
        return f"batchnorm.{key}"
    if isinstance(module, nn.Linear):
        return f"linear.{key}"
    return type(module).__name__.lower()


def activation_pattern(root: nn.Module):
    """Every ReLU mask and max-pool argmax from the last forward pass."""
    out = []
    for _, m in root.named_modules():
        if isinstance(m, nn.ReLU):
            out.append(m._cache.copy())
        elif isinstance(m, nn.MaxPool2d):
            out.append(m._cache[-1].copy())
    return out


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


@dataclass
class GradCheck:
    errors: dict = field(default_factory=dict)  # layer type -> list of rel. errors
    steps: list = field(default_factory=list)  # step used for each accepted sample
    rejected: int = 0

    @property
    def worst(self) -> float:
        return max(max(v) for v in self.errors.values())

    @property
    def n_checked(self) -> int:
        return sum(len(v) for v in self.errors.values())

    def summary(self) -> str:
        per_type = ", ".join(f"{k} {len(v)}@{max(v):.1e}" for k, v in sorted(self.errors.items()))
        steps = {h: self.steps.count(h) for h in sorted(set(self.steps), reverse=True)}
        return f"{self.n_checked} samples, worst {self.worst:.2e}; {per_type}; steps {steps}; rejected {self.rejected}"


def check_network(net, x, n_samples=100, steps=STEPS, seed=0, training=True, max_draws=1000) -> GradCheck:
    """Central differences on ``n_samples`` scalar parameters of ``net``.

    Samples are stratified round-robin over layer types. A perturbation that
    flips any ReLU mask or max-pool winner straddles a kink, where the central
    difference does not estimate the derivative, so each sample uses the
    largest step in ``steps`` that leaves the activation pattern intact. A
    sample for which no step does is redrawn and counted in ``rejected``.
    """
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal((x.shape[0], net.cfg.n_classes))
    bn_state = {k: v.copy() for k, v in net.buffers.items()}

    def loss():
        for k, v in bn_state.items():
            net.buffers[k][...] = v
        return float(np.sum(net.forward(x, training=training) * upstream))

    loss()
    base = activation_pattern(net.root)
    grads = {k: v.copy() for k, v in net.backward(upstream).items()}

    by_type: dict[str, list] = {}
    for name, module, key, value in net.root.named_parameters():
        by_type.setdefault(layer_type(module, key), []).append((name, value))
    types = sorted(by_type)

    def central(value, idx, h):
        old = value[idx]
        value[idx] = old + h
        plus, pat_plus = loss(), activation_pattern(net.root)
        value[idx] = old - h
        minus, pat_minus = loss(), activation_pattern(net.root)
        value[idx] = old
        if _same(base, pat_plus) and _same(base, pat_minus):
            return (plus - minus) / (2 * h)
        return None

    result = GradCheck()
    for _ in range(max_draws):
        if result.n_checked == n_samples:
            break
        kind = types[result.n_checked % len(types)]
        name, value = by_type[kind][rng.integers(len(by_type[kind]))]
        idx = tuple(int(rng.integers(s)) for s in value.shape)
        for h in steps:
            fd = central(value, idx, h)
            if fd is not None:
                result.errors.setdefault(kind, []).append(rel_err(grads[name][idx], fd))
                result.steps.append(h)
                break
        else:
            result.rejected += 1
    else:
        raise RuntimeError(f"only {result.n_checked} kink-free samples in {max_draws} draws")
    loss()
    return result


def check_layer(layer: nn.Module, x, h=1e-4, seed=0, training=True, n_input=20, n_param=20):
    """Worst relative error over sampled input and parameter coordinates."""
    rng = np.random.default_rng(seed)
    y = layer.forward(x, training=training)
    upstream = rng.standard_normal(y.shape)
    buffers = {name: v.copy() for name, _, _, v in layer.named_buffers()}

    def loss(inp):
        for name, _, _, v in layer.named_buffers():
            v[...] = buffers[name]
        return float(np.sum(layer.forward(inp, training=training) * upstream))

    loss(x)
    dx = layer.backward(upstream)
    grads = {name: m.grads[k].copy() for name, m, k, _ in layer.named_parameters()}
    worst = 0.0
    for _ in range(n_input):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        worst = max(worst, rel_err(dx[idx], (loss(xp) - loss(xm)) / (2 * h)))
    for name, _, _, value in layer.named_parameters():
        for _ in range(n_param):
            idx = tuple(int(rng.integers(s)) for s in value.shape)
            old = value[idx]
            value[idx] = old + h
            plus = loss(x)
            value[idx] = old - h
            minus = loss(x)
            value[idx] = old
            worst = max(worst, rel_err(grads[name][idx], (plus - minus) / (2 * h)))
    return worst
