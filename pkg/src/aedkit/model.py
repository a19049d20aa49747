"""Xception-family network for log-mel inputs.

Layout follows the original Xception: an entry flow (two stem convs and three
residual separable blocks at 128/256/728 channels), ``middle_repeats``
identity-residual blocks of three 728-channel separable convs, and an exit
flow (728->1024 residual block, separable 1536 and 2048, global average
pooling) feeding a linear head. ``middle_repeats=8`` is full Xception,
``middle_repeats=0`` is Xception-small.

The stem convs are unpadded with the original strides, so an input needs at
least :data:`MIN_INPUT_SIZE` mel bins and frames. Pooling is global over both
axes, so any clip length above that works.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .archive import WeightArchive
from .rng import as_rng

MIN_INPUT_SIZE = 7
HEAD = "head"
MIDDLE = "middle"


class ModelConfigError(ValueError):
    pass


class WeightLoadError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    middle_repeats: int = 8
    width_multiplier: float = 1.0
    n_classes: int = 50
    input_mel_bins: int = 80
    input_channels: int = 1

    def __post_init__(self):
        if self.middle_repeats < 0:
            raise ModelConfigError("middle_repeats must be >= 0")
        if not 0 < self.width_multiplier <= 1:
            raise ModelConfigError("width_multiplier must be in (0, 1]")
        if self.n_classes < 1:
            raise ModelConfigError("n_classes must be >= 1")
        if self.input_channels < 1:
            raise ModelConfigError("input_channels must be >= 1")
        if self.input_mel_bins < MIN_INPUT_SIZE:
            raise ModelConfigError(f"input_mel_bins must be >= {MIN_INPUT_SIZE}")

    def width(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _entry_block(cin, cout, leading_relu, rng, dtype):
    layers = [("relu0", nn.ReLU())] if leading_relu else []
    layers += [
        ("sep1", nn.SeparableConv2d(cin, cout, rng=rng, dtype=dtype)),
        ("bn1", nn.BatchNorm2d(cout, dtype=dtype)),
        ("relu1", nn.ReLU()),
        ("sep2", nn.SeparableConv2d(cout, cout, rng=rng, dtype=dtype)),
        ("bn2", nn.BatchNorm2d(cout, dtype=dtype)),
        ("pool", nn.MaxPool2d(3, 2)),
    ]
    shortcut = nn.Sequential(
        ("conv", nn.Conv2d(cin, cout, 1, stride=2, rng=rng, dtype=dtype)),
        ("bn", nn.BatchNorm2d(cout, dtype=dtype)),
    )
    return nn.Residual(nn.Sequential(*layers), shortcut)


def _middle_block(c, rng, dtype):
    layers = []
    for i in (1, 2, 3):
        layers += [
            (f"relu{i}", nn.ReLU()),
            (f"sep{i}", nn.SeparableConv2d(c, c, rng=rng, dtype=dtype)),
            (f"bn{i}", nn.BatchNorm2d(c, dtype=dtype)),
        ]
    return nn.Residual(nn.Sequential(*layers))


def _exit_block(cin, cmid, cout, rng, dtype):
    main = nn.Sequential(
        ("relu0", nn.ReLU()),
        ("sep1", nn.SeparableConv2d(cin, cmid, rng=rng, dtype=dtype)),
        ("bn1", nn.BatchNorm2d(cmid, dtype=dtype)),
        ("relu1", nn.ReLU()),
        ("sep2", nn.SeparableConv2d(cmid, cout, rng=rng, dtype=dtype)),
        ("bn2", nn.BatchNorm2d(cout, dtype=dtype)),
        ("pool", nn.MaxPool2d(3, 2)),
    )
    shortcut = nn.Sequential(
        ("conv", nn.Conv2d(cin, cout, 1, stride=2, rng=rng, dtype=dtype)),
        ("bn", nn.BatchNorm2d(cout, dtype=dtype)),
    )
    return nn.Residual(main, shortcut)


class Network:
    """A built model: an ordered module tree plus flat name -> array views."""

    def __init__(self, cfg: ModelConfig, root: nn.Sequential):
        self.cfg = cfg
        self.root = root
        self._param_slots = {name: (m, k) for name, m, k, _ in root.named_parameters()}
        self._buffer_slots = {name: (m, k) for name, m, k, _ in root.named_buffers()}
        self._forwarded = False

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: m.params[k] for name, (m, k) in self._param_slots.items()}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {name: m.buffers[k] for name, (m, k) in self._buffer_slots.items()}

    @property
    def dtype(self):
        return self.params[f"{HEAD}.weight"].dtype

    def state(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in module order."""
        out = {}
        for path, module in self.root.named_modules():
            for k, v in list(module.params.items()) + list(module.buffers.items()):
                out[f"{path}.{k}" if path else k] = v
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        slot = self._param_slots.get(name) or self._buffer_slots.get(name)
        if slot is None:
            raise KeyError(name)
        module, key = slot
        store = module.params if key in module.params else module.buffers
        store[key][...] = value

    def forward(self, batch, training: bool = False) -> np.ndarray:
        x = np.asarray(batch, dtype=self.dtype)
        expected = (self.cfg.input_channels, self.cfg.input_mel_bins)
        if x.ndim != 4 or x.shape[1:3] != expected:
            raise ValueError(f"expected batch of shape [B, {expected[0]}, {expected[1]}, T], got {x.shape}")
        if x.shape[3] < MIN_INPUT_SIZE:
            raise ValueError(f"need at least {MIN_INPUT_SIZE} frames, got {x.shape[3]}")
        out = self.root.forward(x, training)
        self._forwarded = True
        return out

    __call__ = forward

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * logits)`` w.r.t. every parameter."""
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        self.root.backward(np.asarray(upstream, dtype=self.dtype))
        return {name: m.grads[k] for name, (m, k) in self._param_slots.items()}


def build(cfg: ModelConfig, rng=0, dtype=np.float32) -> Network:
    """Construct an Xception-family network with fan-in-scaled uniform init."""
    rng = as_rng(rng)
    w = cfg.width
    c728 = w(728)
    entry = nn.Sequential(
        ("conv1", nn.Conv2d(cfg.input_channels, w(32), 3, stride=2, rng=rng, dtype=dtype)),
        ("bn1", nn.BatchNorm2d(w(32), dtype=dtype)),
        ("relu1", nn.ReLU()),
        ("conv2", nn.Conv2d(w(32), w(64), 3, rng=rng, dtype=dtype)),
        ("bn2", nn.BatchNorm2d(w(64), dtype=dtype)),
        ("relu2", nn.ReLU()),
        ("block1", _entry_block(w(64), w(128), False, rng, dtype)),
        ("block2", _entry_block(w(128), w(256), True, rng, dtype)),
        ("block3", _entry_block(w(256), c728, True, rng, dtype)),
    )
    middle = nn.Sequential(*[(str(i), _middle_block(c728, rng, dtype)) for i in range(cfg.middle_repeats)])
    exit_flow = nn.Sequential(
        ("block", _exit_block(c728, c728, w(1024), rng, dtype)),
        ("sep3", nn.SeparableConv2d(w(1024), w(1536), rng=rng, dtype=dtype)),
        ("bn3", nn.BatchNorm2d(w(1536), dtype=dtype)),
        ("relu3", nn.ReLU()),
        ("sep4", nn.SeparableConv2d(w(1536), w(2048), rng=rng, dtype=dtype)),
        ("bn4", nn.BatchNorm2d(w(2048), dtype=dtype)),
        ("relu4", nn.ReLU()),
        ("pool", nn.GlobalAvgPool()),
    )
    head = nn.Linear(w(2048), cfg.n_classes, rng=rng, dtype=dtype)
    root = nn.Sequential(("entry", entry), (MIDDLE, middle), ("exit", exit_flow), (HEAD, head))
    return Network(cfg, root)


def param_count(net: Network) -> int:
    """Number of trainable scalars (batch-norm running statistics excluded)."""
    return int(sum(p.size for p in net.params.values()))


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: tuple(t.shape) for name, t in build(cfg, 0).state().items()}


def save_weights(net: Network, metadata: dict | None = None) -> WeightArchive:
    meta = {"source": "aedkit.model", "config": json.dumps(asdict(net.cfg), sort_keys=True),
            "config_digest": net.cfg.digest()}
    meta.update(metadata or {})
    return WeightArchive({name: t for name, t in net.state().items()}, meta)


def load_weights(net: Network, archive: WeightArchive) -> Network:
    """Copy archive tensors into ``net`` in place.

    Missing tensors and shape mismatches raise :class:`WeightLoadError` naming
    every offender; unused archive tensors only warn.
    """
    state = net.state()
    missing = [name for name in state if name not in archive]
    mismatched = [
        f"{name} (archive {archive[name].shape}, model {state[name].shape})"
        for name in state
        if name in archive and archive[name].shape != state[name].shape
    ]
    if missing or mismatched:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if mismatched:
            parts.append("shape mismatch: " + ", ".join(mismatched))
        raise WeightLoadError("; ".join(parts))
    extra = [name for name in archive.entries if name not in state]
    if extra:
        warnings.warn(f"ignoring {len(extra)} unused archive tensors: {', '.join(extra[:5])}", stacklevel=2)
    for name in state:
        net.set_tensor(name, archive[name])
    return net
