"""Knowledge-transfer conversions on weight archives.

Every operation returns a new archive and leaves its input untouched; the
result carries one more ``surgery.<n>`` audit entry in its metadata.

Name conventions follow :mod:`aedkit.model`: the stem conv is
``entry.conv1.weight``, the head is ``head.weight`` / ``head.bias`` and
middle-flow block ``i`` owns every tensor under ``middle.<i>.``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .archive import WeightArchive
from .model import HEAD, MIDDLE, ModelConfig, expected_shapes
from .rng import as_rng

STEM = "entry.conv1.weight"
HEAD_WEIGHT = f"{HEAD}.weight"
HEAD_BIAS = f"{HEAD}.bias"

_BN_KEYS = {"gamma": "gamma", "beta": "beta", "moving_mean": "running_mean", "moving_variance": "running_var"}


def keras_xception_names(middle_repeats: int = 8) -> dict[str, str]:
    """Map Keras-application Xception variable names to the names used here.

    Only needed to import real ImageNet donors; Keras' unnamed shortcut layers
    are expected under their default names ``conv2d[_k]`` /
    ``batch_normalization[_k]`` in construction order.
    """
    names = {}

    def bn(src, dst):
        for k, v in _BN_KEYS.items():
            names[f"{src}/{k}"] = f"{dst}.{v}"

    def sep(src, dst):
        names[f"{src}/depthwise_kernel"] = f"{dst}.depthwise.weight"
        names[f"{src}/pointwise_kernel"] = f"{dst}.pointwise.weight"

    names["block1_conv1/kernel"] = "entry.conv1.weight"
    bn("block1_conv1_bn", "entry.bn1")
    names["block1_conv2/kernel"] = "entry.conv2.weight"
    bn("block1_conv2_bn", "entry.bn2")
    shortcuts = ["entry.block1", "entry.block2", "entry.block3", "exit.block"]
    for k, dst in enumerate(shortcuts):
        suffix = "" if k == 0 else f"_{k}"
        names[f"conv2d{suffix}/kernel"] = f"{dst}.shortcut.conv.weight"
        bn(f"batch_normalization{suffix}", f"{dst}.shortcut.bn")
    for block, dst in zip((2, 3, 4), shortcuts[:3]):
        for j in (1, 2):
            sep(f"block{block}_sepconv{j}", f"{dst}.sep{j}")
            bn(f"block{block}_sepconv{j}_bn", f"{dst}.bn{j}")
    for i in range(middle_repeats):
        for j in (1, 2, 3):
            sep(f"block{i + 5}_sepconv{j}", f"{MIDDLE}.{i}.sep{j}")
            bn(f"block{i + 5}_sepconv{j}_bn", f"{MIDDLE}.{i}.bn{j}")
    for j in (1, 2):
        sep(f"block13_sepconv{j}", f"exit.block.sep{j}")
        bn(f"block13_sepconv{j}_bn", f"exit.block.bn{j}")
        sep(f"block14_sepconv{j}", f"exit.sep{j + 2}")
        bn(f"block14_sepconv{j}_bn", f"exit.bn{j + 2}")
    names["predictions/kernel"] = HEAD_WEIGHT
    names["predictions/bias"] = HEAD_BIAS
    return names


def import_keras_xception(variables: dict, metadata: dict | None = None) -> WeightArchive:
    """Convert Keras Xception variables (HWIO kernels) into a WTAR1 archive."""
    table = keras_xception_names()
    entries = {}
    for src, value in variables.items():
        dst = table.get(src.split(":")[0])
        if dst is None:
            continue
        value = np.asarray(value)
        if src.startswith("predictions/kernel"):
            value = value.T
        elif value.ndim == 4 and "depthwise_kernel" in src:
            value = value.transpose(2, 3, 0, 1)
        elif value.ndim == 4:
            value = value.transpose(3, 2, 0, 1)
        entries[dst] = value
    meta = {"source": "keras xception import"}
    meta.update(metadata or {})
    return WeightArchive(entries, meta)


class SurgeryError(ValueError):
    pass


def average_input_channels(a: WeightArchive, layer: str = STEM) -> WeightArchive:
    """Collapse a 3-channel (RGB) input kernel to one channel by averaging."""
    if layer not in a:
        raise SurgeryError(f"layer {layer!r} not found in archive")
    kernel = a[layer]
    if kernel.ndim < 2 or kernel.shape[1] != 3:
        raise SurgeryError(f"input-channel dim ≠ 3 for {layer!r} (shape {kernel.shape})")
    entries = dict(a.entries)
    entries[layer] = kernel.astype(np.float64).mean(axis=1, keepdims=True).astype(np.float32)
    return a.with_audit(entries, f"average_input_channels layer={layer} {kernel.shape}->{entries[layer].shape}")


def replace_head(a: WeightArchive, n_classes: int, rng=0) -> WeightArchive:
    """Swap the prediction layer for a freshly initialized one of ``n_classes`` outputs.

    Weights are uniform in ``±1/sqrt(fan_in)``, bias zero, matching a newly
    built head. Always re-initializes, even when the size already matches.
    """
    if HEAD_WEIGHT not in a or HEAD_BIAS not in a:
        raise SurgeryError(f"head not found: archive lacks {HEAD_WEIGHT!r} / {HEAD_BIAS!r}")
    if n_classes < 1:
        raise SurgeryError("n_classes must be >= 1")
    fan_in = a[HEAD_WEIGHT].shape[1]
    limit = 1.0 / math.sqrt(fan_in)
    entries = dict(a.entries)
    entries[HEAD_WEIGHT] = as_rng(rng).uniform(-limit, limit, size=(n_classes, fan_in)).astype(np.float32)
    entries[HEAD_BIAS] = np.zeros(n_classes, dtype=np.float32)
    old = a[HEAD_WEIGHT].shape[0]
    return a.with_audit(entries, f"replace_head {old}->{n_classes} classes")


_MIDDLE_RE = re.compile(rf"^{MIDDLE}\.(\d+)\.")


def middle_blocks(a: WeightArchive) -> list[int]:
    return sorted({int(m.group(1)) for name in a.entries if (m := _MIDDLE_RE.match(name))})


def delete_middle_flow(a: WeightArchive, keep_repeats: int) -> WeightArchive:
    """Drop middle-flow blocks ``keep_repeats`` and above; other names are unchanged."""
    present = middle_blocks(a)
    if keep_repeats < 0 or keep_repeats > len(present):
        raise SurgeryError(f"keep_repeats={keep_repeats} but the archive has {len(present)} middle blocks")
    entries = {
        name: t for name, t in a.entries.items()
        if not ((m := _MIDDLE_RE.match(name)) and int(m.group(1)) >= keep_repeats)
    }
    return a.with_audit(entries, f"delete_middle_flow kept {keep_repeats} of {len(present)} blocks")


@dataclass
class CompatibilityReport:
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    mismatched: list[tuple[str, tuple, tuple]] = field(default_factory=list)

    @property
    def loadable(self) -> bool:
        """True when :func:`aedkit.model.load_weights` will succeed (extras only warn)."""
        return not self.missing and not self.mismatched

    @property
    def empty(self) -> bool:
        return self.loadable and not self.extra

    def lines(self) -> list[str]:
        out = [f"missing {name}" for name in self.missing]
        out += [f"mismatch {name}: archive {got} vs model {want}" for name, got, want in self.mismatched]
        out += [f"extra {name}" for name in self.extra]
        return out


def compatibility_check(a: WeightArchive, cfg: ModelConfig) -> CompatibilityReport:
    want = expected_shapes(cfg)
    got = a.shapes()
    report = CompatibilityReport()
    for name, shape in want.items():
        if name not in got:
            report.missing.append(name)
        elif got[name] != shape:
            report.mismatched.append((name, got[name], shape))
    report.extra = [name for name in got if name not in want]
    return report
