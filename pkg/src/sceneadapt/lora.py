"""Low-rank adapter lifecycle: creation, side application, effective-weight
computation, merge for inference, and reset/carry transitions across scenes.

An adapter adds beta * B @ A to a frozen base matrix W0 (d x k).  B starts
at zero, so a freshly initialized set leaves the model untouched; the base
weights are never modified by anything in this module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter
from .errors import InvalidConfigError, ShapeError
from .model import GruEnhancerParams, copy_params

# Backbone FC layers eligible for adaptation, with (d, k) relative to dims.
_TARGET_SHAPES = {
    "fc_in": lambda bands, hidden: (hidden, bands),
    "fc_out": lambda bands, hidden: (bands, hidden),
}
DEFAULT_TARGETS = ("fc_in", "fc_out")


@dataclass
class AdapterConfig:
    rank: int = 1
    scale: float = 64.0
    targets: tuple = DEFAULT_TARGETS
    init_seed: int = 0


class LoraAdapter:
    """One low-rank pair for a single target layer."""

    def __init__(self, target: str, d: int, k: int, rank: int, scale: float,
                 rng: np.random.Generator):
        if rank < 1 or rank > min(d, k):
            raise InvalidConfigError(f"rank {rank} invalid for {d}x{k} target '{target}'")
        self.target = target
        self.rank = rank
        self.scale = float(scale)
        bound = 1.0 / np.sqrt(k)
        self.a = Parameter(rng.uniform(-bound, bound, size=(rank, k)),
                           name=f"{target}.lora_a")
        self.b = Parameter(np.zeros((d, rank)), name=f"{target}.lora_b")

    def delta(self) -> np.ndarray:
        return self.scale * (self.b.value @ self.a.value)

    def param_count(self) -> int:
        return self.a.value.size + self.b.value.size


class AdapterSet:
    """Per-scene adapters keyed by target layer."""

    def __init__(self, adapters: dict, scene_index: int, config: AdapterConfig,
                 dims: tuple):
        self.adapters = adapters
        self.scene_index = scene_index
        self.config = config
        self.dims = dims  # (bands, hidden)

    def params(self) -> list:
        out = []
        for target in sorted(self.adapters):
            out.extend([self.adapters[target].a, self.adapters[target].b])
        return out


def adaptable_count_for_dims(bands: int, hidden: int, rank: int,
                             targets=DEFAULT_TARGETS) -> int:
    total = 0
    for t in targets:
        d, k = _TARGET_SHAPES[t](bands, hidden)
        total += rank * (d + k)
    return total


def adaptable_param_count(adapters: AdapterSet) -> int:
    return sum(a.param_count() for a in adapters.adapters.values())


def init_adapters(config: AdapterConfig, bands: int, hidden: int,
                  scene_index: int = 0) -> AdapterSet:
    """Fresh adapters: A uniform in +-1/sqrt(k), B zero, so the effective
    weight equals W0 exactly at creation."""
    rng = np.random.default_rng(
        np.random.SeedSequence((config.init_seed, scene_index, 0x10F4)))
    adapters = {}
    for target in config.targets:
        if target not in _TARGET_SHAPES:
            raise InvalidConfigError(f"unknown adapter target '{target}'")
        d, k = _TARGET_SHAPES[target](bands, hidden)
        adapters[target] = LoraAdapter(target, d, k, config.rank, config.scale, rng)
    return AdapterSet(adapters, scene_index, config, (bands, hidden))


def effective_weight(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W0 + beta * B @ A, leaving W0 untouched."""
    d, r = adapter.b.value.shape
    r2, k = adapter.a.value.shape
    if w0.shape != (d, k) or r != r2:
        raise ShapeError(
            f"effective_weight: W0 {w0.shape} vs B {adapter.b.value.shape}, "
            f"A {adapter.a.value.shape}")
    return w0 + adapter.delta()


def merge(params: GruEnhancerParams, adapters: AdapterSet) -> GruEnhancerParams:
    """New parameter set with effective weights on the target layers; every
    non-target value is copied bit for bit and the input set is unchanged."""
    if adapters.dims != (params.bands, params.hidden):
        raise ShapeError(f"adapter dims {adapters.dims} != model dims "
                         f"{(params.bands, params.hidden)}")
    merged = copy_params(params)
    for target, adapter in adapters.adapters.items():
        layer = getattr(merged, target)
        layer.value[...] = effective_weight(layer.value, adapter)
    return merged


def transition(adapters: AdapterSet, mode: str,
               next_index: int | None = None) -> AdapterSet:
    """Move to the next scene: 'reset' re-initializes (isolated protocol),
    'carry' keeps the values (sequential).  The new scene index defaults to
    m+1; schedules with shuffled orders pass it explicitly."""
    if next_index is None:
        next_index = adapters.scene_index + 1
    if mode == "reset":
        return init_adapters(adapters.config, *adapters.dims, scene_index=next_index)
    if mode == "carry":
        carried = init_adapters(adapters.config, *adapters.dims, scene_index=next_index)
        for target, adapter in carried.adapters.items():
            adapter.a.value[...] = adapters.adapters[target].a.value
            adapter.b.value[...] = adapters.adapters[target].b.value
        return carried
    raise InvalidConfigError(f"unknown transition mode '{mode}'")


# -------------------------------------------------------------------- sidecar

_MAGIC = b"SELORACP"
_VERSION = 1


def write_adapters(path, adapters: AdapterSet) -> None:
    """Versioned binary sidecar, loadable independently of the backbone."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        bands, hidden = adapters.dims
        f.write(struct.pack("<IiIIId", _VERSION, adapters.scene_index,
                            adapters.config.rank, bands, hidden,
                            adapters.config.scale))
        f.write(struct.pack("<I", len(adapters.adapters)))
        for target in sorted(adapters.adapters):
            ad = adapters.adapters[target]
            name = target.encode("utf-8")
            d, r = ad.b.value.shape
            _, k = ad.a.value.shape
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<II", d, k))
            f.write(ad.a.value.astype("<f8").tobytes())
            f.write(ad.b.value.astype("<f8").tobytes())


def read_adapters(path) -> AdapterSet:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise InvalidConfigError(f"{path}: not an adapter sidecar")
        version, scene_index, rank, bands, hidden, scale = struct.unpack(
            "<IiIIId", f.read(28))
        if version != _VERSION:
            raise InvalidConfigError(f"unsupported adapter sidecar version {version}")
        (n_targets,) = struct.unpack("<I", f.read(4))
        names = []
        payloads = []
        for _ in range(n_targets):
            (name_len,) = struct.unpack("<I", f.read(4))
            target = f.read(name_len).decode("utf-8")
            d, k = struct.unpack("<II", f.read(8))
            a = np.frombuffer(f.read(rank * k * 8), dtype="<f8").reshape(rank, k)
            b = np.frombuffer(f.read(d * rank * 8), dtype="<f8").reshape(d, rank)
            names.append(target)
            payloads.append((a, b))
    config = AdapterConfig(rank=rank, scale=scale, targets=tuple(names))
    out = init_adapters(config, bands, hidden, scene_index=scene_index)
    for target, (a, b) in zip(names, payloads):
        out.adapters[target].a.value[...] = a
        out.adapters[target].b.value[...] = b
    return out
