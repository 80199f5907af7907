"""Width-adaptive ConvNeXt: shared full-width weights, sliced per forward.

The network is a patchify stem (4x4 stride-4 conv + LayerNorm), four stages
of blocks with a downsampler (LayerNorm + 2x2 stride-2 conv) between stages,
and a head (global average pool + LayerNorm + linear). Each block runs at
the width given by its p-list entry: the input is sliced to the first
``active_channels(p, C)`` channels, every block parameter is sliced to
match, and the branch output is zero-padded back to full width before the
residual add. The stem, downsamplers, and head always run at full width, so
inter-block activations stay full-width everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .slimming import active_channels, validate_plist
from .tensor import (
    GradTape,
    Tensor,
    channel_scale,
    conv2d_depthwise,
    conv2d_pointwise,
    conv2d_strided,
    gelu,
    global_avg_pool,
    layer_norm_channels,
    linear,
    residual_add_zero_pad,
    scale_rows,
    slice_channels,
    slice_prefix,
)

STEM_STRIDE = 4
DOWNSAMPLE_STRIDE = 2
BLOCK_KERNEL = 7
EXPANSION = 4
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Topology of one ConvNeXt variant; fully determines the ParamStore."""

    depths: tuple[int, int, int, int]
    dims: tuple[int, int, int, int]
    num_classes: int
    drop_path_rate: float = 0.0
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    layer_scale: bool = True
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.depths) != 4 or len(self.dims) != 4:
            raise ConfigError("depths and dims must each have 4 stages")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.dims):
            raise ConfigError("stage depths and dims must be positive")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(
                f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}"
            )
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"input size {self.input_size} must be divisible by 32")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def n_blocks(self) -> int:
        return sum(self.depths)

    def block_dims(self) -> tuple[int, ...]:
        """Full channel count of each block in execution order."""
        out = []
        for depth, dim in zip(self.depths, self.dims):
            out.extend([dim] * depth)
        return tuple(out)

    def block_drop_probs(self) -> tuple[float, ...]:
        """Per-block drop-path probability, ramped linearly over block index."""
        n = self.n_blocks
        if n == 1:
            return (0.0,)
        return tuple(self.drop_path_rate * i / (n - 1) for i in range(n))


_PRESETS = {
    "T": dict(depths=(3, 3, 9, 3), dims=(96, 192, 384, 768)),
    "S": dict(depths=(3, 3, 27, 3), dims=(96, 192, 384, 768)),
    "B": dict(depths=(3, 3, 27, 3), dims=(128, 256, 512, 1024)),
    "toy": dict(
        depths=(1, 1, 2, 1),
        dims=(16, 32, 64, 128),
        num_classes=10,
        input_size=(32, 32),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations: T, S, B (1000 classes, 224x224) and toy."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    kwargs = dict(num_classes=1000, drop_path_rate=0.1)
    kwargs.update(_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


class ParamStore:
    """Named full-width parameter tensors shared by every subnetwork.

    Slicing a parameter during forward restricts the active region without
    copying; there are no per-width parameter copies anywhere.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(np.ascontiguousarray(array, dtype=np.float32),
                   trainable=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for name, arr in arrays.items():
            store.add(name, arr)
        return store

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another dtype (test oracles re-run in float64)."""
        store = ParamStore()
        for name, t in self._params.items():
            copy = Tensor(t.data.astype(dtype), trainable=t.trainable, name=name)
            store._params[name] = copy
        return store


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual conv/linear init."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def topology(cfg: ModelConfig) -> dict:
    """Serializable layer-by-layer description of the network."""
    blocks = []
    idx = 0
    probs = cfg.block_drop_probs()
    for s, (depth, dim) in enumerate(zip(cfg.depths, cfg.dims)):
        for b in range(depth):
            blocks.append({
                "name": f"stage{s}.block{b}",
                "stage": s,
                "index_in_stage": b,
                "channels": dim,
                "expansion": EXPANSION,
                "dw_kernel": BLOCK_KERNEL,
                "drop_prob": probs[idx],
            })
            idx += 1
    return {
        "stem": {"kernel": STEM_STRIDE, "stride": STEM_STRIDE,
                 "in_channels": cfg.in_channels, "out_channels": cfg.dims[0]},
        "downsamplers": [
            {"name": f"down{s}", "in_channels": cfg.dims[s - 1],
             "out_channels": cfg.dims[s], "kernel": DOWNSAMPLE_STRIDE,
             "stride": DOWNSAMPLE_STRIDE}
            for s in range(1, 4)
        ],
        "blocks": blocks,
        "head": {"features": cfg.dims[3], "classes": cfg.num_classes},
    }


def build_model(cfg: ModelConfig, seed: int) -> tuple[ParamStore, dict]:
    """Allocate and initialize all full-width parameters for a config.

    Conv and linear weights are truncated normal (std 0.02), biases zero,
    LayerNorm affine ones/zeros, layer-scale factors at cfg.layer_scale_init.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = cfg.dims

    store.add("stem.conv.weight",
              _trunc_normal(rng, (STEM_STRIDE, STEM_STRIDE, cfg.in_channels, d[0]), 0.02))
    store.add("stem.conv.bias", np.zeros(d[0], np.float32))
    store.add("stem.norm.gamma", np.ones(d[0], np.float32))
    store.add("stem.norm.beta", np.zeros(d[0], np.float32))

    for s in range(4):
        if s > 0:
            store.add(f"down{s}.norm.gamma", np.ones(d[s - 1], np.float32))
            store.add(f"down{s}.norm.beta", np.zeros(d[s - 1], np.float32))
            store.add(f"down{s}.conv.weight",
                      _trunc_normal(rng, (DOWNSAMPLE_STRIDE, DOWNSAMPLE_STRIDE,
                                          d[s - 1], d[s]), 0.02))
            store.add(f"down{s}.conv.bias", np.zeros(d[s], np.float32))
        c = d[s]
        for b in range(cfg.depths[s]):
            pfx = f"stage{s}.block{b}"
            store.add(f"{pfx}.dw.weight",
                      _trunc_normal(rng, (BLOCK_KERNEL, BLOCK_KERNEL, c), 0.02))
            store.add(f"{pfx}.dw.bias", np.zeros(c, np.float32))
            store.add(f"{pfx}.norm.gamma", np.ones(c, np.float32))
            store.add(f"{pfx}.norm.beta", np.zeros(c, np.float32))
            store.add(f"{pfx}.pw_expand.weight",
                      _trunc_normal(rng, (c, EXPANSION * c), 0.02))
            store.add(f"{pfx}.pw_expand.bias", np.zeros(EXPANSION * c, np.float32))
            store.add(f"{pfx}.pw_project.weight",
                      _trunc_normal(rng, (EXPANSION * c, c), 0.02))
            store.add(f"{pfx}.pw_project.bias", np.zeros(c, np.float32))
            if cfg.layer_scale:
                store.add(f"{pfx}.scale.gamma",
                          np.full(c, cfg.layer_scale_init, np.float32))

    store.add("head.norm.gamma", np.ones(d[3], np.float32))
    store.add("head.norm.beta", np.zeros(d[3], np.float32))
    store.add("head.fc.weight", _trunc_normal(rng, (d[3], cfg.num_classes), 0.02))
    store.add("head.fc.bias", np.zeros(cfg.num_classes, np.float32))
    return store, topology(cfg)


def drop_path(x: Tensor, prob: float, mode: str,
              rng: np.random.Generator | None = None,
              tape: GradTape | None = None) -> Tensor:
    """Stochastic depth: zero a sample's residual branch with probability prob.

    Kept samples are scaled by 1/(1-prob) so the branch keeps its expected
    magnitude. Identity in eval mode or at prob 0.
    """
    if not 0.0 <= prob < 1.0:
        raise ContractError(f"drop-path probability must lie in [0, 1), got {prob}")
    if mode == "eval" or prob == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode drop_path needs a random generator")
    keep = (rng.random(x.shape[0]) >= prob).astype(np.float32)
    return scale_rows(x, keep / np.float32(1.0 - prob), tape)


def _take(store: ParamStore, name: str, limits: tuple[int, ...],
          tape: GradTape | None) -> Tensor:
    # full-width use needs no slice op; the consuming kernel notes the read
    t = store[name]
    if tuple(limits) == t.shape:
        return t
    return slice_prefix(t, limits, tape)


def _block_forward(h: Tensor, store: ParamStore, pfx: str, c_full: int, p: float,
                   layer_scale: bool, drop_prob: float, mode: str,
                   rng, tape) -> Tensor:
    c = active_channels(p, c_full)
    xs = slice_channels(h, c, tape) if c < c_full else h
    k = BLOCK_KERNEL
    u = conv2d_depthwise(
        xs,
        _take(store, f"{pfx}.dw.weight", (k, k, c), tape),
        _take(store, f"{pfx}.dw.bias", (c,), tape),
        tape,
    )
    u = layer_norm_channels(
        u,
        _take(store, f"{pfx}.norm.gamma", (c,), tape),
        _take(store, f"{pfx}.norm.beta", (c,), tape),
        LN_EPS,
        tape,
    )
    ce = EXPANSION * c
    u = conv2d_pointwise(
        u,
        _take(store, f"{pfx}.pw_expand.weight", (c, ce), tape),
        _take(store, f"{pfx}.pw_expand.bias", (ce,), tape),
        tape,
    )
    u = gelu(u, tape)
    u = conv2d_pointwise(
        u,
        _take(store, f"{pfx}.pw_project.weight", (ce, c), tape),
        _take(store, f"{pfx}.pw_project.bias", (c,), tape),
        tape,
    )
    if layer_scale:
        u = channel_scale(u, _take(store, f"{pfx}.scale.gamma", (c,), tape), tape)
    if mode == "train":
        u = drop_path(u, drop_prob, mode, rng, tape)
    return residual_add_zero_pad(u, h, tape)


def forward(store: ParamStore, cfg: ModelConfig, x: Tensor, plist,
            mode: str = "eval", tape: GradTape | None = None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the network at the widths given by plist; returns (N, classes) logits.

    Output depends on the p-list only through the induced width vector
    ``active_channels(p_i, C_i)``: equivalent lists give bit-identical
    logits. No p-list changes any activation's spatial extents.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    validate_plist(plist, cfg.block_dims())
    if x.data.ndim != 4:
        raise ShapeError(f"input must be (N,H,W,C), got shape {x.shape}")
    n, h, w, c_in = x.shape
    if c_in != cfg.in_channels:
        raise ShapeError(
            f"channel axis mismatch: input has {c_in} channels, model expects {cfg.in_channels}"
        )
    if mode == "train":
        if (h, w) != cfg.input_size:
            raise ShapeError(
                f"training input must be {cfg.input_size}, got {(h, w)}"
            )
    elif h % 32 or w % 32:
        raise ShapeError(f"eval input size {(h, w)} must be divisible by 32")

    act = conv2d_strided(x, store["stem.conv.weight"], store["stem.conv.bias"],
                         STEM_STRIDE, tape)
    act = layer_norm_channels(act, store["stem.norm.gamma"], store["stem.norm.beta"],
                              LN_EPS, tape)

    probs = cfg.block_drop_probs()
    idx = 0
    for s in range(4):
        if s > 0:
            act = layer_norm_channels(act, store[f"down{s}.norm.gamma"],
                                      store[f"down{s}.norm.beta"], LN_EPS, tape)
            act = conv2d_strided(act, store[f"down{s}.conv.weight"],
                                 store[f"down{s}.conv.bias"], DOWNSAMPLE_STRIDE, tape)
        for b in range(cfg.depths[s]):
            act = _block_forward(act, store, f"stage{s}.block{b}", cfg.dims[s],
                                 plist[idx], cfg.layer_scale, probs[idx],
                                 mode, rng, tape)
            idx += 1

    pooled = global_avg_pool(act, tape)
    pooled = layer_norm_channels(pooled, store["head.norm.gamma"],
                                 store["head.norm.beta"], LN_EPS, tape)
    return linear(pooled, store["head.fc.weight"], store["head.fc.bias"], tape)
