"""The detection network: shared convolutional backbone, 20 region-private
subnets over landmark-selected feature-map windows, and sigmoid AU heads.

Each region subnet sees only its own 3x3 crop of the backbone feature map
(upsampled to 6x6 before its private conv layers), so its filters receive
gradients exclusively from that region. Region features are either
concatenated into one global feature for multi-label detection or paired
with the symmetric region for single-AU detection. Sequence modes feed the
per-frame global features through a stacked recurrent net and score every
timestep.

Desk-scale defaults keep a full training run on a laptop CPU in the
minutes range; ``paper_scale_config()`` reproduces the published geometry
(224x224 input, 512x14x14 feature map, 2048-wide global feature).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import geometry
from .lstm import GATE_NAMES, LstmLayerParams, run_stack
from .tensor import (
    Tensor,
    concat,
    conv2d,
    gather_region_windows,
    max_pool2d,
    multi_conv2d,
    multi_matmul,
    read_tensor,
    upsample_nearest,
    write_tensor,
)

CHECKPOINT_MAGIC = b"AUCK"
CHECKPOINT_VERSION = 1

STATIC_MODES = ("fvgg", "roi", "single_au")
TEMPORAL_MODES = ("roi_lstm1", "roi_lstm2", "roi_lstm3")
MODES = STATIC_MODES + TEMPORAL_MODES + ("transfer",)


def lstm_depth(mode: str) -> int:
    if mode not in TEMPORAL_MODES:
        raise ValueError(f"mode {mode!r} has no recurrent stack")
    return int(mode[-1])


@dataclass
class ModelConfig:
    """Architecture knobs; the backbone is a list of (channels, kernel, pool) stages."""

    image_size: tuple = (40, 40)
    in_channels: int = 1
    backbone: tuple = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    roi_window: int = 3
    upsample_factor: int = 2
    roi_conv_layers: int = 2
    roi_channels: Optional[int] = 16  # None keeps the backbone channel count
    d_roi: int = 16
    global_feature_len: int = 128
    num_aus: int = 12
    init_std: float = 0.01
    init_scheme: str = "scaled"  # "scaled": std ~ sqrt(2/fan_in); "fixed": init_std
    lstm_hidden: int = 32
    sequence_len: int = 24

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.backbone = tuple(tuple(s) for s in self.backbone)
        if self.global_feature_len <= 0:
            raise ValueError("global_feature_len must be positive")
        if self.init_scheme not in ("scaled", "fixed"):
            raise ValueError(f"init_scheme must be 'scaled' or 'fixed', got {self.init_scheme!r}")
        h, w = self.image_size
        for idx, (channels, kernel, pool) in enumerate(self.backbone):
            if kernel % 2 != 1:
                raise ValueError(f"stage {idx}: even kernel {kernel} breaks same-size convolution")
            if h % pool or w % pool:
                raise ValueError(f"stage {idx}: {h}x{w} grid not divisible by pool {pool}")
            h //= pool
            w //= pool
        if min(h, w) < self.roi_window:
            raise ValueError(f"backbone output grid {h}x{w} smaller than roi window {self.roi_window}")

    def grid_size(self) -> tuple:
        h, w = self.image_size
        for _, _, pool in self.backbone:
            h //= pool
            w //= pool
        return h, w

    def feature_channels(self) -> int:
        return self.backbone[-1][0]

    def roi_subnet_channels(self) -> int:
        return self.feature_channels() if self.roi_channels is None else self.roi_channels

    def roi_patch_side(self) -> int:
        return self.roi_window * self.upsample_factor

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def paper_scale_config() -> ModelConfig:
    return ModelConfig(
        image_size=(224, 224),
        in_channels=3,
        backbone=((64, 3, 2), (128, 3, 2), (256, 3, 2), (512, 3, 2)),
        roi_channels=None,
        d_roi=102,
        global_feature_len=2048,
        lstm_hidden=512,
        init_scheme="fixed",  # published recipe: Gaussian 0.01 on new layers
    )


class ParamStore:
    """Named parameter tensors with per-tensor trainable flags, in a fixed order."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag

    def freeze_prefix(self, prefix: str) -> int:
        hits = 0
        for name in self._params:
            if name.startswith(prefix):
                self._trainable[name] = False
                hits += 1
        return hits

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def param_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    @classmethod
    def wrap(cls, names: Sequence[str], tensors: Sequence[Tensor]) -> "ParamStore":
        """Assemble a store around existing tensor objects (gradient-check closures)."""
        out = cls()
        for name, tensor in zip(names, tensors):
            tensor.name = name
            out._params[name] = tensor
            out._trainable[name] = True
        return out

    def detached(self) -> "ParamStore":
        """A no-gradient view sharing the same arrays, for cheap inference passes."""
        out = ParamStore()
        for name, t in self._params.items():
            clone = Tensor(t.data)
            clone.name = name
            out._params[name] = clone
            out._trainable[name] = False
        return out

    def lstm_layer(self, prefix: str, input_len: int, hidden_len: int) -> LstmLayerParams:
        blocks = [self._params[f"{prefix}.{g}"] for g in GATE_NAMES]
        return LstmLayerParams(*blocks, input_len=input_len, hidden_len=hidden_len)


# ----------------------------------------------------------------------
# parameter initialization


def _conv_std(config: ModelConfig, c_in: int, k: int) -> float:
    if config.init_scheme == "scaled":
        return float(np.sqrt(2.0 / (c_in * k * k)))
    return config.init_std


def _linear_std(config: ModelConfig, n_in: int) -> float:
    if config.init_scheme == "scaled":
        return float(np.sqrt(2.0 / n_in))
    return config.init_std


def _add_conv(store: ParamStore, name: str, c_out: int, c_in: int, k: int,
              rng: np.random.Generator, config: ModelConfig) -> None:
    store.add(f"{name}.w", rng.normal(0.0, _conv_std(config, c_in, k), size=(c_out, c_in, k, k)))
    store.add(f"{name}.b", np.zeros(c_out))


def _add_linear(store: ParamStore, name: str, n_in: int, n_out: int,
                rng: np.random.Generator, config: ModelConfig) -> None:
    store.add(f"{name}.w", rng.normal(0.0, _linear_std(config, n_in), size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def _add_backbone(store: ParamStore, config: ModelConfig, rng, prefix: str = "") -> None:
    c_in = config.in_channels
    for i, (channels, kernel, _) in enumerate(config.backbone):
        _add_conv(store, f"{prefix}backbone.stage{i}", channels, c_in, kernel, rng, config)
        c_in = channels


def _add_roi_subnets(store: ParamStore, config: ModelConfig, rng, prefix: str = "",
                     regions: Optional[Sequence[int]] = None) -> None:
    regions = range(1, geometry.NUM_REGIONS + 1) if regions is None else regions
    side = config.roi_patch_side()
    sub_c = config.roi_subnet_channels()
    for r in regions:
        c_in = config.feature_channels()
        for j in range(config.roi_conv_layers):
            _add_conv(store, f"{prefix}roi.r{r:02d}.conv{j}", sub_c, c_in, 3, rng, config)
            c_in = sub_c
        _add_linear(store, f"{prefix}roi.r{r:02d}.fc", c_in * side * side, config.d_roi, rng, config)


def _add_lstm(store: ParamStore, config: ModelConfig, depth: int, rng, input_len: int) -> None:
    for layer in range(depth):
        n_in = input_len if layer == 0 else config.lstm_hidden
        if config.init_scheme == "scaled":
            std = float(np.sqrt(1.0 / (config.lstm_hidden + n_in)))
        else:
            std = config.init_std
        for g in GATE_NAMES:
            if g.startswith("W"):
                store.add(f"lstm.layer{layer}.{g}",
                          rng.normal(0.0, std, size=(config.lstm_hidden, config.lstm_hidden + n_in)))
            else:
                fill = 1.0 if g == "bf" else 0.0
                store.add(f"lstm.layer{layer}.{g}", np.full(config.lstm_hidden, fill))


def init_params(config: ModelConfig, mode: str, rng: np.random.Generator,
                rules: Optional[Sequence[geometry.AuCenterRule]] = None) -> ParamStore:
    """Fresh Gaussian-initialized parameters for one training mode."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rules = geometry.default_rules() if rules is None else rules
    store = ParamStore()
    if mode == "fvgg":
        _add_backbone(store, config, rng)
        _add_linear(store, "head", config.feature_channels(), config.num_aus, rng, config)
    elif mode in ("roi",) + TEMPORAL_MODES:
        _add_backbone(store, config, rng)
        _add_roi_subnets(store, config, rng)
        _add_linear(store, "global", geometry.NUM_REGIONS * config.d_roi,
                    config.global_feature_len, rng, config)
        _add_linear(store, "head", config.global_feature_len, config.num_aus, rng, config)
        if mode in TEMPORAL_MODES:
            _add_lstm(store, config, lstm_depth(mode), rng, config.global_feature_len)
            _add_linear(store, "lstm_head", config.lstm_hidden, config.num_aus, rng, config)
    elif mode == "single_au":
        aus = sorted({au for r in rules for au in r.au_links})
        if len(aus) != config.num_aus:
            raise ValueError(f"rule table covers {len(aus)} AUs but config expects {config.num_aus}")
        for au in aus:
            prefix = f"au{au:02d}."
            regions = geometry.regions_for_au(rules, au)
            _add_backbone(store, config, rng, prefix)
            _add_roi_subnets(store, config, rng, prefix, regions)
            _add_linear(store, f"{prefix}head", len(regions) * config.d_roi, 1, rng, config)
    else:  # transfer heads are created by the trainer on top of a source checkpoint
        raise ValueError("transfer parameters are built from a source checkpoint, not initialized fresh")
    return store


def freeze_prefix(store: ParamStore, config: ModelConfig, k_stages: int, prefix: str = "") -> None:
    """Mark the first ``k_stages`` backbone stages non-trainable."""
    if not 0 <= k_stages <= len(config.backbone):
        raise ValueError(f"freeze depth {k_stages} outside 0..{len(config.backbone)}")
    for i in range(k_stages):
        if store.freeze_prefix(f"{prefix}backbone.stage{i}.") == 0:
            raise ValueError(f"no parameters under {prefix}backbone.stage{i}.")


# ----------------------------------------------------------------------
# forward passes


def backbone_forward(store: ParamStore, config: ModelConfig, images: Tensor,
                     prefix: str = "") -> Tensor:
    n, c, h, w = images.data.shape
    if (h, w) != config.image_size or c != config.in_channels:
        raise ValueError(f"input {c}x{h}x{w} does not match configured "
                         f"{config.in_channels}x{config.image_size[0]}x{config.image_size[1]}")
    x = images
    for i, (channels, kernel, pool) in enumerate(config.backbone):
        wt = store[f"{prefix}backbone.stage{i}.w"]
        bt = store[f"{prefix}backbone.stage{i}.b"]
        x = conv2d(x, wt, stride=1, padding=kernel // 2) + bt.reshape(1, channels, 1, 1)
        x = x.relu()
        if pool > 1:
            x = max_pool2d(x, pool)
    return x


def roi_feature_stack(store: ParamStore, config: ModelConfig, feature_map: Tensor,
                      window_tops: np.ndarray, prefix: str = "",
                      regions: Optional[Sequence[int]] = None) -> Tensor:
    """Region features as one (R, N, d_roi) stack.

    ``window_tops`` holds the top-left grid corner of every window, shape
    (N, 20, 2). Every region runs its private subnet on its own upsampled
    crop; the regions share single batched kernels, but the parameter and
    gradient flow stays block-diagonal, so region k's filters never see any
    other window.
    """
    regions = list(range(1, geometry.NUM_REGIONS + 1)) if regions is None else list(regions)
    window_tops = np.asarray(window_tops)
    if window_tops.shape != (feature_map.data.shape[0], geometry.NUM_REGIONS, 2):
        raise ValueError(f"expected window corners of shape (N, {geometry.NUM_REGIONS}, 2), "
                         f"got {window_tops.shape}")
    sub_c = config.roi_subnet_channels()
    tops = window_tops[:, [r - 1 for r in regions], :]
    x = gather_region_windows(feature_map, tops, config.roi_window)
    x = upsample_nearest(x, config.upsample_factor)
    x = x.transpose((0, 1, 3, 4, 2))  # conv layers run channels-last
    n_regions = len(regions)
    for j in range(config.roi_conv_layers):
        banks = [store[f"{prefix}roi.r{r:02d}.conv{j}.w"] for r in regions]
        biases = concat([store[f"{prefix}roi.r{r:02d}.conv{j}.b"].reshape(1, sub_c)
                         for r in regions], axis=0)
        x = (multi_conv2d(x, banks, padding=1) + biases.reshape(n_regions, 1, 1, 1, sub_c)).relu()
    side = config.roi_patch_side()
    x = x.reshape(n_regions, x.data.shape[1], side * side * sub_c)
    fc = [store[f"{prefix}roi.r{r:02d}.fc.w"] for r in regions]
    fb = concat([store[f"{prefix}roi.r{r:02d}.fc.b"].reshape(1, config.d_roi)
                 for r in regions], axis=0)
    return (multi_matmul(x, fc) + fb.reshape(n_regions, 1, config.d_roi)).relu()


def roi_forward(store: ParamStore, config: ModelConfig, feature_map: Tensor,
                window_tops: np.ndarray, prefix: str = "",
                regions: Optional[Sequence[int]] = None) -> List[Tensor]:
    """Per-region features, one (N, d_roi) tensor per region."""
    stack = roi_feature_stack(store, config, feature_map, window_tops, prefix, regions)
    return [stack[r] for r in range(stack.data.shape[0])]


def concat_global_feature(store: ParamStore, config: ModelConfig, roi_feats: Sequence[Tensor]) -> Tensor:
    if len(roi_feats) != geometry.NUM_REGIONS:
        raise ValueError(f"expected {geometry.NUM_REGIONS} region features, got {len(roi_feats)}")
    widths = {f.data.shape[1] for f in roi_feats}
    if widths != {config.d_roi}:
        raise ValueError(f"region feature widths {sorted(widths)} != configured {config.d_roi}")
    flat = concat(list(roi_feats), axis=1)
    return (flat @ store["global.w"] + store["global.b"]).relu()


def pair_symmetric(roi_feats: Sequence[Tensor], au: int,
                   rules: Sequence[geometry.AuCenterRule]) -> Tensor:
    """Features of the region(s) serving an AU, symmetric partners concatenated
    in ascending rule order."""
    linked = geometry.regions_for_au(rules, au)
    picked = [roi_feats[r - 1] for r in linked]
    return picked[0] if len(picked) == 1 else concat(picked, axis=1)


def predict_probs(store: ParamStore, feature: Tensor, head: str = "head") -> Tensor:
    w = store[f"{head}.w"]
    if feature.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"feature width {feature.data.shape[1]} != head input {w.data.shape[0]}")
    return (feature @ w + store[f"{head}.b"]).sigmoid()


def fvgg_probs(store: ParamStore, config: ModelConfig, images: Tensor) -> Tensor:
    fmap = backbone_forward(store, config, images)
    pooled = fmap.mean(axis=3).mean(axis=2)
    return predict_probs(store, pooled)


def roi_global_feature(store: ParamStore, config: ModelConfig, images: Tensor,
                       window_tops: np.ndarray) -> Tensor:
    fmap = backbone_forward(store, config, images)
    stack = roi_feature_stack(store, config, fmap, window_tops)
    # (R, N, D) -> (N, R*D), identical to concatenating the region features
    flat = stack.transpose((1, 0, 2)).reshape(stack.data.shape[1],
                                              geometry.NUM_REGIONS * config.d_roi)
    return (flat @ store["global.w"] + store["global.b"]).relu()


def multilabel_probs(store: ParamStore, config: ModelConfig, images: Tensor,
                     window_tops: np.ndarray) -> Tensor:
    return predict_probs(store, roi_global_feature(store, config, images, window_tops))


def single_au_prob(store: ParamStore, config: ModelConfig, images: Tensor,
                   window_tops: np.ndarray, au: int,
                   rules: Sequence[geometry.AuCenterRule]) -> Tensor:
    """Probability column (N, 1) from the per-AU model over paired region features."""
    prefix = f"au{au:02d}."
    regions = geometry.regions_for_au(rules, au)
    fmap = backbone_forward(store, config, images, prefix)
    feats = roi_forward(store, config, fmap, window_tops, prefix, regions)
    paired = feats[0] if len(feats) == 1 else concat(feats, axis=1)
    return predict_probs(store, paired, head=f"{prefix}head")


def sequence_probs(store: ParamStore, config: ModelConfig, depth: int, images: Tensor,
                   window_tops: np.ndarray) -> Tensor:
    """Per-timestep probabilities (B, T, num_aus) for batched frame sequences.

    ``images`` is (B, T, C, H, W); all frames pass through the static net as
    one batch, then the recurrent stack consumes each sequence and every
    timestep output is scored by a shared head.
    """
    b, t = images.data.shape[0], images.data.shape[1]
    flat_images = images.reshape((b * t,) + images.data.shape[2:])
    tops = np.asarray(window_tops).reshape(b * t, geometry.NUM_REGIONS, 2)
    feats = roi_global_feature(store, config, flat_images, tops)
    feats = feats.reshape(b, t, config.global_feature_len)
    steps = [feats[:, i, :] for i in range(t)]
    layers = [store.lstm_layer(f"lstm.layer{layer}",
                               config.global_feature_len if layer == 0 else config.lstm_hidden,
                               config.lstm_hidden)
              for layer in range(depth)]
    outputs = run_stack(steps, layers)
    per_step = [predict_probs(store, h, head="lstm_head").reshape(b, 1, config.num_aus)
                for h in outputs]
    return concat(per_step, axis=1)


def extract_features(store: ParamStore, config: ModelConfig, images: np.ndarray,
                     window_tops: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Global feature vectors for a stack of frames, gradient-free, input order kept."""
    frozen = store.detached()
    out = np.empty((images.shape[0], config.global_feature_len))
    for lo in range(0, images.shape[0], batch_size):
        hi = min(lo + batch_size, images.shape[0])
        feat = roi_global_feature(frozen, config, Tensor(images[lo:hi]), window_tops[lo:hi])
        out[lo:hi] = feat.data
    return out


# ----------------------------------------------------------------------
# checkpoints: magic, version, JSON header, then named tensor records


def save_checkpoint(path, store: ParamStore, config: ModelConfig, mode: str,
                    iteration: int, extra: Optional[dict] = None) -> None:
    header = {
        "config": asdict(config),
        "config_digest": config.digest(),
        "mode": mode,
        "iteration": iteration,
        "trainable": {n: store.is_trainable(n) for n in store.names()},
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, tensor in store.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensor.data)


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None):
    """Returns (store, config, mode, iteration, header). Digest mismatches are rejected."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        config = ModelConfig(**header["config"])
        if config.digest() != header["config_digest"]:
            raise ValueError(f"{path}: header digest does not match its config payload")
        if expect_config is not None and expect_config.digest() != header["config_digest"]:
            raise ValueError(f"{path}: checkpoint config digest {header['config_digest'][:12]}... "
                             f"does not match the requested config {expect_config.digest()[:12]}...")
        store = ParamStore()
        trainable = header.get("trainable", {})
        payload = fh.read()
    stream = io.BytesIO(payload)
    while True:
        head = stream.read(4)
        if not head:
            break
        (nlen,) = struct.unpack("<I", head)
        name = stream.read(nlen).decode()
        store.add(name, read_tensor(stream), trainable=trainable.get(name, True))
    return store, config, header["mode"], header["iteration"], header
