"""Network configuration, assembly, initialisation and weight archives."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .layers import (DEFAULT_LOCATION_VARIANCES, FRESH, PRETRAINED, Conv2d, Dropout, Inception,
                     LBCConv, MaxPool, Upsample)
from .ops import ConvSpec, effective_extent

VARIANTS = ("lbc", "no-lbc", "explicit-cb")
VARIANT_LABELS = {"lbc": "DF-LBC", "no-lbc": "DF-No-LBC", "explicit-cb": "DF-Explicit-CB"}
_LABEL_TO_VARIANT = {v.lower(): k for k, v in VARIANT_LABELS.items()}


class ConfigError(ValueError):
    pass


def canonical_variant(name: str) -> str:
    key = name.lower()
    if key in VARIANTS:
        return key
    if key in _LABEL_TO_VARIANT:
        return _LABEL_TO_VARIANT[key]
    raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class LayerDef:
    """One entry of the flattened layer sequence."""
    kind: str  # conv | pool | inception | lbc | dropout | head
    name: str
    spec: ConvSpec | None = None
    group: str = FRESH
    pool: tuple | None = None  # (window, stride, pad)
    rate: float = 0.0
    widths: tuple = ()
    reduce: tuple = ()
    in_channels: int = 0
    init: float | str = 0.01


@dataclass(frozen=True)
class NetworkConfig:
    name: str = "desk"
    variant: str = "lbc"
    block_widths: tuple = (8, 16, 32, 64, 64)
    block_convs: tuple = (2, 2, 3, 3, 3)
    pool_strides: tuple = (2, 2, 2, 1)
    block5_hole: int = 2
    inception_widths: tuple = (16, 32, 16, 16)
    inception_reduce: tuple = (16, 8)
    n_inception: int = 2
    lbc_channels: int = 64
    lbc_kernel: int = 5
    lbc_hole: int = 6
    dropout: float = 0.5
    location_variances: tuple = DEFAULT_LOCATION_VARIANCES
    input_hw: tuple = (48, 64)
    # init rules: a Gaussian std, or "he" for std sqrt(2 / fan_in)
    trunk_init: float | str = "he"
    fresh_init: float | str = 0.01
    head_init: float | str = 10.0

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))

    def layers(self) -> list[LayerDef]:
        """Flattened layer sequence; channel chaining is validated here."""
        if len(self.block_widths) != 5 or len(self.block_convs) != 5:
            raise ConfigError("expected five convolution blocks")
        if len(self.pool_strides) != 4:
            raise ConfigError("expected pools after blocks 1-4")
        defs = []
        cin = 3
        for b, (width, nconv) in enumerate(zip(self.block_widths, self.block_convs), start=1):
            hole = self.block5_hole if b == 5 else 1
            for k in range(1, nconv + 1):
                defs.append(LayerDef("conv", f"conv{b}_{k}", ConvSpec(3, 3, cin, width, hole=hole),
                                     group=PRETRAINED))
                cin = width
            if b <= 4:
                defs.append(LayerDef("pool", f"pool{b}", pool=(3, self.pool_strides[b - 1], 1)))
        for m in range(1, self.n_inception + 1):
            defs.append(LayerDef("inception", f"inception{m}", widths=tuple(self.inception_widths),
                                 reduce=tuple(self.inception_reduce), in_channels=cin,
                                 init=self.fresh_init))
            cin = sum(self.inception_widths)
        for m in (1, 2):
            spec = ConvSpec(self.lbc_kernel, self.lbc_kernel, cin, self.lbc_channels,
                            hole=self.lbc_hole)
            defs.append(LayerDef("lbc", f"lbc{m}", spec, init=self.fresh_init))
            cin = self.lbc_channels
        defs.append(LayerDef("dropout", "dropout", rate=self.dropout))
        defs.append(LayerDef("head", "head", ConvSpec(1, 1, cin, 1), init=self.head_init))
        return defs

    @property
    def uses_bank(self) -> bool:
        return self.variant == "lbc"


DESK = NetworkConfig(fresh_init="he", head_init="he")
FULL = NetworkConfig(
    name="full", block_widths=(64, 128, 256, 512, 512), inception_widths=(128, 256, 128, 128),
    inception_reduce=(128, 64), lbc_channels=512, input_hw=(480, 640))
CONFIGS = {"desk": DESK, "full": FULL}


def get_config(name: str, variant: str = "lbc") -> NetworkConfig:
    try:
        base = CONFIGS[name]
    except KeyError:
        raise ConfigError(f"unknown config {name!r}; expected one of {sorted(CONFIGS)}") from None
    return replace(base, variant=canonical_variant(variant))


class Network:
    """Sequential DeepFix network returning the W/8 x H/8 saliency map."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.defs = config.layers()
        self.layers = []
        for d in self.defs:
            if d.kind == "conv":
                layer = Conv2d(d.spec, group=d.group, name=d.name)
            elif d.kind == "pool":
                layer = MaxPool(*d.pool)
            elif d.kind == "inception":
                layer = Inception(d.in_channels, d.widths, d.reduce, name=d.name)
            elif d.kind == "lbc":
                layer = LBCConv(d.spec, use_bank=config.uses_bank,
                                variances=config.location_variances, name=d.name)
            elif d.kind == "dropout":
                layer = Dropout(d.rate)
            elif d.kind == "head":
                layer = Conv2d(d.spec, activation=False, name=d.name)
            else:
                raise ConfigError(f"unknown layer kind {d.kind!r}")
            self.layers.append(layer)
        self.mean_map = None  # set for the explicit-cb variant
        self._upsamplers = {}

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self):
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x, train=False, dropout_seed=0):
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ops.DimensionError(f"input height/width must be multiples of 8, got {h}x{w}")
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.seed = dropout_seed
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def upsampler(self, h, w):
        if (h, w) not in self._upsamplers:
            self._upsamplers[h, w] = Upsample(h, w)
        return self._upsamplers[h, w]

    def forward_full(self, x, train=False, dropout_seed=0):
        """Forward pass followed by bicubic upsampling to the input size."""
        low = self.forward(x, train, dropout_seed)
        return self.upsampler(*x.shape[2:]).forward(low, train)[:, 0]

    def backward_full(self, grad):
        up = self._upsamplers[grad.shape[1:]]
        return self.backward(up.backward(grad[:, None]))

    def predict(self, images, explicit_cb_weight=1.0):
        """Final saliency maps (N, H, W), min-max normalised to [0, 1]."""
        from .train import apply_explicit_cb, minmax
        out = self.forward_full(images, train=False)
        if self.config.variant == "explicit-cb":
            if self.mean_map is None:
                raise ConfigError("explicit-cb variant needs a mean map")
            mean_map = self.mean_map
            if mean_map.shape != out.shape[1:]:
                mean_map = ops.bicubic_upsample(mean_map, *out.shape[1:])
            return np.stack([apply_explicit_cb(m, mean_map, explicit_cb_weight) for m in out])
        return np.stack([minmax(m) for m in out])


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


def _init_std(rule, fan_in):
    if rule == "he":
        return float(np.sqrt(2.0 / fan_in))
    return float(rule)


def _fan_in(layer, param):
    """Inputs feeding one output unit. An LBC layer is a single convolution
    over data and bank channels together, so both weight arrays share the
    combined fan-in."""
    if isinstance(layer, LBCConv) and layer.use_bank:
        k = layer.spec.kernel_h * layer.spec.kernel_w
        return (layer.spec.in_channels + len(layer.variances)) * k
    return int(np.prod(param.shape[1:]))


def init_weights(network: Network, seed: int, archive: "WeightArchive | None" = None):
    """Gaussian initialisation with zero biases, following each layer's rule.

    Trunk layers use ``config.trunk_init`` (stand-in for pretrained weights),
    inception and LBC layers ``config.fresh_init`` and the head
    ``config.head_init``. When ``archive`` is given its arrays overwrite the
    matching parameters.
    """
    rng = np.random.default_rng(seed)
    cfg = network.config
    for d, layer in zip(network.defs, network.layers):
        rule = cfg.trunk_init if d.kind == "conv" else d.init
        for p in layer.params():
            if p.name.endswith(".bias"):
                p.data[...] = 0.0
            else:
                p.data[...] = rng.normal(0.0, _init_std(rule, _fan_in(layer, p)), p.shape)
            p.velocity[...] = 0.0
            p.grad[...] = 0.0
    if archive is not None:
        load_weights(network, archive)


def receptive_field(config: NetworkConfig, layer_index: int) -> tuple[int, int]:
    """Extent of one layer's window on its own input."""
    d = config.layers()[layer_index]
    if d.spec is not None:
        return d.spec.extent_h, d.spec.extent_w
    if d.kind == "pool":
        return d.pool[0], d.pool[0]
    if d.kind == "inception":
        e = effective_extent(3, 2)
        return e, e
    return 1, 1


def output_hw(config: NetworkConfig, height: int, width: int) -> tuple[int, int]:
    """Pre-upsampling output size, computed from the layer specs alone."""
    for d in config.layers():
        if d.spec is not None:
            height, width = d.spec.output_hw(height, width)
        elif d.kind == "pool":
            window, stride, pad = d.pool
            height = ops.pool_output_size(height, window, stride, pad)
            width = ops.pool_output_size(width, window, stride, pad)
    return height, width


def composed_receptive_field(config: NetworkConfig, upto: int):
    """Composed window of layers ``0..upto-1`` in input pixels.

    Returns ``(extent, jump, start)`` where output unit ``q`` of the last layer
    sees input rows ``start + q*jump .. start + q*jump + extent - 1``.
    Identical for both axes.
    """
    extent, jump, start = 1, 1, 0
    for d in config.layers()[:upto]:
        if d.spec is not None:
            e, s, pad = d.spec.extent_h, d.spec.stride, d.spec.pad_h
        elif d.kind == "pool":
            e, s, pad = d.pool
        elif d.kind == "inception":
            e, s = effective_extent(3, 2), 1
            pad = e // 2
        else:
            continue
        extent += (e - 1) * jump
        start -= pad * jump
        jump *= s
    return extent, jump, start


# --- weight archives -------------------------------------------------------

MAGIC = b"DFX1"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


@dataclass
class WeightArchive:
    """Named arrays plus string metadata, serialised bit-exactly.

    Layout (all integers little-endian)::

        b"DFX1" | u32 version | u32 meta_len | meta (utf-8 "key=value" lines)
        | u32 count | count x entry | u64 checksum
        entry = u32 name_len | name | u8 dtype_bytes (4|8) | u32 ndim
                | ndim x u64 dim | raw little-endian reals

    ``checksum`` is the 8-byte BLAKE2b digest of every preceding byte.
    """
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", ARCHIVE_VERSION)]
        meta = "".join(f"{k}={v}\n" for k, v in sorted(self.meta.items())).encode()
        parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(self.arrays))]
        for name, arr in self.arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                raise ArchiveError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode()
            parts += [struct.pack("<I", len(raw)), raw,
                      struct.pack("<BI", arr.dtype.itemsize, arr.ndim),
                      struct.pack(f"<{arr.ndim}Q", *arr.shape),
                      arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()]
        body = b"".join(parts)
        return body + hashlib.blake2b(body, digest_size=8).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightArchive":
        if len(data) < 12 or data[:4] != MAGIC:
            raise ArchiveError("not a DFX1 weight archive (bad magic)")
        body, digest = data[:-8], data[-8:]
        if hashlib.blake2b(body, digest_size=8).digest() != digest:
            raise ArchiveError("checksum mismatch: archive is truncated or corrupt")
        pos = 4

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(body):
                raise ArchiveError("archive ends unexpectedly")
            vals = struct.unpack_from(fmt, body, pos)
            pos += size
            return vals

        (version,) = take("<I")
        if version != ARCHIVE_VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        (meta_len,) = take("<I")
        meta_txt = body[pos:pos + meta_len].decode()
        pos += meta_len
        meta = dict(line.split("=", 1) for line in meta_txt.splitlines() if line)
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = body[pos:pos + name_len].decode()
            pos += name_len
            itemsize, ndim = take("<BI")
            shape = take(f"<{ndim}Q")
            dtype = {4: np.dtype("<f4"), 8: np.dtype("<f8")}.get(itemsize)
            if dtype is None:
                raise ArchiveError(f"{name}: unsupported real width {itemsize}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
            if pos + nbytes > len(body):
                raise ArchiveError(f"{name}: data ends unexpectedly")
            arrays[name] = np.frombuffer(body, dtype, count=nbytes // itemsize,
                                         offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
        if pos != len(body):
            raise ArchiveError("trailing bytes after last entry")
        return cls(arrays, meta)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightArchive":
        return cls.from_bytes(Path(path).read_bytes())


def save_weights(network: Network) -> WeightArchive:
    arrays = {p.name: p.data.copy() for p in network.params()}
    if network.mean_map is not None:
        arrays["mean_map"] = np.asarray(network.mean_map, dtype=np.float64).copy()
    meta = {"config": network.config.name, "variant": network.config.variant}
    return WeightArchive(arrays, meta)


def load_weights(network: Network, archive: WeightArchive, strict=True):
    """Copy archive arrays into the network, validating names and shapes."""
    params = network.named_params()
    for name, arr in archive.arrays.items():
        if name == "mean_map":
            network.mean_map = np.array(arr, dtype=np.float64)
            continue
        if name not in params:
            if strict:
                raise ArchiveError(f"archive layer {name!r} has no counterpart in the network")
            continue
        p = params[name]
        if arr.shape != p.shape:
            raise ArchiveError(f"layer {name!r}: archive shape {arr.shape} != network shape {p.shape}")
        p.data[...] = arr
    if strict:
        missing = sorted(set(params) - set(archive.arrays))
        if missing:
            raise ArchiveError(f"archive lacks layers: {', '.join(missing)}")


def network_from_archive(archive: WeightArchive) -> Network:
    try:
        config = get_config(archive.meta["config"], archive.meta.get("variant", "lbc"))
    except KeyError:
        raise ArchiveError("archive metadata does not name a config") from None
    net = build_network(config)
    load_weights(net, archive)
    return net
