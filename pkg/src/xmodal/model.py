"""Two-stream convolutional encoders and their checkpoint format.

The two streams share one layout and differ only in the first layer's input
channel count (3 for the rgb stream, 4 for the sod stream); no weights are
shared.  Features are the post-ReLU output of the final fully connected
layer, so they live in the non-negative orthant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .data import RGB_CHANNELS, SOD_CHANNELS
from .errors import ConfigError, DimensionError, FormatError
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batchnorm,
    conv2d,
    dropout,
    flatten_rows,
    matmul,
    relu,
    reshape,
)

CHECKPOINT_MAGIC = b"XMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int
    batchnorm: bool = True


@dataclass(frozen=True)
class EncoderSpec:
    input_channels: int
    convs: tuple  # of ConvSpec
    fc_widths: tuple  # hidden fc widths, feature layer excluded
    feature_dim: int
    dropout_p: float = 0.0

    def validate(self):
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if not self.convs:
            raise ConfigError("need at least one conv layer")
        for c in self.convs:
            if c.out_channels < 1 or c.kernel < 1 or c.stride < 1:
                raise ConfigError(f"bad conv layer {c}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def default_encoder_spec(input_channels: int = RGB_CHANNELS) -> EncoderSpec:
    return EncoderSpec(
        input_channels=input_channels,
        convs=(
            ConvSpec(16, 5, 2, True),
            ConvSpec(32, 3, 2, True),
            ConvSpec(64, 3, 2, True),
        ),
        fc_widths=(128,),
        feature_dim=64,
        dropout_p=0.0,
    )


def spec_text(spec: EncoderSpec) -> str:
    """Canonical single-string form; also the checkpoint's spec record."""
    convs = ",".join(
        f"{c.out_channels}:{c.kernel}:{c.stride}:{'bn' if c.batchnorm else 'id'}"
        for c in spec.convs
    )
    fcs = ",".join(str(wdt) for wdt in spec.fc_widths) or "-"
    return (
        f"input_channels={spec.input_channels}\n"
        f"conv={convs}\n"
        f"fc={fcs}\n"
        f"feature_dim={spec.feature_dim}\n"
        f"dropout_p={spec.dropout_p!r}\n"
    )


def parse_spec_text(text: str) -> EncoderSpec:
    fields = {}
    for line in text.strip().splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        convs = tuple(
            ConvSpec(int(o), int(k), int(s), flag == "bn")
            for o, k, s, flag in (
                item.split(":") for item in fields["conv"].split(",")
            )
        )
        fcs = (
            tuple(int(x) for x in fields["fc"].split(","))
            if fields["fc"] != "-"
            else ()
        )
        spec = EncoderSpec(
            input_channels=int(fields["input_channels"]),
            convs=convs,
            fc_widths=fcs,
            feature_dim=int(fields["feature_dim"]),
            dropout_p=float(fields["dropout_p"]),
        )
    except (KeyError, ValueError) as e:
        raise FormatError("spec", f"unparseable encoder spec: {e}") from e
    spec.validate()
    return spec


@dataclass
class Param:
    name: str
    tensor: Tensor
    decay: bool  # False exempts it from weight decay


class _ConvLayer:
    def __init__(self, spec: ConvSpec, weight, bias, gamma, beta, bn_state):
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.bn_state = bn_state


class _FcLayer:
    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias


def _uniform_init(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Encoder:
    """One stream; built layer by layer from its spec with a seeded rng."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator, name: str):
        spec.validate()
        self.spec = spec
        self.name = name
        self.convs = []
        cin = spec.input_channels
        for i, c in enumerate(spec.convs):
            w = Param(
                f"{name}.conv{i}.weight",
                Tensor(
                    _uniform_init(rng, (c.out_channels, cin, c.kernel, c.kernel),
                                  cin * c.kernel * c.kernel),
                    requires_grad=True,
                ),
                decay=True,
            )
            b = Param(
                f"{name}.conv{i}.bias",
                Tensor(np.zeros(c.out_channels), requires_grad=True),
                decay=False,
            )
            if c.batchnorm:
                gamma = Param(
                    f"{name}.conv{i}.gamma",
                    Tensor(np.ones(c.out_channels), requires_grad=True),
                    decay=False,
                )
                beta = Param(
                    f"{name}.conv{i}.beta",
                    Tensor(np.zeros(c.out_channels), requires_grad=True),
                    decay=False,
                )
                state = BatchNormState(c.out_channels)
            else:
                gamma = beta = state = None
            self.convs.append(_ConvLayer(c, w, b, gamma, beta, state))
            cin = c.out_channels
        self.fcs = []
        self._fc_in = None  # resolved lazily from the first forward
        self._fc_rng_draws = []
        widths = list(spec.fc_widths) + [spec.feature_dim]
        # fc fan-in depends on input spatial size, so weights are created on
        # first use; pre-draw nothing here to keep the rng stream layer-ordered
        self._pending_fc_widths = widths
        self._rng = rng

    def _build_fcs(self, fc_in: int):
        self._fc_in = fc_in
        cin = fc_in
        for j, width in enumerate(self._pending_fc_widths):
            w = Param(
                f"{self.name}.fc{j}.weight",
                Tensor(_uniform_init(self._rng, (cin, width), cin),
                       requires_grad=True),
                decay=True,
            )
            b = Param(
                f"{self.name}.fc{j}.bias",
                Tensor(np.zeros(width), requires_grad=True),
                decay=False,
            )
            self.fcs.append(_FcLayer(w, b))
            cin = width

    def ensure_built(self, spatial: tuple):
        """Materialize fc layers for a given input spatial size."""
        if self.fcs:
            return
        h, w = spatial
        for c in self.spec.convs:
            h = (h - c.kernel) // c.stride + 1
            w = (w - c.kernel) // c.stride + 1
            if h < 1 or w < 1:
                raise DimensionError(
                    f"input {spatial} too small for conv stack of {self.name}"
                )
        self._build_fcs(self.spec.convs[-1].out_channels * h * w)

    def parameters(self):
        out = []
        for layer in self.convs:
            out.append(layer.weight)
            out.append(layer.bias)
            if layer.gamma is not None:
                out.extend((layer.gamma, layer.beta))
        for layer in self.fcs:
            out.extend((layer.weight, layer.bias))
        return out

    def forward(self, x: Tensor, mode: str, rng=None, guided: bool = False,
                return_conv: bool = False):
        """Features of a (N, C, H, W) batch; eval mode is row-independent."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.data.shape[1] != self.spec.input_channels:
            raise DimensionError(
                f"{self.name} expects (N, {self.spec.input_channels}, H, W), "
                f"got {x.data.shape}"
            )
        self.ensure_built(x.data.shape[2:])
        h = x
        conv_tap = None
        for layer in self.convs:
            h = conv2d(h, layer.weight.tensor, stride=layer.spec.stride)
            c = layer.spec.out_channels
            # an all-zero bias into batchnorm is a bitwise no-op with an
            # exactly-zero gradient (the batch mean removes any shift), so
            # skipping it changes nothing and saves two full-array passes
            if layer.gamma is None or np.any(layer.bias.tensor.data):
                h = add(h, reshape(layer.bias.tensor, (c, 1, 1)))
            if layer.gamma is not None:
                h = batchnorm(
                    h, layer.gamma.tensor, layer.beta.tensor, layer.bn_state, mode
                )
            h = relu(h, guided=guided)
            conv_tap = h
        h = flatten_rows(h)
        if h.data.shape[1] != self._fc_in:
            raise DimensionError(
                f"{self.name} was built for flattened width {self._fc_in}, "
                f"got {h.data.shape[1]}; input spatial size is fixed after build"
            )
        for layer in self.fcs:
            h = add(matmul(h, layer.weight.tensor), layer.bias.tensor)
            h = relu(h, guided=guided)
            if mode == "train" and self.spec.dropout_p > 0.0:
                if rng is None:
                    raise ConfigError("dropout requires an rng in train mode")
                h = dropout(h, self.spec.dropout_p, rng)
        return (h, conv_tap) if return_conv else h


class TwoStreamModel:
    def __init__(self, f: Encoder, g: Encoder):
        self.f = f
        self.g = g

    def parameters(self):
        return self.f.parameters() + self.g.parameters()

    def forward_f(self, rgb: Tensor, mode: str, rng=None, guided=False,
                  return_conv=False):
        return self.f.forward(rgb, mode, rng=rng, guided=guided,
                              return_conv=return_conv)

    def forward_g(self, sod: Tensor, mode: str, rng=None, guided=False,
                  return_conv=False):
        return self.g.forward(sod, mode, rng=rng, guided=guided,
                              return_conv=return_conv)


def rng_streams(seed: int):
    """Named independent substreams so arms with one seed agree everywhere."""
    children = np.random.SeedSequence(seed).spawn(4)
    return {
        "f": np.random.default_rng(children[0]),
        "g": np.random.default_rng(children[1]),
        "head": np.random.default_rng(children[2]),
        "train": np.random.default_rng(children[3]),
    }


def init_model(
    spec: EncoderSpec | None = None,
    seed: int = 0,
    input_size: tuple = (32, 32),
    g_input_channels: int = SOD_CHANNELS,
) -> TwoStreamModel:
    """Fresh two-stream model; f and g draw from independent substreams."""
    spec = spec or default_encoder_spec()
    streams = rng_streams(seed)
    f = Encoder(spec, streams["f"], "f")
    g = Encoder(replace(spec, input_channels=g_input_channels), streams["g"], "g")
    f.ensure_built(input_size)
    g.ensure_built(input_size)
    return TwoStreamModel(f, g)


class ConcatHead:
    """Two fc layers scoring whether an (rgb, sod) feature pair is aligned."""

    def __init__(self, feature_dim: int, hidden: int, rng: np.random.Generator):
        if feature_dim < 1 or hidden < 1:
            raise ConfigError(
                f"feature_dim and hidden must be >= 1, got {feature_dim}, {hidden}"
            )
        self.feature_dim = feature_dim
        self.hidden = hidden
        d2 = 2 * feature_dim
        self.w1 = Param("head.fc0.weight",
                        Tensor(_uniform_init(rng, (d2, hidden), d2),
                               requires_grad=True), decay=True)
        self.b1 = Param("head.fc0.bias",
                        Tensor(np.zeros(hidden), requires_grad=True), decay=False)
        self.w2 = Param("head.fc1.weight",
                        Tensor(_uniform_init(rng, (hidden, 2), hidden),
                               requires_grad=True), decay=True)
        self.b2 = Param("head.fc1.bias",
                        Tensor(np.zeros(2), requires_grad=True), decay=False)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, feat_f: Tensor, feat_g: Tensor) -> Tensor:
        from .tensor import concat

        if feat_f.data.shape != feat_g.data.shape or feat_f.ndim != 2:
            raise DimensionError(
                f"head needs two equal (N, D) blocks, got {feat_f.data.shape} "
                f"and {feat_g.data.shape}"
            )
        if feat_f.data.shape[1] != self.feature_dim:
            raise DimensionError(
                f"head was built for D={self.feature_dim}, got "
                f"{feat_f.data.shape[1]}"
            )
        h = concat([feat_f, feat_g], axis=1)
        h = relu(add(matmul(h, self.w1.tensor), self.b1.tensor))
        return add(matmul(h, self.w2.tensor), self.b2.tensor)


def init_concat_head(feature_dim: int = 64, hidden: int = 64,
                     seed: int = 0) -> ConcatHead:
    return ConcatHead(feature_dim, hidden, rng_streams(seed)["head"])


def forward_concat(model: TwoStreamModel, head: ConcatHead, rgb: Tensor,
                   sod: Tensor, mode: str) -> Tensor:
    """Alignment logits for row-aligned rgb/sod batches."""
    return head.logits(model.forward_f(rgb, mode), model.forward_g(sod, mode))


# ---------------------------------------------------------------------------
# checkpoint io


def _write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_array(blob: bytes, off: int):
    (ndim,) = struct.unpack_from("<I", blob, off)
    off += 4
    if ndim > 8:
        raise FormatError("array", f"implausible ndim {ndim}")
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = off + 8 * count
    if end > len(blob):
        raise FormatError("array", "truncated array data")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
    return arr.copy(), end


def _stream_arrays(enc: Encoder):
    """Declaration-ordered state arrays: params plus bn running stats."""
    out = []
    for layer in enc.convs:
        out.append(layer.weight.tensor.data)
        out.append(layer.bias.tensor.data)
        if layer.gamma is not None:
            out.append(layer.gamma.tensor.data)
            out.append(layer.beta.tensor.data)
            out.append(layer.bn_state.mean)
            out.append(layer.bn_state.var)
    for layer in enc.fcs:
        out.append(layer.weight.tensor.data)
        out.append(layer.bias.tensor.data)
    return out


def save_checkpoint(model: TwoStreamModel, path, input_size: tuple = (32, 32)):
    model.f.ensure_built(input_size)
    model.g.ensure_built(input_size)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        for enc in (model.f, model.g):
            text = spec_text(enc.spec).encode()
            fh.write(struct.pack("<I", len(text)))
            fh.write(text)
        fh.write(struct.pack("<HH", *input_size))
        arrays = _stream_arrays(model.f) + _stream_arrays(model.g)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            _write_array(fh, arr)


def _fill_stream(enc: Encoder, arrays, pos: int) -> int:
    targets = []
    for layer in enc.convs:
        targets.append(layer.weight.tensor.data)
        targets.append(layer.bias.tensor.data)
        if layer.gamma is not None:
            targets.append(layer.gamma.tensor.data)
            targets.append(layer.beta.tensor.data)
            targets.append(layer.bn_state.mean)
            targets.append(layer.bn_state.var)
    for layer in enc.fcs:
        targets.append(layer.weight.tensor.data)
        targets.append(layer.bias.tensor.data)
    for t in targets:
        arr = arrays[pos]
        if arr.shape != t.shape:
            raise FormatError(
                "array", f"shape {arr.shape} does not match expected {t.shape}"
            )
        t[...] = arr
        pos += 1
    return pos


def load_checkpoint(path) -> TwoStreamModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("magic", f"expected {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    off = 6
    specs = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        specs.append(parse_spec_text(blob[off : off + n].decode()))
        off += n
    input_size = struct.unpack_from("<HH", blob, off)
    off += 4
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = []
    for _ in range(count):
        arr, off = _read_array(blob, off)
        arrays.append(arr)
    if off != len(blob):
        raise FormatError("array", f"{len(blob) - off} trailing bytes")
    spec_f, spec_g = specs
    if replace(spec_f, input_channels=0) != replace(spec_g, input_channels=0):
        raise FormatError("spec", "stream specs differ beyond input channels")
    model = init_model(spec_f, seed=0, input_size=tuple(input_size),
                       g_input_channels=spec_g.input_channels)
    pos = _fill_stream(model.f, arrays, 0)
    pos = _fill_stream(model.g, arrays, pos)
    if pos != count:
        raise FormatError("array", f"expected {pos} arrays, file has {count}")
    return model


def save_head(head: ConcatHead, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        text = f"concat_head\nfeature_dim={head.feature_dim}\nhidden={head.hidden}\n"
        raw = text.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", 4))
        for p in head.parameters():
            _write_array(fh, p.tensor.data)


def load_head(path) -> ConcatHead:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("magic", f"expected {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    off = 6
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    lines = blob[off : off + n].decode().strip().splitlines()
    off += n
    if not lines or lines[0] != "concat_head":
        raise FormatError("spec", "not a concat head checkpoint")
    fields = dict(line.split("=", 1) for line in lines[1:])
    head = init_concat_head(int(fields["feature_dim"]), int(fields["hidden"]), 0)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    if count != 4:
        raise FormatError("array", f"expected 4 arrays, got {count}")
    for p in head.parameters():
        arr, off = _read_array(blob, off)
        if arr.shape != p.tensor.data.shape:
            raise FormatError("array", f"shape {arr.shape} does not match "
                                       f"{p.tensor.data.shape}")
        p.tensor.data[...] = arr
    return head
