"""The dual-branch retrieval model.

One branch (style encoder + style classifier) learns which environmental
condition an image carries; the other (content encoder + identity
classifier) produces the retrieval embedding. The style feature drives the
conditional normalization embedded in the early content bottlenecks, so
the content branch can cancel the condition on the fly. Both platforms
(satellite and drone) share every weight.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import norm as N
from . import tensor as T
from .errors import ConfigurationError, DataIOError, UsageError
from .tensor import LrGroup, Mode, Parameter, Tensor

CHECKPOINT_MAGIC = "musenet-checkpoint-v1"


class EmbedSource(Enum):
    POOLED_CONTENT = "pooled"
    POST_BN = "postbn"


class ModulationKind(Enum):
    RESIDUAL = "residual"  # IN(u)*(1+scale) + bias, keeps the IN affine
    PLAIN = "plain"        # scale*standardize(u) + bias, affine-free inner


VALID_PLACEMENTS = frozenset({1, 2, 3})


def parse_placement(text: str) -> frozenset:
    """Parse a placement flag like 'b2,b3' or 'none' into bottleneck indices."""
    text = text.strip().lower()
    if text in ("none", ""):
        return frozenset()
    out = set()
    for token in text.split(","):
        token = token.strip()
        if token not in ("b1", "b2", "b3"):
            raise UsageError(
                f"unknown placement token {token!r}; valid: b1, b2, b3, none")
        out.add(int(token[1]))
    return frozenset(out)


def format_placement(placement: frozenset) -> str:
    return ",".join(f"b{i}" for i in sorted(placement)) or "none"


@dataclass
class ModelConfig:
    input_size: int = 64
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (3, 2, 2, 2)
    num_identities: int = 32
    num_styles: int = 11
    spade_placement: frozenset = field(default_factory=lambda: frozenset({2, 3}))
    dropout_rate: float = 0.5
    embed_source: EmbedSource = EmbedSource.POOLED_CONTENT
    modulation: ModulationKind = ModulationKind.RESIDUAL

    def validate(self):
        if self.input_size % 16 != 0 or self.input_size < 32:
            raise ConfigurationError(
                f"input_size must be a multiple of 16 and >=32, got {self.input_size}")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("the backbone has exactly four stages")
        if self.stage_depths[0] != 3:
            raise ConfigurationError(
                f"stage1 must hold exactly three bottlenecks, got {self.stage_depths[0]}")
        if self.num_styles != 11:
            raise ConfigurationError(f"num_styles must be 11, got {self.num_styles}")
        if not frozenset(self.spade_placement) <= VALID_PLACEMENTS:
            raise ConfigurationError(
                f"spade_placement must be a subset of {{1,2,3}}, got {set(self.spade_placement)}")
        if self.stage_channels[0] % 2:
            raise ConfigurationError("stage1 width must be even for the IBN split")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0,1), got {self.dropout_rate}")
        if self.num_identities < 1:
            raise ConfigurationError("num_identities must be positive")
        return self


@dataclass
class ForwardOutput:
    style_logits: Tensor      # N x num_styles
    id_logits: Tensor         # N x num_identities
    style_feature: Tensor     # N x C_style x S/8 x S/8
    content_embedding: Tensor  # N x C_content
    post_bn_embedding: Tensor  # identity classifier BN output, same shape as g


def _conv_param(rng, in_ch, out_ch, k, dtype=np.float32) -> Parameter:
    std = np.sqrt(2.0 / (in_ch * k * k))
    w = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
    return Parameter(w)


FC_INIT_STD = 0.01  # near-zero initial logits: untrained CE starts at ln(C)


class _Classifier:
    """BN -> Dropout -> FC, all parameters in the boosted LR group."""

    def __init__(self, rng, in_dim, out_dim, dtype=np.float32):
        self.bn = N.BatchNormState(in_dim, lr_group=LrGroup.BOOSTED, dtype=dtype)
        self.weight = Parameter(
            (rng.standard_normal((in_dim, out_dim)) * FC_INIT_STD).astype(dtype),
            LrGroup.BOOSTED)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), LrGroup.BOOSTED)

    def forward(self, x, mode, rng, dropout_rate):
        bn_out = N.batch_norm(x, self.bn)
        h = T.dropout(bn_out, dropout_rate, mode, rng)
        return T.linear(h, self.weight, self.bias), bn_out

    def named_params(self, prefix):
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta
        yield f"{prefix}.fc.weight", self.weight
        yield f"{prefix}.fc.bias", self.bias

    def named_buffers(self, prefix):
        yield f"{prefix}.bn.running_mean", self.bn
        yield f"{prefix}.bn.running_var", self.bn


class _Bottleneck:
    """conv1x1 -> norm (BN, or IN/BN split in stage1, optionally modulated)
    -> relu -> conv3x3(stride) -> BN -> relu -> conv1x1 -> BN -> +skip -> relu."""

    def __init__(self, rng, in_ch, out_ch, stride, use_ibn, style_channels,
                 modulation: ModulationKind | None, dtype=np.float32):
        self.stride = stride
        self.use_ibn = use_ibn
        self.modulation = modulation
        self.conv1 = _conv_param(rng, in_ch, out_ch, 1, dtype)
        if use_ibn:
            half = out_ch // 2
            self.in_state = N.InstanceNormState(half, dtype=dtype)
            self.bn_split = N.BatchNormState(half, dtype=dtype)
            if modulation is not None:
                self.spade = N.ResidualSpadeState(style_channels, half, self.in_state, rng, dtype=dtype)
            else:
                self.spade = None
        else:
            self.bn1 = N.BatchNormState(out_ch, dtype=dtype)
            self.spade = None
        self.conv2 = _conv_param(rng, out_ch, out_ch, 3, dtype)
        self.bn2 = N.BatchNormState(out_ch, dtype=dtype)
        self.conv3 = _conv_param(rng, out_ch, out_ch, 1, dtype)
        self.bn3 = N.BatchNormState(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.skip_conv = _conv_param(rng, in_ch, out_ch, 1, dtype)
            self.skip_bn = N.BatchNormState(out_ch, dtype=dtype)
        else:
            self.skip_conv = None

    def forward(self, x, style_feature=None):
        h = T.conv2d(x, self.conv1)
        if self.use_ibn:
            c = h.data.shape[1]
            lo = T.slice_channels(h, 0, c // 2)
            hi = T.slice_channels(h, c // 2, c)
            if self.spade is not None and style_feature is not None:
                if self.modulation is ModulationKind.RESIDUAL:
                    lo = N.residual_spade(lo, style_feature, self.spade)
                else:
                    lo = N.spade(lo, style_feature, self.spade)
            else:
                lo = N.instance_norm(lo, self.in_state)
            h = T.concat_channels(lo, N.batch_norm(hi, self.bn_split))
        else:
            h = N.batch_norm(h, self.bn1)
        h = T.relu(h)
        h = T.conv2d(h, self.conv2, stride=self.stride, padding=1)
        h = T.relu(N.batch_norm(h, self.bn2))
        h = N.batch_norm(T.conv2d(h, self.conv3), self.bn3)
        if self.skip_conv is not None:
            s = N.batch_norm(T.conv2d(x, self.skip_conv, stride=self.stride), self.skip_bn)
        else:
            s = x
        return T.relu(T.add(h, s))

    def named_params(self, prefix):
        yield f"{prefix}.conv1", self.conv1
        if self.use_ibn:
            yield f"{prefix}.in.gamma", self.in_state.gamma
            yield f"{prefix}.in.beta", self.in_state.beta
            yield f"{prefix}.bns.gamma", self.bn_split.gamma
            yield f"{prefix}.bns.beta", self.bn_split.beta
            if self.spade is not None:
                yield f"{prefix}.spade.conv_w1", self.spade.conv_w1
                yield f"{prefix}.spade.conv_b1", self.spade.conv_b1
        else:
            yield f"{prefix}.bn1.gamma", self.bn1.gamma
            yield f"{prefix}.bn1.beta", self.bn1.beta
        yield f"{prefix}.conv2", self.conv2
        yield f"{prefix}.bn2.gamma", self.bn2.gamma
        yield f"{prefix}.bn2.beta", self.bn2.beta
        yield f"{prefix}.conv3", self.conv3
        yield f"{prefix}.bn3.gamma", self.bn3.gamma
        yield f"{prefix}.bn3.beta", self.bn3.beta
        if self.skip_conv is not None:
            yield f"{prefix}.skip.conv", self.skip_conv
            yield f"{prefix}.skip.bn.gamma", self.skip_bn.gamma
            yield f"{prefix}.skip.bn.beta", self.skip_bn.beta

    def bn_states(self):
        if self.use_ibn:
            yield "bns", self.bn_split
        else:
            yield "bn1", self.bn1
        yield "bn2", self.bn2
        yield "bn3", self.bn3
        if self.skip_conv is not None:
            yield "skip.bn", self.skip_bn


class _Encoder:
    """Stem (conv/2 + BN + relu + maxpool/2) followed by residual stages."""

    def __init__(self, rng, config: ModelConfig, num_stages, ibn_stage1, placement,
                 modulation, style_channels, last_stage_stride_one, dtype=np.float32):
        self.stem_conv = _conv_param(rng, 3, config.stem_channels, 3, dtype)
        self.stem_norm = N.BatchNormState(config.stem_channels, dtype=dtype)
        self.stages = []
        in_ch = config.stem_channels
        for si in range(num_stages):
            out_ch = config.stage_channels[si]
            stage_stride = 1 if si == 0 else 2
            if last_stage_stride_one and si == 3:
                stage_stride = 1
            blocks = []
            for bi in range(config.stage_depths[si]):
                use_ibn = ibn_stage1 and si == 0
                modulated = use_ibn and (bi + 1) in placement
                blocks.append(_Bottleneck(
                    rng, in_ch, out_ch, stage_stride if bi == 0 else 1, use_ibn,
                    style_channels, modulation if modulated else None, dtype))
                in_ch = out_ch
            self.stages.append(blocks)
        self.out_channels = in_ch

    def forward(self, x, style_feature=None):
        h = N.batch_norm(T.conv2d(x, self.stem_conv, stride=2, padding=1), self.stem_norm)
        h = T.max_pool(T.relu(h), window=2, stride=2)
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, style_feature)
        return h

    def named_params(self, prefix):
        yield f"{prefix}.stem.conv", self.stem_conv
        yield f"{prefix}.stem.norm.gamma", self.stem_norm.gamma
        yield f"{prefix}.stem.norm.beta", self.stem_norm.beta
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_params(f"{prefix}.stage{si + 1}.b{bi + 1}")

    def bn_states(self):
        yield "stem.norm", self.stem_norm
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                for name, state in block.bn_states():
                    yield f"stage{si + 1}.b{bi + 1}.{name}", state


class MuSeNet:
    """Style branch + content branch sharing inputs; see build_model."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.style_encoder = _Encoder(
            rng, config, num_stages=2, ibn_stage1=False, placement=frozenset(),
            modulation=None, style_channels=0, last_stage_stride_one=False, dtype=dtype)
        self.style_classifier = _Classifier(
            rng, self.style_encoder.out_channels, config.num_styles, dtype)
        self.content_encoder = _Encoder(
            rng, config, num_stages=4, ibn_stage1=True, placement=config.spade_placement,
            modulation=config.modulation, style_channels=self.style_encoder.out_channels,
            last_stage_stride_one=True, dtype=dtype)
        self.identity_classifier = _Classifier(
            rng, self.content_encoder.out_channels, config.num_identities, dtype)
        self._params = list(self._iter_named_params())
        for name, p in self._params:
            p.name = name

    def _iter_named_params(self):
        yield from self.style_encoder.named_params("style")
        yield from self.style_classifier.named_params("style_cls")
        yield from self.content_encoder.named_params("content")
        yield from self.identity_classifier.named_params("id_cls")

    def named_params(self):
        return list(self._params)

    def parameters(self):
        return [p for _, p in self._params]

    def named_bn_states(self):
        for name, state in self.style_encoder.bn_states():
            yield f"style.{name}", state
        yield "style_cls.bn", self.style_classifier.bn
        for name, state in self.content_encoder.bn_states():
            yield f"content.{name}", state
        yield "id_cls.bn", self.identity_classifier.bn

    def spade_states(self):
        for blocks in self.content_encoder.stages:
            for block in blocks:
                if block.spade is not None:
                    yield block.spade

    def set_mode(self, mode: Mode):
        for _, state in self.named_bn_states():
            state.mode = mode


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> MuSeNet:
    """Deterministically initialize the full model from one seeded stream."""
    return MuSeNet(config, rng, dtype)


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 N x H x W x 3 (or single H x W x 3) -> float32 N x 3 x H x W in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    arr = arr.astype(np.float32) / 255.0
    arr = (arr - 0.5) * 2.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def forward(model: MuSeNet, images, mode: Mode, rng: np.random.Generator) -> ForwardOutput:
    """Run the style branch first, then the content branch conditioned on it."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.data.shape[1] != 3:
        raise ConfigurationError(f"expected N x 3 x S x S input, got {x.data.shape}")
    if x.data.shape[2] != model.config.input_size or x.data.shape[3] != model.config.input_size:
        raise ConfigurationError(
            f"model expects {model.config.input_size}px inputs, got {x.data.shape[2:]}" )
    model.set_mode(mode)
    f = model.style_encoder.forward(x)
    style_logits, _ = model.style_classifier.forward(
        T.global_avg_pool(f), mode, rng, model.config.dropout_rate)
    h = model.content_encoder.forward(x, style_feature=f)
    g = T.global_avg_pool(h)
    id_logits, post_bn = model.identity_classifier.forward(
        g, mode, rng, model.config.dropout_rate)
    return ForwardOutput(style_logits, id_logits, f, g, post_bn)


_EVAL_RNG = np.random.default_rng(0)  # dropout is inert in Eval mode


def extract_embedding(model: MuSeNet, image) -> Tensor:
    """Retrieval feature of one (or a batch of) image(s), in Eval mode."""
    with T.no_grad():
        out = forward(model, image, Mode.EVAL, _EVAL_RNG)
    if model.config.embed_source is EmbedSource.POST_BN:
        return out.post_bn_embedding
    return out.content_embedding


def count_params(model: MuSeNet) -> int:
    """Scalar parameter count; momentum buffers and running stats excluded."""
    return sum(p.value.data.size for _, p in model.named_params())


# ---------------------------------------------------------------------------
# checkpoint format: text header (config + named shapes), then raw little-
# endian float32 payload in header order.


def _config_items(config: ModelConfig):
    return [
        ("input_size", str(config.input_size)),
        ("stem_channels", str(config.stem_channels)),
        ("stage_channels", ",".join(map(str, config.stage_channels))),
        ("stage_depths", ",".join(map(str, config.stage_depths))),
        ("num_identities", str(config.num_identities)),
        ("num_styles", str(config.num_styles)),
        ("spade_placement", format_placement(config.spade_placement)),
        ("dropout_rate", repr(config.dropout_rate)),
        ("embed_source", config.embed_source.value),
        ("modulation", config.modulation.value),
    ]


def config_from_items(items: dict) -> ModelConfig:
    try:
        return ModelConfig(
            input_size=int(items["input_size"]),
            stem_channels=int(items["stem_channels"]),
            stage_channels=tuple(int(v) for v in items["stage_channels"].split(",")),
            stage_depths=tuple(int(v) for v in items["stage_depths"].split(",")),
            num_identities=int(items["num_identities"]),
            num_styles=int(items["num_styles"]),
            spade_placement=parse_placement(items["spade_placement"]),
            dropout_rate=float(items["dropout_rate"]),
            embed_source=EmbedSource(items["embed_source"]),
            modulation=ModulationKind(items["modulation"]),
        ).validate()
    except KeyError as exc:
        raise DataIOError(f"checkpoint config is missing key {exc}") from exc


def _checkpoint_entries(model: MuSeNet):
    for name, p in model.named_params():
        yield name, p.value.data
    for name, state in model.named_bn_states():
        yield f"{name}.running_mean", state.running_mean
        yield f"{name}.running_var", state.running_var


def save_checkpoint(model: MuSeNet, path) -> None:
    header = io.StringIO()
    header.write(CHECKPOINT_MAGIC + "\n[config]\n")
    for key, value in _config_items(model.config):
        header.write(f"{key}={value}\n")
    header.write("[tensors]\n")
    entries = list(_checkpoint_entries(model))
    for name, arr in entries:
        dims = "x".join(map(str, arr.shape)) or "scalar"
        header.write(f"{name} {dims}\n")
    header.write("[data]\n")
    try:
        with open(path, "wb") as fh:
            fh.write(header.getvalue().encode("ascii"))
            for _, arr in entries:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> MuSeNet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"[data]\n"
    split = blob.find(marker)
    if split < 0 or not blob.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise DataIOError(f"{path} is not a model checkpoint")
    lines = blob[:split].decode("ascii").splitlines()
    payload = blob[split + len(marker):]

    section = None
    config_items, tensor_specs = {}, []
    for line in lines[1:]:
        if line in ("[config]", "[tensors]"):
            section = line
            continue
        if section == "[config]":
            key, _, value = line.partition("=")
            config_items[key] = value
        elif section == "[tensors]":
            name, _, dims = line.partition(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            tensor_specs.append((name, shape))

    config = config_from_items(config_items)
    model = build_model(config, np.random.default_rng(0))
    targets = dict(_checkpoint_entries(model))
    if [n for n, _ in tensor_specs] != list(targets):
        raise DataIOError(f"{path} tensor listing does not match the configured model")

    sizes = [int(np.prod(shape, dtype=np.int64)) if shape else 1 for _, shape in tensor_specs]
    if 4 * sum(sizes) != len(payload):
        raise DataIOError(
            f"{path}: payload holds {len(payload)} bytes, header promises {4 * sum(sizes)}")
    offset = 0
    for (name, shape), n in zip(tensor_specs, sizes):
        target = targets[name]
        if tuple(target.shape) != shape:
            raise DataIOError(
                f"{path}: tensor {name} has shape {shape}, model expects {tuple(target.shape)}")
        chunk = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        target[...] = chunk.reshape(shape)
    return model
