"""Trainable image and caption branches.

The image branch is a small strided CNN followed by a linear projection to
the joint dimension L; it turns an H×W×C image into an R_rows×C_cols×L
:class:`FeatureGrid`. The caption branch embeds token ids and runs a
single-layer gated recurrent cell; it turns a caption into an N_max×L
:class:`TokenMatrix` whose valid rows form a prefix.

The recurrent cell carries a hidden state h and emits, per input step, its
tanh candidate::

    r = σ(x·W_r + h·U_r + b_r)
    z = σ(x·W_z + h·U_z + b_z)
    s = tanh(x·W_n + (r∘h)·U_n + b_n)      # emitted token row
    h ← (1 − z)∘s + z∘h

so the first row of a caption is tanh(x·W_n + b_n) whatever the recurrent
weights are.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import tensor as T
from .errors import (
    CaptionLengthError,
    ConfigurationError,
    EmptyCaptionError,
    ShapeError,
    SpanError,
    VocabularyError,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

Span = Tuple[int, int]

INIT_SCHEMES = ("lecun_uniform", "he_uniform")


class ParseMode(str, Enum):
    """How multi-word phrases are turned into caption rows."""

    WORD = "word"
    PHRASE = "phrase"


@dataclass(frozen=True)
class ConvSpec:
    """One strided convolution of the image branch (no padding)."""

    out_channels: int
    kernel: int
    stride: int


DEFAULT_CONV_LAYERS: Tuple[ConvSpec, ...] = (
    ConvSpec(out_channels=16, kernel=4, stride=2),
    ConvSpec(out_channels=32, kernel=3, stride=2),
)


@dataclass(frozen=True)
class EncoderDims:
    """Sizes shared by both branches.

    The default stride schedule maps a 32×32 image to a 7×7 grid
    (32 → 15 → 7).
    """

    image_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    conv_layers: Tuple[ConvSpec, ...] = DEFAULT_CONV_LAYERS
    embed_dim: int = 32
    word_dim: int = 16
    vocab_size: int = 40
    n_max: int = 12

    def spatial_schedule(self) -> List[Tuple[int, int]]:
        """Spatial size after the input and after every convolution."""
        height, width = self.image_size
        sizes = [(height, width)]
        for index, layer in enumerate(self.conv_layers):
            height = _conv_output(height, layer, index, "height")
            width = _conv_output(width, layer, index, "width")
            sizes.append((height, width))
        return sizes

    def grid_shape(self) -> Tuple[int, int]:
        """(R_rows, C_cols) produced by the stride schedule."""
        return self.spatial_schedule()[-1]

    def validate(self) -> None:
        """Raise ConfigurationError unless every size is usable."""
        for name in ("in_channels", "embed_dim", "word_dim", "n_max"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be at least 2")
        for layer in self.conv_layers:
            if min(layer.out_channels, layer.kernel, layer.stride) < 1:
                raise ConfigurationError(f"Invalid convolution {layer}")
        self.grid_shape()

    def to_meta(self) -> Dict[str, npt.NDArray[np.float64]]:
        """Encode the sizes as named tensors for checkpoints."""
        meta: Dict[str, npt.NDArray[np.float64]] = {
            "meta.image_size": np.asarray(self.image_size, dtype=float),
            "meta.in_channels": np.asarray(float(self.in_channels)),
            "meta.embed_dim": np.asarray(float(self.embed_dim)),
            "meta.word_dim": np.asarray(float(self.word_dim)),
            "meta.vocab_size": np.asarray(float(self.vocab_size)),
            "meta.n_max": np.asarray(float(self.n_max)),
            "meta.conv_layers": np.asarray(
                [
                    [layer.out_channels, layer.kernel, layer.stride]
                    for layer in self.conv_layers
                ],
                dtype=float,
            ).reshape(-1, 3),
        }
        return meta

    @classmethod
    def from_meta(
        cls, meta: Dict[str, npt.NDArray[np.float64]]
    ) -> "EncoderDims":
        """Inverse of :meth:`to_meta`."""
        try:
            conv_rows = meta["meta.conv_layers"].reshape(-1, 3)
            height, width = (int(v) for v in meta["meta.image_size"])
            return cls(
                image_size=(height, width),
                in_channels=int(meta["meta.in_channels"]),
                conv_layers=tuple(
                    ConvSpec(int(row[0]), int(row[1]), int(row[2]))
                    for row in conv_rows
                ),
                embed_dim=int(meta["meta.embed_dim"]),
                word_dim=int(meta["meta.word_dim"]),
                vocab_size=int(meta["meta.vocab_size"]),
                n_max=int(meta["meta.n_max"]),
            )
        except KeyError as exc:
            raise ConfigurationError(f"Missing size entry {exc}") from exc


def _conv_output(size: int, layer: ConvSpec, index: int, axis: str) -> int:
    if size < layer.kernel or (size - layer.kernel) % layer.stride:
        raise ConfigurationError(
            f"Convolution {index} (kernel {layer.kernel}, stride"
            f" {layer.stride}) does not tile an input {axis} of {size}"
        )
    return (size - layer.kernel) // layer.stride + 1


@dataclass
class FeatureGrid:
    """Region vectors a_{r,c} laid out on the spatial grid."""

    rows: int
    cols: int
    embed_dim: int
    values: Tensor
    source_image_size: Tuple[int, int]

    @property
    def regions(self) -> int:
        """R = rows · cols."""
        return self.rows * self.cols


@dataclass
class TokenMatrix:
    """Caption rows s_d padded to N_max, valid rows first."""

    max_len: int
    embed_dim: int
    values: Tensor
    valid_mask: Tensor
    n_valid: int
    groups: List[List[int]] = field(default_factory=list)


@dataclass
class ConvLayer:
    """Weights of one convolution; weight rows follow (kh, kw, c) order."""

    weight: Tensor
    bias: Tensor
    kernel: int
    stride: int


@dataclass
class ImageEncoderParams:
    """Convolution stack plus projection to the joint dimension."""

    image_size: Tuple[int, int]
    in_channels: int
    layers: List[ConvLayer]
    projection_weight: Tensor
    projection_bias: Tensor
    grid_shape: Tuple[int, int]

    def __post_init__(self) -> None:
        dims = EncoderDims(
            image_size=self.image_size,
            in_channels=self.in_channels,
            conv_layers=tuple(
                ConvSpec(layer.weight.shape[1], layer.kernel, layer.stride)
                for layer in self.layers
            ),
        )
        if dims.grid_shape() != self.grid_shape:
            raise ConfigurationError(
                f"Stride schedule yields {dims.grid_shape()}, declared"
                f" grid is {self.grid_shape}"
            )

    @property
    def embed_dim(self) -> int:
        """L."""
        return self.projection_weight.shape[1]

    def named_parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors keyed by stable names."""
        named: Dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            named[f"image.conv{index}.weight"] = layer.weight
            named[f"image.conv{index}.bias"] = layer.bias
        named["image.proj.weight"] = self.projection_weight
        named["image.proj.bias"] = self.projection_bias
        return named


@dataclass
class TextEncoderParams:
    """Embedding table and gated recurrent cell."""

    embedding: Tensor
    w_r: Tensor
    w_z: Tensor
    w_n: Tensor
    u_r: Tensor
    u_z: Tensor
    u_n: Tensor
    b_r: Tensor
    b_z: Tensor
    b_n: Tensor
    n_max: int

    @property
    def vocab_size(self) -> int:
        """V."""
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        """L."""
        return self.w_n.shape[1]

    def named_parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors keyed by stable names."""
        names = ("w_r", "w_z", "w_n", "u_r", "u_z", "u_n", "b_r", "b_z", "b_n")
        named = {"text.embedding": self.embedding}
        named.update({f"text.{name}": getattr(self, name) for name in names})
        return named


@dataclass
class ColocModel:
    """Both branches plus the sizes they were built for."""

    dims: EncoderDims
    image: ImageEncoderParams
    text: TextEncoderParams

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every trainable tensor, image branch first."""
        named = self.image.named_parameters()
        named.update(self.text.named_parameters())
        return named

    def to_arrays(self) -> Dict[str, npt.NDArray[np.float64]]:
        """Sizes and parameter values as plain arrays."""
        arrays = self.dims.to_meta()
        arrays.update(
            {name: t.data for name, t in self.named_parameters().items()}
        )
        return arrays

    def copy(self) -> "ColocModel":
        """Deep copy with fresh tensors."""
        return ColocModel.from_arrays(self.to_arrays())

    @classmethod
    def from_arrays(
        cls, arrays: Dict[str, npt.NDArray[np.float64]]
    ) -> "ColocModel":
        """Rebuild a model from :meth:`to_arrays` output."""
        dims = EncoderDims.from_meta(arrays)

        def param(name: str) -> Tensor:
            if name not in arrays:
                raise ConfigurationError(f"Missing parameter {name}")
            return Tensor(arrays[name], requires_grad=True)

        layers = [
            ConvLayer(
                weight=param(f"image.conv{index}.weight"),
                bias=param(f"image.conv{index}.bias"),
                kernel=spec.kernel,
                stride=spec.stride,
            )
            for index, spec in enumerate(dims.conv_layers)
        ]
        image = ImageEncoderParams(
            image_size=dims.image_size,
            in_channels=dims.in_channels,
            layers=layers,
            projection_weight=param("image.proj.weight"),
            projection_bias=param("image.proj.bias"),
            grid_shape=dims.grid_shape(),
        )
        text = TextEncoderParams(
            embedding=param("text.embedding"),
            w_r=param("text.w_r"),
            w_z=param("text.w_z"),
            w_n=param("text.w_n"),
            u_r=param("text.u_r"),
            u_z=param("text.u_z"),
            u_n=param("text.u_n"),
            b_r=param("text.b_r"),
            b_z=param("text.b_z"),
            b_n=param("text.b_n"),
            n_max=dims.n_max,
        )
        model = cls(dims=dims, image=image, text=text)
        model.check_shapes()
        return model

    def check_shapes(self) -> None:
        """Raise ShapeError if a parameter disagrees with the sizes."""
        expected = _parameter_shapes(self.dims)
        for name, tensor in self.named_parameters().items():
            if tensor.shape != expected[name]:
                raise ShapeError(name, tensor.shape, expected[name])


def _parameter_shapes(dims: EncoderDims) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    channels = dims.in_channels
    for index, spec in enumerate(dims.conv_layers):
        fan_in = spec.kernel * spec.kernel * channels
        shapes[f"image.conv{index}.weight"] = (fan_in, spec.out_channels)
        shapes[f"image.conv{index}.bias"] = (1, spec.out_channels)
        channels = spec.out_channels
    shapes["image.proj.weight"] = (channels, dims.embed_dim)
    shapes["image.proj.bias"] = (1, dims.embed_dim)
    shapes["text.embedding"] = (dims.vocab_size, dims.word_dim)
    for gate in ("r", "z", "n"):
        shapes[f"text.w_{gate}"] = (dims.word_dim, dims.embed_dim)
        shapes[f"text.u_{gate}"] = (dims.embed_dim, dims.embed_dim)
        shapes[f"text.b_{gate}"] = (1, dims.embed_dim)
    return shapes


def target_std(scheme: str, fan_in: int) -> float:
    """Standard deviation an init scheme aims for at a given fan-in."""
    if scheme == "lecun_uniform":
        return float(1.0 / np.sqrt(fan_in))
    if scheme == "he_uniform":
        return float(np.sqrt(2.0 / fan_in))
    raise ConfigurationError(
        f"Unknown init scheme: {scheme}. Supported: {INIT_SCHEMES}"
    )


def init_params(
    seed: int,
    scheme: str = "lecun_uniform",
    dims: Optional[EncoderDims] = None,
) -> Tuple[ImageEncoderParams, TextEncoderParams]:
    """Draw fresh parameters for both branches.

    Weights are uniform with the scheme's fan-in-scaled standard deviation
    (the embedding table counts as fan-in 1); biases start at zero.
    """
    model = init_model(seed, scheme, dims)
    return model.image, model.text


def init_model(
    seed: int,
    scheme: str = "lecun_uniform",
    dims: Optional[EncoderDims] = None,
) -> ColocModel:
    """Like :func:`init_params` but returns the bundled model."""
    dims = dims or EncoderDims()
    dims.validate()
    rng = np.random.default_rng(seed)
    arrays = dims.to_meta()
    for name, shape in _parameter_shapes(dims).items():
        if name.endswith("bias") or name.split(".")[-1].startswith("b_"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = 1 if name == "text.embedding" else shape[0]
        bound = np.sqrt(3.0) * target_std(scheme, fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    logger.debug(f"Initialised parameters with seed={seed}, {scheme}")
    return ColocModel.from_arrays(arrays)


@lru_cache(maxsize=32)
def _patch_index(
    height: int, width: int, channels: int, kernel: int, stride: int
) -> npt.NDArray[np.int64]:
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    ky, kx, c = np.meshgrid(
        np.arange(kernel), np.arange(kernel), np.arange(channels),
        indexing="ij",
    )
    offsets = ((ky * width + kx) * channels + c).reshape(-1)
    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    starts = ((oy * stride * width + ox * stride) * channels).reshape(-1, 1)
    index = starts + offsets[None, :]
    index.setflags(write=False)
    return index


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + T.tile_rows(bias, x.shape[0])


def encode_image(
    img: Union[Tensor, npt.ArrayLike], params: ImageEncoderParams
) -> FeatureGrid:
    """Run the image branch on one H×W×C image."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    height, width = params.image_size
    expected = (height, width, params.in_channels)
    if x.shape != expected:
        raise ShapeError("encode_image", x.shape, expected)

    channels = params.in_channels
    for layer in params.layers:
        index = _patch_index(
            height, width, channels, layer.kernel, layer.stride
        )
        height = (height - layer.kernel) // layer.stride + 1
        width = (width - layer.kernel) // layer.stride + 1
        channels = layer.weight.shape[1]
        patches = T.gather(x, index)
        x = T.relu(_affine(patches, layer.weight, layer.bias))
        x = T.reshape(x, (height, width, channels))

    regions = T.reshape(x, (height * width, channels))
    projected = _affine(
        regions, params.projection_weight, params.projection_bias
    )
    return FeatureGrid(
        rows=height,
        cols=width,
        embed_dim=params.embed_dim,
        values=T.reshape(projected, (height, width, params.embed_dim)),
        source_image_size=params.image_size,
    )


def token_groups(
    length: int, spans: Sequence[Span], mode: ParseMode
) -> List[List[int]]:
    """Token positions feeding each recurrent step.

    Word mode gives one group per token. Phrase mode merges each span
    into a single group and keeps uncovered tokens as singletons, in
    caption order.
    """
    if ParseMode(mode) is ParseMode.WORD:
        return [[i] for i in range(length)]

    ordered = sorted((int(s), int(e)) for s, e in spans)
    previous_end = 0
    for start, end in ordered:
        if not 0 <= start < end <= length:
            raise SpanError(
                f"Span [{start}, {end}) invalid for a caption of {length}"
            )
        if start < previous_end:
            raise SpanError(f"Span [{start}, {end}) overlaps another span")
        previous_end = end

    groups: List[List[int]] = []
    position = 0
    for start, end in ordered:
        groups.extend([i] for i in range(position, start))
        groups.append(list(range(start, end)))
        position = end
    groups.extend([i] for i in range(position, length))
    return groups


def encode_tokens(
    ids: Sequence[int],
    spans: Sequence[Span],
    mode: ParseMode,
    params: TextEncoderParams,
) -> TokenMatrix:
    """Run the caption branch on one caption."""
    token_ids = [int(i) for i in ids]
    if not token_ids:
        raise EmptyCaptionError("Caption has no tokens")
    if len(token_ids) > params.n_max:
        raise CaptionLengthError(
            f"Caption of {len(token_ids)} tokens exceeds N_max"
            f" = {params.n_max}"
        )
    bad = [i for i in token_ids if not 0 <= i < params.vocab_size]
    if bad:
        raise VocabularyError(
            f"Token ids {bad} outside vocabulary of {params.vocab_size}"
        )

    groups = token_groups(len(token_ids), spans, mode)
    hidden = Tensor(np.zeros((1, params.embed_dim)))
    rows: List[Tensor] = []
    for group in groups:
        embedded = T.take_rows(params.embedding, [token_ids[i] for i in group])
        step = T.reduce_sum(embedded, axis=0, keepdims=True)
        step = step * (1.0 / len(group))
        reset = T.sigmoid(step @ params.w_r + hidden @ params.u_r + params.b_r)
        update = T.sigmoid(
            step @ params.w_z + hidden @ params.u_z + params.b_z
        )
        candidate = T.tanh(
            step @ params.w_n + (reset * hidden) @ params.u_n + params.b_n
        )
        rows.append(candidate)
        hidden = (1.0 - update) * candidate + update * hidden

    n_valid = len(rows)
    padding = params.n_max - n_valid
    if padding:
        rows.append(Tensor(np.zeros((padding, params.embed_dim))))
    mask = np.zeros(params.n_max)
    mask[:n_valid] = 1.0
    return TokenMatrix(
        max_len=params.n_max,
        embed_dim=params.embed_dim,
        values=T.concat(rows),
        valid_mask=Tensor(mask),
        n_valid=n_valid,
        groups=groups,
    )
