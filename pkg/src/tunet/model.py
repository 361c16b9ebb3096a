"""TUnet: a transformer over raw image patches feeding a Unet decoder.

Data flow for one image ``x`` of shape (C, H, W)::

    z0   = patchify(conv1x1(x)) + pos_embed             (S, d)
    zm   = transformer_block^m(z0)                      (S, d)
    tmap = tokens_to_map(zm)                            (E_c*S, n, n)
    skips = unet_encoder(x)                             [(w_i, H/2^i, W/2^i)]
    prob = sigmoid(decoder(tmap, skips))                (1, H, W)

The auxiliary CNN encoder never feeds the decoder's main path; it only
contributes skip feature maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

LN_EPS = 1e-5


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults reproduce the 512x512, n=16 setup.

    ``embed_channels`` defaults to ``channels`` so the token dimension is
    ``channels * patch_size**2``. Width lists default to 16, 32, 64, ... with
    one entry per factor of two between ``height`` and ``patch_size``; the
    decoder list runs from the lowest resolution up and mirrors the encoder.
    ``decoder_convs`` is 2 for the deep backbone and 1 for the shallow one.
    """

    height: int = 512
    width: int = 512
    channels: int = 1
    patch_size: int = 16
    num_heads: int = 8
    num_layers: int = 6
    mlp_ratio: float = 4
    embed_channels: int | None = None
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None
    decoder_convs: int = 2
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("height", "width", "channels", "patch_size", "num_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.num_layers, int) or self.num_layers < 0:
            raise ConfigError(f"num_layers must be a non-negative integer, got {self.num_layers!r}")
        if self.height != self.width:
            raise ConfigError(f"only square images are supported, got {self.height}x{self.width}")
        n = self.patch_size
        if self.height % n:
            raise ConfigError(f"image size {self.height} is not divisible by patch size {n}")
        ratio = self.height // n
        if not _is_pow2(ratio):
            raise ConfigError(f"image size / patch size = {ratio} must be a power of two")
        stages = int(math.log2(ratio))

        if self.embed_channels is None:
            object.__setattr__(self, "embed_channels", self.channels)
        if self.embed_channels < 1:
            raise ConfigError(f"embed_channels must be positive, got {self.embed_channels}")
        if self.encoder_widths is None:
            object.__setattr__(self, "encoder_widths", tuple(16 * 2**i for i in range(stages)))
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        if self.decoder_widths is None:
            object.__setattr__(self, "decoder_widths", tuple(reversed(self.encoder_widths)))
        object.__setattr__(self, "decoder_widths", tuple(int(v) for v in self.decoder_widths))
        for name in ("encoder_widths", "decoder_widths"):
            widths = getattr(self, name)
            if len(widths) != stages:
                raise ConfigError(
                    f"{name} needs {stages} entries (log2({self.height}/{n})), got {len(widths)}"
                )
            if any(v < 1 for v in widths):
                raise ConfigError(f"{name} entries must be positive, got {widths}")
        if self.decoder_convs not in (1, 2):
            raise ConfigError(f"decoder_convs must be 1 or 2, got {self.decoder_convs}")
        if self.token_dim % self.num_heads:
            raise ConfigError(
                f"token dim {self.token_dim} is not divisible by {self.num_heads} heads"
            )
        if self.mlp_ratio <= 0 or abs(self.mlp_ratio * self.token_dim - self.mlp_hidden) > 1e-9:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} must give an integral hidden width")

    @property
    def seq_len(self) -> int:
        return (self.height * self.width) // (self.patch_size**2)

    @property
    def token_dim(self) -> int:
        return self.embed_channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.token_dim))

    @property
    def num_stages(self) -> int:
        return len(self.encoder_widths)

    @property
    def map_channels(self) -> int:
        """Channel count of the reshaped transformer output."""
        return self.embed_channels * self.seq_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        for key in ("encoder_widths", "decoder_widths"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def architecture(self) -> dict:
        """Everything that determines parameter shapes and the forward map."""
        d = self.to_dict()
        d.pop("seed")
        return d


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable tensor, in a fixed order."""
    c, ec, d, hid = config.channels, config.embed_channels, config.token_dim, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (ec, c, 1, 1),
        "embed.b": (ec,),
        "pos_embed": (config.seq_len, d),
    }
    for layer in range(config.num_layers):
        p = f"blocks.{layer}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (d, d)
            shapes[p + f"attn.b{proj}"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w1"] = (d, hid)
        shapes[p + "mlp.b1"] = (hid,)
        shapes[p + "mlp.w2"] = (hid, d)
        shapes[p + "mlp.b2"] = (d,)

    in_ch = c
    for i, width in enumerate(config.encoder_widths):
        shapes[f"encoder.{i}.w"] = (width, in_ch, 3, 3)
        shapes[f"encoder.{i}.b"] = (width,)
        in_ch = width

    prev = config.map_channels
    k = config.num_stages
    for j, width in enumerate(config.decoder_widths):
        skip = config.encoder_widths[k - 1 - j]
        shapes[f"decoder.{j}.conv1.w"] = (width, prev + skip, 3, 3)
        shapes[f"decoder.{j}.conv1.b"] = (width,)
        if config.decoder_convs == 2:
            shapes[f"decoder.{j}.conv2.w"] = (width, width, 3, 3)
            shapes[f"decoder.{j}.conv2.b"] = (width,)
        prev = width
    shapes["head.w"] = (1, prev, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


@dataclass
class TUnetParams:
    """Named collection of all learnable tensors of one model."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> TUnetParams:
        return TUnetParams(
            {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.items()}
        )

    def copy(self) -> TUnetParams:
        return TUnetParams(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.items()}
        )

    def block(self, layer: int) -> dict[str, Tensor]:
        """Parameters of one transformer layer keyed without the layer prefix."""
        prefix = f"blocks.{layer}."
        return {k[len(prefix) :]: t for k, t in self.items() if k.startswith(prefix)}


def init_params(config: ModelConfig, seed: int | None = None, dtype=np.float64) -> TUnetParams:
    """Deterministic initialisation.

    Weights are uniform in ``±sqrt(1/fan_in)``, the positional embedding is
    normal(0, 0.02), layer-norm gains are 1 and every bias/offset is 0.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos_embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return TUnetParams(tensors)


# ---------------------------------------------------------------------------
# sequence <-> image layout


def patchify(image: Tensor, n: int) -> Tensor:
    """Split (C, H, W) into S = HW/n^2 row-major tokens of length C*n^2.

    Within a token values are channel-major, then row-major pixels.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim != 3:
        raise ConfigError(f"patchify expects (C,H,W), got {image.shape}")
    c, h, w = image.shape
    if h % n or w % n:
        raise ConfigError(f"image {h}x{w} is not divisible into {n}x{n} patches")
    gh, gw = h // n, w // n
    x = ad.reshape(image, (c, gh, n, gw, n))
    x = ad.permute(x, (1, 3, 0, 2, 4))
    return ad.reshape(x, (gh * gw, c * n * n))


def unpatchify(tokens: Tensor, channels: int, height: int, width: int, n: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    gh, gw = height // n, width // n
    if tokens.shape != (gh * gw, channels * n * n):
        raise ConfigError(
            f"tokens {tokens.shape} do not tile a {channels}x{height}x{width} image with n={n}"
        )
    x = ad.reshape(tokens, (gh, gw, channels, n, n))
    x = ad.permute(x, (2, 0, 3, 1, 4))
    return ad.reshape(x, (channels, height, width))


def tokens_to_map(z: Tensor, embed_channels: int, n: int) -> Tensor:
    """Reshape (S, E_c*n^2) tokens into an (E_c*S, n, n) feature map.

    Token ``s``, channel ``c``, pixel ``(i, j)`` lands at output channel
    ``s*E_c + c``, pixel ``(i, j)``.
    """
    s, d = z.shape
    if d != embed_channels * n * n:
        raise ConfigError(f"token dim {d} != embed_channels*n^2 = {embed_channels * n * n}")
    return ad.reshape(z, (s * embed_channels, n, n))


def map_to_tokens(fmap: Tensor, embed_channels: int, n: int) -> Tensor:
    """Inverse of :func:`tokens_to_map`."""
    ch = fmap.shape[0]
    if ch % embed_channels or fmap.shape[1:] != (n, n):
        raise ConfigError(f"feature map {fmap.shape} is not a token map for E_c={embed_channels}, n={n}")
    return ad.reshape(fmap, (ch // embed_channels, embed_channels * n * n))


# ---------------------------------------------------------------------------
# transformer


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def embed(image: Tensor, params: TUnetParams, config: ModelConfig) -> Tensor:
    """1x1 conv over the whole image, patchify, add the positional embedding."""
    _check_image(image, config)
    x = ad.conv2d(image, params["embed.w"], params["embed.b"])
    return ad.add(patchify(x, config.patch_size), params["pos_embed"])


def mha(
    x: Tensor, p: dict[str, Tensor], num_heads: int, return_attention: bool = False
):
    """Unmasked multi-head self-attention over (S, d) tokens.

    ``p`` holds ``attn.w{q,k,v,o}`` / ``attn.b{q,k,v,o}``. With
    ``return_attention`` the (h, S, S) attention weights are returned too.
    """
    s, d = x.shape
    if d % num_heads:
        raise ConfigError(f"token dim {d} is not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return ad.permute(ad.reshape(t, (s, num_heads, dh)), (1, 0, 2))

    q = heads(_linear(x, p["attn.wq"], p["attn.bq"]))
    k = heads(_linear(x, p["attn.wk"], p["attn.bk"]))
    v = heads(_linear(x, p["attn.wv"], p["attn.bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / math.sqrt(dh))
    attn = ad.softmax_lastdim(scores)
    ctx = ad.reshape(ad.permute(ad.matmul(attn, v), (1, 0, 2)), (s, d))
    out = _linear(ctx, p["attn.wo"], p["attn.bo"])
    return (out, attn) if return_attention else out


def mlp(x: Tensor, p: dict[str, Tensor], alpha: float = 1.0) -> Tensor:
    hidden = ad.elu(_linear(x, p["mlp.w1"], p["mlp.b1"]), alpha)
    return _linear(hidden, p["mlp.w2"], p["mlp.b2"])


def transformer_block(
    z: Tensor, p: dict[str, Tensor], num_heads: int, alpha: float = 1.0
) -> Tensor:
    """Pre-LN block: z' = MHA(LN(z)) + z, then MLP(LN(z')) + z'."""
    z = ad.add(mha(ad.layernorm(z, p["ln1.gamma"], p["ln1.beta"], LN_EPS), p, num_heads), z)
    return ad.add(mlp(ad.layernorm(z, p["ln2.gamma"], p["ln2.beta"], LN_EPS), p, alpha), z)


def transformer(z0: Tensor, params: TUnetParams, config: ModelConfig) -> Tensor:
    z = z0
    for layer in range(config.num_layers):
        z = transformer_block(z, params.block(layer), config.num_heads, config.alpha)
    return z


# ---------------------------------------------------------------------------
# CNN encoder / decoder


def unet_encoder(image: Tensor, params: TUnetParams, config: ModelConfig) -> list[Tensor]:
    """Per stage conv3x3 -> ELU (recorded as skip) -> maxpool.

    Skips come out at resolutions H, H/2, ..., 2n. The pooled output of the
    last stage would only feed a deeper stage, so it is not computed.
    """
    _check_image(image, config)
    skips: list[Tensor] = []
    x = image
    for i in range(config.num_stages):
        if i:
            x = ad.maxpool2d(x)
        x = ad.elu(ad.conv2d(x, params[f"encoder.{i}.w"], params[f"encoder.{i}.b"]), config.alpha)
        skips.append(x)
    return skips


def decoder(
    tmap: Tensor, skips: Sequence[Tensor], params: TUnetParams, config: ModelConfig
) -> Tensor:
    """Upsample -> concat skip -> (conv3x3 -> ELU) x decoder_convs per stage, then 1x1 head."""
    k = config.num_stages
    if len(skips) != k:
        raise ConfigError(f"decoder expects {k} skips, got {len(skips)}")
    x = tmap
    for j in range(k):
        x = ad.bilinear_upsample2x(x)
        skip = skips[k - 1 - j]
        if skip.shape[1:] != x.shape[1:]:
            raise DimensionError(
                f"decoder stage {j}: upsampled map {x.shape} does not match skip {skip.shape}"
            )
        x = ad.concat_channels([x, skip])
        x = ad.elu(ad.conv2d(x, params[f"decoder.{j}.conv1.w"], params[f"decoder.{j}.conv1.b"]), config.alpha)
        if config.decoder_convs == 2:
            x = ad.elu(
                ad.conv2d(x, params[f"decoder.{j}.conv2.w"], params[f"decoder.{j}.conv2.b"]),
                config.alpha,
            )
    return ad.conv2d(x, params["head.w"], params["head.b"])


def _check_image(image: Tensor, config: ModelConfig) -> None:
    expected = (config.channels, config.height, config.width)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} does not match config {expected}")


def logits(image, params: TUnetParams, config: ModelConfig) -> Tensor:
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=params.dtype))
    elif image.dtype != params.dtype:
        image = Tensor(image.data.astype(params.dtype))
    z = transformer(embed(image, params, config), params, config)
    tmap = tokens_to_map(z, config.embed_channels, config.patch_size)
    return decoder(tmap, unet_encoder(image, params, config), params, config)


def forward(image, params: TUnetParams, config: ModelConfig) -> Tensor:
    """Probability map of shape (1, H, W)."""
    return ad.sigmoid(logits(image, params, config))
