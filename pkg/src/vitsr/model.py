"""ViT encoder-decoder with a PixelShuffle upsampling head.

Parameter names are dotted paths and form part of the checkpoint
contract. For a config with encoder depth E, decoder depth D and U
upsampling stages the full list is::

    encoder.patch_embed.proj.weight   (embed_dim, 3, patch, patch)
    encoder.patch_embed.proj.bias     (embed_dim,)
    encoder.pos_embed                 (1, grid*grid, embed_dim)
    encoder.{i}.norm1.weight / .bias                 i < E
    encoder.{i}.attn.qkv.weight / .bias
    encoder.{i}.attn.proj.weight / .bias
    encoder.{i}.norm2.weight / .bias
    encoder.{i}.mlp.fc1.weight / .bias
    encoder.{i}.mlp.fc2.weight / .bias
    decoder.{i}.<same block layout>                  i < D
    decoder.norm.weight / .bias
    head.{s}.conv.weight / .bias                     s < U
    head.final.weight / .bias
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import OrderedDict

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 768
    encoder_depth: int = 12
    decoder_depth: int = 8
    num_heads_encoder: int = 12
    num_heads_decoder: int = 16
    mlp_ratio: float = 4.0
    upsample_stages: int | None = None
    head_channels: tuple[int, ...] | None = None
    leaky_slope: float = 0.2
    residual_mode: str = "on"

    def __post_init__(self):
        if self.upsample_stages is None:
            object.__setattr__(self, "upsample_stages", _log2(self.patch_size))
        if self.head_channels is None:
            chans = tuple(self.embed_dim // 2 ** (s + 1) for s in range(self.upsample_stages))
            object.__setattr__(self, "head_channels", chans)
        else:
            object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if 2 ** self.upsample_stages != self.patch_size:
            raise ConfigError(f"{self.upsample_stages} doubling stages cannot undo "
                              f"patch_size {self.patch_size}")
        for heads in (self.num_heads_encoder, self.num_heads_decoder):
            if heads < 1 or self.embed_dim % heads:
                raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {heads} heads")
        if len(self.head_channels) != self.upsample_stages or min(self.head_channels) < 1:
            raise ConfigError(f"head_channels {self.head_channels} must list one positive "
                              f"width per upsampling stage ({self.upsample_stages})")
        if self.residual_mode not in ("on", "off"):
            raise ConfigError(f"residual_mode must be 'on' or 'off', got {self.residual_mode!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def mlp_hidden(self):
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})

    def architecture_diff(self, other):
        """Names of fields that change the parameter set (residual_mode excluded)."""
        return [f.name for f in dataclasses.fields(self)
                if f.name != "residual_mode" and getattr(self, f.name) != getattr(other, f.name)]


def _log2(n):
    k = int(round(math.log2(n))) if n > 0 else -1
    if k < 0 or 2 ** k != n:
        raise ConfigError(f"patch_size {n} is not a power of two")
    return k


def _block_shapes(prefix, d, hidden):
    return [
        (f"{prefix}.norm1.weight", (d,)), (f"{prefix}.norm1.bias", (d,)),
        (f"{prefix}.attn.qkv.weight", (3 * d, d)), (f"{prefix}.attn.qkv.bias", (3 * d,)),
        (f"{prefix}.attn.proj.weight", (d, d)), (f"{prefix}.attn.proj.bias", (d,)),
        (f"{prefix}.norm2.weight", (d,)), (f"{prefix}.norm2.bias", (d,)),
        (f"{prefix}.mlp.fc1.weight", (hidden, d)), (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (d, hidden)), (f"{prefix}.mlp.fc2.bias", (d,)),
    ]


def param_shapes(cfg):
    """Ordered mapping of parameter name -> shape; no allocation."""
    d, p, hidden = cfg.embed_dim, cfg.patch_size, cfg.mlp_hidden
    shapes = [
        ("encoder.patch_embed.proj.weight", (d, 3, p, p)),
        ("encoder.patch_embed.proj.bias", (d,)),
        ("encoder.pos_embed", (1, cfg.grid ** 2, d)),
    ]
    for i in range(cfg.encoder_depth):
        shapes += _block_shapes(f"encoder.{i}", d, hidden)
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"decoder.{i}", d, hidden)
    shapes += [("decoder.norm.weight", (d,)), ("decoder.norm.bias", (d,))]
    c_in = d
    for s, c_out in enumerate(cfg.head_channels):
        shapes += [(f"head.{s}.conv.weight", (4 * c_out, c_in, 3, 3)),
                   (f"head.{s}.conv.bias", (4 * c_out,))]
        c_in = c_out
    shapes += [("head.final.weight", (3, c_in, 3, 3)), ("head.final.bias", (3,))]
    return OrderedDict(shapes)


def count_params(cfg):
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def _trunc_normal(rng, shape, std=INIT_STD):
    # resample draws outside two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg, seed=0):
    """Fresh parameters: truncated normal for projections and positional
    embedding, ones/zeros for norms, zeros for biases and the final conv."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head.final") or name.endswith(".bias"):
            data = np.zeros(shape)
        elif ".norm" in name and name.endswith(".weight"):
            data = np.ones(shape)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = dc.Tensor(data, requires_grad=True)
    return params


# forward pieces; each takes the parameter dict explicitly

def patch_embed(params, img, cfg):
    """(B, 3, S, S) -> tokens (B, grid*grid, embed_dim) with positional embedding."""
    img = dc.as_tensor(img)
    s, p, g = cfg.image_size, cfg.patch_size, cfg.grid
    if img.ndim != 4 or img.shape[1:] != (3, s, s):
        raise DimensionError(f"expected input (B, 3, {s}, {s}), got {img.shape}")
    b = img.shape[0]
    patches = dc.reshape(img, (b, 3, g, p, g, p))
    patches = dc.reshape(dc.transpose(patches, (0, 2, 4, 1, 3, 5)), (b, g * g, 3 * p * p))
    w = dc.reshape(params["encoder.patch_embed.proj.weight"], (cfg.embed_dim, 3 * p * p))
    tokens = dc.linear(patches, w, params["encoder.patch_embed.proj.bias"])
    return tokens + params["encoder.pos_embed"]


def transformer_block(params, prefix, x, heads):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""
    P = params
    h = dc.layer_norm(x, P[f"{prefix}.norm1.weight"], P[f"{prefix}.norm1.bias"], LN_EPS)
    x = x + dc.multi_head_attention(h, heads, P[f"{prefix}.attn.qkv.weight"],
                                    P[f"{prefix}.attn.qkv.bias"],
                                    P[f"{prefix}.attn.proj.weight"],
                                    P[f"{prefix}.attn.proj.bias"])
    h = dc.layer_norm(x, P[f"{prefix}.norm2.weight"], P[f"{prefix}.norm2.bias"], LN_EPS)
    h = dc.gelu(dc.linear(h, P[f"{prefix}.mlp.fc1.weight"], P[f"{prefix}.mlp.fc1.bias"]))
    return x + dc.linear(h, P[f"{prefix}.mlp.fc2.weight"], P[f"{prefix}.mlp.fc2.bias"])


def encoder_forward(params, tokens, cfg):
    for i in range(cfg.encoder_depth):
        tokens = transformer_block(params, f"encoder.{i}", tokens, cfg.num_heads_encoder)
    return tokens


def decoder_forward(params, tokens, cfg):
    for i in range(cfg.decoder_depth):
        tokens = transformer_block(params, f"decoder.{i}", tokens, cfg.num_heads_decoder)
    return dc.layer_norm(tokens, params["decoder.norm.weight"], params["decoder.norm.bias"],
                         LN_EPS)


def upsample_head(params, tokens, cfg):
    """Tokens -> (B, D, g, g) map -> U x [conv3x3, pixel_shuffle(2), leaky_relu] -> conv3x3 to RGB."""
    b, n, d = tokens.shape
    g = cfg.grid
    if n != g * g or d != cfg.embed_dim:
        raise DimensionError(f"expected tokens (B, {g * g}, {cfg.embed_dim}), got {tokens.shape}")
    x = dc.reshape(dc.transpose(tokens, (0, 2, 1)), (b, d, g, g))
    for s in range(cfg.upsample_stages):
        x = dc.conv2d(x, params[f"head.{s}.conv.weight"], params[f"head.{s}.conv.bias"], 1)
        x = dc.leaky_relu(dc.pixel_shuffle(x, 2), cfg.leaky_slope)
    return dc.conv2d(x, params["head.final.weight"], params["head.final.bias"], 1)


def model_forward(params, img, cfg):
    """Full network. With residual_mode 'on' the head output is added to the input."""
    img = dc.as_tensor(img)
    tokens = decoder_forward(params, encoder_forward(params, patch_embed(params, img, cfg), cfg),
                             cfg)
    out = upsample_head(params, tokens, cfg)
    return img + out if cfg.residual_mode == "on" else out


class ViTSR:
    """Holds a config and its named parameters."""

    def __init__(self, cfg, seed=0, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, img):
        return model_forward(self.params, img, self.cfg)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def with_residual(self, mode):
        """A view sharing parameters but with a different residual mode."""
        return ViTSR(dataclasses.replace(self.cfg, residual_mode=mode), params=self.params)

    def state(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state(self, state):
        for k, arr in state.items():
            self.params[k].data = np.array(arr, dtype=self.params[k].data.dtype)

    def predict(self, batch):
        """Inference on a (B, 3, S, S) array, clamped to [0, 1]."""
        with dc.no_grad():
            out = self(dc.Tensor(batch)).data
        return np.clip(out, 0.0, 1.0)


def load_external_encoder(model, weights_file):
    """Copy every encoder-prefixed tensor whose name and shape match.

    A positional embedding on a different grid is resampled bicubically
    to the model's grid. Returns the number of tensors applied; raises if
    nothing matched.
    """
    from .checkpoint import read_checkpoint
    from .imageops import resample

    _, tensors = read_checkpoint(weights_file)
    applied, mismatched = 0, []
    for name, arr in tensors.items():
        if not name.startswith("encoder.") or name not in model.params:
            continue
        target = model.params[name]
        if name == "encoder.pos_embed" and arr.shape != target.shape \
                and arr.ndim == 3 and arr.shape[-1] == target.shape[-1]:
            arr = _resample_pos_embed(arr, model.cfg.grid, resample)
        if arr.shape != target.shape:
            mismatched.append(f"{name}: file {arr.shape} vs model {target.shape}")
            continue
        target.data = np.array(arr, dtype=target.data.dtype)
        applied += 1
    for line in mismatched:
        log.warning("shape mismatch, not loaded: %s", line)
    if applied == 0:
        raise ConfigError(f"no encoder tensors matched in {weights_file} "
                          f"(0 matches, {len(mismatched)} shape mismatches)")
    log.info("loaded %d encoder tensors from %s", applied, weights_file)
    return applied


def _resample_pos_embed(arr, grid, resample):
    n, d = arr.shape[1:]
    side = math.isqrt(n)
    if side * side != n:
        side = math.isqrt(n - 1)
        if side * side != n - 1:
            return arr
        arr = arr[:, 1:]  # drop a class-token slot
    grid_in = arr.reshape(side, side, d)
    return resample(grid_in, grid, grid).reshape(1, grid * grid, d)
