"""Spectrogram transformer: patch embedding, encoder, reconstruction decoder, head.

Parameters live in a flat ``name -> Parameter`` dict so they can be saved,
audited and optimized by name.  Forward functions are plain functions of
``(inputs, config, params)``; :class:`MaskSpecModel` bundles them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .patching import MaskPlan, stack_plans
from .tensor import Parameter, Tensor

PATCH = 16
PATCH_DIM = PATCH * PATCH
INIT_STD = 0.02
LN_EPS = 1e-6


class ModelContractError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    heads: int = 12
    emb: int = 768
    ffn: int = 3072
    patch_dim: int = PATCH_DIM

    def __post_init__(self):
        if self.emb % self.heads:
            raise ModelContractError(f"embedding {self.emb} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 8
    heads: int = 16
    emb: int = 512
    ffn: int = 2048
    out_dim: int = PATCH_DIM

    def __post_init__(self):
        if self.emb % self.heads:
            raise ModelContractError(f"embedding {self.emb} not divisible by {self.heads} heads")


ENCODER_PRESETS = {
    "tiny": EncoderConfig(depth=12, heads=3, emb=192, ffn=768),
    "small": EncoderConfig(depth=12, heads=6, emb=384, ffn=1536),
    "base": EncoderConfig(depth=12, heads=12, emb=768, ffn=3072),
}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=lambda: ENCODER_PRESETS["base"])
    decoder: DecoderConfig | None = field(default_factory=DecoderConfig)
    patch: int = PATCH
    num_classes: int | None = None

    @classmethod
    def preset(cls, scale: str, decoder: DecoderConfig | None = DecoderConfig(), num_classes: int | None = None, **encoder_overrides):
        try:
            enc = ENCODER_PRESETS[scale]
        except KeyError:
            raise ModelContractError(f"unknown scale {scale!r}; choose from {sorted(ENCODER_PRESETS)}") from None
        if encoder_overrides:
            enc = replace(enc, **encoder_overrides)
        return cls(encoder=enc, decoder=decoder, num_classes=num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        dec = d.get("decoder")
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            decoder=DecoderConfig(**dec) if dec else None,
            patch=d.get("patch", PATCH),
            num_classes=d.get("num_classes"),
        )


# --- parameter layout ------------------------------------------------------


def _block_shapes(prefix: str, emb: int, ffn: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.norm1.weight": (emb,),
        f"{prefix}.norm1.bias": (emb,),
        f"{prefix}.attn.qkv.weight": (emb, 3 * emb),
        f"{prefix}.attn.qkv.bias": (3 * emb,),
        f"{prefix}.attn.proj.weight": (emb, emb),
        f"{prefix}.attn.proj.bias": (emb,),
        f"{prefix}.norm2.weight": (emb,),
        f"{prefix}.norm2.bias": (emb,),
        f"{prefix}.mlp.fc1.weight": (emb, ffn),
        f"{prefix}.mlp.fc1.bias": (ffn,),
        f"{prefix}.mlp.fc2.weight": (ffn, emb),
        f"{prefix}.mlp.fc2.bias": (emb,),
    }


def param_shapes(config: ModelConfig, with_decoder: bool = True, with_head: bool = True) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor."""
    enc = config.encoder
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (enc.patch_dim, enc.emb),
        "patch_embed.bias": (enc.emb,),
    }
    for i in range(enc.depth):
        shapes.update(_block_shapes(f"encoder.blocks.{i}", enc.emb, enc.ffn))
    shapes["encoder.norm.weight"] = (enc.emb,)
    shapes["encoder.norm.bias"] = (enc.emb,)
    dec = config.decoder
    if with_decoder and dec is not None:
        shapes["decoder.embed.weight"] = (enc.emb, dec.emb)
        shapes["decoder.embed.bias"] = (dec.emb,)
        shapes["decoder.mask_token"] = (dec.emb,)
        for i in range(dec.depth):
            shapes.update(_block_shapes(f"decoder.blocks.{i}", dec.emb, dec.ffn))
        shapes["decoder.norm.weight"] = (dec.emb,)
        shapes["decoder.norm.bias"] = (dec.emb,)
        shapes["decoder.pred.weight"] = (dec.emb, dec.out_dim)
        shapes["decoder.pred.bias"] = (dec.out_dim,)
    if with_head and config.num_classes:
        shapes["head.weight"] = (enc.emb, config.num_classes)
        shapes["head.bias"] = (config.num_classes,)
    return shapes


def param_count(config: ModelConfig | EncoderConfig, with_decoder: bool = False) -> int:
    """Number of scalar learnables; the classification head is excluded."""
    if isinstance(config, EncoderConfig):
        config = ModelConfig(encoder=config)
    shapes = param_shapes(config, with_decoder=with_decoder, with_head=False)
    return int(sum(math.prod(s) for s in shapes.values()))


def _initial_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("mask_token"):
        return rng.normal(0.0, INIT_STD, size=shape)
    if ".norm" in name or name.startswith("norm"):
        return np.ones(shape) if leaf == "weight" else np.zeros(shape)
    if leaf == "bias":
        return np.zeros(shape)
    return _truncated_normal(shape, rng) * INIT_STD


def _truncated_normal(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws restricted to [-2, 2] by redrawing outliers."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32, with_decoder: bool = True) -> dict[str, Parameter]:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, with_decoder=with_decoder).items():
        params[name] = Parameter(_initial_value(name, shape, rng).astype(dtype), name=name)
    return params


def init_head(config: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, Parameter]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not config.num_classes:
        raise ModelContractError("config has no num_classes")
    shapes = {"head.weight": (config.encoder.emb, config.num_classes), "head.bias": (config.num_classes,)}
    return {n: Parameter(_initial_value(n, s, rng).astype(dtype), name=n) for n, s in shapes.items()}


# --- building blocks -------------------------------------------------------


def linear(x, params: Mapping[str, Parameter], prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def patch_embed(patches, params: Mapping[str, Parameter]) -> Tensor:
    """Affine projection of flattened patches to tokens; no nonlinearity."""
    w = params["patch_embed.weight"]
    if T.as_tensor(patches).shape[-1] != w.shape[0]:
        raise ModelContractError(f"patch vectors must have length {w.shape[0]}, got {T.as_tensor(patches).shape[-1]}")
    return linear(patches, params, "patch_embed")


def sinusoidal_pos_encoding(n: int, d: int, dtype=np.float64) -> np.ndarray:
    """``PE[pos, 2i] = sin(pos / 10000**(2i/d))``, ``PE[pos, 2i+1] = cos(...)``."""
    if d % 2:
        raise ModelContractError(f"position encoding dimension must be even, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe.astype(dtype)


def attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    *lead, n, d = x.shape
    dh = d // heads
    qkv = linear(x, params, f"{prefix}.qkv")
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    nl = len(lead)
    # -> (3, *lead, heads, n, dh)
    qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(*range(nl + 1), nl + 2, nl + 1)) * (1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, d)
    return linear(ctx, params, f"{prefix}.proj")


def transformer_block(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-norm block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""
    h = T.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"], LN_EPS)
    x = x + attention(h, params, f"{prefix}.attn", heads)
    h = T.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"], LN_EPS)
    h = T.gelu(linear(h, params, f"{prefix}.mlp.fc1"))
    return x + linear(h, params, f"{prefix}.mlp.fc2")


def encoder_forward(tokens, config: ModelConfig | EncoderConfig, params) -> Tensor:
    """Transformer encoder over ``(..., m, emb)`` tokens; positions are added by the caller."""
    enc = config.encoder if isinstance(config, ModelConfig) else config
    x = T.as_tensor(tokens)
    if x.shape[-2] < 1:
        raise ModelContractError("encoder needs at least one token")
    for i in range(enc.depth):
        x = transformer_block(x, params, f"encoder.blocks.{i}", enc.heads)
    return T.layer_norm(x, params["encoder.norm.weight"], params["encoder.norm.bias"], LN_EPS)


def decoder_forward(full_seq, config: ModelConfig | DecoderConfig, params) -> Tensor:
    """Decode a full ``(..., n, dec_emb)`` sequence into ``(..., n, p*p)`` patches."""
    dec = config.decoder if isinstance(config, ModelConfig) else config
    x = T.as_tensor(full_seq)
    for i in range(dec.depth):
        x = transformer_block(x, params, f"decoder.blocks.{i}", dec.heads)
    x = T.layer_norm(x, params["decoder.norm.weight"], params["decoder.norm.bias"], LN_EPS)
    return linear(x, params, "decoder.pred")


def classifier_forward(tokens, params, num_classes: int | None = None) -> Tensor:
    """Mean-pool tokens over the sequence axis, then an affine map to class logits."""
    x = T.as_tensor(tokens)
    w = params["head.weight"]
    if num_classes is not None and w.shape[1] != num_classes:
        raise ModelContractError(f"head has {w.shape[1]} outputs, expected {num_classes}")
    pooled = T.mean(x, axis=-2)
    if pooled.ndim == 1:
        return linear(pooled.reshape(1, -1), params, "head").reshape(-1)
    return linear(pooled, params, "head")


# --- model -----------------------------------------------------------------


class MaskSpecModel:
    """Config plus named parameters, with the pretraining and classification paths."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter] | None = None, seed=0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self, prefix: str | None = None) -> int:
        return sum(p.size for n, p in self.params.items() if prefix is None or n.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def drop_decoder(self) -> None:
        self.params = {n: p for n, p in self.params.items() if not n.startswith("decoder.")}
        self.config = replace(self.config, decoder=None)

    def attach_head(self, num_classes: int, seed=0) -> None:
        self.config = replace(self.config, num_classes=num_classes)
        self.params.update(init_head(self.config, seed, self.dtype))

    def pos_encoding(self, n: int, d: int) -> np.ndarray:
        key = (n, d)
        if key not in self._pe_cache:
            self._pe_cache[key] = sinusoidal_pos_encoding(n, d, self.dtype)
        return self._pe_cache[key]

    def embed(self, patches) -> Tensor:
        """Patch embedding plus encoder position encoding for every patch."""
        x = T.as_tensor(patches, dtype=self.dtype)
        n = x.shape[-2]
        return patch_embed(x, self.params) + self.pos_encoding(n, self.config.encoder.emb)

    def embed_survivors(self, patches, survivor_idx: np.ndarray) -> Tensor:
        """Same values as ``take_rows(embed(patches), survivor_idx)`` without embedding masked patches."""
        x = T.as_tensor(patches, dtype=self.dtype)
        n = x.shape[-2]
        pe = self.pos_encoding(n, self.config.encoder.emb)[survivor_idx]
        return patch_embed(T.take_rows(x, survivor_idx), self.params) + pe

    def reconstruct(self, patches, plans: list[MaskPlan] | MaskPlan) -> Tensor:
        """Decoder output for every patch position, ``(B, n, p*p)``.

        ``patches`` is ``(B, n, p*p)`` (or ``(n, p*p)`` with a single plan).
        """
        single = isinstance(plans, MaskPlan)
        x = T.as_tensor(patches, dtype=self.dtype)
        if single:
            x = x.reshape(1, *x.shape)
            plans = [plans]
        if self.config.decoder is None:
            raise ModelContractError("model has no decoder")
        surv, _ = stack_plans(plans)
        n = x.shape[-2]
        encoded = encoder_forward(self.embed_survivors(x, surv), self.config, self.params)
        projected = linear(encoded, self.params, "decoder.embed")
        full = T.scatter_rows(projected, self.params["decoder.mask_token"], surv, n)
        full = full + self.pos_encoding(n, self.config.decoder.emb)
        out = decoder_forward(full, self.config, self.params)
        return out.reshape(*out.shape[1:]) if single else out

    def features(self, patches) -> Tensor:
        """Encoder output for an unmasked patch sequence."""
        return encoder_forward(self.embed(patches), self.config, self.params)

    def classify(self, patches) -> Tensor:
        return classifier_forward(self.features(patches), self.params, self.config.num_classes)
