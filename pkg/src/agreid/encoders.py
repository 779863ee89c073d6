"""Toy dual encoders, projection heads and the attribute encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, Tensor

INIT_STD = 0.02


class ConfigurationError(ValueError):
    pass


class Module:
    """Parameter container; children and tensors are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def _normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _normal(rng, d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.weight)
        return y if self.bias is None else tc.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigurationError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        h = self.heads
        dh = d // h
        qkv = tc.transpose(tc.reshape(self.qkv(x), (B, L, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = tc.softmax(tc.scale(tc.matmul(q, tc.transpose(k)), dh ** -0.5), axis=-1)
        y = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        return self.out(y)


class Block(Module):
    """Pre-norm transformer block, no causal mask."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = tc.add(x, self.attn(self.ln1(x)))
        return tc.add(x, self.fc2(tc.gelu(self.fc1(self.ln2(x)))))


def _broadcast_rows(t: Tensor, n: int) -> Tensor:
    """Repeat a ``[L, d]`` parameter ``n`` times into ``[n, L, d]``."""
    L, d = t.shape
    idx = np.tile(np.arange(L), n)
    return tc.reshape(tc.take_rows(t, idx), (n, L, d))


# --------------------------------------------------------------------------
# image encoder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: tuple[int, int, int] = (32, 16, 3)
    patch_size: int = 4
    depth: int = 2
    heads: int = 4
    d_model: int = 64
    d_out: int = 64

    def __post_init__(self):
        H, W, _ = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise ConfigurationError(f"image {H}x{W} not divisible by patch {self.patch_size}")
        if self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads")

    @property
    def num_patches(self) -> int:
        H, W, _ = self.image_size
        return (H // self.patch_size) * (W // self.patch_size)


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    B, H, W, C = images.shape
    x = images.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


class ImageEncoder(Module):
    def __init__(self, cfg: ImageEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, W, C = cfg.image_size
        d = cfg.d_model
        self.patch_embed = Linear(cfg.patch_size ** 2 * C, d, rng)
        self.cls_token = _normal(rng, 1, d)
        self.pos_embed = _normal(rng, cfg.num_patches + 1, d)
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(d)
        self.head = Linear(d, cfg.d_out, rng)

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        """Return ``(f_M [B, d_out], patch_tokens [B, P, d_model])``.

        A single ``[H, W, C]`` image gives unbatched outputs.
        """
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != tuple(self.cfg.image_size):
            raise DimensionError(f"expected images of shape [B, {self.cfg.image_size}], got {arr.shape}")
        B = arr.shape[0]
        x = self.patch_embed(Tensor(patchify(arr, self.cfg.patch_size)))
        cls = tc.reshape(tc.take_rows(self.cls_token, np.zeros(B, dtype=np.int64)), (B, 1, -1))
        x = tc.add(tc.concat([cls, x], axis=1), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_final(x)
        f = self.head(x[:, 0])
        patches = x[:, 1:]
        if single:
            return f[0], patches[0]
        return f, patches


# --------------------------------------------------------------------------
# text encoder
# --------------------------------------------------------------------------

class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    max_seq_len: int = 48
    depth: int = 2
    heads: int = 4
    d_embed: int = 32
    d_out: int = 32

    def __post_init__(self):
        if self.d_embed % self.heads:
            raise ConfigurationError("d_embed must be divisible by heads")


class TextEncoder(Module):
    """Transformer over token embeddings; the feature is read at the last position."""

    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embedding = _normal(rng, cfg.vocab_size, cfg.d_embed)
        self.pos_embed = _normal(rng, cfg.max_seq_len, cfg.d_embed)
        self.blocks = [Block(cfg.d_embed, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(cfg.d_embed)
        self.head = Linear(cfg.d_embed, cfg.d_out, rng)

    def __call__(self, T: Tensor) -> Tensor:
        single = T.ndim == 2
        if single:
            T = tc.reshape(T, (1,) + T.shape)
        n, L, d = T.shape
        if L > self.cfg.max_seq_len:
            raise SequenceLengthError(f"sequence of {L} tokens exceeds max_seq_len={self.cfg.max_seq_len}")
        if d != self.cfg.d_embed:
            raise DimensionError(f"token width {d} != d_embed {self.cfg.d_embed}")
        x = tc.add(T, self.pos_embed[:L])
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_final(x)
        f = self.head(x[:, L - 1])
        return f[0] if single else f


# --------------------------------------------------------------------------
# projections and similarity
# --------------------------------------------------------------------------

class Projections(Module):
    def __init__(self, d_image: int, d_text: int, d_shared: int, rng: np.random.Generator):
        self.image = Linear(d_image, d_shared, rng, bias=False)
        self.text = Linear(d_text, d_shared, rng, bias=False)


def similarity_logits(image_feats: Tensor, text_feats: Tensor, tau: float) -> Tensor:
    """Cosine of every (image, text) pair divided by ``tau``: ``[B_img, B_txt]``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if image_feats.shape[-1] != text_feats.shape[-1]:
        raise DimensionError(
            f"projected widths differ: {image_feats.shape} vs {text_feats.shape}")
    a = tc.l2_normalize(image_feats, axis=-1)
    b = tc.l2_normalize(text_feats, axis=-1)
    return tc.scale(tc.matmul(a, tc.transpose(b)), 1.0 / tau)


def project_and_similarity(f_M: Tensor, f_T: Tensor, proj: Projections, tau: float) -> Tensor:
    return similarity_logits(proj.image(f_M), proj.text(f_T), tau)


# --------------------------------------------------------------------------
# attribute encoder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AttributeEncoderConfig:
    variant: str = "SE"
    layers: int = 4
    heads: int = 4
    d_model: int = 64
    r: int = 11
    d_out: int = 32
    d_in: int = 64

    def __post_init__(self):
        if self.variant not in ("SE", "ME"):
            raise ConfigurationError(f"variant must be SE or ME, got {self.variant!r}")
        if self.d_model % self.heads:
            raise ConfigurationError("d_model must be divisible by heads")
        if self.r < 1:
            raise ConfigurationError("r must be positive")


class _AttributeStack(Module):
    def __init__(self, cfg: AttributeEncoderConfig, n_cls: int, rng: np.random.Generator):
        self.in_proj = Linear(cfg.d_in, cfg.d_model, rng) if cfg.d_in != cfg.d_model else None
        self.cls_tokens = _normal(rng, n_cls, cfg.d_model)
        self.blocks = [Block(cfg.d_model, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_final = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.d_out, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        n = tokens.shape[0]
        c = self.cls_tokens.shape[0]
        if self.in_proj is not None:
            tokens = self.in_proj(tokens)
        x = tc.concat([_broadcast_rows(self.cls_tokens, n), tokens], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_final(x[:, :c]))


class AttributeEncoder(Module):
    """Predicts ``r`` attribute embeddings from an image's patch-token list.

    ``SE`` shares one stack with ``r`` class tokens; ``ME`` owns ``r``
    independent stacks with one class token each.
    """

    def __init__(self, cfg: AttributeEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.variant == "SE":
            self.stacks = [_AttributeStack(cfg, cfg.r, rng)]
        else:
            self.stacks = [_AttributeStack(cfg, 1, rng) for _ in range(cfg.r)]

    def __call__(self, patch_tokens: Tensor) -> Tensor:
        patch_tokens = tc.as_tensor(patch_tokens)
        single = patch_tokens.ndim == 2
        if single:
            patch_tokens = tc.reshape(patch_tokens, (1,) + patch_tokens.shape)
        if patch_tokens.ndim != 3 or patch_tokens.shape[-1] != self.cfg.d_in:
            raise ConfigurationError(
                f"patch tokens {patch_tokens.shape} do not match d_in={self.cfg.d_in}")
        outs = [stack(patch_tokens) for stack in self.stacks]
        A = outs[0] if len(outs) == 1 else tc.concat(outs, axis=1)
        return A[0] if single else A
