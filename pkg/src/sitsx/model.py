"""Weight-shared ViT autoencoder (AE and VAE variants).

Every timestep of a patch series is encoded independently by the same
encoder: 8x8 pixel tokens, linear embedding, learned positional
embeddings and pre-norm attention blocks.  The pooled latent ``h_t`` is
the token mean followed by a linear projection.  The decoder reads the
token sequence (or, optionally, the pooled vector broadcast over token
positions) and un-patchifies a reconstruction.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import MissingPosterior, NonFiniteActivation, ShapeMismatch, ZeroNormEmbedding
from .objectives import NORM_EPS, LossWeights, reconstruction_loss, total_loss


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    token_patch_size: int = 8
    encoder_depth: int = 4
    num_heads: int = 8
    decoder_depth: int = 4
    input_size: int = 64
    channels: int = 3
    variant: str = "ae"            # "ae" | "vae"
    mlp_ratio: float = 4.0
    pooling: str = "mean"          # "mean" | "cls"
    decode_from: str = "tokens"    # "tokens" | "pooled"

    def __post_init__(self):
        if self.input_size % self.token_patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by token_patch_size {self.token_patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.variant not in ("ae", "vae"):
            raise ValueError(f"variant must be 'ae' or 'vae', got {self.variant!r}")
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"pooling must be 'mean' or 'cls', got {self.pooling!r}")
        if self.decode_from not in ("tokens", "pooled"):
            raise ValueError(f"decode_from must be 'tokens' or 'pooled', got {self.decode_from!r}")

    @property
    def num_tokens(self) -> int:
        return (self.input_size // self.token_patch_size) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_config(input_size: int = 32, variant: str = "ae") -> ModelConfig:
    """Scaled-down architecture used for CPU-sized experiments."""
    return ModelConfig(
        embed_dim=64, token_patch_size=8, encoder_depth=2, num_heads=4,
        decoder_depth=1, input_size=input_size, variant=variant,
    )


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, L, C*p*p), row-major token order."""
    N, C, H, W = x.shape
    x = x.reshape(N, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(N, (H // p) * (W // p), C * p * p)


def unpatchify(tokens: torch.Tensor, p: int, channels: int) -> torch.Tensor:
    N, L, _ = tokens.shape
    g = int(round(L ** 0.5))
    x = tokens.reshape(N, g, g, channels, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(N, channels, g * p, g * p)


class ViTEncoder(nn.Module):
    """Image -> token sequence; ``pool`` maps tokens to the latent vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.channels * cfg.token_patch_size ** 2, d)
        extra = 1 if cfg.pooling == "cls" else 0
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if extra else None
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens + extra, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)
        self.pool_proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1:] != (cfg.channels, cfg.input_size, cfg.input_size):
            raise ShapeMismatch(
                f"expected (N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}) images, got {tuple(x.shape)}"
            )
        t = self.patch_embed(patchify(x, cfg.token_patch_size))
        if self.cls_token is not None:
            t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1)
        t = t + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        summary = tokens[:, 0] if self.cfg.pooling == "cls" else tokens.mean(dim=1)
        return self.pool_proj(summary)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self(x))


class ViTDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Linear(d, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.channels * cfg.token_patch_size ** 2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        t = self.embed(tokens) + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        return unpatchify(self.head(self.norm(t)), self.cfg.token_patch_size, self.cfg.channels)


class Encoded(NamedTuple):
    """Per-image encoder outputs, leading dims ``(..., T)``."""

    tokens: torch.Tensor             # (..., T, L, d) posterior means for the VAE
    pooled: torch.Tensor             # (..., T, d)
    decoder_input: torch.Tensor      # (..., T, L, d) token samples (VAE train) or tokens
    logvar: torch.Tensor | None      # (..., T, L, d) VAE only


class SitsAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg)
        d = cfg.embed_dim
        if cfg.variant == "vae":
            self.to_mu = nn.Linear(d, d)
            self.to_logvar = nn.Linear(d, d)
        self.decoder = ViTDecoder(cfg)
        self.apply(init_weights)
        for p in (self.encoder.pos_embed, self.decoder.pos_embed):
            nn.init.trunc_normal_(p, std=0.02)
        if self.encoder.cls_token is not None:
            nn.init.trunc_normal_(self.encoder.cls_token, std=0.02)

    def encode(self, series: torch.Tensor, sample: bool | None = None) -> Encoded:
        """Encode ``(..., T, C, P, P)`` images one timestep at a time.

        ``sample`` controls VAE reparameterisation and defaults to the
        module's training flag.  Pooled latents always come from the
        posterior mean.
        """
        if series.dim() < 4:
            raise ShapeMismatch(f"expected (..., T, C, P, P), got {tuple(series.shape)}")
        lead = series.shape[:-3]
        tokens = self.encoder(series.reshape(-1, *series.shape[-3:]))
        logvar = None
        dec_in = tokens
        if self.cfg.variant == "vae":
            mu = self.to_mu(tokens)
            logvar = self.to_logvar(tokens)
            tokens = mu
            if self.training if sample is None else sample:
                dec_in = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
            else:
                dec_in = mu
        pooled = self.encoder.pool(tokens)
        if not bool(torch.isfinite(pooled).all()):
            raise NonFiniteActivation("pooled latent contains non-finite values")
        if bool((pooled.norm(dim=-1) <= NORM_EPS).any()):
            raise ZeroNormEmbedding("pooled latent has zero norm")
        if self.cfg.pooling == "cls":
            tokens, dec_in = tokens[:, 1:], dec_in[:, 1:]
            logvar = None if logvar is None else logvar[:, 1:]

        def shape(t):
            return None if t is None else t.reshape(*lead, *t.shape[1:])

        return Encoded(shape(tokens), shape(pooled), shape(dec_in), shape(logvar))

    def decode(self, enc: Encoded) -> torch.Tensor:
        lead = enc.pooled.shape[:-1]
        if self.cfg.decode_from == "pooled":
            flat = enc.pooled.reshape(-1, 1, self.cfg.embed_dim).expand(-1, self.cfg.num_tokens, -1)
        else:
            flat = enc.decoder_input.reshape(-1, *enc.decoder_input.shape[-2:])
        out = self.decoder(flat)
        return out.reshape(*lead, *out.shape[1:])

    def regularizer(self, enc: Encoded) -> torch.Tensor:
        """Per-series latent regulariser: 0 for the AE, mean token KL for the VAE."""
        if self.cfg.variant == "ae":
            return torch.zeros(enc.pooled.shape[:-2], dtype=enc.pooled.dtype, device=enc.pooled.device)
        if enc.logvar is None:
            raise MissingPosterior("VAE regulariser needs posterior log-variances")
        return kl_to_standard_normal(enc.tokens, enc.logvar).mean(dim=(-1, -2))

    def forward(self, series: torch.Tensor):
        enc = self.encode(series)
        return self.decode(enc), enc

    def forward_loss(self, series: torch.Tensor, labels: torch.Tensor, weights: LossWeights):
        """Total batch loss for ``(B, T, C, P, P)`` series.

        Returns ``(loss, pooled latents (B, T, d), parts)`` where ``parts``
        holds the detached per-term batch means for logging.
        """
        recon, enc = self(series)
        reg = self.regularizer(enc)
        unified = reconstruction_loss(series, recon, reg, weights)
        loss = total_loss(unified, enc.pooled, labels, weights)
        parts = {
            "loss": float(loss.detach()),
            "mse": float(reconstruction_loss(series, recon).detach().mean()),
            "reg": float(reg.detach().mean()),
        }
        return loss, enc.pooled, parts


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last dim."""
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(dim=-1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
