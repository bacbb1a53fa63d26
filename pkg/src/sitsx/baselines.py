"""Siamese change-detection baselines on the shared transformer backbone.

Two strategies are provided.  *Bi-temporal* classifiers score each pair
``(x_i, x_T)`` separately and aggregate the per-pair logits.  *Multi-temporal*
classifiers combine the pooled features of the last ``steps_used`` images
into a single head input.  Both interact either by concatenation or by
feature differences.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EmptyList, SeriesTooShort, ShapeMismatch
from .model import ModelConfig, ViTEncoder, init_weights

METHODS = {
    "bi-siamconcat": ("bi", "concat"),
    "bi-siamdiff": ("bi", "diff"),
    "multi-siamconcat": ("multi", "concat"),
    "multi-siamdiff": ("multi", "diff"),
}


@dataclass(frozen=True)
class BaselineConfig:
    strategy: str = "multi"           # "bi" | "multi"
    interaction: str = "concat"       # "concat" | "diff"
    steps_used: int = 5
    head_hidden_dim: int = 256
    backbone: ModelConfig = field(default_factory=ModelConfig)
    pair_aggregation: str = "mean"    # bi only: "mean" | "max" over pair logits
    diff_aggregation: str = "mean"    # multi-diff only: "mean" | "concat" of difference vectors

    def __post_init__(self):
        if self.strategy not in ("bi", "multi"):
            raise ConfigError(f"strategy must be 'bi' or 'multi', got {self.strategy!r}")
        if self.interaction not in ("concat", "diff"):
            raise ConfigError(f"interaction must be 'concat' or 'diff', got {self.interaction!r}")
        if self.steps_used < 2:
            raise ConfigError(f"steps_used must be >= 2, got {self.steps_used}")
        if self.steps_used == 2 and (self.strategy, self.interaction) != ("multi", "concat"):
            raise ConfigError("the 2-step variant is defined for multi-temporal concatenation only")
        if self.pair_aggregation not in ("mean", "max"):
            raise ConfigError(f"pair_aggregation must be 'mean' or 'max', got {self.pair_aggregation!r}")
        if self.diff_aggregation not in ("mean", "concat"):
            raise ConfigError(f"diff_aggregation must be 'mean' or 'concat', got {self.diff_aggregation!r}")

    @property
    def method(self) -> str:
        return f"{self.strategy}-siam{self.interaction}"

    @classmethod
    def for_method(cls, method: str, backbone: ModelConfig, **kw) -> "BaselineConfig":
        try:
            strategy, interaction = METHODS[method]
        except KeyError:
            raise ConfigError(f"unknown baseline method {method!r}") from None
        return cls(strategy=strategy, interaction=interaction, backbone=backbone, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        d["backbone"] = ModelConfig.from_dict(d["backbone"])
        return cls(**d)


@dataclass(frozen=True)
class ClassifierOutput:
    logit: float
    probability: float

    @classmethod
    def from_logit(cls, logit: float) -> "ClassifierOutput":
        return cls(float(logit), float(torch.sigmoid(torch.tensor(float(logit), dtype=torch.float64))))


def build_bitemporal_pairs(series):
    """Pair every earlier image with the last one: ``[(x_1, x_T), ..., (x_{T-1}, x_T)]``."""
    T = len(series)
    if T < 2:
        raise SeriesTooShort(f"need at least 2 timesteps to form a pair, got {T}")
    return [(series[i], series[T - 1]) for i in range(T - 1)]


def bi_aggregate(outputs, mode: str = "mean") -> ClassifierOutput:
    """Combine per-pair outputs by their mean (or max) logit."""
    logits = [o.logit if isinstance(o, ClassifierOutput) else float(o) for o in outputs]
    if not logits:
        raise EmptyList("no pair outputs to aggregate")
    agg = max(logits) if mode == "max" else math.fsum(logits) / len(logits)
    return ClassifierOutput.from_logit(agg)


def head_input_dim(cfg: BaselineConfig, feature_dim: int) -> int:
    if cfg.interaction == "concat":
        return (2 if cfg.strategy == "bi" else cfg.steps_used) * feature_dim
    if cfg.strategy == "multi" and cfg.diff_aggregation == "concat":
        return (cfg.steps_used - 1) * feature_dim
    return feature_dim


class SiameseBaseline(nn.Module):
    """Shared-backbone Siamese classifier returning one logit per series.

    ``features`` replaces the transformer backbone with any callable
    mapping ``(N, C, P, P)`` images to ``(N, feature_dim)`` vectors.
    """

    def __init__(self, cfg: BaselineConfig, features: Callable | None = None,
                 feature_dim: int | None = None):
        super().__init__()
        self.cfg = cfg
        if features is None:
            self.backbone = ViTEncoder(cfg.backbone)
            self._features = self.backbone.features
            feature_dim = cfg.backbone.embed_dim
        else:
            if feature_dim is None:
                raise ConfigError("a custom feature function needs feature_dim")
            self.backbone = None
            self._features = features
        self.feature_dim = feature_dim
        self.head = nn.Sequential(
            nn.Linear(head_input_dim(cfg, feature_dim), cfg.head_hidden_dim),
            nn.ReLU(),
            nn.Linear(cfg.head_hidden_dim, 1),
        )
        self.apply(init_weights)
        if self.backbone is not None:
            nn.init.trunc_normal_(self.backbone.pos_embed, std=0.02)

    def features(self, series: torch.Tensor) -> torch.Tensor:
        """``(B, T, C, P, P)`` -> ``(B, T, d)`` pooled features, shared weights."""
        if series.dim() != 5:
            raise ShapeMismatch(f"expected (B, T, C, P, P) series, got {tuple(series.shape)}")
        B, T = series.shape[:2]
        f = self._features(series.reshape(B * T, *series.shape[2:]))
        return f.reshape(B, T, -1)

    def head_input(self, f: torch.Tensor) -> torch.Tensor:
        """Interaction layer on ``(B, T, d)`` features; bi inputs are per pair."""
        cfg = self.cfg
        if cfg.strategy == "bi":
            last = f[:, -1:].expand(-1, f.shape[1] - 1, -1)
            pre = f[:, :-1]
            if cfg.interaction == "concat":
                return torch.cat([pre, last], dim=-1)          # (B, T-1, 2d)
            return last - pre                                   # (B, T-1, d)
        if cfg.interaction == "concat":
            return f.reshape(f.shape[0], -1)
        diffs = f[:, -1:] - f[:, :-1]
        if cfg.diff_aggregation == "concat":
            return diffs.reshape(f.shape[0], -1)
        return diffs.mean(dim=1)

    def pair_logit(self, x_i: torch.Tensor, x_T: torch.Tensor) -> torch.Tensor:
        """Logits for a batch of single pairs ``(B, C, P, P)`` each."""
        f = self.features(torch.stack([x_i, x_T], dim=1))
        if self.cfg.interaction == "concat":
            z = torch.cat([f[:, 0], f[:, 1]], dim=-1)
        else:
            z = f[:, 1] - f[:, 0]
        return self.head(z).squeeze(-1)

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if series.dim() != 5 or series.shape[1] < cfg.steps_used:
            raise ShapeMismatch(
                f"expected (B, T>={cfg.steps_used}, C, P, P) series, got {tuple(series.shape)}"
            )
        z = self.head_input(self.features(series[:, -cfg.steps_used:]))
        logits = self.head(z).squeeze(-1)
        if cfg.strategy == "bi":
            logits = logits.max(dim=1).values if cfg.pair_aggregation == "max" else logits.mean(dim=1)
        return logits

    def forward_loss(self, series: torch.Tensor, labels: torch.Tensor, weights=None):
        """Binary cross-entropy on the series logits; ``weights`` is unused."""
        logits = self(series)
        loss = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
        return loss, logits, {"loss": float(loss.detach()), "bce": float(loss.detach())}

    def predict(self, series: torch.Tensor) -> list[ClassifierOutput]:
        with torch.no_grad():
            return [ClassifierOutput.from_logit(v) for v in self(series).tolist()]


@torch.no_grad()
def probability_scores(model: SiameseBaseline, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Positive-class probabilities for uint8 ``(N, T, C, P, P)`` series."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(images[i : i + batch_size]).float().div_(255.0)
            out.append(torch.sigmoid(model(x).double()))
    finally:
        model.train(was_training)
    return torch.cat(out).numpy()


def probability_scorer(model: SiameseBaseline, batch_size: int = 64):
    return lambda images: probability_scores(model, images, batch_size)


def fit_full_batch(model: nn.Module, series: torch.Tensor, labels: torch.Tensor,
                   steps: int = 200, lr: float = 1e-2) -> list[float]:
    """Full-batch Adam on the BCE objective; returns the loss after each step."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    curve = []
    for _ in range(steps):
        opt.zero_grad()
        loss, _, _ = model.forward_loss(series, labels)
        loss.backward()
        opt.step()
        curve.append(float(loss.detach()))
    return curve


def train_baseline(config, dataset=None):
    """Train a baseline with the shared harness loop (optimizer, schedule, selection).

    ``config`` is a harness ``RunConfig`` whose method names a baseline.
    """
    from .harness import train

    if config.method not in METHODS:
        raise ConfigError(f"{config.method!r} is not a baseline method")
    return train(config, dataset=dataset)
