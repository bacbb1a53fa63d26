"""Distance and training losses on latent series.

Everything here is a pure function of tensors.  Latent series are tensors of
shape ``(T, d)`` or batched ``(B, T, d)``; the last timestep is the
post-event observation.  Inputs that are not tensors (lists, numpy arrays)
are promoted to float64 tensors so the functions double as a small math
library.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import EmptyBatch, SeriesTooShort, ShapeMismatch, ZeroNormEmbedding

NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the total objective.

    ``reconstruction`` scales the autoencoding term and exists for the
    loss ablation (set to 0 to drop the autoencoder objective).
    """

    lambda_contra: float = 0.5
    mu_consist: float = 0.5
    lambda_reg: float = 0.0
    reconstruction: float = 1.0

    def __post_init__(self):
        for name in ("lambda_contra", "mu_consist", "lambda_reg", "reconstruction"):
            value = getattr(self, name)
            if not (value >= 0.0 and value < float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_norms(norms: torch.Tensor) -> None:
    if bool((norms <= NORM_EPS).any()):
        raise ZeroNormEmbedding(
            f"embedding norm <= {NORM_EPS:g} (min norm {float(norms.min()):.3g})"
        )


def cosine_distance(p, q) -> torch.Tensor:
    """``1 - |p.q| / (|p||q|)``; antiparallel vectors are at distance 0."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise ShapeMismatch(f"dimension mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    pn, qn = p.norm(dim=-1), q.norm(dim=-1)
    _check_norms(pn)
    _check_norms(qn)
    cos = (p * q).sum(dim=-1) / (pn * qn)
    return (1.0 - cos.abs()).clamp(0.0, 1.0)


def pairwise_cosine_distance(h) -> torch.Tensor:
    """All-pairs cosine distance: ``(..., T, d) -> (..., T, T)``."""
    h = _as_tensor(h)
    norms = h.norm(dim=-1, keepdim=True)
    _check_norms(norms)
    unit = h / norms
    cos = unit @ unit.transpose(-1, -2)
    return (1.0 - cos.abs()).clamp(0.0, 1.0)


def _series_length(h: torch.Tensor, minimum: int) -> int:
    if h.dim() < 2:
        raise ShapeMismatch(f"expected (..., T, d) latents, got shape {tuple(h.shape)}")
    T = h.shape[-2]
    if T < minimum:
        raise SeriesTooShort(f"need T >= {minimum}, got T={T}")
    return T


def contrastive_pairs(T: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Index pairs (0-based) used by the contrastive loss.

    Positives are all pre/pre pairs ``i < j < T-1``; negatives pair each
    pre-event step with the last one.
    """
    if T < 3:
        raise SeriesTooShort(f"need T >= 3, got T={T}")
    positives = [(i, j) for i in range(T - 1) for j in range(i + 1, T - 1)]
    negatives = [(i, T - 1) for i in range(T - 1)]
    return positives, negatives


def contrastive_from_distances(D: torch.Tensor) -> torch.Tensor:
    """Contrastive loss given a ``(..., T, T)`` distance matrix."""
    T = D.shape[-1]
    if T < 3:
        raise SeriesTooShort(f"need T >= 3, got T={T}")
    pre = D[..., : T - 1, : T - 1]
    to_post = D[..., : T - 1, T - 1]
    self_pair = torch.eye(T - 1, dtype=torch.bool, device=D.device)
    log_norm = torch.logsumexp(pre.masked_fill(self_pair, float("-inf")), dim=-1)
    return (log_norm - to_post).mean(dim=-1)


def consistency_from_distances(D: torch.Tensor) -> torch.Tensor:
    """Mean off-diagonal entry of a ``(..., T, T)`` distance matrix."""
    T = D.shape[-1]
    if T < 2:
        raise SeriesTooShort(f"need T >= 2, got T={T}")
    off_diag = ~torch.eye(T, dtype=torch.bool, device=D.device)
    return (D * off_diag).sum(dim=(-1, -2)) / (T * (T - 1))


def contrastive_loss(h) -> torch.Tensor:
    """Contrastive loss for an affected series (``T >= 3``).

    For every pre-event anchor ``a`` the post-event distance ``D(h_a, h_T)``
    sits in the numerator and the distances to the other pre-event latents
    form the normaliser.  No temperature.
    """
    h = _as_tensor(h)
    _series_length(h, 3)
    return contrastive_from_distances(pairwise_cosine_distance(h))


def consistency_loss(h) -> torch.Tensor:
    """Mean cosine distance over all ordered pairs ``a != b`` (``T >= 2``)."""
    h = _as_tensor(h)
    _series_length(h, 2)
    return consistency_from_distances(pairwise_cosine_distance(h))


def reconstruction_loss(series_in, series_out, reg_value=0.0, weights: LossWeights | None = None):
    """Element-mean squared error plus ``lambda_reg * reg_value``.

    Inputs are ``(T, C, P, P)`` series or ``(B, T, C, P, P)`` batches; for
    batches one value per series is returned.
    """
    x, x_hat = _as_tensor(series_in), _as_tensor(series_out)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    if x.dim() < 4:
        raise ShapeMismatch(f"expected (..., T, C, P, P), got {tuple(x.shape)}")
    mse = ((x_hat - x) ** 2).mean(dim=(-4, -3, -2, -1))
    lambda_reg = 0.0 if weights is None else weights.lambda_reg
    return mse + lambda_reg * _as_tensor(reg_value).to(mse)


def total_loss(recon_terms, latents, labels, weights: LossWeights) -> torch.Tensor:
    """Batch objective: mean autoencoding term + weighted class-wise latent terms.

    ``recon_terms`` holds one unified-AE value per series, ``latents`` is
    ``(B, T, d)`` and ``labels`` is ``(B,)`` binary.  The contrastive term is
    averaged over the ``y=1`` members and the consistency term over the
    ``y=0`` members of this batch; a class missing from the batch
    contributes 0.  Terms whose weight is 0 are not evaluated.
    """
    recon_terms = _as_tensor(recon_terms)
    latents = _as_tensor(latents)
    labels = torch.as_tensor(labels, device=latents.device)
    if recon_terms.dim() != 1 or recon_terms.numel() == 0:
        raise EmptyBatch("total_loss needs at least one series")
    B = recon_terms.shape[0]
    if latents.dim() != 3 or latents.shape[0] != B or labels.shape != (B,):
        raise ShapeMismatch(
            f"batch size mismatch: recon {B}, latents {tuple(latents.shape)}, labels {tuple(labels.shape)}"
        )
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("labels must be binary")

    loss = weights.reconstruction * recon_terms.mean()
    pos, neg = labels == 1, labels == 0
    if weights.lambda_contra > 0 and bool(pos.any()):
        loss = loss + weights.lambda_contra * contrastive_loss(latents[pos]).mean()
    if weights.mu_consist > 0 and bool(neg.any()):
        loss = loss + weights.mu_consist * consistency_loss(latents[neg]).mean()
    return loss
