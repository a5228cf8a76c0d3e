"""Adversarial and virtual-adversarial perturbations.

Two attachment points are supported: the word embeddings (the classic
text AT baseline) and the attention scores before normalization. All
functions here are pure with respect to the model: they build their own
graph, differentiate only with respect to the perturbation tensor, and
return detached directions.

Directions are L2-normalized per example over the masked-in entries of the
attachment tensor, so every row of ``realized`` has norm ``epsilon`` unless
its generating gradient was exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import InvalidArgument
from .model import ATTACH_EMBEDDING, ATTACH_SCORES

VARIANTS = ("word_at", "attention_at", "attention_iat", "attention_vat", "attention_ivat")
AT_VARIANTS = ("word_at", "attention_at", "attention_iat")
VAT_VARIANTS = ("attention_vat", "attention_ivat")
ATTACHMENTS = (ATTACH_EMBEDDING, ATTACH_SCORES)

DEVIATION_DELTA = 1e-8


@dataclass(frozen=True)
class Perturbation:
    attachment: str
    direction: torch.Tensor
    epsilon: float

    @property
    def realized(self) -> torch.Tensor:
        return self.direction * self.epsilon

    def audit(self, variant: str) -> dict:
        """Summary suitable for a JSON debug dump."""
        norms = self.realized.flatten(1).norm(dim=1)
        return {
            "variant": variant,
            "epsilon": float(self.epsilon),
            "norm": [float(x) for x in norms],
            "attachment": self.attachment,
        }


@dataclass(frozen=True)
class AdvConfig:
    variant: str
    epsilon: float = 1.0
    vat_xi: float = 1.0
    vat_power_iters: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown adversarial variant {self.variant!r}")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be > 0")
        if not self.vat_xi > 0:
            raise InvalidArgument("vat_xi must be > 0")
        if self.vat_power_iters < 1:
            raise InvalidArgument("vat_power_iters must be >= 1")

    @property
    def attachment(self) -> str:
        return ATTACH_EMBEDDING if self.variant == "word_at" else ATTACH_SCORES


def _entry_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast the (B, T) token mask to the attachment tensor's shape."""
    while mask.dim() < like.dim():
        mask = mask.unsqueeze(-1)
    return mask.expand_as(like)


def l2_normalize(g: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-row unit vector over masked-in entries; all-zero rows stay zero.

    Rows are rescaled by their max magnitude first so tiny gradients do not
    underflow when squared.
    """
    g = g.masked_fill(~_entry_mask(mask, g), 0.0)
    flat = g.flatten(1)
    scale = flat.abs().amax(dim=1, keepdim=True)
    safe = torch.where(scale > 0, scale, torch.ones_like(scale))
    unit = flat / safe
    norm = unit.norm(dim=1, keepdim=True)
    unit = torch.where(norm > 0, unit / torch.where(norm > 0, norm, torch.ones_like(norm)), unit)
    return unit.view_as(g)


def score_deviation_weights(scores: torch.Tensor, mask: torch.Tensor, delta: float = DEVIATION_DELTA) -> torch.Tensor:
    """``|s_t - mean(s)| / (mean|s - mean(s)| + delta)`` over masked-in t, else 0."""
    scores = scores.detach()
    zeroed = scores.masked_fill(~mask, 0.0)
    n = mask.sum(dim=1, keepdim=True).to(scores.dtype)
    mean = zeroed.sum(dim=1, keepdim=True) / n
    dev = (zeroed - mean).abs().masked_fill(~mask, 0.0)
    mean_dev = dev.sum(dim=1, keepdim=True) / n
    return dev / (mean_dev + delta)


def reweight_direction(direction: torch.Tensor, scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Emphasize positions whose score deviates from the row mean.

    Rows where the reweighted vector vanishes (uniform scores) keep the
    original direction.
    """
    weighted = l2_normalize(direction * score_deviation_weights(scores, mask), mask)
    empty = weighted.flatten(1).abs().amax(dim=1) == 0
    return torch.where(empty.view(-1, *([1] * (direction.dim() - 1))), direction, weighted)


def _zero_attachment(model, batch, attachment):
    B, T = batch.ids.shape
    shape = (B, T) if attachment == ATTACH_SCORES else (B, T, model.embedding.shape[1])
    return torch.zeros(shape, dtype=model.dtype, requires_grad=True)


def _run(model, batch, attachment, r):
    if attachment == ATTACH_SCORES:
        return model(batch, score_perturbation=r)
    if attachment == ATTACH_EMBEDDING:
        return model(batch, embedding_perturbation=r)
    raise InvalidArgument(f"unknown attachment {attachment!r}")


def attachment_gradient(model, batch, attachment):
    """Gradient of the mean cross-entropy w.r.t. the attachment tensor.

    Differentiating at a zero additive perturbation gives the gradient with
    respect to the attachment itself. Returns ``(grad, attention_record)``.
    """
    labels = batch.require_labels()
    r0 = _zero_attachment(model, batch, attachment)
    pred, att = _run(model, batch, attachment, r0)
    loss = F.cross_entropy(pred.logits, labels)
    (g,) = torch.autograd.grad(loss, r0)
    return g.detach(), att


def perturb_at(model, batch, attachment, epsilon) -> Perturbation:
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be > 0")
    batch.require_labels()
    g, _ = attachment_gradient(model, batch, attachment)
    return Perturbation(attachment, l2_normalize(g, batch.mask), float(epsilon))


def perturb_iat(model, batch, epsilon) -> Perturbation:
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be > 0")
    batch.require_labels()
    g, att = attachment_gradient(model, batch, ATTACH_SCORES)
    base = l2_normalize(g, batch.mask)
    return Perturbation(ATTACH_SCORES, reweight_direction(base, att.scores, batch.mask), float(epsilon))


def kl_categorical(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Per-row KL(p || q) from logits."""
    logp = torch.log_softmax(p_logits, dim=-1)
    logq = torch.log_softmax(q_logits, dim=-1)
    return (logp.exp() * (logp - logq)).sum(dim=-1)


def power_iteration_direction(
    objective: Callable[[torch.Tensor], torch.Tensor],
    start: torch.Tensor,
    mask: torch.Tensor,
    xi: float,
    iters: int,
) -> torch.Tensor:
    """Approximate the dominant curvature direction of ``objective`` at 0.

    ``objective(r)`` must return a scalar that is a sum of independent
    per-row terms, so rows are iterated independently.
    """
    u = l2_normalize(start, mask)
    for _ in range(iters):
        r = (xi * u).detach().requires_grad_(True)
        (g,) = torch.autograd.grad(objective(r), r)
        u = l2_normalize(g.detach(), mask)
    return u


def random_unit(shape, mask, dtype, generator: torch.Generator | None) -> torch.Tensor:
    d = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    return l2_normalize(d, mask)


def vat_direction(model, batch, attachment, xi, iters, generator=None):
    """Returns ``(direction, clean_logits, clean_attention)``; never reads labels."""
    batch = batch.without_labels()
    with torch.no_grad():
        clean_pred, clean_att = model(batch)
    p0 = clean_pred.logits.detach()

    def objective(r):
        pred, _ = _run(model, batch, attachment, r)
        return kl_categorical(p0, pred.logits).sum()

    shape = _zero_attachment(model, batch, attachment).shape
    start = random_unit(shape, batch.mask, model.dtype, generator)
    u = power_iteration_direction(objective, start, batch.mask, xi, iters)
    return u, p0, clean_att


def perturb_vat(model, batch, attachment, epsilon, xi=1.0, iters=1, generator=None) -> Perturbation:
    if not (epsilon > 0 and xi > 0):
        raise InvalidArgument("epsilon and xi must be > 0")
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    u, _, _ = vat_direction(model, batch, attachment, xi, iters, generator)
    return Perturbation(attachment, u, float(epsilon))


def perturb_ivat(model, batch, epsilon, xi=1.0, iters=1, generator=None) -> Perturbation:
    if not (epsilon > 0 and xi > 0):
        raise InvalidArgument("epsilon and xi must be > 0")
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    u, _, att = vat_direction(model, batch, ATTACH_SCORES, xi, iters, generator)
    return Perturbation(ATTACH_SCORES, reweight_direction(u, att.scores, batch.mask), float(epsilon))


def make_perturbation(model, batch, cfg: AdvConfig, generator=None) -> Perturbation:
    if cfg.variant == "word_at":
        return perturb_at(model, batch, ATTACH_EMBEDDING, cfg.epsilon)
    if cfg.variant == "attention_at":
        return perturb_at(model, batch, ATTACH_SCORES, cfg.epsilon)
    if cfg.variant == "attention_iat":
        return perturb_iat(model, batch, cfg.epsilon)
    if cfg.variant == "attention_vat":
        return perturb_vat(model, batch, ATTACH_SCORES, cfg.epsilon, cfg.vat_xi, cfg.vat_power_iters, generator)
    return perturb_ivat(model, batch, cfg.epsilon, cfg.vat_xi, cfg.vat_power_iters, generator)

