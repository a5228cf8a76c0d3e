"""Loss assembly and the optimization loop."""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import adversarial as adv
from .config import ExperimentConfig
from .data import CorpusSplit, TokenBatch, Vocabulary, build_vocabulary, encode_batch, tokenize
from .errors import DivergenceError, PreconditionError
from .model import AttentionClassifier, accuracy, save_checkpoint

DETERMINISTIC_ENV = "ATTNROBUST_DETERMINISTIC"
AUDIT_ENV = "ATTNROBUST_AUDIT"


def configure_determinism() -> bool:
    on = os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")
    if on:
        torch.use_deterministic_algorithms(True)
    return on


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    adv: torch.Tensor
    vat: torch.Tensor
    lambda_adv: float = 1.0
    lambda_vat: float = 1.0
    perturbation: adv.Perturbation | None = field(default=None, repr=False)

    @property
    def total(self) -> torch.Tensor:
        return self.ce + self.lambda_adv * self.adv + self.lambda_vat * self.vat

    def values(self) -> dict[str, float]:
        """Components as Python floats; ``total`` is re-summed in float64."""
        ce, adv_, vat = (float(t.detach()) for t in (self.ce, self.adv, self.vat))
        return {"ce": ce, "adv": adv_, "vat": vat, "total": ce + self.lambda_adv * adv_ + self.lambda_vat * vat}

    @classmethod
    def combine(cls, supervised: "LossBreakdown", virtual: "LossBreakdown") -> "LossBreakdown":
        return cls(
            supervised.ce,
            supervised.adv,
            virtual.vat,
            supervised.lambda_adv,
            virtual.lambda_vat,
            supervised.perturbation if supervised.perturbation is not None else virtual.perturbation,
        )


def _zero(model):
    return torch.zeros((), dtype=model.dtype)


def supervised_loss(model, batch: TokenBatch) -> LossBreakdown:
    labels = batch.require_labels()
    pred, _ = model(batch)
    ce = F.cross_entropy(pred.logits, labels)
    return LossBreakdown(ce, _zero(model), _zero(model))


def adversarial_loss(model, batch: TokenBatch, cfg: adv.AdvConfig, lambda_adv: float = 1.0) -> LossBreakdown:
    """Clean cross-entropy plus cross-entropy under the variant's perturbation.

    One clean pass serves both the ``ce`` term and the gradient that builds
    the perturbation; the perturbation itself is detached.
    """
    if cfg.variant not in adv.AT_VARIANTS:
        raise PreconditionError(f"adversarial_loss does not handle variant {cfg.variant!r}")
    labels = batch.require_labels()
    attachment = cfg.attachment
    r0 = adv._zero_attachment(model, batch, attachment)
    pred, att = adv._run(model, batch, attachment, r0)
    ce = F.cross_entropy(pred.logits, labels)
    (g,) = torch.autograd.grad(ce, r0, retain_graph=True)
    direction = adv.l2_normalize(g.detach(), batch.mask)
    if cfg.variant == "attention_iat":
        direction = adv.reweight_direction(direction, att.scores, batch.mask)
    pert = adv.Perturbation(attachment, direction, cfg.epsilon)
    adv_pred, _ = adv._run(model, batch, attachment, pert.realized)
    adv_ce = F.cross_entropy(adv_pred.logits, labels)
    return LossBreakdown(ce, adv_ce, _zero(model), lambda_adv=lambda_adv, perturbation=pert)


def virtual_adversarial_loss(
    model, batch: TokenBatch, cfg: adv.AdvConfig, generator=None, lambda_vat: float = 1.0
) -> LossBreakdown:
    """Mean KL between the clean prediction (held constant) and the
    prediction under the virtual-adversarial perturbation."""
    if cfg.variant not in adv.VAT_VARIANTS:
        raise PreconditionError(f"virtual_adversarial_loss does not handle variant {cfg.variant!r}")
    batch = batch.without_labels()
    u, p0, att = adv.vat_direction(model, batch, adv.ATTACH_SCORES, cfg.vat_xi, cfg.vat_power_iters, generator)
    if cfg.variant == "attention_ivat":
        u = adv.reweight_direction(u, att.scores, batch.mask)
    pert = adv.Perturbation(adv.ATTACH_SCORES, u, cfg.epsilon)
    pred, _ = model(batch, score_perturbation=pert.realized)
    vat = adv.kl_categorical(p0, pred.logits).clamp_min(0.0).mean()
    return LossBreakdown(_zero(model), _zero(model), vat, lambda_vat=lambda_vat, perturbation=pert)


@dataclass
class EncodedCorpus:
    vocab: Vocabulary
    train: TokenBatch
    valid: TokenBatch
    test: TokenBatch | None
    unlabeled: TokenBatch | None
    label_names: list[str]


def prepare_corpus(config: ExperimentConfig, corpus: CorpusSplit) -> EncodedCorpus:
    """Build the vocabulary on train text and encode every split once.

    Without a validation file, a fixed slice of train (independent of the
    run seed) is held out for early stopping.
    """
    if not corpus.train:
        raise PreconditionError("corpus has no labeled training examples")
    train, valid = list(corpus.train), list(corpus.validation)
    if not valid:
        order = np.random.default_rng(0).permutation(len(train))
        n_valid = max(1, int(round(config.valid_fraction * len(train))))
        valid = [train[i] for i in order[:n_valid]]
        train = [train[i] for i in sorted(order[n_valid:])]
    vocab = build_vocabulary((tokenize(t) for t, _ in train), config.min_freq)
    T = config.max_len
    return EncodedCorpus(
        vocab=vocab,
        train=encode_batch(train, vocab, T),
        valid=encode_batch(valid, vocab, T),
        test=encode_batch(corpus.test, vocab, T) if corpus.test else None,
        unlabeled=encode_batch(corpus.unlabeled_pool, vocab, T) if corpus.unlabeled_pool else None,
        label_names=list(corpus.label_names),
    )


def build_model(config: ExperimentConfig, vocab_size: int, num_classes: int, seed: int) -> AttentionClassifier:
    model = AttentionClassifier(
        vocab_size,
        num_classes,
        embed_dim=config.embed_dim,
        hidden_dim=config.hidden_dim,
        attn_dim=config.attn_dim,
        score_kind=config.score_kind,
    )
    model = model.to(getattr(torch, config.dtype))
    model.reset_parameters(seed)
    return model


@dataclass
class TrainState:
    params: dict
    step: int
    optimizer_state: dict
    seed: int
    best_val_acc: float
    best_epoch: int


@dataclass
class TrainResult:
    model: AttentionClassifier  # best-validation weights
    state: TrainState
    history: list[dict]
    data: EncodedCorpus


class _UnlabeledStream:
    """Round-robin over reshuffled passes of the unlabeled pool."""

    def __init__(self, pool: TokenBatch, batch_size: int, rng: np.random.Generator):
        self.pool, self.batch_size, self.rng = pool, batch_size, rng
        self.order, self.pos = self.rng.permutation(len(pool)), 0

    def next(self) -> TokenBatch:
        if self.pos >= len(self.order):
            self.order, self.pos = self.rng.permutation(len(self.pool)), 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        batch = self.pool.select(idx)
        if batch.is_labeled:
            raise PreconditionError("label hygiene: an unlabeled-pool batch carries labels")
        return batch


def _check_finite(step, parts: dict, threshold: float):
    total = parts["total"]
    if not all(math.isfinite(v) for v in parts.values()) or total > threshold:
        raise DivergenceError(step, parts)


def train(
    config: ExperimentConfig,
    corpus: CorpusSplit | EncodedCorpus,
    seed: int | None = None,
    out_dir=None,
) -> TrainResult:
    """Train one model for one seed.

    Writes ``metrics.jsonl``, ``best.ckpt``, ``final.ckpt`` and
    ``vocab.json`` into ``out_dir`` when given.
    """
    configure_determinism()
    seed = config.seeds[0] if seed is None else int(seed)
    data = corpus if isinstance(corpus, EncodedCorpus) else prepare_corpus(config, corpus)
    model = build_model(config, len(data.vocab), len(data.label_names), seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    variant = config.variant
    adv_cfg = None
    if variant != "vanilla":
        adv_cfg = adv.AdvConfig(variant, config.epsilon, config.vat_xi, config.vat_power_iters)
    shuffle_rng = np.random.default_rng(seed)
    vat_gen = torch.Generator().manual_seed(seed + 1)
    stream = None
    if variant in adv.VAT_VARIANTS and data.unlabeled is not None:
        stream = _UnlabeledStream(
            data.unlabeled, config.batch_size * config.unlabeled_ratio, np.random.default_rng(seed + 2)
        )

    audit: list[dict] = []
    auditing = out_dir is not None and os.environ.get(AUDIT_ENV, "") not in ("", "0")
    history: list[dict] = []
    step, best_acc, best_epoch, bad_epochs = 0, -1.0, 0, 0
    best_params = copy.deepcopy(model.state_dict())
    n = len(data.train)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = data.train.select(order[start : start + config.batch_size])
            if adv_cfg is None:
                losses = supervised_loss(model, batch)
            elif variant in adv.AT_VARIANTS:
                losses = adversarial_loss(model, batch, adv_cfg, config.lambda_adv)
            else:
                sup = supervised_loss(model, batch)
                ubatch = stream.next() if stream is not None else batch.without_labels()
                virt = virtual_adversarial_loss(model, ubatch, adv_cfg, vat_gen, config.lambda_vat)
                losses = LossBreakdown.combine(sup, virt)
            step += 1
            parts = losses.values()
            _check_finite(step, parts, config.divergence_threshold)
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            history.append({"step": step, "epoch": epoch, **parts, "val_acc": None})
            if auditing and losses.perturbation is not None:
                audit.append({"step": step, **losses.perturbation.audit(variant)})

        model.eval()
        val_acc = accuracy(model, data.valid)
        history[-1]["val_acc"] = val_acc
        if val_acc > best_acc:
            best_acc, best_epoch, bad_epochs = val_acc, epoch, 0
            best_params = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    state = TrainState(
        params=best_params,
        step=step,
        optimizer_state=optimizer.state_dict(),
        seed=seed,
        best_val_acc=best_acc,
        best_epoch=best_epoch,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        chash = config.identity_hash()
        meta = {"seed": seed, "step": step, "best_epoch": best_epoch, "best_val_acc": best_acc}
        save_checkpoint(out / "final.ckpt", model, chash, meta)
        model.load_state_dict(best_params)
        save_checkpoint(out / "best.ckpt", model, chash, meta)
        (out / "vocab.json").write_text(json.dumps(data.vocab.to_json()) + "\n")
        (out / "labels.json").write_text(json.dumps(data.label_names) + "\n")
        with open(out / "metrics.jsonl", "w") as fh:
            for rec in history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if auditing:
            with open(out / "perturbations.jsonl", "w") as fh:
                for rec in audit:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    model.load_state_dict(best_params)
    model.eval()
    return TrainResult(model, state, history, data)
