"""Embedding -> BiGRU -> attention pooling -> softmax classifier.

The forward pass is split into small pure functions (``embed``, ``encode``,
``score_additive``, ``score_scaled_dot``, ``align``, ``pool``) so that each
stage can be checked on its own. ``AttentionClassifier`` wires them
together and exposes two attachment points for perturbations: the word
embeddings and the pre-normalization attention scores.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InvalidArgument

SCORE_KINDS = ("additive", "scaled_dot")
ATTACH_SCORES = "attention_scores"
ATTACH_EMBEDDING = "word_embedding"

_CKPT_MAGIC = b"ATTNROBUST-CKPT1\n"


@dataclass
class EncodedSequence:
    hidden: torch.Tensor  # (B, T, 2m), zero at padded positions
    mask: torch.Tensor


@dataclass
class AttentionRecord:
    scores: torch.Tensor  # (B, T), -inf off-mask
    weights: torch.Tensor  # (B, T), rows on the simplex
    mask: torch.Tensor
    score_kind: str


@dataclass
class Prediction:
    instance: torch.Tensor  # (B, 2m)
    probs: torch.Tensor
    logits: torch.Tensor


def embed(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise InvalidArgument(f"token id out of range for vocabulary of size {table.shape[0]}")
    return F.embedding(ids, table)


def encode(embedded: torch.Tensor, lengths: torch.Tensor, mask: torch.Tensor, rnn: nn.GRU) -> EncodedSequence:
    """Run the bidirectional recurrent encoder from a zero initial state.

    Packing makes the backward direction start at each row's last real
    token rather than at the padding.
    """
    if int(lengths.min()) < 1:
        raise InvalidArgument("every sequence needs at least one token")
    packed = pack_padded_sequence(embedded, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = rnn(packed)
    hidden, _ = pad_packed_sequence(out, batch_first=True, total_length=embedded.shape[1])
    return EncodedSequence(hidden, mask)


def score_additive(keys, query, W1, W2, v, mask):
    """``v . tanh(W1 k_t + W2 q)`` per position; -inf where ``mask`` is false."""
    proj = torch.tanh(keys @ W1.T + W2 @ query)
    scores = proj @ v
    return scores.masked_fill(~mask, float("-inf"))


def score_scaled_dot(keys, query, mask):
    scores = keys @ query / math.sqrt(keys.shape[-1])
    return scores.masked_fill(~mask, float("-inf"))


def align(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the masked-in positions; exactly zero elsewhere."""
    if not bool(mask.any(dim=-1).all()):
        raise InvalidArgument("align needs at least one masked-in position per row")
    return torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)


def pool(hidden: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return torch.einsum("bt,btk->bk", weights, hidden)


def _realized(perturbation, attachment, expected_shape):
    if perturbation is None:
        return None
    kind = getattr(perturbation, "attachment", attachment)
    if kind != attachment:
        raise InvalidArgument(f"expected a {attachment} perturbation, got {kind}")
    r = getattr(perturbation, "realized", perturbation)
    if tuple(r.shape) != tuple(expected_shape):
        raise InvalidArgument(
            f"{attachment} perturbation has shape {tuple(r.shape)}, expected {tuple(expected_shape)}"
        )
    return r


class AttentionClassifier(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        num_classes: int,
        embed_dim: int = 100,
        hidden_dim: int = 128,
        attn_dim: int = 64,
        score_kind: str = "additive",
    ):
        super().__init__()
        if score_kind not in SCORE_KINDS:
            raise InvalidArgument(f"unknown score kind {score_kind!r}")
        self.score_kind = score_kind
        self.dims = dict(
            vocab_size=vocab_size,
            num_classes=num_classes,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            attn_dim=attn_dim,
        )
        key_dim = 2 * hidden_dim
        self.embedding = nn.Parameter(torch.empty(vocab_size, embed_dim))
        self.rnn = nn.GRU(embed_dim, hidden_dim, num_layers=1, batch_first=True, bidirectional=True)
        self.W1 = nn.Parameter(torch.empty(attn_dim, key_dim))
        self.W2 = nn.Parameter(torch.empty(attn_dim, key_dim))
        self.v = nn.Parameter(torch.empty(attn_dim))
        self.query = nn.Parameter(torch.empty(key_dim))
        self.out = nn.Linear(key_dim, num_classes)
        self.reset_parameters(0)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Fan-based uniform init drawn from a private generator."""
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name == "embedding":
                fan_in, fan_out = 1, p.shape[1]
            elif p.dim() >= 2:
                fan_out, fan_in = p.shape[0], p.shape[1]
            elif "bias" in name:
                p.zero_()
                continue
            else:
                fan_in, fan_out = p.shape[0], 1
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            p.uniform_(-bound, bound, generator=gen)

    def embed(self, ids):
        return embed(ids, self.embedding)

    def encode(self, embedded, lengths, mask):
        return encode(embedded, lengths, mask, self.rnn)

    def score(self, keys, mask):
        if self.score_kind == "additive":
            return score_additive(keys, self.query, self.W1, self.W2, self.v, mask)
        return score_scaled_dot(keys, self.query, mask)

    def forward_embedded(self, embedded, lengths, mask, score_perturbation=None):
        """Forward pass starting from (possibly perturbed) embeddings."""
        enc = self.encode(embedded, lengths, mask)
        scores = self.score(enc.hidden, mask)
        r = _realized(score_perturbation, ATTACH_SCORES, scores.shape)
        if r is not None:
            scores = scores + r.masked_fill(~mask, 0.0)
        weights = align(scores, mask)
        instance = pool(enc.hidden, weights)
        logits = self.out(instance)
        pred = Prediction(instance, torch.softmax(logits, dim=-1), logits)
        return pred, AttentionRecord(scores, weights, mask, self.score_kind)

    def forward(self, batch, score_perturbation=None, embedding_perturbation=None):
        embedded = self.embed(batch.ids)
        r = _realized(embedding_perturbation, ATTACH_EMBEDDING, embedded.shape)
        if r is not None:
            embedded = embedded + r.masked_fill(~batch.mask.unsqueeze(-1), 0.0)
        return self.forward_embedded(embedded, batch.lengths, batch.mask, score_perturbation)

    predict = forward

    @property
    def dtype(self):
        return self.embedding.dtype


def accuracy(model: AttentionClassifier, batch, chunk: int = 256) -> float:
    labels = batch.require_labels()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), chunk):
            sub = batch.select(range(start, min(start + chunk, len(batch))))
            pred, _ = model(sub)
            correct += int((pred.logits.argmax(-1) == labels[start : start + chunk]).sum())
    return correct / len(batch)


def save_checkpoint(path, model: AttentionClassifier, config_hash: str = "", extra: dict | None = None) -> None:
    """Write a header (shapes, score kind, config hash) then float64 arrays.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON
    header, then each parameter as little-endian float64 in header order.
    """
    state = model.state_dict()
    header = {
        "score_kind": model.score_kind,
        "config_hash": config_hash,
        "dims": model.dims,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in state.values():
            arr = v.detach().to(torch.float64).contiguous().numpy()
            fh.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if not data.startswith(_CKPT_MAGIC):
        raise InvalidArgument(f"{path} is not a checkpoint file")
    pos = len(_CKPT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    state = {}
    for spec in header["params"]:
        count = math.prod(spec["shape"])
        arr = torch.frombuffer(bytearray(data[pos : pos + 8 * count]), dtype=torch.float64)
        state[spec["name"]] = arr.reshape(spec["shape"]).clone()
        pos += 8 * count
    if pos != len(data):
        raise InvalidArgument(f"{path}: trailing bytes after parameter arrays")
    return header, state


def load_checkpoint(path, dtype=torch.float32) -> tuple[AttentionClassifier, dict]:
    header, state = read_checkpoint(path)
    model = AttentionClassifier(score_kind=header["score_kind"], **header["dims"]).to(dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return model, header
