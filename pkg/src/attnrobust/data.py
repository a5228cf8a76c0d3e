"""Corpus loading, tokenization, vocabulary and padded batches."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .errors import CorpusParseError, InvalidArgument, LabelError, PreconditionError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

SPLIT_NAMES = ("train", "valid", "test", "unlabeled")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries.

    >>> tokenize("Good movie!")
    ['good', 'movie', '!']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    min_freq: int
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id_to_token[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise InvalidArgument("vocabulary must start with PAD and UNK")
        object.__setattr__(
            self, "token_to_id", {tok: i for i, tok in enumerate(self.id_to_token)}
        )

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        if token in (PAD_TOKEN, UNK_TOKEN):
            return UNK_ID
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_json(self) -> dict:
        return {"min_freq": self.min_freq, "tokens": list(self.id_to_token)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["tokens"]), int(obj["min_freq"]))


def build_vocabulary(corpus: Iterable[Sequence[str]], min_freq: int = 2) -> Vocabulary:
    """Assign ids by descending frequency, ties broken lexicographically.

    Tokens seen fewer than ``min_freq`` times are left out and encode to UNK.
    """
    if min_freq < 1:
        raise InvalidArgument(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    n_docs = 0
    for tokens in corpus:
        n_docs += 1
        counts.update(tokens)
    if n_docs == 0:
        raise InvalidArgument("cannot build a vocabulary from an empty corpus")
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *kept), min_freq)


@dataclass
class TokenBatch:
    """Padded id matrix plus lengths and mask.

    ``labels`` is None for unlabeled batches; ``is_labeled`` is derived from
    it so the two can never disagree.
    """

    ids: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor | None = None
    tokens: list[list[str]] | None = None

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def __len__(self):
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    def require_labels(self) -> torch.Tensor:
        if self.labels is None:
            raise PreconditionError("operation requires a labeled batch")
        return self.labels

    def without_labels(self) -> "TokenBatch":
        return TokenBatch(self.ids, self.lengths, self.mask, None, self.tokens)

    def select(self, index: Sequence[int] | torch.Tensor) -> "TokenBatch":
        index = torch.as_tensor(index, dtype=torch.long)
        labels = None if self.labels is None else self.labels[index]
        tokens = None if self.tokens is None else [self.tokens[i] for i in index.tolist()]
        return TokenBatch(self.ids[index], self.lengths[index], self.mask[index], labels, tokens)


def encode_batch(examples, vocab: Vocabulary, T_max: int = 64) -> TokenBatch:
    """Encode ``examples`` into a batch padded (or truncated) to ``T_max``.

    Each example is either a bare string (unlabeled) or a ``(text, label)``
    pair where ``label`` is a class index or None. A batch is labeled only if
    every example carries a label. Texts with no tokens are encoded as a
    single UNK so every row has at least one real position.
    """
    if T_max < 1:
        raise InvalidArgument(f"T_max must be >= 1, got {T_max}")
    examples = list(examples)
    if not examples:
        raise InvalidArgument("encode_batch needs at least one example")

    texts, labels = [], []
    for ex in examples:
        if isinstance(ex, str):
            texts.append(ex)
            labels.append(None)
        else:
            text, label = ex
            texts.append(text)
            labels.append(label)
    has_label = [lab is not None for lab in labels]
    if any(has_label) and not all(has_label):
        raise InvalidArgument("cannot mix labeled and unlabeled examples in one batch")

    n = len(texts)
    ids = torch.full((n, T_max), PAD_ID, dtype=torch.long)
    lengths = torch.zeros(n, dtype=torch.long)
    all_tokens = []
    for i, text in enumerate(texts):
        toks = tokenize(text)[:T_max] or [UNK_TOKEN]
        all_tokens.append(toks)
        row = vocab.encode(toks)
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        lengths[i] = len(row)
    mask = torch.arange(T_max).unsqueeze(0) < lengths.unsqueeze(1)
    label_tensor = torch.tensor(labels, dtype=torch.long) if all(has_label) else None
    return TokenBatch(ids, lengths, mask, label_tensor, all_tokens)


@dataclass
class CorpusSplit:
    """Labeled splits hold ``(text, class_index)``; the unlabeled pool holds
    bare strings, so no label can be read from it."""

    train: list[tuple[str, int]]
    validation: list[tuple[str, int]]
    test: list[tuple[str, int]]
    unlabeled_pool: list[str]
    label_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.label_names)


def _read_records(path: Path, fmt: str):
    """Yield ``(line_no, text, raw_label_or_None)`` for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if fmt == "jsonl":
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusParseError(path, line_no, f"invalid JSON ({exc.msg})") from None
                if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                    raise CorpusParseError(path, line_no, 'record needs a string "text" field')
                label = rec.get("label")
                if isinstance(label, bool) or (label is not None and not isinstance(label, (str, int))):
                    raise CorpusParseError(path, line_no, "label must be a string or integer")
                yield line_no, rec["text"], label
            else:
                row = line.rstrip("\r\n").split("\t")
                if len(row) == 1:
                    yield line_no, row[0], None
                elif len(row) == 2:
                    yield line_no, row[0], (row[1] if row[1] != "" else None)
                else:
                    raise CorpusParseError(path, line_no, f"expected 1 or 2 columns, got {len(row)}")


def _label_key(label) -> str:
    return str(label)


def load_corpus(path, format: str = "jsonl") -> CorpusSplit:
    """Read ``train/valid/test/unlabeled.<format>`` from a corpus directory.

    Records without a label go to the unlabeled pool regardless of the file
    they appear in. The label set comes from the train split only.
    """
    if format not in ("jsonl", "tsv"):
        raise InvalidArgument(f"unknown corpus format {format!r}")
    root = Path(path)
    train_file = root / f"train.{format}"
    if not train_file.is_file():
        raise FileNotFoundError(f"missing {train_file}")

    raw: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    unlabeled: list[str] = []
    for name in SPLIT_NAMES:
        f = root / f"{name}.{format}"
        if not f.is_file():
            continue
        for line_no, text, label in _read_records(f, format):
            if label is None:
                unlabeled.append(text)
            elif name == "unlabeled":
                # labels in the unlabeled file are dropped on purpose
                unlabeled.append(text)
            else:
                raw[name].append((text, label, f, line_no))

    train_labels = {_label_key(lab) for _, lab, _, _ in raw["train"]}
    if all(isinstance(lab, int) for _, lab, _, _ in raw["train"]):
        label_names = sorted(train_labels, key=int)
    else:
        label_names = sorted(train_labels)
    index = {name: i for i, name in enumerate(label_names)}

    def convert(split):
        out = []
        for text, label, f, line_no in raw[split]:
            key = _label_key(label)
            if key not in index:
                raise LabelError(f"{f}:{line_no}: label {label!r} not seen in train split")
            out.append((text, index[key]))
        return out

    return CorpusSplit(
        train=convert("train"),
        validation=convert("valid"),
        test=convert("test"),
        unlabeled_pool=unlabeled,
        label_names=label_names,
    )


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
