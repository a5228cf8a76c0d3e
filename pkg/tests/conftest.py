import json

import pytest
import torch

from attnrobust.data import TokenBatch
from attnrobust.model import AttentionClassifier

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def make_model(V=12, C=2, d=3, m=3, attn=4, score_kind="additive", seed=0):
    model = AttentionClassifier(V, C, embed_dim=d, hidden_dim=m, attn_dim=attn, score_kind=score_kind)
    model = model.to(torch.float64)
    model.reset_parameters(seed)
    return model


def random_batch(B=4, T=5, V=12, C=2, seed=0, labeled=True, min_len=1):
    gen = torch.Generator().manual_seed(seed)
    lengths = torch.randint(min_len, T + 1, (B,), generator=gen)
    lengths[0] = T
    ids = torch.randint(2, V, (B, T), generator=gen)
    mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
    ids = ids.masked_fill(~mask, 0)
    labels = torch.randint(0, C, (B,), generator=gen) if labeled else None
    return TokenBatch(ids, lengths, mask, labels)


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture
def tiny_batch():
    return random_batch()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def desk_config(corpus_dir, **overrides):
    from attnrobust.config import ExperimentConfig

    base = dict(
        corpus_dir=str(corpus_dir),
        embed_dim=16,
        hidden_dim=16,
        attn_dim=16,
        max_len=32,
        max_epochs=4,
        patience=2,
        seeds=(13,),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    from attnrobust.synthetic import write_corpus

    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, n_train=600, n_valid=150, n_test=200, n_unlabeled=300, seed=1)
    return root


@pytest.fixture(scope="session")
def trained_small(small_corpus_dir):
    """A vanilla model trained for a few epochs on the small synthetic corpus."""
    from attnrobust.data import load_corpus
    from attnrobust.training import train

    cfg = desk_config(small_corpus_dir, max_epochs=6)
    return train(cfg, load_corpus(small_corpus_dir))
