import json
import statistics
from pathlib import Path

import pytest

from attnrobust.cli import main
from attnrobust.config import load_config
from attnrobust.errors import ConfigError
from attnrobust.harness import aggregate_seeds, aggregate_sweep
from attnrobust.synthetic import write_corpus

from conftest import read_jsonl


def _toml(path, corpus_dir, out_dir, **extra):
    fields = dict(
        corpus_dir=str(corpus_dir),
        output_dir=str(out_dir),
        embed_dim=8,
        hidden_dim=8,
        attn_dim=8,
        max_len=24,
        max_epochs=2,
        patience=2,
        seeds=[13, 21],
        report_limit=5,
    )
    fields.update(extra)

    def lit(v):
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(lit(x) for x in v) + "]"
        return repr(v)

    path.write_text("".join(f"{k} = {lit(v)}\n" for k, v in fields.items()))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("hc")
    write_corpus(root, n_train=200, n_valid=60, n_test=80, n_unlabeled=100, seed=3)
    return root


@pytest.fixture(scope="module")
def vanilla_run(tmp_path_factory, corpus):
    root = tmp_path_factory.mktemp("vrun")
    cfg = _toml(root / "v.toml", corpus, root / "out")
    assert main(["run", str(cfg)]) == 0
    return root / "out"


def test_run_writes_summary(vanilla_run):
    summary = json.loads((vanilla_run / "summary.json").read_text())
    assert summary["variant"] == "vanilla"
    assert [r["seed"] for r in summary["per_seed"]] == [13, 21]
    for rec in summary["per_seed"]:
        assert 0.0 <= rec["test_acc"] <= 1.0
        assert -1.0 <= rec["mean_tau"] <= 1.0
        seed_dir = vanilla_run / f"seed_{rec['seed']}"
        for name in ("metrics.jsonl", "best.ckpt", "final.ckpt", "reports.jsonl", "heatmaps.html", "agreement.json"):
            assert (seed_dir / name).is_file(), name
        assert len(read_jsonl(seed_dir / "reports.jsonl")) == 80
    assert summary["aggregates"] == aggregate_seeds(summary["per_seed"])


def test_seed_aggregation_oracle():
    per_seed = [{"test_acc": a, "mean_tau": t} for a, t in [(0.8, 0.1), (0.9, 0.3), (0.7, None)]]
    agg = aggregate_seeds(per_seed)
    assert agg["acc_mean"] == pytest.approx(0.8, abs=1e-15)
    assert agg["acc_std"] == pytest.approx(((0.0 + 0.01 + 0.01) / 3) ** 0.5, abs=1e-15)
    assert agg["tau_mean"] == pytest.approx(0.2, abs=1e-15)


def test_run_is_reproducible(tmp_path, corpus, vanilla_run):
    cfg = _toml(tmp_path / "v.toml", corpus, tmp_path / "again")
    assert main(["run", str(cfg)]) == 0
    a = json.loads((vanilla_run / "summary.json").read_text())
    b = json.loads((tmp_path / "again" / "summary.json").read_text())
    assert a["per_seed"] == b["per_seed"] and a["config_hash"] == b["config_hash"]
    for s in (13, 21):
        assert (vanilla_run / f"seed_{s}" / "metrics.jsonl").read_bytes() == (
            tmp_path / "again" / f"seed_{s}" / "metrics.jsonl"
        ).read_bytes()


def test_missing_corpus_is_a_validation_error(tmp_path):
    cfg = _toml(tmp_path / "c.toml", tmp_path / "nowhere", tmp_path / "out")
    assert main(["run", str(cfg)]) == 2
    assert not (tmp_path / "out").exists()


def test_unknown_field_and_bad_variant(tmp_path, corpus):
    assert main(["run", str(_toml(tmp_path / "a.toml", corpus, tmp_path / "o", colour="red"))]) == 2
    assert main(["run", str(_toml(tmp_path / "b.toml", corpus, tmp_path / "o", variant="magic"))]) == 2
    assert main(["run", str(tmp_path / "missing.toml")]) == 2
    assert not (tmp_path / "o").exists()


def test_overrides(tmp_path, corpus):
    cfg_path = _toml(tmp_path / "c.toml", "corpus", tmp_path / "o")
    cfg = load_config(cfg_path, ["--epsilon=2.5", "--variant=word_at", "--seeds=[1, 2, 3]"])
    assert cfg.epsilon == 2.5 and cfg.variant == "word_at" and tuple(cfg.seeds) == (1, 2, 3)
    assert Path(cfg.corpus_dir) == tmp_path / "corpus"
    with pytest.raises(ConfigError):
        load_config(cfg_path, ["--epsilon=-1", "--variant=attention_at"])
    with pytest.raises(ConfigError):
        load_config(cfg_path, ["epsilon=1"])


def test_divergence_exit_code(tmp_path, corpus):
    cfg = _toml(tmp_path / "d.toml", corpus, tmp_path / "o", divergence_threshold=1e-9)
    assert main(["run", str(cfg)]) == 3


def test_sweep_single_epsilon_matches_run(tmp_path, corpus):
    cfg = _toml(tmp_path / "s.toml", corpus, tmp_path / "sweep", variant="attention_at", seeds=[13])
    assert main(["sweep", str(cfg), "--grid", "2"]) == 0
    sweep = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    cfg2 = _toml(tmp_path / "r.toml", corpus, tmp_path / "run", variant="attention_at", seeds=[13], epsilon=2.0)
    assert main(["run", str(cfg2)]) == 0
    run = json.loads((tmp_path / "run" / "summary.json").read_text())
    (cell,) = sweep["per_epsilon"]
    assert cell["acc_mean"] == run["aggregates"]["acc_mean"]
    assert cell["tau_mean"] == run["aggregates"]["tau_mean"]
    assert sweep["robustness"] == 0.0


def test_sweep_rejects_bad_grids(tmp_path, corpus):
    cfg = _toml(tmp_path / "s.toml", corpus, tmp_path / "o")
    assert main(["sweep", str(cfg), "--grid", "1,1"]) == 2
    assert main(["sweep", str(cfg), "--grid", "0,1"]) == 2
    assert main(["sweep", str(cfg), "--grid", ""]) == 2
    assert not (tmp_path / "o").exists()


def test_sweep_aggregation_oracle():
    cells = [
        {"epsilon": 1.0, "seed": 1, "test_acc": 0.9, "mean_tau": 0.2},
        {"epsilon": 1.0, "seed": 2, "test_acc": 0.8, "mean_tau": 0.4},
        {"epsilon": 4.0, "seed": 1, "test_acc": 0.6, "mean_tau": 0.1},
        {"epsilon": 4.0, "seed": 2, "test_acc": 0.5, "mean_tau": 0.1},
    ]
    result = aggregate_sweep([1.0, 4.0], cells)
    means = [0.85, 0.55]
    assert [p["acc_mean"] for p in result.per_epsilon] == pytest.approx(means, abs=1e-15)
    assert result.robustness == pytest.approx(statistics.pstdev(means), abs=1e-15)
    assert result.per_epsilon[0]["tau_mean"] == pytest.approx(0.3, abs=1e-15)


def test_compare_with_self(tmp_path, vanilla_run):
    assert main(["compare", str(vanilla_run), str(vanilla_run), "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "compare.json").read_text())
    (pair,) = result["paired"]
    assert all(d["acc_diff"] == 0.0 and d["tau_diff"] == 0.0 for d in pair["per_seed"])
    assert (tmp_path / "compare.html").is_file()


def test_compare_three_runs(tmp_path, corpus, vanilla_run):
    runs = [vanilla_run]
    for variant in ("attention_at", "attention_vat"):
        cfg = _toml(tmp_path / f"{variant}.toml", corpus, tmp_path / variant, variant=variant)
        assert main(["run", str(cfg)]) == 0
        runs.append(tmp_path / variant)
    assert main(["compare", *map(str, runs), "--out", str(tmp_path / "cmp")]) == 0
    result = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    summaries = [json.loads((r / "summary.json").read_text()) for r in runs]
    for row, s in zip(result["rows"], summaries):
        assert row["variant"] == s["variant"]
        assert row["acc_mean"] == s["aggregates"]["acc_mean"]
        assert row["tau_std"] == s["aggregates"]["tau_std"]
    base = {r["seed"]: r for r in summaries[0]["per_seed"]}
    for pair, s in zip(result["paired"], summaries[1:]):
        for d, r in zip(pair["per_seed"], s["per_seed"]):
            assert d["acc_diff"] == r["test_acc"] - base[r["seed"]]["test_acc"]
            assert d["tau_diff"] == r["mean_tau"] - base[r["seed"]]["mean_tau"]


def test_compare_rejects_mixed_corpora(tmp_path, vanilla_run):
    other = tmp_path / "corpus2"
    write_corpus(other, n_train=200, n_valid=60, n_test=80, n_unlabeled=0, seed=4)
    cfg = _toml(tmp_path / "o.toml", other, tmp_path / "run2", seeds=[13], max_epochs=1)
    assert main(["run", str(cfg)]) == 0
    assert main(["compare", str(vanilla_run), str(tmp_path / "run2"), "--out", str(tmp_path / "cmp")]) == 2
    assert not (tmp_path / "cmp").exists()


def test_report_rerenders_identically(vanilla_run):
    before = {p: p.read_bytes() for p in vanilla_run.glob("seed_*/heatmaps.html")}
    assert main(["report", str(vanilla_run)]) == 0
    assert before and all(p.read_bytes() == b for p, b in before.items())


def test_report_on_empty_dir(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_synth_command(tmp_path):
    assert main(["synth", str(tmp_path / "c"), "--n-train", "10", "--n-valid", "2", "--n-test", "2", "--n-unlabeled", "3"]) == 0
    assert len((tmp_path / "c" / "train.jsonl").read_text().splitlines()) == 10
    assert len((tmp_path / "c" / "unlabeled.jsonl").read_text().splitlines()) == 3
