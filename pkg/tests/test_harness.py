import csv
import json
import os

import numpy as np
import pytest

from sfattn import blocks as B
from sfattn import harness as H
from sfattn.matcher import ExamplePair, SiameseModel


def small_gen(**kw):
    defaults = dict(vocab_size=40, max_len=8, min_len=5, n_train=60,
                    n_dev=30, n_test=30, key_len=3, seed=0)
    defaults.update(kw)
    return H.GenConfig(**defaults)


def small_cfg(**kw):
    defaults = dict(D=8, block="none", epochs=2, batch_size=16,
                    precision="float64")
    defaults.update(kw)
    return H.TrainConfig(**defaults)


# ----------------------------------------------------------------- configs

def test_gen_config_validation():
    with pytest.raises(ValueError):
        H.GenConfig(vocab_size=5, key_len=4).validate()
    with pytest.raises(ValueError):
        H.GenConfig(max_len=2, min_len=2, key_len=3).validate()


def test_train_config_bottleneck_gate():
    cfg = H.TrainConfig(D=8, block="sfa", r1=4, r2=2)
    with pytest.raises(ValueError):
        cfg.validate(max_len=12)
    cfg.allow_bottleneck_violation = True
    cfg.validate(max_len=12)  # override lets it through


def test_config_roundtrip():
    gen, cfg = small_gen(), small_cfg(block="sfa", r1=2, branches=2,
                                      allow_bottleneck_violation=True)
    doc = H.config_to_dict(gen, cfg)
    gen2, cfg2 = H.config_from_dict(doc)
    assert gen2 == gen
    assert H.config_to_dict(gen2, cfg2) == doc


def test_overrides_applied_and_unknown_rejected():
    doc = H.config_to_dict(small_gen(), small_cfg())
    out = H.apply_overrides(doc, ["model.D=64", "train.lr=0.01",
                                  "data.seed=3"])
    assert out["model"]["D"] == 64
    assert out["train"]["lr"] == 0.01
    assert doc["model"]["D"] == 8  # original untouched
    with pytest.raises(KeyError):
        H.apply_overrides(doc, ["model.bogus=1"])
    with pytest.raises(KeyError):
        H.apply_overrides(doc, ["model.D"])


def test_overrides_last_one_wins():
    doc = H.config_to_dict(small_gen(), small_cfg())
    out = H.apply_overrides(doc, ["model.D=16", "model.D=32"])
    assert out["model"]["D"] == 32


# ----------------------------------------------------------------- dataset

def test_dataset_deterministic():
    a = H.generate_dataset(small_gen())
    b = H.generate_dataset(small_gen())
    for x, y in zip(a.train + a.dev + a.test, b.train + b.dev + b.test):
        assert x == y


def test_dataset_label_balance():
    data = H.generate_dataset(small_gen(n_train=101))
    labels = [e.label for e in data.train]
    assert abs(labels.count(1) - labels.count(0)) <= 1


def test_positive_pairs_share_key_ngram():
    gen = small_gen(synonym_rate=0.0, n_train=40)
    data = H.generate_dataset(gen)
    for ex in data.train:
        if ex.label != 1:
            continue
        grams_a = {tuple(ex.tokens_a[i:i + gen.key_len])
                   for i in range(len(ex.tokens_a) - gen.key_len + 1)}
        grams_b = {tuple(ex.tokens_b[i:i + gen.key_len])
                   for i in range(len(ex.tokens_b) - gen.key_len + 1)}
        assert grams_a & grams_b


def test_synonym_partner_mapping():
    assert H._synonym(3, 40) == 4
    assert H._synonym(4, 40) == 3
    assert H._synonym(39, 40) == 39  # partner would leave the vocabulary


def test_lengths_within_bounds_and_no_pad_id():
    gen = small_gen()
    data = H.generate_dataset(gen)
    for ex in data.train:
        for toks in (ex.tokens_a, ex.tokens_b):
            assert gen.min_len <= len(toks) <= gen.max_len
            assert 0 not in toks


def test_bow_probe_stays_weak():
    data = H.generate_dataset(H.GenConfig(
        n_train=400, n_dev=200, n_test=50, key_len=5, synonym_rate=0.3))
    result = H.bow_probe(data)
    assert result["dev_accuracy"] < 0.85


# ---------------------------------------------------------------- training

def test_zero_lr_leaves_parameters_unchanged():
    gen = small_gen()
    data = H.generate_dataset(gen)
    cfg = small_cfg(lr=0.0, epochs=1)
    model = H.build_model(gen, cfg)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    report = H.train(gen, cfg, data)
    # rebuild identically and confirm nothing would have moved
    model2 = H.build_model(gen, cfg)
    opt = H.Adam(model2.parameters(), lr=0.0)
    for k, p in model2.parameters().items():
        p.grad = np.ones_like(p.data)
    opt.step()
    for k, p in model2.parameters().items():
        np.testing.assert_array_equal(p.data, before[k])
    assert not report.aborted


def test_one_epoch_smoke():
    gen = small_gen(n_train=50)
    data = H.generate_dataset(gen)
    report = H.train(gen, small_cfg(epochs=1), data)
    assert len(report.epochs) == 1
    assert np.isfinite(report.epochs[0]["train_loss"])
    assert report.final_test_accuracy is not None
    assert "median_ms" in report.latency


def test_training_reduces_loss():
    gen = small_gen(n_train=200, n_dev=60)
    data = H.generate_dataset(gen)
    report = H.train(gen, small_cfg(epochs=6), data)
    assert report.epochs[-1]["train_loss"] < report.epochs[0]["train_loss"]


def test_train_determinism():
    gen = small_gen()
    data = H.generate_dataset(gen)
    r1 = H.train(gen, small_cfg(epochs=2), data)
    r2 = H.train(gen, small_cfg(epochs=2), data)
    assert r1.epochs == r2.epochs
    assert r1.final_test_accuracy == r2.final_test_accuracy


def test_divergence_flagged_not_raised():
    gen = small_gen(n_train=40)
    data = H.generate_dataset(gen)
    report = H.train(gen, small_cfg(lr=1e12, epochs=3), data)
    assert report.aborted and "non-finite" in report.abort_reason


def test_run_outputs_written(tmp_path):
    gen = small_gen(n_train=40)
    data = H.generate_dataset(gen)
    run_dir = str(tmp_path / "run")
    H.train(gen, small_cfg(epochs=1), data, run_dir=run_dir)
    for name in ("config.json", "metrics.csv", "report.json",
                 "checkpoint.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, "metrics.csv")) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_loss", "dev_loss", "dev_acc"]
    assert len(rows) == 2
    with open(os.path.join(run_dir, "report.json")) as f:
        rep = json.load(f)
    assert rep["config"]["model"]["D"] == 8
    assert rep["param_counts"]["block_added"] == 0


def test_best_checkpoint_restored():
    gen = small_gen(n_train=120)
    data = H.generate_dataset(gen)
    cfg = small_cfg(epochs=4)
    report = H.train(gen, cfg, data)
    best = max(report.epochs, key=lambda e: e["dev_acc"])
    assert report.best_epoch == best["epoch"]


def test_sfa_run_records_gradcheck_summary():
    gen = small_gen(n_train=40)
    data = H.generate_dataset(gen)
    cfg = small_cfg(block="sfa", r1=2, r2=1, branches=2, epochs=1,
                    allow_bottleneck_violation=True)
    report = H.train(gen, cfg, data)
    assert report.gradcheck["passed"] is True


# ---------------------------------------------------------------- ablation

def test_ablation_unknown_component():
    gen = small_gen()
    data = H.generate_dataset(gen)
    with pytest.raises(ValueError):
        H.run_ablation(gen, small_cfg(block="sfa"), data, ["bogus"])
    with pytest.raises(ValueError):
        H.run_ablation(gen, small_cfg(block="sfa"), data, ["gap", "gap"])


def test_ablation_empty_subset_is_control_only():
    gen = small_gen(n_train=40)
    data = H.generate_dataset(gen)
    cfg = small_cfg(block="sfa", r1=2, r2=1, epochs=1,
                    allow_bottleneck_violation=True)
    out = H.run_ablation(gen, cfg, data, [])
    assert list(out["reports"]) == ["control"]


def test_ablation_all_components(tmp_path):
    gen = small_gen(n_train=40, n_dev=20, n_test=20)
    data = H.generate_dataset(gen)
    cfg = small_cfg(block="sfa", r1=2, r2=1, epochs=1,
                    allow_bottleneck_violation=True)
    run_dir = str(tmp_path / "abl")
    out = H.run_ablation(gen, cfg, data, ["ae", "gmp", "gap", "selection"],
                         run_dir=run_dir)
    assert set(out["summary"]) == {"control", "no_ae", "no_gmp", "no_gap",
                                   "no_selection"}
    with open(os.path.join(run_dir, "ablation_curves.csv")) as f:
        rows = list(csv.reader(f))
    variants = {r[0] for r in rows[1:]}
    assert len(variants) == 5


# ----------------------------------------------------------------- heatmap

def heat_model():
    return SiameseModel(40, 8, 2, seed=0)


def test_heatmap_shape_matches_unpadded_lengths():
    gen = small_gen()
    pair = ExamplePair([1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11], 1)
    M = H.export_heatmap(heat_model(), pair, gen.max_len)
    assert M.shape == (5, 6)


def test_heatmap_csv_headers(tmp_path):
    pair = ExamplePair([1, 2, 3, 4, 5], [6, 7, 8, 9, 10], 0)
    path = str(tmp_path / "hm.csv")
    H.export_heatmap(heat_model(), pair, 8, path=path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0][1:] == [f"w{t}" for t in pair.tokens_b]
    assert [r[0] for r in rows[1:]] == [f"w{t}" for t in pair.tokens_a]


def test_heatmap_constant_reps():
    # replace post-block reps with all-ones via monkeypatched model
    class Stub:
        D = 4

        def post_block_reps(self, *a):
            from sfattn.tensor import Tensor
            return (Tensor(np.ones((1, 8, 4))), Tensor(np.ones((1, 8, 4))))

    pair = ExamplePair([1, 2, 3], [4, 5], 1)
    M = H.export_heatmap(Stub(), pair, 8)
    np.testing.assert_allclose(M, 1.0)


def test_heatmap_orthogonal_rows_zero():
    class Stub:
        D = 2

        def post_block_reps(self, *a):
            from sfattn.tensor import Tensor
            u = np.zeros((1, 8, 2))
            v = np.zeros((1, 8, 2))
            u[0, :, 0] = 1.0
            v[0, :, 1] = 1.0
            return Tensor(u), Tensor(v)

    M = H.export_heatmap(Stub(), ExamplePair([1, 2], [3], 0), 8)
    np.testing.assert_allclose(M, 0.0)


# ----------------------------------------------------------------- latency

def test_latency_report_fields():
    gen = small_gen(n_train=20, n_dev=10, n_test=10)
    data = H.generate_dataset(gen)
    model = H.build_model(gen, small_cfg())
    stats = H.measure_latency(model, data.test, gen.max_len, repeats=5)
    assert stats["mean_ms"] > 0 and stats["median_ms"] > 0
    assert stats["repeats"] == 5
    assert isinstance(stats["hardware"], str) and stats["hardware"]


def test_run_dir_name_hash_stable():
    doc = H.config_to_dict(small_gen(), small_cfg())
    a = H.run_dir_name(doc, "root")
    b = H.run_dir_name(doc, "root")
    assert os.path.basename(a).split("-")[0] == \
        os.path.basename(b).split("-")[0]
