"""Desk-scale experiment harness: synthetic matching task, Adam training
loop with early stopping, ablation runner, heatmap export, and latency
measurement. Every run writes config echo, metrics.csv and report.json
into its own run directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .matcher import ExamplePair, SiameseModel, cross_entropy, pad_batch
from .tensor import Tensor


# ---------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------

@dataclass
class GenConfig:
    vocab_size: int = 100
    max_len: int = 12
    min_len: int = 6
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    key_len: int = 5
    synonym_rate: float = 0.35
    distractor_rate: float = 1.0
    scramble_rate: float = 0.0
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2 * self.key_len + 2:
            raise ValueError("vocab too small for the planted task")
        if self.max_len < self.key_len or self.min_len < self.key_len:
            raise ValueError("sequences must fit the planted key n-gram")


@dataclass
class TrainConfig:
    D: int = 32
    n_labels: int = 2
    block: str = "none"            # none | fa | sfa
    r: int = 1
    r1: int = 2
    r2: int = 1
    branches: int = 2
    ablation: B.AblationFlags = field(default_factory=B.AblationFlags)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 45
    patience: int = 14
    seed_init: int = 0
    seed_shuffle: int = 0
    precision: str = "float32"
    allow_bottleneck_violation: bool = False
    log_base: str = "e"

    def validate(self, max_len: int):
        if self.block not in ("none", "fa", "sfa"):
            raise ValueError(f"unknown block {self.block!r}")
        if self.block == "sfa" and not self.allow_bottleneck_violation \
                and not self.ablation.disable_ae:
            rep = B.check_bottleneck(self.D, self.r, self.r1, self.r2,
                                     max_len, self.log_base)
            if not rep.ok:
                raise ValueError(
                    f"bottleneck constraint violated: {rep.quantities} vs "
                    f"threshold {rep.threshold:.2f}; override to proceed")


def config_from_dict(doc: dict):
    gen = GenConfig(**doc.get("data", {}))
    gen.validate()
    tr_doc = dict(doc.get("model", {}))
    tr_doc.update(doc.get("train", {}))
    flags = B.AblationFlags(**doc.get("ablation", {}))
    cfg = TrainConfig(ablation=flags, **tr_doc)
    cfg.validate(gen.max_len)
    return gen, cfg


def config_to_dict(gen: GenConfig, cfg: TrainConfig) -> dict:
    doc = {"data": asdict(gen), "ablation": vars(cfg.ablation)}
    train = asdict(cfg)
    train.pop("ablation")
    doc["model"] = {k: train.pop(k) for k in
                    ("D", "n_labels", "block", "r", "r1", "r2", "branches")}
    doc["train"] = train
    return doc


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Apply `a.b.c=value` overrides; unknown keys are an error."""
    doc = json.loads(json.dumps(doc))
    for ov in overrides:
        if "=" not in ov:
            raise KeyError(f"override {ov!r} is not key=value")
        path, raw = ov.split("=", 1)
        keys = path.split(".")
        cur = doc
        for k in keys[:-1]:
            if not isinstance(cur, dict) or k not in cur:
                raise KeyError(f"unknown config key {path!r}")
            cur = cur[k]
        leaf = keys[-1]
        if not isinstance(cur, dict) or leaf not in cur:
            raise KeyError(f"unknown config key {path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cur[leaf] = value
    return doc


# ---------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------

@dataclass
class Dataset:
    train: list
    dev: list
    test: list
    vocab_size: int
    max_len: int

    def token_text(self, tid: int) -> str:
        return f"w{tid}"


def _synonym(tid: int, vocab_size: int) -> int:
    # ids 1..V-1 are paired (1,2), (3,4), ...; the partner is the synonym
    if tid % 2 == 1:
        partner = tid + 1
    else:
        partner = tid - 1
    return partner if 1 <= partner < vocab_size else tid


def _make_pair(rng: np.random.Generator, cfg: GenConfig, label: int) -> ExamplePair:
    V = cfg.vocab_size

    def rand_tokens(n):
        return rng.integers(1, V, size=n).tolist()

    def plant(length, key):
        toks = rand_tokens(length)
        pos = int(rng.integers(0, length - len(key) + 1))
        toks[pos:pos + len(key)] = key
        return toks

    la = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    lb = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    key = rand_tokens(cfg.key_len)
    if label == 1:
        key_b = [_synonym(t, V) if rng.random() < cfg.synonym_rate else t
                 for t in key]
        return ExamplePair(plant(la, key), plant(lb, key_b), 1)
    # negative: the second sentence carries a scrambled key (same tokens,
    # different order), a fresh distractor n-gram, or pure noise
    if cfg.scramble_rate > 0 and rng.random() < cfg.scramble_rate \
            and len(set(key)) > 1:
        other = key[:]
        while other == key:
            other = [other[i] for i in rng.permutation(len(other))]
        toks_b = plant(lb, other)
    elif rng.random() < cfg.distractor_rate:
        other = rand_tokens(cfg.key_len)
        while other == key:
            other = rand_tokens(cfg.key_len)
        toks_b = plant(lb, other)
    else:
        toks_b = rand_tokens(lb)
    return ExamplePair(plant(la, key), toks_b, 0)


def generate_dataset(cfg: GenConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    def split(n):
        labels = ([1] * (n // 2) + [0] * (n - n // 2))
        return [_make_pair(rng, cfg, lab) for lab in labels]

    return Dataset(train=split(cfg.n_train), dev=split(cfg.n_dev),
                   test=split(cfg.n_test), vocab_size=cfg.vocab_size,
                   max_len=cfg.max_len)


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    final_test_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    param_counts: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(examples, batch_size, max_len):
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        ids_a, mask_a = pad_batch([e.tokens_a for e in chunk], max_len)
        ids_b, mask_b = pad_batch([e.tokens_b for e in chunk], max_len)
        labels = np.array([e.label for e in chunk], dtype=np.int64)
        yield ids_a, mask_a, ids_b, mask_b, labels


def evaluate(model: SiameseModel, examples, max_len, batch_size=64):
    total_loss, correct, n = 0.0, 0, 0
    with T.no_grad():
        for ids_a, mask_a, ids_b, mask_b, labels in _batches(
                examples, batch_size, max_len):
            probs = model.forward(ids_a, mask_a, ids_b, mask_b)
            total_loss += cross_entropy(probs, labels).item() * len(labels)
            correct += int((probs.data.argmax(axis=-1) == labels).sum())
            n += len(labels)
    return total_loss / n, correct / n


def build_model(gen: GenConfig, cfg: TrainConfig) -> SiameseModel:
    return SiameseModel(gen.vocab_size, cfg.D, cfg.n_labels, block=cfg.block,
                        r=cfg.r, r1=cfg.r1, r2=cfg.r2, branches=cfg.branches,
                        flags=cfg.ablation, seed=cfg.seed_init)


def train(gen: GenConfig, cfg: TrainConfig, data: Dataset,
          run_dir: Optional[str] = None) -> RunReport:
    cfg.validate(gen.max_len)
    report = RunReport(config=config_to_dict(gen, cfg))
    with T.precision(cfg.precision):
        model = build_model(gen, cfg)
        report.param_counts = model.param_count()
        opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        shuffle_rng = np.random.default_rng(cfg.seed_shuffle)

        best_dev_loss = float("inf")
        best_dev_acc = -1.0
        best_state = None
        best_epoch = -1
        since_best = 0
        order = np.arange(len(data.train))

        for epoch in range(cfg.epochs):
            shuffle_rng.shuffle(order)
            examples = [data.train[i] for i in order]
            epoch_loss, seen = 0.0, 0
            for batch in _batches(examples, cfg.batch_size, gen.max_len):
                ids_a, mask_a, ids_b, mask_b, labels = batch
                model.zero_grads()
                probs = model.forward(ids_a, mask_a, ids_b, mask_b)
                loss = cross_entropy(probs, labels)
                lval = loss.item()
                if not np.isfinite(lval):
                    report.aborted = True
                    report.abort_reason = f"non-finite loss at epoch {epoch}"
                    break
                T.backward(loss)
                opt.step()
                epoch_loss += lval * len(labels)
                seen += len(labels)
            if report.aborted:
                break
            dev_loss, dev_acc = evaluate(model, data.dev, gen.max_len)
            report.epochs.append({"epoch": epoch,
                                  "train_loss": epoch_loss / seen,
                                  "dev_loss": dev_loss, "dev_acc": dev_acc})
            # checkpoint on dev accuracy; stop once neither dev metric improves
            improved = False
            if dev_acc > best_dev_acc:
                best_dev_acc = dev_acc
                best_state = {k: p.data.copy()
                              for k, p in model.parameters().items()}
                best_epoch = epoch
                improved = True
            if dev_loss < best_dev_loss:
                best_dev_loss = dev_loss
                improved = True
            if improved:
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break

        if best_state is not None:
            for k, p in model.parameters().items():
                p.data = best_state[k]
        report.best_epoch = best_epoch
        if not report.aborted:
            _, test_acc = evaluate(model, data.test, gen.max_len)
            report.final_test_accuracy = test_acc
            report.latency = measure_latency(model, data.test, gen.max_len,
                                             repeats=10)
            if cfg.block == "sfa" and not cfg.ablation.disable_selection:
                suite = run_gradcheck_suite_summary()
                report.gradcheck = suite

        if run_dir is not None:
            write_run_outputs(run_dir, report, model)
    return report


def run_dir_name(doc: dict, root: str) -> str:
    digest = hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join(root, f"{digest}-{stamp}")


def write_run_outputs(run_dir: str, report: RunReport,
                      model: Optional[SiameseModel] = None) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(report.config, f, indent=2)
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "dev_loss", "dev_acc"])
        for row in report.epochs:
            w.writerow([row["epoch"], repr(row["train_loss"]),
                        repr(row["dev_loss"]), repr(row["dev_acc"])])
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    if model is not None:
        model.save_checkpoint(os.path.join(run_dir, "checkpoint.json"))


# ---------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------

_ABLATION_FLAGS = {"ae": "disable_ae", "gmp": "disable_gmp",
                   "gap": "disable_gap", "selection": "disable_selection"}


def run_ablation(gen: GenConfig, cfg: TrainConfig, data: Dataset,
                 components, run_dir: Optional[str] = None) -> dict:
    """Train the full SFA control plus one run per removed component."""
    components = list(components)
    unknown = [c for c in components if c not in _ABLATION_FLAGS]
    if unknown:
        raise ValueError(f"unknown ablation components {unknown}")
    if len(set(components)) != len(components):
        raise ValueError("duplicate ablation components")

    results = {}
    runs = [("control", B.AblationFlags())]
    for c in components:
        runs.append((f"no_{c}", B.AblationFlags(**{_ABLATION_FLAGS[c]: True})))
    for name, flags in runs:
        variant = TrainConfig(**{**asdict(cfg), "ablation": flags})
        # removing the auto encoder changes valid dims; skip the gate there
        if flags.disable_ae or flags.disable_selection:
            variant.allow_bottleneck_violation = cfg.allow_bottleneck_violation
        sub_dir = os.path.join(run_dir, name) if run_dir else None
        results[name] = train(gen, variant, data, run_dir=sub_dir)
    summary = {
        name: {"test_accuracy": rep.final_test_accuracy,
               "best_epoch": rep.best_epoch,
               "dev_loss_curve": [e["dev_loss"] for e in rep.epochs]}
        for name, rep in results.items()}
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "ablation_summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
        with open(os.path.join(run_dir, "ablation_curves.csv"), "w",
                  newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "epoch", "dev_loss", "dev_acc"])
            for name, rep in results.items():
                for e in rep.epochs:
                    w.writerow([name, e["epoch"], repr(e["dev_loss"]),
                                repr(e["dev_acc"])])
    return {"reports": results, "summary": summary}


# ---------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------

def export_heatmap(model: SiameseModel, pair: ExamplePair, max_len: int,
                   path: Optional[str] = None,
                   token_text=None) -> np.ndarray:
    """Feature-averaged dot products of the post-block representations.

    M[i, j] = (1/D) * sum_d u[i, d] * v[j, d] over the unpadded tokens.
    """
    token_text = token_text or (lambda t: f"w{t}")
    ids_a, mask_a = pad_batch([pair.tokens_a], max_len)
    ids_b, mask_b = pad_batch([pair.tokens_b], max_len)
    with T.no_grad():
        u, v = model.post_block_reps(ids_a, mask_a, ids_b, mask_b)
    la, lb = len(pair.tokens_a), len(pair.tokens_b)
    U = u.data[0, :la, :]
    V = v.data[0, :lb, :]
    M = U @ V.T / model.D
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + [token_text(t) for t in pair.tokens_b])
            for i, t in enumerate(pair.tokens_a):
                w.writerow([token_text(t)] + [repr(x) for x in M[i]])
    return M


def run_gradcheck_suite_summary() -> dict:
    """Condensed gradient-flow suite result attached to training reports."""
    from . import gradflow
    results = gradflow.run_gradcheck_suite(D=8, L=4, N=2, seeds=1)
    fd_errors = [c["fd_error"] for c in results["checks"]
                 if c["fd_error"] is not None]
    return {"passed": results["passed"],
            "max_fd_error": max(fd_errors) if fd_errors else None,
            "checks": len(results["checks"])}


# ---------------------------------------------------------------------
# bag-of-words probe
# ---------------------------------------------------------------------

def bow_probe(data: Dataset, steps: int = 300, lr: float = 0.5,
              seed: int = 0) -> dict:
    """Linear logistic probe on concatenated token-count vectors.

    A pure bag-of-words model sees each sentence's counts but no token
    interactions, so it measures how much of the task leaks through
    unigram statistics alone. Returns train/dev accuracy.
    """
    V = data.vocab_size

    def featurize(examples):
        X = np.zeros((len(examples), 2 * V))
        y = np.zeros(len(examples), dtype=np.int64)
        for i, ex in enumerate(examples):
            np.add.at(X[i], np.asarray(ex.tokens_a), 1.0)
            np.add.at(X[i], V + np.asarray(ex.tokens_b), 1.0)
            y[i] = ex.label
        return X, y

    Xtr, ytr = featurize(data.train)
    Xdev, ydev = featurize(data.dev)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=2 * V)
    b = 0.0
    n = len(ytr)
    for _ in range(steps):
        z = Xtr @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        g = p - ytr
        w -= lr * (Xtr.T @ g) / n
        b -= lr * g.mean()

    def acc(X, y):
        return float(((X @ w + b > 0).astype(np.int64) == y).mean())

    return {"train_accuracy": acc(Xtr, ytr), "dev_accuracy": acc(Xdev, ydev)}


# ---------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------

def measure_latency(model: SiameseModel, examples, max_len: int,
                    repeats: int = 20, warmup: int = 3) -> dict:
    """Per-sentence-pair forward latency, single pair at a time."""
    pairs = examples[:repeats] if len(examples) >= repeats else \
        [examples[i % len(examples)] for i in range(repeats)]
    times = []
    with T.no_grad():
        for i, pair in enumerate([pairs[0]] * warmup + list(pairs)):
            ids_a, mask_a = pad_batch([pair.tokens_a], max_len)
            ids_b, mask_b = pad_batch([pair.tokens_b], max_len)
            t0 = time.perf_counter()
            model.forward(ids_a, mask_a, ids_b, mask_b)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    times_ms = np.array(times) * 1e3
    return {"mean_ms": float(times_ms.mean()),
            "median_ms": float(np.median(times_ms)),
            "repeats": repeats,
            "hardware": f"{platform.machine()} / {platform.processor() or 'unknown'}"
                        f" / python {platform.python_version()}"}
