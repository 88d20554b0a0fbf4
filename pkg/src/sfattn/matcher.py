"""Reference Siamese matcher: dual encoder, word-level interaction
attention, per-branch feature block (none / fa / sfa, parameters never
shared between branches), pooled classifier.

All forward paths are batched: token ids come in as (B, L) int arrays
with boolean masks of the same shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import Tensor

_NEG_BIG = -1e30


@dataclass
class ExamplePair:
    tokens_a: list
    tokens_b: list
    label: int

    def __post_init__(self):
        if len(self.tokens_a) < 1 or len(self.tokens_b) < 1:
            raise ValueError("sentences must be non-empty")


def pad_batch(seqs: list, max_len: int):
    """Pad id sequences to (B, max_len) plus a boolean validity mask."""
    B_ = len(seqs)
    ids = np.zeros((B_, max_len), dtype=np.int64)
    mask = np.zeros((B_, max_len), dtype=bool)
    for i, s in enumerate(seqs):
        L = len(s)
        if L > max_len:
            raise ValueError(f"sequence of length {L} exceeds max_len {max_len}")
        ids[i, :L] = s
        mask[i, :L] = True
    return ids, mask


class SiameseModel:
    """Embedding + context BiGRU + interaction attention + feature blocks
    + MLP classifier. The two feature blocks are structurally identical
    but parameter-distinct."""

    def __init__(self, vocab_size: int, D: int, n_labels: int,
                 block: str = "none", r: int = 1, r1: int = 2, r2: int = 1,
                 branches: int = 2, flags: Optional[B.AblationFlags] = None,
                 seed: int = 0):
        if D % 2 != 0:
            raise ValueError("D must be even (bidirectional context encoder)")
        rng = np.random.default_rng(seed)
        self.V = vocab_size
        self.D = D
        self.n_labels = n_labels
        self.block_kind = block
        self.flags = flags or B.AblationFlags()

        self.embedding = T.uniform((vocab_size, D), -0.1, 0.1, seed=rng,
                                   requires_grad=True)
        self.ctx = B.GruLayerParams.create(D, D // 2, rng)
        self.proj_x_w = B.glorot(rng, (4 * D, D), 4 * D, D)
        self.proj_x_b = T.zeros((D,), requires_grad=True)
        self.proj_y_w = B.glorot(rng, (4 * D, D), 4 * D, D)
        self.proj_y_b = T.zeros((D,), requires_grad=True)

        if block == "none":
            self.block_x = self.block_y = None
        elif block == "fa":
            self.block_x = B.FaParams.create(D, r, rng)
            self.block_y = B.FaParams.create(D, r, rng)
        elif block == "sfa":
            self.block_x = B.SfaParams.create(D, r1, r2, branches, rng, self.flags)
            self.block_y = B.SfaParams.create(D, r1, r2, branches, rng, self.flags)
        else:
            raise ValueError(f"unknown block kind {block!r}")

        # pooled features: [mean; max] per sentence, then [pu; pv; |pu-pv|; pu*pv]
        feat = 8 * D
        self.cls_w1 = B.glorot(rng, (feat, D), feat, D)
        self.cls_b1 = T.zeros((D,), requires_grad=True)
        self.cls_w2 = B.glorot(rng, (D, n_labels), D, n_labels)
        self.cls_b2 = T.zeros((n_labels,), requires_grad=True)

    # -- parameters ------------------------------------------------------
    def parameters(self) -> dict:
        out = {"embedding": self.embedding}
        for k, v in self.ctx.parameters().items():
            out[f"ctx.{k}"] = v
        out.update({"proj_x.w": self.proj_x_w, "proj_x.b": self.proj_x_b,
                    "proj_y.w": self.proj_y_w, "proj_y.b": self.proj_y_b})
        for tag, blk in (("block_x", self.block_x), ("block_y", self.block_y)):
            if blk is not None:
                for k, v in blk.parameters().items():
                    out[f"{tag}.{k}"] = v
        out.update({"cls.w1": self.cls_w1, "cls.b1": self.cls_b1,
                    "cls.w2": self.cls_w2, "cls.b2": self.cls_b2})
        return out

    def base_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items()
                if not k.startswith("block_")}

    def param_count(self) -> dict:
        base = sum(v.size for v in self.base_parameters().values())
        added = sum(v.size for k, v in self.parameters().items()
                    if k.startswith("block_"))
        return {"base": base, "block_added": added,
                "percent_added": 100.0 * added / base}

    def zero_grads(self):
        T.zero_grads(self.parameters().values())

    # -- forward stages ----------------------------------------------------
    def embed_encode(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        emb = T.gather_rows(self.embedding, ids)            # (B, L, D)
        mf = mask.astype(np.float64)[:, :, None]
        enc = B.bigru(emb, self.ctx, mf)                    # (B, L, D)
        return T.mul(enc, Tensor(mf))                       # zero the pad rows

    def _apply_block(self, x: Tensor, blk, mask: np.ndarray) -> Tensor:
        if blk is None:
            return x
        if self.block_kind == "fa":
            return B.fa_forward(x, blk, mask)
        return B.sfa_forward(x, blk, mask, self.flags)

    def interaction_attention(self, a: Tensor, b: Tensor,
                              mask_a: np.ndarray, mask_b: np.ndarray):
        """ESIM-style soft alignment followed by per-branch projection."""
        e = T.matmul(a, T.transpose(b, (0, 2, 1)))          # (B, La, Lb)
        keep_b = np.broadcast_to(mask_b[:, None, :], e.shape)
        keep_a = np.broadcast_to(mask_a[:, :, None], e.shape)

        attn_ab = T.softmax(T.masked_fill(e, keep_b, _NEG_BIG), axis=-1)
        a_tilde = T.matmul(attn_ab, b)                      # (B, La, D)
        attn_ba = T.softmax(T.masked_fill(e, keep_a, _NEG_BIG), axis=-2)
        b_tilde = T.matmul(T.transpose(attn_ba, (0, 2, 1)), a)  # (B, Lb, D)

        def enhance(h, ht, w, bias):
            cat = T.concat([h, ht, T.sub(h, ht), T.mul(h, ht)], axis=-1)
            return T.tanh(B.ae_project(cat, w, bias))

        x = enhance(a, a_tilde, self.proj_x_w, self.proj_x_b)
        y = enhance(b, b_tilde, self.proj_y_w, self.proj_y_b)
        return x, y

    def classify(self, u: Tensor, v: Tensor,
                 mask_a: np.ndarray, mask_b: np.ndarray) -> Tensor:
        def pool(h, mask):
            mf = mask.astype(np.float64)[:, :, None]
            mean = B.masked_mean_positions(h, mf)
            mx = B.masked_max_positions(h, mf)
            p = T.concat([mean, mx], axis=-1)               # (B, 1, 2D)
            return T.reshape(p, (p.shape[0], p.shape[2]))

        pu, pv = pool(u, mask_a), pool(v, mask_b)
        feats = T.concat([pu, pv, T.absolute(T.sub(pu, pv)), T.mul(pu, pv)], axis=-1)
        h = T.tanh(T.add(T.matmul(feats, self.cls_w1), self.cls_b1))
        logits = T.add(T.matmul(h, self.cls_w2), self.cls_b2)
        return T.softmax(logits, axis=-1)

    def post_block_reps(self, ids_a, mask_a, ids_b, mask_b):
        a = self.embed_encode(ids_a, mask_a)
        b = self.embed_encode(ids_b, mask_b)
        x, y = self.interaction_attention(a, b, mask_a, mask_b)
        u = self._apply_block(x, self.block_x, mask_a)
        v = self._apply_block(y, self.block_y, mask_b)
        return u, v

    def forward(self, ids_a, mask_a, ids_b, mask_b) -> Tensor:
        u, v = self.post_block_reps(ids_a, mask_a, ids_b, mask_b)
        return self.classify(u, v, mask_a, mask_b)

    # -- checkpoints -------------------------------------------------------
    CHECKPOINT_VERSION = 1

    def config_dict(self) -> dict:
        blk = {}
        if self.block_kind == "fa":
            blk = {"r": self.block_x.r}
        elif self.block_kind == "sfa":
            blk = {"r1": self.block_x.r1, "r2": self.block_x.r2,
                   "branches": self.block_x.N}
        return {"vocab_size": self.V, "D": self.D, "n_labels": self.n_labels,
                "block": self.block_kind,
                "flags": vars(self.flags), **blk}

    def save_checkpoint(self, path: str) -> None:
        doc = {"version": self.CHECKPOINT_VERSION,
               "config": self.config_dict(),
               "params": {k: {"shape": list(v.shape),
                              "data": v.data.astype(np.float64).ravel().tolist()}
                          for k, v in self.parameters().items()}}
        with open(path, "w") as f:
            json.dump(doc, f)

    def load_checkpoint(self, path: str) -> None:
        with open(path) as f:
            doc = json.load(f)
        if doc.get("version") != self.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        params = self.parameters()
        missing = set(params) - set(doc["params"])
        extra = set(doc["params"]) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing}, extra={extra}")
        for k, v in params.items():
            entry = doc["params"][k]
            arr = np.array(entry["data"], dtype=v.data.dtype).reshape(entry["shape"])
            if arr.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")
            v.data = arr

    @classmethod
    def from_checkpoint(cls, path: str) -> "SiameseModel":
        with open(path) as f:
            doc = json.load(f)
        cfg = doc["config"]
        flags = B.AblationFlags(**cfg.get("flags", {}))
        model = cls(cfg["vocab_size"], cfg["D"], cfg["n_labels"],
                    block=cfg["block"], r=cfg.get("r", 1), r1=cfg.get("r1", 2),
                    r2=cfg.get("r2", 1), branches=cfg.get("branches", 2),
                    flags=flags)
        model.load_checkpoint(path)
        return model


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; labels is an int or (B,) int array."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B_, K = probs.shape[-2], probs.shape[-1]
    if labels.size != B_:
        raise ValueError(f"{labels.size} labels for batch of {B_}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    onehot = np.zeros((B_, K))
    onehot[np.arange(B_), labels] = 1.0
    picked = T.reduce("sum", T.mul(T.log(probs), Tensor(onehot)), axis=-1,
                      keepdims=False)
    total = T.reduce("sum", picked, axis=0, keepdims=False)
    return T.scale(total, -1.0 / B_)


def loss(probs: Tensor, label: int) -> Tensor:
    """Single-pair cross-entropy over a (1, K) probability row."""
    if probs.ndim == 1:
        probs = T.reshape(probs, (1,) + probs.shape)
    return cross_entropy(probs, [label])
