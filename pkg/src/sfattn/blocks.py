"""Feature-gating blocks for Siamese matchers.

Two shape-preserving mappings over token representations (L x D):

* FA: squeeze token positions into a feature descriptor, push it through
  a bottleneck MLP (tanh then sigmoid), and gate every feature.
* SFA: down-project, split into N semantic scales with a stacked BiGRU,
  fuse, squeeze with combined average+max pooling, excite one gate per
  branch, and recombine branches with a per-feature softmax selection.

Both accept a single sequence (L x D) or a batch (B x L x D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

_NEG_BIG = -1e30


# ---------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return T.uniform(shape, -limit, limit, seed=rng, requires_grad=True)


@dataclass
class AblationFlags:
    disable_ae: bool = False
    disable_gmp: bool = False
    disable_gap: bool = False
    disable_selection: bool = False

    def __post_init__(self):
        if self.disable_gmp and self.disable_gap:
            raise ValueError("cannot disable both poolings; squeeze needs at least one")


@dataclass
class FaParams:
    """Bottleneck gate over D features with decay factor r."""
    D: int
    r: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, D: int, r: int, rng: np.random.Generator) -> "FaParams":
        if r < 1 or D % r != 0:
            raise ValueError(f"decay factor r={r} must divide D={D}")
        dr = D // r
        return cls(
            D=D, r=r,
            w1=glorot(rng, (D, dr), D, dr),
            b1=T.zeros((dr,), requires_grad=True),
            w2=glorot(rng, (dr, D), dr, D),
            b2=T.zeros((D,), requires_grad=True),
        )

    def parameters(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class GruDirParams:
    wz: Tensor
    bz: Tensor
    wr: Tensor
    br: Tensor
    wc: Tensor
    bc: Tensor

    @classmethod
    def create(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "GruDirParams":
        def w():
            return glorot(rng, (in_dim + hidden, hidden),
                          in_dim + hidden, hidden)
        def b():
            return T.zeros((hidden,), requires_grad=True)
        return cls(wz=w(), bz=b(), wr=w(), br=b(), wc=w(), bc=b())

    def parameters(self) -> dict:
        return {"wz": self.wz, "bz": self.bz, "wr": self.wr,
                "br": self.br, "wc": self.wc, "bc": self.bc}


@dataclass
class GruLayerParams:
    in_dim: int
    hidden: int
    fwd: GruDirParams
    bwd: GruDirParams

    @classmethod
    def create(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "GruLayerParams":
        return cls(in_dim=in_dim, hidden=hidden,
                   fwd=GruDirParams.create(in_dim, hidden, rng),
                   bwd=GruDirParams.create(in_dim, hidden, rng))

    def parameters(self) -> dict:
        out = {}
        for tag, p in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in p.parameters().items():
                out[f"{tag}.{k}"] = v
        return out


@dataclass
class SfaParams:
    """Multi-branch selective gate; N branches from an N-layer BiGRU stack."""
    D: int
    r1: int
    r2: int
    N: int
    flags: AblationFlags
    ae_down_w: Optional[Tensor]
    ae_down_b: Optional[Tensor]
    gru_stack: list
    red_w: Tensor
    red_b: Tensor
    exc_w: list
    exc_b: list
    ae_up_w: Optional[Tensor]
    ae_up_b: Optional[Tensor]
    fuse_w: Optional[Tensor] = None
    fuse_b: Optional[Tensor] = None

    @classmethod
    def create(cls, D: int, r1: int, r2: int, N: int, rng: np.random.Generator,
               flags: Optional[AblationFlags] = None) -> "SfaParams":
        flags = flags or AblationFlags()
        if N < 1:
            raise ValueError("branch count N must be >= 1")
        if flags.disable_ae:
            if D % 2 != 0:
                raise ValueError("without the auto encoder, D must be even")
            hidden = D // 2          # branches come out at width D, no re-projection
            gru_in = D
        else:
            if r1 < 1 or D % r1 != 0:
                raise ValueError(f"r1={r1} must divide D={D}")
            hidden = D // r1
            gru_in = hidden
        F = 2 * hidden
        if r2 < 1 or F % r2 != 0:
            raise ValueError(f"r2={r2} must divide the branch width {F}")
        Fr = F // r2

        ae_down_w = ae_down_b = ae_up_w = ae_up_b = None
        if not flags.disable_ae:
            ae_down_w = glorot(rng, (D, hidden), D, hidden)
            ae_down_b = T.zeros((hidden,), requires_grad=True)
        stack = []
        for n in range(N):
            in_dim = gru_in if n == 0 else F
            stack.append(GruLayerParams.create(in_dim, hidden, rng))
        red_w = glorot(rng, (F, Fr), F, Fr)
        red_b = T.zeros((Fr,), requires_grad=True)
        n_exciters = 1 if flags.disable_selection else N
        exc_w = [glorot(rng, (Fr, F), Fr, F) for _ in range(n_exciters)]
        exc_b = [T.zeros((F,), requires_grad=True) for _ in range(n_exciters)]
        fuse_w = fuse_b = None
        if flags.disable_selection:
            # the single shared gate acts on one fused sequence, so the
            # branch concatenation is re-projected back to branch width
            fuse_w = glorot(rng, (N * F, F), N * F, F)
            fuse_b = T.zeros((F,), requires_grad=True)
        if not flags.disable_ae:
            ae_up_w = glorot(rng, (F, D), F, D)
            ae_up_b = T.zeros((D,), requires_grad=True)
        return cls(D=D, r1=r1, r2=r2, N=N, flags=flags,
                   ae_down_w=ae_down_w, ae_down_b=ae_down_b, gru_stack=stack,
                   red_w=red_w, red_b=red_b, exc_w=exc_w, exc_b=exc_b,
                   ae_up_w=ae_up_w, ae_up_b=ae_up_b,
                   fuse_w=fuse_w, fuse_b=fuse_b)

    @property
    def hidden(self) -> int:
        return self.D // 2 if self.flags.disable_ae else self.D // self.r1

    @property
    def branch_width(self) -> int:
        return 2 * self.hidden

    def parameters(self) -> dict:
        out = {}
        if self.ae_down_w is not None:
            out["ae_down.w"] = self.ae_down_w
            out["ae_down.b"] = self.ae_down_b
        for n, layer in enumerate(self.gru_stack):
            for k, v in layer.parameters().items():
                out[f"gru{n}.{k}"] = v
        out["reducer.w"] = self.red_w
        out["reducer.b"] = self.red_b
        for n, (w, b) in enumerate(zip(self.exc_w, self.exc_b)):
            out[f"exciter{n}.w"] = w
            out[f"exciter{n}.b"] = b
        if self.fuse_w is not None:
            out["fuse_proj.w"] = self.fuse_w
            out["fuse_proj.b"] = self.fuse_b
        if self.ae_up_w is not None:
            out["ae_up.w"] = self.ae_up_w
            out["ae_up.b"] = self.ae_up_b
        return out


# ---------------------------------------------------------------------
# mask helpers
# ---------------------------------------------------------------------

def _mask_float(mask, batched: bool) -> Optional[np.ndarray]:
    """Normalize a position mask to float (B, L, 1); None passes through."""
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if not m.any(axis=1).all():
        raise T.DegenerateMaskError("a sequence has no valid positions")
    return m[:, :, None]


def _promote(x: Tensor):
    """Lift L x D to 1 x L x D; remember whether to squeeze on the way out."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise T.ShapeError(f"expected rank 2 or 3 input, got {x.shape}")


def masked_mean_positions(x: Tensor, mf: Optional[np.ndarray]) -> Tensor:
    """Mean over the position axis of (B, L, F), excluding padded positions."""
    if mf is None:
        return T.reduce("mean", x, axis=-2)
    total = T.reduce("sum", mul_mask(x, mf), axis=-2)
    counts = mf.sum(axis=1, keepdims=True)  # (B, 1, 1)
    return T.mul(total, Tensor(1.0 / counts))


def masked_max_positions(x: Tensor, mf: Optional[np.ndarray]) -> Tensor:
    if mf is None:
        return T.reduce("max", x, axis=-2)
    keep = np.broadcast_to(mf.astype(bool), x.shape)
    return T.reduce("max", T.masked_fill(x, keep, _NEG_BIG), axis=-2)


def mul_mask(x: Tensor, mf: np.ndarray) -> Tensor:
    return T.mul(x, Tensor(mf))


# ---------------------------------------------------------------------
# FA
# ---------------------------------------------------------------------

def fa_forward(x: Tensor, p: FaParams, mask=None) -> Tensor:
    """Gate features of x by a descriptor pooled over positions."""
    if x.shape[-1] != p.D:
        raise T.ShapeError(f"input feature dim {x.shape[-1]} != params D {p.D}")
    xb, squeeze_out = _promote(x)
    mf = _mask_float(mask, batched=True)
    s = masked_mean_positions(xb, mf)                       # (B, 1, D)
    s1 = T.tanh(T.add(T.matmul(s, p.w1), p.b1))             # (B, 1, D/r)
    e = T.sigmoid(T.add(T.matmul(s1, p.w2), p.b2))          # (B, 1, D)
    u = T.mul(e, xb)
    return T.reshape(u, x.shape) if squeeze_out else u


# ---------------------------------------------------------------------
# SFA stages
# ---------------------------------------------------------------------

def ae_project(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Position-wise linear map (1-wide convolution): positions never mix."""
    if x.shape[-1] != kernel.shape[0]:
        raise T.ShapeError(f"feature dim {x.shape[-1]} != kernel rows {kernel.shape[0]}")
    return T.add(T.matmul(x, kernel), bias)


def _gru_direction(x: Tensor, p: GruDirParams, mf: Optional[np.ndarray], reverse: bool) -> Tensor:
    """One GRU direction over (B, L, F); padded steps carry state through."""
    B, L, _ = x.shape
    H = p.wz.shape[1]
    h = T.zeros((B, H))
    steps = range(L - 1, -1, -1) if reverse else range(L)
    out = [None] * L
    one = T.ones((1,))
    if mf is not None:
        keep = [Tensor(mf[:, l, :]) for l in range(L)]      # (B, 1) each
        drop = [Tensor(1.0 - mf[:, l, :]) for l in range(L)]
    for l in steps:
        x_t = T.take(x, l, axis=1)                          # (B, F)
        cat = T.concat([x_t, h], axis=-1)
        z = T.sigmoid(T.add(T.matmul(cat, p.wz), p.bz))
        r = T.sigmoid(T.add(T.matmul(cat, p.wr), p.br))
        cat2 = T.concat([x_t, T.mul(r, h)], axis=-1)
        c = T.tanh(T.add(T.matmul(cat2, p.wc), p.bc))
        h_new = T.add(T.mul(T.sub(one, z), c), T.mul(z, h))
        if mf is not None:
            h = T.add(T.mul(keep[l], h_new), T.mul(drop[l], h))
        else:
            h = h_new
        out[l] = h
    seq = T.stack(out)                                      # (L, B, H)
    return T.transpose(seq, (1, 0, 2))                      # (B, L, H)


def bigru(x: Tensor, layer: GruLayerParams, mf: Optional[np.ndarray] = None) -> Tensor:
    """Bidirectional GRU layer: (B, L, F_in) -> (B, L, 2*hidden)."""
    fwd = _gru_direction(x, layer.fwd, mf, reverse=False)
    bwd = _gru_direction(x, layer.bwd, mf, reverse=True)
    return T.concat([fwd, bwd], axis=-1)


def sbigru_split(x: Tensor, stack: Sequence[GruLayerParams], mask=None) -> list:
    """Run the stacked BiGRU; branch n is the n-th layer's hidden sequence."""
    if not stack:
        raise ValueError("empty BiGRU stack")
    xb, squeeze_out = _promote(x)
    mf = _mask_float(mask, batched=True)
    branches = []
    cur = xb
    for n, layer in enumerate(stack):
        if cur.shape[-1] != layer.in_dim:
            raise T.ShapeError(
                f"layer {n} expects width {layer.in_dim}, got {cur.shape[-1]}")
        cur = bigru(cur, layer, mf)
        branches.append(cur)
    if squeeze_out:
        branches = [T.reshape(b, b.shape[1:]) for b in branches]
    return branches


def fuse(branches: Sequence[Tensor]) -> Tensor:
    """Stacked concatenation: N branches of (.., L, F) -> (N, .., L, F)."""
    return T.stack(list(branches))


def squeeze(xt: Tensor, mask=None, flags: Optional[AblationFlags] = None) -> Tensor:
    """Pool the fused tensor over branches and positions into one descriptor.

    Average and max pooling contributions are summed; ablation flags drop
    either term. Input (N, .., L, F) -> (.., 1, F).
    """
    flags = flags or AblationFlags()
    mf = _mask_float(mask, batched=True)
    N = xt.shape[0]
    terms = []
    if not flags.disable_gap:
        per_branch_sum = T.reduce("sum", xt, axis=0, keepdims=False)  # (.., L, F)
        terms.append(T.scale(masked_mean_positions(per_branch_sum, mf), 1.0 / N))
    if not flags.disable_gmp:
        if mf is None:
            mx = T.reduce("max", xt, axis=0, keepdims=False)
        else:
            keep = np.broadcast_to(mf.astype(bool), xt.shape)
            mx = T.reduce("max", T.masked_fill(xt, keep, _NEG_BIG), axis=0, keepdims=False)
        terms.append(T.reduce("max", mx, axis=-2))
    if not terms:
        raise ValueError("both poolings disabled")
    s = terms[0]
    for t in terms[1:]:
        s = T.add(s, t)
    return s


def excite(s: Tensor, p: SfaParams) -> list:
    """Shared reduction, then one sigmoid gate per branch (or one shared gate)."""
    if s.shape[-1] != p.branch_width:
        raise T.ShapeError(f"descriptor width {s.shape[-1]} != {p.branch_width}")
    s1 = T.tanh(T.add(T.matmul(s, p.red_w), p.red_b))
    return [T.sigmoid(T.add(T.matmul(s1, w), b)) for w, b in zip(p.exc_w, p.exc_b)]


def select(e_list: Sequence[Tensor], branches: Sequence[Tensor],
           flags: Optional[AblationFlags] = None,
           fuse_w: Optional[Tensor] = None,
           fuse_b: Optional[Tensor] = None) -> Tensor:
    """Combine branches under their gates.

    With selection: per-feature softmax over branch gates, then a convex
    combination of branch values. Without: the branches are concatenated
    along features, re-projected back to branch width by the fuse kernel,
    and scaled by the single shared gate — so at the gating stage every
    branch sits behind the same coefficient.
    """
    flags = flags or AblationFlags()
    branches = list(branches)
    e_list = list(e_list)
    if flags.disable_selection:
        if len(e_list) != 1:
            raise T.ShapeError("without selection there must be exactly one gate")
        if fuse_w is None or fuse_b is None:
            raise ValueError("the no-selection variant needs the fuse projection")
        fused = ae_project(T.concat(branches, axis=-1), fuse_w, fuse_b)
        return T.mul(e_list[0], fused)
    if len(e_list) != len(branches):
        raise T.ShapeError(f"{len(e_list)} gates for {len(branches)} branches")
    E = T.stack(e_list)                 # (N, .., 1, F)
    Et = T.softmax(E, axis=0)
    u = None
    for n, b in enumerate(branches):
        term = T.mul(T.take(Et, n, axis=0), b)
        u = term if u is None else T.add(u, term)
    return u


def sfa_forward(x: Tensor, p: SfaParams, mask=None,
                flags: Optional[AblationFlags] = None) -> Tensor:
    """Full block: project down, split, fuse, squeeze, excite, select, project up."""
    flags = flags or p.flags
    if (flags.disable_selection != p.flags.disable_selection
            or flags.disable_ae != p.flags.disable_ae):
        raise ValueError("ablation flags disagree with the parameter layout")
    if x.shape[-1] != p.D:
        raise T.ShapeError(f"input feature dim {x.shape[-1]} != params D {p.D}")
    xb, squeeze_out = _promote(x)
    mf = _mask_float(mask, batched=True)

    cur = xb
    if not flags.disable_ae:
        cur = ae_project(cur, p.ae_down_w, p.ae_down_b)
    branches = []
    for n, layer in enumerate(p.gru_stack):
        cur = bigru(cur, layer, mf)
        branches.append(cur)
    xt = fuse(branches)
    s = squeeze(xt, mask=mf[:, :, 0] if mf is not None else None, flags=flags)
    e_list = excite(s, p)
    u = select(e_list, branches, flags=flags, fuse_w=p.fuse_w, fuse_b=p.fuse_b)
    if not flags.disable_ae:
        u = ae_project(u, p.ae_up_w, p.ae_up_b)
    return T.reshape(u, x.shape) if squeeze_out else u


# ---------------------------------------------------------------------
# bottleneck constraint and parameter accounting
# ---------------------------------------------------------------------

_LOG_BASES = {"e": math.e, "2": 2.0, "10": 10.0}


@dataclass
class BottleneckReport:
    threshold: float
    quantities: dict
    passed: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.passed:
            self.passed = {k: v > self.threshold for k, v in self.quantities.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def margins(self) -> dict:
        return {k: v - self.threshold for k, v in self.quantities.items()}


def check_bottleneck(D: int, r: int, r1: int, r2: int, L: int,
                     log_base: str = "e") -> BottleneckReport:
    """Every bottleneck width must exceed 8.33 * log(L)."""
    if min(D, r, r1, r2, L) < 1:
        raise ValueError("all arguments must be positive integers")
    base = _LOG_BASES.get(str(log_base))
    if base is None:
        raise ValueError(f"unknown log base {log_base!r}")
    threshold = 8.33 * (math.log(L) / math.log(base))
    quantities = {"D/r": D / r, "2D/r1": 2 * D / r1, "2D/(r1*r2)": 2 * D / (r1 * r2)}
    return BottleneckReport(threshold=threshold, quantities=quantities)


def fa_param_count(D: int, r: int) -> dict:
    dr = D // r
    by = {"w1": D * dr, "b1": dr, "w2": dr * D, "b2": D}
    return {"total": sum(by.values()), "by_component": by}


def _gru_layer_count(in_dim: int, hidden: int) -> int:
    return 2 * 3 * ((in_dim + hidden) * hidden + hidden)


def sfa_param_count(D: int, r1: int, r2: int, N: int,
                    flags: Optional[AblationFlags] = None) -> dict:
    flags = flags or AblationFlags()
    hidden = D // 2 if flags.disable_ae else D // r1
    gru_in = D if flags.disable_ae else hidden
    F = 2 * hidden
    Fr = F // r2
    by = {}
    if not flags.disable_ae:
        by["ae_down"] = D * hidden + hidden
    total_gru = 0
    for n in range(N):
        total_gru += _gru_layer_count(gru_in if n == 0 else F, hidden)
    by["gru_stack"] = total_gru
    by["reducer"] = F * Fr + Fr
    n_exc = 1 if flags.disable_selection else N
    by["exciters"] = n_exc * (Fr * F + F)
    if flags.disable_selection:
        by["fuse_proj"] = N * F * F + F
    if not flags.disable_ae:
        by["ae_up"] = F * D + D
    return {"total": sum(by.values()), "by_component": by}


def param_elements(params) -> int:
    """Element count of every tensor owned by a parameter container."""
    return sum(t.size for t in params.parameters().values())


def count_params(kind: str, D: int, **kw) -> dict:
    if kind == "fa":
        return fa_param_count(D, kw["r"])
    if kind == "sfa":
        return sfa_param_count(D, kw["r1"], kw["r2"], kw["N"], kw.get("flags"))
    raise ValueError(f"unknown block kind {kind!r}")
