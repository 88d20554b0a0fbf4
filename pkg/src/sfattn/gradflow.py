"""Numerical verification of how gradients reach the BiGRU branches.

Three checks:

* direct_path_check: with the gates frozen (treated as constants), the
  Jacobian of the selective combination w.r.t. branch n is diagonal with
  the normalized gate value for that branch.
* uniformity_contrast: without selection, the frozen shared gate gives
  every branch the same direct coefficient; with selection, coefficients
  differ across branches.
* full_chain_fd_check: end-to-end autodiff through a whole block agrees
  with central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import Tensor


@dataclass
class GradFlowReport:
    check: str
    per_branch_error: list = field(default_factory=list)
    spread: Optional[float] = None
    fd_error: Optional[float] = None
    tolerance: Optional[float] = None
    passed: bool = False
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _branch_stage(p: B.SfaParams, x: Tensor, flags: B.AblationFlags):
    """Forward the block up to the gating stage; return branches and gates."""
    xb, _ = B._promote(x)
    cur = xb
    if not flags.disable_ae:
        cur = B.ae_project(cur, p.ae_down_w, p.ae_down_b)
    branches = []
    for layer in p.gru_stack:
        cur = B.bigru(cur, layer)
        branches.append(cur)
    s = B.squeeze(B.fuse(branches), flags=flags)
    e_list = B.excite(s, p)
    return branches, e_list


def direct_path_check(p: B.SfaParams, x: Tensor, tol: float = 1e-6) -> GradFlowReport:
    """Frozen-gate Jacobian of the selective combination vs the gate values."""
    if p.flags.disable_selection:
        raise ValueError("direct_path_check requires the selection variant")
    branches, e_list = _branch_stage(p, x, p.flags)
    # normalized gates, detached so only the direct path carries gradient
    Et = T.softmax(T.stack(e_list), axis=0).detach()
    N = len(branches)
    leaves = [Tensor(b.data.copy(), requires_grad=True) for b in branches]
    rng = np.random.default_rng(0)
    c = rng.standard_normal(leaves[0].shape)

    u = None
    for n in range(N):
        term = T.mul(Tensor(Et.data[n]), leaves[n])
        u = term if u is None else T.add(u, term)
    loss = T.reduce("sum", T.reshape(T.mul(u, Tensor(c)), (u.size, 1)), axis=0)
    T.backward(loss)

    errors = []
    for n in range(N):
        expected = c * Et.data[n]           # diag(gate) per feature
        errors.append(T.max_rel_error(leaves[n].grad, expected))
    report = GradFlowReport(check="direct_path", per_branch_error=errors,
                            tolerance=tol, passed=max(errors) < tol)
    report.detail["gate_values"] = [Et.data[n].ravel().tolist() for n in range(N)]
    return report


def _frozen_gate_coefficients(p: B.SfaParams, x: Tensor) -> list:
    """Per-branch gradient of the frozen-gate gating stage.

    The gating stage acts on the stacked branches: with selection each
    branch is scaled by its own normalized gate; without, one shared gate
    scales every branch identically.
    """
    flags = p.flags
    branches, e_list = _branch_stage(p, x, flags)
    N = len(branches)
    leaves = [Tensor(b.data.copy(), requires_grad=True) for b in branches]
    c = np.ones(leaves[0].shape)

    if flags.disable_selection:
        gate = e_list[0].detach()
        gated = [T.mul(Tensor(gate.data), lv) for lv in leaves]
    else:
        Et = T.softmax(T.stack(e_list), axis=0).detach()
        gated = [T.mul(Tensor(Et.data[n]), leaves[n]) for n in range(N)]
    total = None
    for g in gated:
        term = T.reduce("sum", T.reshape(T.mul(g, Tensor(c)), (g.size, 1)), axis=0)
        total = term if total is None else T.add(total, term)
    T.backward(total)
    return [lv.grad.copy() for lv in leaves]


def uniformity_contrast(p_with: B.SfaParams, p_without: B.SfaParams,
                        x: Tensor) -> GradFlowReport:
    """Branch-coefficient spread of the frozen-gate stage, both variants."""
    if p_with.flags.disable_selection or not p_without.flags.disable_selection:
        raise ValueError("pass (selection, no-selection) parameter sets in that order")
    if p_with.N != p_without.N or p_with.D != p_without.D:
        raise ValueError("variants must share N and D")

    def spread(coeffs):
        worst = 0.0
        for i in range(len(coeffs)):
            for j in range(i + 1, len(coeffs)):
                worst = max(worst, float(np.max(np.abs(coeffs[i] - coeffs[j]))))
        return worst

    s_with = spread(_frozen_gate_coefficients(p_with, x))
    s_without = spread(_frozen_gate_coefficients(p_without, x))
    return GradFlowReport(
        check="uniformity_contrast",
        spread=s_with,
        passed=(s_without < 1e-9),
        detail={"spread_with_selection": s_with,
                "spread_without_selection": s_without})


def full_chain_fd_check(forward, x: Tensor, eps: float = 1e-5,
                        tol: float = 1e-4) -> GradFlowReport:
    """Autodiff dloss/dx vs central finite differences through `forward`.

    `forward` maps a tensor shaped like x to a tensor of any shape; the
    probe loss is a fixed random linear functional of the output.
    """
    if T.get_precision() != "float64":
        raise RuntimeError("full-chain check requires 64-bit precision")
    rng = np.random.default_rng(1)
    probe = {}

    def loss_fn(inp: Tensor) -> Tensor:
        out = forward(inp)
        if "c" not in probe:
            probe["c"] = rng.standard_normal(out.shape)
        flat = T.reshape(T.mul(out, Tensor(probe["c"])), (out.size, 1))
        return T.reduce("sum", flat, axis=0, keepdims=False)

    leaf = Tensor(x.data.copy(), requires_grad=True)
    T.backward(loss_fn(leaf))
    fd = T.finite_diff_gradient(loss_fn, x, eps=eps)
    err = T.max_rel_error(leaf.grad, fd)
    return GradFlowReport(check="full_chain_fd", fd_error=err,
                          tolerance=tol, passed=err < tol)


def run_gradcheck_suite(D: int = 8, L: int = 4, N: int = 2, seeds: int = 5,
                        tol: float = 1e-4) -> dict:
    """The CLI-facing suite: direct path, uniformity, and FD agreement."""
    results = {"config": {"D": D, "L": L, "N": N, "seeds": seeds, "tol": tol},
               "checks": [], "passed": True}
    with T.precision("float64"):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((L, D)))
            p_sel = B.SfaParams.create(D, 2, 1, N, np.random.default_rng(seed))
            p_no = B.SfaParams.create(
                D, 2, 1, N, np.random.default_rng(seed),
                B.AblationFlags(disable_selection=True))

            r1 = direct_path_check(p_sel, x, tol=1e-6)
            r2 = uniformity_contrast(p_sel, p_no, x)
            r3 = full_chain_fd_check(lambda t: B.sfa_forward(t, p_sel), x, tol=tol)
            r4 = full_chain_fd_check(lambda t: B.sfa_forward(t, p_no), x, tol=tol)
            for r in (r1, r2, r3, r4):
                entry = r.to_dict()
                entry["seed"] = seed
                entry["detail"] = {k: v for k, v in entry["detail"].items()
                                   if k != "gate_values"}
                results["checks"].append(entry)
                results["passed"] = results["passed"] and r.passed
    return results


def write_report(results: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
