"""Robust Levenberg-Marquardt over grouped manifold parameters.

A :class:`Problem` owns named parameter groups and residual families. Each
family evaluates a batch of residual blocks (already whitened) together with
per-block Jacobians on the group tangents. The solver assembles a sparse
Jacobian, applies IRLS weights for Huber-robustified families and solves the
damped normal equations densely.

Cost convention: ``0.5 * sum_b lambda_b * rho(|r_b|^2)`` with ``rho`` the
identity for non-robust families.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericalFailure, RankDeficient
from .geometry import so3_exp
from .vision import huber_cost, huber_weight


class ParameterGroup:
    """A stack of same-shaped parameter items.

    ``manifold`` is ``"euclidean"`` (additive update) or ``"so3"`` (values are
    3x3 rotation matrices, right update ``R Exp(delta)``). Items listed in
    ``fixed`` are never touched; ``bases`` maps an item to a ``(tdim, k)``
    matrix restricting its step to a subspace of its tangent.
    """

    def __init__(self, name, values, manifold="euclidean", fixed=(), bases=None):
        self.name = name
        self.manifold = manifold
        self.values = np.array(values, dtype=float)
        if manifold == "so3":
            self.values = self.values.reshape(-1, 3, 3)
            self.tdim = 3
        elif manifold == "euclidean":
            self.values = self.values.reshape(len(self.values), -1)
            self.tdim = self.values.shape[1]
        else:
            raise ValueError(f"unknown manifold {manifold!r}")
        self.fixed = set(int(i) for i in fixed)
        self.bases = dict(bases or {})

    def __len__(self):
        return len(self.values)

    def copy(self):
        return ParameterGroup(self.name, self.values.copy(), self.manifold, self.fixed, dict(self.bases))

    def retract(self, delta):
        """New values after applying a full tangent step ``delta`` (n, tdim)."""
        if self.manifold == "so3":
            return self.values @ so3_exp(delta)
        return self.values + delta


@dataclass
class FamilyEval:
    residuals: np.ndarray  # (nb, rdim) whitened
    valid: np.ndarray  # (nb,) bool
    jacobians: list = field(default_factory=list)  # [(group, items (nb,), J (nb, rdim, tdim))]
    weights: Optional[np.ndarray] = None  # lambda per block
    saturated: int = 0


class ResidualFamily:
    """Interface: subclasses implement :meth:`evaluate`."""

    name = "family"
    huber_delta: Optional[float] = None
    counts_as_visual = False

    def evaluate(self, groups: dict, jacobians: bool) -> FamilyEval:
        raise NotImplementedError


class LowerBound:
    """Validator requiring ``values[:, component] > floor`` in one group."""

    def __init__(self, group, component, floor):
        self.group = group
        self.component = component
        self.floor = floor

    def violations(self, groups):
        return np.nonzero(~(groups[self.group].values[:, self.component] > self.floor))[0]

    def __call__(self, groups):
        return len(self.violations(groups)) == 0


class Problem:
    def __init__(self, groups, families, validators=()):
        self.groups = {g.name: g for g in groups}
        self.families = list(families)
        # validators: callables groups -> bool, checked before a step is accepted
        self.validators = list(validators)
        self._layout()

    def _layout(self):
        self.columns = {}
        self.item_basis = {}
        col = 0
        for name, g in self.groups.items():
            offs = np.full(len(g), -1, dtype=np.int64)
            for i in range(len(g)):
                if i in g.fixed:
                    continue
                offs[i] = col
                col += g.bases[i].shape[1] if i in g.bases else g.tdim
            self.columns[name] = offs
        self.num_columns = col

    def item_columns(self, group, items):
        """Reduced-step columns owned by ``items`` of ``group``."""
        g = self.groups[group]
        out = []
        for i in np.atleast_1d(items):
            off = int(self.columns[group][int(i)])
            if off >= 0:
                k = g.bases[int(i)].shape[1] if int(i) in g.bases else g.tdim
                out.extend(range(off, off + k))
        return np.asarray(out, dtype=np.int64)

    def copy_groups(self):
        return {n: g.copy() for n, g in self.groups.items()}

    def retract(self, dx):
        """Groups after applying the reduced step ``dx``."""
        out = {}
        for name, g in self.groups.items():
            delta = np.zeros((len(g), g.tdim))
            offs = self.columns[name]
            for i in range(len(g)):
                if offs[i] < 0:
                    continue
                if i in g.bases:
                    B = g.bases[i]
                    delta[i] = B @ dx[offs[i] : offs[i] + B.shape[1]]
                else:
                    delta[i] = dx[offs[i] : offs[i] + g.tdim]
            ng = g.copy()
            ng.values = g.retract(delta)
            out[name] = ng
        return out

    def evaluate(self, groups=None, jacobians=True):
        groups = self.groups if groups is None else groups
        return [fam.evaluate(groups, jacobians) for fam in self.families]

    def assemble(self, evals, groups=None):
        """Sparse (robust-weighted, whitened) Jacobian and residual vector."""
        groups = self.groups if groups is None else groups
        rows, cols, vals = [], [], []
        rvec = []
        row0 = 0
        for fam, ev in zip(self.families, evals):
            nb, rdim = ev.residuals.shape
            scale = np.sqrt(block_weights(fam, ev))
            rvec.append((ev.residuals * scale[:, None]).ravel())
            block_rows = row0 + np.arange(nb)[:, None] * rdim + np.arange(rdim)[None, :]
            for gname, items, J in ev.jacobians:
                g = groups[gname]
                offs = self.columns[gname][items]
                Jw = J * scale[:, None, None]
                free = offs >= 0
                plain = free & ~np.isin(items, list(g.bases)) if g.bases else free
                if np.any(plain):
                    k = g.tdim
                    r = np.repeat(block_rows[plain][:, :, None], k, axis=2)
                    c = np.broadcast_to(offs[plain][:, None, None] + np.arange(k)[None, None, :], r.shape)
                    rows.append(r.ravel())
                    cols.append(c.ravel())
                    vals.append(Jw[plain].ravel())
                for b in np.nonzero(free & ~plain)[0]:
                    B = g.bases[int(items[b])]
                    JB = Jw[b] @ B
                    k = B.shape[1]
                    rows.append(np.repeat(block_rows[b], k))
                    cols.append(np.tile(offs[b] + np.arange(k), rdim))
                    vals.append(JB.ravel())
            row0 += nb * rdim
        r = np.concatenate(rvec) if rvec else np.zeros(0)
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row0, self.num_columns)
            )
        else:
            J = sp.csr_matrix((row0, self.num_columns))
        return J, r


def block_weights(family, ev: FamilyEval):
    """IRLS weight per block: ``lambda * rho'(|r|^2)``; zero for invalid blocks."""
    s = np.sum(ev.residuals**2, axis=1)
    w = np.ones(len(s)) if ev.weights is None else np.asarray(ev.weights, dtype=float).copy()
    if family.huber_delta is not None:
        w = w * huber_weight(s, family.huber_delta)
    w[~ev.valid] = 0.0
    return w


def family_cost(family, ev: FamilyEval):
    s = np.sum(ev.residuals**2, axis=1)
    if family.huber_delta is not None:
        s = huber_cost(s, family.huber_delta)
    s = np.atleast_1d(s)
    if ev.weights is not None:
        s = s * ev.weights
    return 0.5 * float(np.sum(s[ev.valid]))


def total_cost(families, evals):
    return sum(family_cost(f, e) for f, e in zip(families, evals))


def visual_count(families, evals):
    return sum(int(np.count_nonzero(e.valid)) for f, e in zip(families, evals) if f.counts_as_visual)


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 50
    cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    param_tol: float = 1e-12
    initial_damping: float = 1e-4
    max_damping: float = 1e32


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    gradient_norm: float
    termination: str
    family_costs: dict
    saturations: dict
    rejected_steps: int = 0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "gradient_norm": self.gradient_norm,
            "termination": self.termination,
            "family_costs": dict(self.family_costs),
            "saturations": dict(self.saturations),
            "rejected_steps": self.rejected_steps,
        }


def _normal_equations(J):
    H = (J.T @ J).toarray()
    return 0.5 * (H + H.T)


def _solve_damped(H, g, mu, D, held=None):
    """Damped step; columns in ``held`` get a zero step."""
    if held is not None and len(held):
        free = np.ones(len(g), dtype=bool)
        free[held] = False
        dx = np.zeros(len(g))
        sub = _solve_damped(H[np.ix_(free, free)], g[free], mu, D[free])
        if sub is None:
            return None
        dx[free] = sub
        return dx
    A = H + mu * np.diag(D)
    try:
        c = cho_factor(A, lower=True, check_finite=True)
    except LinAlgError:
        return None
    dx = cho_solve(c, -g)
    return dx if np.all(np.isfinite(dx)) else None


def _bounded_candidate(problem, H, g, mu, D, dx, max_holds=3):
    """Retract ``dx``; when only bound validators fail, retry with the offending
    items held in place. Returns ``(candidate, dx)`` or ``(None, dx)``."""
    held = np.zeros(0, dtype=np.int64)
    first = dx
    for _ in range(max_holds + 1):
        candidate = problem.retract(dx)
        failing = [v for v in problem.validators if not v(candidate)]
        if not failing:
            return candidate, dx
        if not all(isinstance(v, LowerBound) for v in failing):
            return None, first
        extra = [problem.item_columns(v.group, v.violations(candidate)) for v in failing]
        held = np.union1d(held, np.concatenate(extra))
        if len(held) >= len(g):
            return None, first
        dx = _solve_damped(H, g, mu, D, held)
        if dx is None:
            return None, first
    return None, first


def solve(problem: Problem, config: SolverConfig = SolverConfig(), callback=None) -> SolveReport:
    """Minimize the robust cost; ``problem.groups`` is updated in place.

    Steps are accepted only on strict cost decrease, when every validator
    passes and the number of valid visual blocks does not drop.
    ``callback(info)`` sees one dict per trial step.
    """
    evals = problem.evaluate()
    cost = total_cost(problem.families, evals)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite cost at the initial point")
    initial_cost = cost
    n_visual = visual_count(problem.families, evals)
    mu = config.initial_damping
    nu = 2.0
    accepted = 0
    rejected = 0
    termination = "max_iterations"
    gnorm = float("nan")
    need_linearize = True
    for _ in range(config.max_iter):
        if need_linearize:
            J, r = problem.assemble(evals)
            g = J.T @ r
            H = _normal_equations(J)
            D = np.maximum(np.diag(H).copy(), 1e-12)
            gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
            need_linearize = False
        if problem.num_columns == 0 or gnorm < config.grad_tol:
            termination = "gradient"
            break
        dx = _solve_damped(H, g, mu, D)
        if dx is None:
            mu *= nu
            nu *= 2.0
            rejected += 1
            if mu > config.max_damping:
                raise NumericalFailure("normal equations stayed indefinite under damping")
            continue
        xnorm = math.sqrt(sum(float(np.sum(gr.values**2)) for gr in problem.groups.values()))
        if np.linalg.norm(dx) <= config.param_tol * (xnorm + config.param_tol):
            termination = "parameter"
            break
        candidate, dx = _bounded_candidate(problem, H, g, mu, D, dx)
        ok = candidate is not None
        reason = None if ok else "validator"
        new_evals = None
        new_cost = math.inf
        if ok:
            new_evals = problem.evaluate(candidate)
            new_cost = total_cost(problem.families, new_evals)
            ok = math.isfinite(new_cost) and visual_count(problem.families, new_evals) >= n_visual
            reason = None if ok else "visibility"
        predicted = 0.5 * float(dx @ (mu * D * dx - g))
        if callback is not None:
            callback({"cost": cost, "new_cost": new_cost, "valid": ok, "reason": reason, "damping": mu, "predicted": predicted, "step": float(np.linalg.norm(dx))})
        if ok and new_cost < cost:
            rho = (cost - new_cost) / predicted if predicted > 0 else 0.0
            rel = (cost - new_cost) / max(cost, 1e-300)
            problem.groups = candidate
            evals = new_evals
            cost = new_cost
            accepted += 1
            need_linearize = True
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if rel < config.cost_tol:
                termination = "cost"
                break
        else:
            rejected += 1
            mu *= nu
            nu *= 2.0
            if mu > config.max_damping:
                termination = "damping"
                break
    if need_linearize:
        J, r = problem.assemble(evals)
        gnorm = float(np.max(np.abs(J.T @ r))) if problem.num_columns else 0.0
    return SolveReport(
        iterations=accepted,
        initial_cost=initial_cost,
        final_cost=cost,
        gradient_norm=gnorm,
        termination=termination,
        family_costs={f.name: family_cost(f, e) for f, e in zip(problem.families, evals)},
        saturations={f.name: int(e.saturated) for f, e in zip(problem.families, evals)},
        rejected_steps=rejected,
    )


def log_condition_from_jacobian(J):
    """``log(sigma_max^2 / sigma_min^2)``: the Hessian condition from J's spectrum."""
    J = J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)
    if J.shape[1] == 0:
        raise RankDeficient("no free parameters")
    sv = np.linalg.svd(J, compute_uv=False)
    if len(sv) < J.shape[1] or sv[-1] < 1e-300:
        raise RankDeficient("Jacobian is rank deficient")
    return 2.0 * (math.log(sv[0]) - math.log(sv[-1]))


def hessian_condition(problem: Problem) -> float:
    """Natural-log condition number of ``J^T W J`` at the current parameters."""
    J, _ = problem.assemble(problem.evaluate())
    return log_condition_from_jacobian(J)
