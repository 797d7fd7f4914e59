"""Second-order cone programs and the solver interface.

A :class:`ConicProgram` is::

    minimize    c @ x
    subject to  A_eq x  = b_eq
                G x    <= h                     (nonnegative cone)
                h_i - G_i x in SOC(d_i)        for every cone block i

where ``SOC(d) = {(t, y) : ||y||_2 <= t}``.  Programs are built with
:class:`ProgramBuilder` and solved by :func:`solve`, which currently drives
the Clarabel interior-point solver.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    ALMOST_OPTIMAL = "AlmostOptimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_ERROR = "NumericalError"

    @property
    def has_solution(self) -> bool:
        return self in (SolveStatus.OPTIMAL, SolveStatus.ALMOST_OPTIMAL)


@dataclass(frozen=True)
class SolveSettings:
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_iterations: int = 200

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class SolveResult:
    status: SolveStatus
    x: np.ndarray = None
    duals: np.ndarray = None
    objective: float = float("nan")
    iterations: int = 0


@dataclass
class ConicProgram:
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    soc: list = field(default_factory=list)  # [(G_i, h_i)]
    variables: dict = field(default_factory=dict)  # name -> index array
    row_tags: dict = field(default_factory=dict)  # tag -> (kind, row indices or cone ids)
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def cone_dims(self) -> list:
        return [g.shape[0] for g, _ in self.soc]

    def value(self, x, name):
        return np.asarray(x)[self.variables[name]]

    def objective(self, x) -> float:
        return float(self.c @ x)

    def residuals(self, x) -> dict:
        """Worst violation per constraint family (0 means satisfied)."""
        x = np.asarray(x, dtype=float)
        out = {
            "equality": float(np.max(np.abs(self.A_eq @ x - self.b_eq), initial=0.0)),
            "inequality": float(np.max(self.G @ x - self.h, initial=0.0)),
        }
        worst = 0.0
        for Gi, hi in self.soc:
            s = hi - Gi @ x
            worst = max(worst, float(np.linalg.norm(s[1:]) - s[0]))
        out["soc"] = max(worst, 0.0)
        return out

    def tagged_residual(self, x, tag) -> float:
        x = np.asarray(x, dtype=float)
        kind, sel = self.row_tags[tag]
        if kind == "eq":
            return float(np.max(np.abs(self.A_eq[sel] @ x - self.b_eq[sel]), initial=0.0))
        if kind == "ineq":
            return max(float(np.max(self.G[sel] @ x - self.h[sel], initial=0.0)), 0.0)
        worst = 0.0
        for i in sel:
            Gi, hi = self.soc[i]
            s = hi - Gi @ x
            worst = max(worst, float(np.linalg.norm(s[1:]) - s[0]))
        return max(worst, 0.0)

    def dump(self, path) -> None:
        """Write the program as plain-text sparse triplets for external cross-checks."""
        with open(path, "w") as fh:
            fh.write(f"# n_vars {self.n}\n")
            fh.write(f"# zero_cone {self.A_eq.shape[0]}\n")
            fh.write(f"# nonneg_cone {self.G.shape[0]}\n")
            fh.write(f"# soc_cones {' '.join(str(d) for d in self.cone_dims)}\n")
            fh.write("# sections: c (col value) | A (row col value) | b (row value)\n")
            fh.write("# rows of A/b are stacked as [equality; nonneg; soc blocks], constraint b - A x in cone\n")
            fh.write("[c]\n")
            for j in np.flatnonzero(self.c):
                fh.write(f"{j} {float(self.c[j])!r}\n")
            A, b = _stacked(self)
            A = A.tocoo()
            fh.write("[A]\n")
            for i, j, v in zip(A.row, A.col, A.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
            fh.write("[b]\n")
            for i in np.flatnonzero(b):
                fh.write(f"{i} {float(b[i])!r}\n")


class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram` from dense blocks."""

    def __init__(self):
        self.n = 0
        self.variables = {}
        self.c = []
        self._eq = _RowBlock()
        self._ineq = _RowBlock()
        self.soc = []
        self.row_tags = {}
        self._tag_cones = {}

    def variable(self, name, shape) -> np.ndarray:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        size = int(np.prod(shape))
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        self.variables[name] = idx
        return idx

    def cost(self, idx, coeff) -> None:
        idx = np.atleast_1d(idx).ravel()
        self.c.append((idx, np.broadcast_to(np.asarray(coeff, dtype=float), idx.shape)))

    def eq(self, terms, rhs, tag=None) -> None:
        """Add rows sum_j M_j x[idx_j] = rhs; each term is (idx, M) with M of shape (m, len(idx))."""
        self._add(self._eq, "eq", terms, rhs, tag)

    def le(self, terms, rhs, tag=None) -> None:
        """Add rows sum_j M_j x[idx_j] <= rhs."""
        self._add(self._ineq, "ineq", terms, rhs, tag)

    def soc_le(self, t_terms, t_const, y_terms, y_const, tag=None) -> None:
        """Add ||Y x + y_const||_2 <= T x + t_const as one cone block."""
        y_const = np.atleast_1d(np.asarray(y_const, dtype=float))
        m = y_const.size
        rows, cols, vals = [], [], []
        # cone slack s = h - G x: s0 = t(x), s_rest = y(x)
        for idx, M in t_terms:
            idx = np.atleast_1d(idx).ravel()
            M = np.asarray(M, dtype=float).reshape(1, idx.size)
            rows.append(np.zeros(idx.size, dtype=int))
            cols.append(idx)
            vals.append(-M[0])
        for idx, M in y_terms:
            idx = np.atleast_1d(idx).ravel()
            M = np.asarray(M, dtype=float).reshape(m, idx.size)
            r, cc = np.nonzero(M)
            rows.append(r + 1)
            cols.append(idx[cc])
            vals.append(-M[r, cc])
        G = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m + 1, self.n)
        )
        h = np.concatenate([[float(t_const)], y_const])
        self.soc.append((G, h))
        if tag is not None:
            self._tag_cones.setdefault(tag, []).append(len(self.soc) - 1)

    def _add(self, block, kind, terms, rhs, tag):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        start = block.m
        block.add(terms, rhs)
        if tag is not None:
            prev = self.row_tags.get(tag)
            rows = np.arange(start, block.m)
            if prev is not None:
                rows = np.concatenate([prev[1], rows])
            self.row_tags[tag] = (kind, rows)

    def build(self) -> ConicProgram:
        c = np.zeros(self.n)
        for idx, coeff in self.c:
            np.add.at(c, idx, coeff)
        A_eq, b_eq = self._eq.matrix(self.n)
        G, h = self._ineq.matrix(self.n)
        soc = [(sp.csr_matrix((Gi.data, (Gi.row, Gi.col)), shape=(Gi.shape[0], self.n)), hi) for Gi, hi in self.soc]
        tags = dict(self.row_tags)
        for tag, ids in self._tag_cones.items():
            tags[tag] = ("soc", ids)
        return ConicProgram(c, A_eq, b_eq, G, h, soc, dict(self.variables), tags)


class _RowBlock:
    def __init__(self):
        self.m = 0
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []

    def add(self, terms, rhs):
        m = rhs.size
        for idx, M in terms:
            idx = np.atleast_1d(idx).ravel()
            M = np.asarray(M, dtype=float)
            M = np.broadcast_to(M, (m, idx.size)) if M.ndim < 2 else M.reshape(m, idx.size)
            r, cc = np.nonzero(M)
            self.rows.append(r + self.m)
            self.cols.append(idx[cc])
            self.vals.append(M[r, cc])
        self.rhs.append(rhs)
        self.m += m

    def matrix(self, n):
        if not self.rhs:
            return sp.csr_matrix((0, n)), np.zeros(0)
        rows = np.concatenate(self.rows) if self.rows else np.zeros(0, dtype=int)
        cols = np.concatenate(self.cols) if self.cols else np.zeros(0, dtype=int)
        vals = np.concatenate(self.vals) if self.vals else np.zeros(0)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.m, n)), np.concatenate(self.rhs)


def _stacked(program: ConicProgram):
    blocks = [program.A_eq, program.G] + [Gi for Gi, _ in program.soc]
    rhs = [program.b_eq, program.h] + [hi for _, hi in program.soc]
    return sp.vstack(blocks, format="csc"), np.concatenate(rhs)


_STATUS_MAP = {
    "Solved": SolveStatus.OPTIMAL,
    "AlmostSolved": SolveStatus.ALMOST_OPTIMAL,
    "PrimalInfeasible": SolveStatus.PRIMAL_INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.PRIMAL_INFEASIBLE,
    "DualInfeasible": SolveStatus.DUAL_INFEASIBLE,
    "AlmostDualInfeasible": SolveStatus.DUAL_INFEASIBLE,
    "MaxIterations": SolveStatus.ITERATION_LIMIT,
    "MaxTime": SolveStatus.ITERATION_LIMIT,
}


def solve(program: ConicProgram, settings: SolveSettings = SolveSettings()) -> SolveResult:
    """Solve a conic program; infeasibility is reported as a status, never raised."""
    import clarabel

    A, b = _stacked(program)
    cones = []
    if program.A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(program.A_eq.shape[0]))
    if program.G.shape[0]:
        cones.append(clarabel.NonnegativeConeT(program.G.shape[0]))
    for d in program.cone_dims:
        cones.append(clarabel.SecondOrderConeT(d))

    opts = clarabel.DefaultSettings()
    opts.verbose = False
    opts.max_iter = settings.max_iterations
    opts.tol_feas = settings.abs_tol
    opts.tol_gap_abs = settings.abs_tol
    opts.tol_gap_rel = settings.rel_tol
    opts.max_threads = 1
    # keep every row so duals line up with the stacked constraint order
    opts.presolve_enable = False

    # costs spanning many decades (virtual-control weights) hurt the interior
    # point iterates; solve with a unit-size cost vector and undo on return
    c_scale = float(np.max(np.abs(program.c), initial=0.0)) or 1.0
    P = sp.csc_matrix((program.n, program.n))
    try:
        solver = clarabel.DefaultSolver(P, program.c / c_scale, A, b, cones, opts)
        sol = solver.solve()
    except Exception:  # backend failures surface as a status
        return SolveResult(SolveStatus.NUMERICAL_ERROR)

    status = _STATUS_MAP.get(str(sol.status), SolveStatus.NUMERICAL_ERROR)
    if not status.has_solution:
        return SolveResult(status, iterations=sol.iterations)
    x = np.asarray(sol.x, dtype=float)
    return SolveResult(status, x=x, duals=c_scale * np.asarray(sol.z, dtype=float), objective=program.objective(x),
                       iterations=sol.iterations)
