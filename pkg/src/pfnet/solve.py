"""Newton-Raphson AC power flow, the linear DC approximation and a residual oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import BusKind, GridCase

__all__ = [
    "SolverConfig", "PFSolution", "SolverError", "build_ybus", "newton_raphson",
    "dc_power_flow", "evaluate_residual",
]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 50
    flat_start: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class PFSolution:
    """Per-bus state. ``p`` and ``q`` are net power drawn (load minus generation)."""

    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    max_mismatch: float
    converged: bool = True


def build_ybus(case: GridCase) -> sp.csr_matrix:
    """Bus admittance matrix with the standard pi branch model.

    Line charging, off-nominal taps, phase shifts and bus shunts are included;
    on a simplified case this reduces to ``Y[i, j] = -1/z_ij`` off the diagonal
    and zero row sums.
    """
    n = case.n_bus
    f, t, r, x = case.branch_arrays()
    b = np.array([br.b_charging for br in case.branches])
    tap = np.array([br.tap * np.exp(1j * br.shift) for br in case.branches])
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * b
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ysh = np.array([bus.gs + 1j * bus.bs for bus in case.buses])
    rows = np.concatenate([f, t, f, t, np.arange(n)])
    cols = np.concatenate([f, t, t, f, np.arange(n)])
    vals = np.concatenate([yff, ytt, yft, ytf, ysh])
    ybus = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    ybus.sum_duplicates()
    return ybus


def _initial_voltage(case: GridCase, flat: bool) -> tuple[np.ndarray, np.ndarray]:
    kinds = case.kinds()
    setpoints = case.vm_setpoints()
    slack = case.slack
    if flat:
        vm = np.where(kinds == BusKind.PQ, 1.0, setpoints)
        va = np.full(case.n_bus, case.buses[slack].va)
    else:
        vm = setpoints.copy()
        va = np.array([b.va for b in case.buses])
    return vm, va


class _JacobianPattern:
    """Scatter map from admittance nonzeros into the reduced Jacobian.

    Rows are P mismatches at PV+PQ buses then Q mismatches at PQ buses;
    columns are angles at PV+PQ buses then magnitudes at PQ buses.
    """

    def __init__(self, ybus, pvpq, pq):
        n = ybus.shape[0]
        coo = ybus.tocoo()
        diag_missing = np.setdiff1d(np.arange(n), coo.row[coo.row == coo.col])
        self.i = np.concatenate([coo.row, diag_missing]).astype(np.int64)
        self.j = np.concatenate([coo.col, diag_missing]).astype(np.int64)
        self.y = np.concatenate([coo.data, np.zeros(len(diag_missing), dtype=complex)])
        self.is_diag = self.i == self.j
        p_row = np.full(n, -1)
        p_row[pvpq] = np.arange(len(pvpq))
        q_row = np.full(n, -1)
        q_row[pq] = len(pvpq) + np.arange(len(pq))
        self.size = len(pvpq) + len(pq)
        # four blocks: (P, angle), (P, magnitude), (Q, angle), (Q, magnitude)
        self.blocks = []
        for rows, cols, part in ((p_row, p_row, "va_re"), (p_row, q_row, "vm_re"),
                                 (q_row, p_row, "va_im"), (q_row, q_row, "vm_im")):
            keep = (rows[self.i] >= 0) & (cols[self.j] >= 0)
            self.blocks.append((keep, rows[self.i[keep]], cols[self.j[keep]], part))

    def build(self, v):
        i, j, y = self.i, self.j, self.y
        ibus = np.zeros(len(v), dtype=complex)
        np.add.at(ibus, i, y * v[j])
        vnorm = v / np.abs(v)
        yv = np.conj(y * v[j])
        d_va = 1j * v[i] * (np.where(self.is_diag, np.conj(ibus[i]), 0) - yv)
        d_vm = v[i] * np.conj(y * vnorm[j]) + np.where(self.is_diag, np.conj(ibus[i]) * vnorm[i], 0)
        vals = {"va_re": d_va.real, "vm_re": d_vm.real, "va_im": d_va.imag, "vm_im": d_vm.imag}
        data = np.concatenate([vals[part][keep] for keep, _, _, part in self.blocks])
        rows = np.concatenate([r for _, r, _, _ in self.blocks])
        cols = np.concatenate([c for _, _, c, _ in self.blocks])
        return sp.csc_matrix((data, (rows, cols)), shape=(self.size, self.size))


def newton_raphson(case: GridCase, cfg: SolverConfig | None = None) -> PFSolution:
    """Polar Newton-Raphson on the active/reactive mismatch.

    Generator reactive limits are not enforced. A non-converged run is
    returned with ``converged=False`` rather than raised; a singular Jacobian
    raises :class:`SolverError`.
    """
    cfg = cfg or SolverConfig()
    kinds = case.kinds()
    pv = np.flatnonzero(kinds == BusKind.PV)
    pq = np.flatnonzero(kinds == BusKind.PQ)
    pvpq = np.concatenate([pv, pq])
    npvpq = len(pvpq)

    ybus = build_ybus(case)
    p_drawn, q_drawn = case.drawn_power()
    s_inj = -(p_drawn + 1j * q_drawn)
    vm, va = _initial_voltage(case, cfg.flat_start)
    v = vm * np.exp(1j * va)

    def mismatch(v):
        mis = v * np.conj(ybus @ v) - s_inj
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    F = mismatch(v)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    pattern = _JacobianPattern(ybus, pvpq, pq)
    while norm >= cfg.tol and it < cfg.max_iter:
        it += 1
        J = pattern.build(v)
        try:
            dx = -splu(J).solve(F)
        except RuntimeError as exc:
            raise SolverError(f"singular Jacobian at iteration {it}: {exc}") from exc
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        F = mismatch(v)
        norm = np.max(np.abs(F)) if F.size else 0.0
        if not np.isfinite(norm):
            break

    s = v * np.conj(ybus @ v)
    return PFSolution(
        vm=vm.copy(), va=va.copy(), p=-s.real, q=-s.imag,
        iterations=it, max_mismatch=float(norm),
        converged=bool(np.isfinite(norm) and norm < cfg.tol),
    )


def dc_power_flow(case: GridCase) -> PFSolution:
    """Linear angle solve from active power with flat voltage magnitudes.

    Each line contributes susceptance ``1/x``; resistance, taps and shunts are
    ignored. PQ magnitudes are reported as 1.0 and reactive power as 0.
    """
    n = case.n_bus
    f, t, _, x = case.branch_arrays()
    if np.any(x == 0):
        raise SolverError("DC power flow needs nonzero reactance on every branch")
    b = 1.0 / x
    B = sp.coo_matrix(
        (np.concatenate([b, b, -b, -b]), (np.concatenate([f, t, f, t]), np.concatenate([f, t, t, f]))),
        shape=(n, n)).tocsc()
    slack = case.slack
    rest = np.array([i for i in range(n) if i != slack], dtype=np.int64)
    p_drawn, _ = case.drawn_power()
    theta = np.full(n, case.buses[slack].va)
    if len(rest):
        B_rr = B[rest][:, rest].tocsc()
        rhs = -p_drawn[rest] - B[rest][:, [slack]].toarray().ravel() * theta[slack]
        try:
            theta[rest] = splu(B_rr).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"singular reduced susceptance matrix: {exc}") from exc
    p = -(B @ theta)
    kinds = case.kinds()
    vm = np.where(kinds == BusKind.PQ, 1.0, case.vm_setpoints())
    return PFSolution(vm=vm, va=theta, p=p, q=np.zeros(n), iterations=1,
                      max_mismatch=float(np.max(np.abs((p - p_drawn)[rest]), initial=0.0)))


def evaluate_residual(case: GridCase, vm, va, p=None, q=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus power imbalance of a voltage profile under series-impedance physics.

    Computes ``p - Re(sum_j V_i conj((V_j - V_i)/z_ij))`` (and the imaginary
    counterpart for ``q``) branch by branch. ``p``/``q`` default to the
    scheduled drawn power. Shunts, taps and line charging are ignored, so on
    an unsimplified case this is not the solver's model.
    """
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if p is None or q is None:
        p0, q0 = case.drawn_power()
        p = p0 if p is None else p
        q = q0 if q is None else q
    balance = np.zeros(case.n_bus, dtype=complex)
    for br in case.branches:
        i, j = br.from_bus, br.to_bus
        z = complex(br.r, br.x)
        vi = vm[i] * complex(np.cos(va[i]), np.sin(va[i]))
        vj = vm[j] * complex(np.cos(va[j]), np.sin(va[j]))
        balance[i] += vi * ((vj - vi) / z).conjugate()
        balance[j] += vj * ((vi - vj) / z).conjugate()
    return np.asarray(p) - balance.real, np.asarray(q) - balance.imag
