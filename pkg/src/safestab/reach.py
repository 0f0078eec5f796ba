"""Sampled reachable sets, forward invariance, invariant-set computation,
winning sets, and the two specification checkers (reach-avoid-stay and
stability-with-safety), plus the asymptotic-stability probe.

Quantifiers over disturbance signals are evaluated against a finite policy
battery, so every result here is falsification-complete (a "no" comes with a
concrete counterexample trajectory, accurate up to integration error) but
verification-sampled (a "yes" means no battery member falsified the
property).  Verdict strings carry the ``_sampled`` suffix to make that
explicit, and reports echo the battery so runs can be reproduced exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    STATUS_BLOWUP,
    STATUS_HORIZON,
    STATUS_LEFT_DOMAIN,
    PerturbedSystem,
    run_sweep,
)
from .geometry import Box, Grid, MaskSet, SetSpec

__all__ = [
    "Counterexample",
    "ReachResult",
    "reach_tube",
    "InvarianceReport",
    "check_invariance",
    "InvariantSetResult",
    "maximal_invariant",
    "WinningSetResult",
    "winning_set",
    "SpecVerdict",
    "check_ras",
    "check_sws",
    "UASProbeReport",
    "probe_uas",
]

YES = "yes_sampled"
NO = "no"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Counterexample:
    x0: tuple
    policy: str
    time: float
    kind: str
    value: float = math.nan

    def to_dict(self) -> dict:
        return {
            "x0": list(self.x0),
            "policy": self.policy,
            "time": self.time,
            "kind": self.kind,
            "value": None if math.isnan(self.value) else self.value,
        }


def _tolerant_membership(S: SetSpec, grid: Grid | None, tol: float):
    """Vectorized x -> 'within tol of S' test.  Exact-distance sets use their
    distance; mask sets use a dilated mask (tol rounded up to whole cells);
    sublevel sets fall back to plain membership (tolerance in g-units is not
    meaningful as a Euclidean tolerance)."""
    if isinstance(S, MaskSet):
        cells = max(0, int(math.ceil(tol / S.grid.widths.min() - 1e-9)))
        dilated = S.grid.dilate(S.mask, cells) if cells else S.mask

        def member(X: np.ndarray) -> np.ndarray:
            flat, inside = S.grid.cell_index_many(X)
            out = np.zeros(X.shape[0], dtype=bool)
            out[inside] = dilated[flat[inside]]
            return out

        return member
    if S.exact_distance:
        return lambda X: S.dist_many(X) <= tol
    return lambda X: S.contains_many(X)


# ---------------------------------------------------------------------------
# Reach tubes


@dataclass
class ReachResult:
    grid: Grid
    mask: np.ndarray           # boolean, one entry per grid cell
    horizon: tuple             # (t_lo, t_hi)
    semantics: str             # 'sampled_under' or 'lipschitz_over'
    boundary_exits: int = 0
    n_starts: int = 0
    n_policies: int = 0
    notes: str = ""

    def mask_set(self) -> MaskSet:
        return MaskSet(self.grid, self.mask)

    def inflated(self, sys: PerturbedSystem, sample: int = 400) -> "ReachResult":
        """Heuristic over-approximation: dilate the sampled tube by a
        cell-radius ball grown at the sampled Lipschitz rate of f over the
        grid domain.  Diagnostic only; the growth factor is usually huge."""
        lip = _lipschitz_estimate(sys, self.grid, sample)
        t_span = self.horizon[1]
        growth = self.grid.cell_radius * math.exp(min(lip * t_span, 60.0))
        cells = int(math.ceil(growth / self.grid.widths.min()))
        if cells >= max(self.grid.shape):
            mask = np.ones(self.grid.size, dtype=bool)
            note = f"heuristic: Lipschitz growth {growth:.3g} exceeds the grid"
        else:
            mask = self.grid.dilate(self.mask, cells)
            note = f"heuristic: dilated by {cells} cells (L~{lip:.3g})"
        return ReachResult(
            self.grid, mask, self.horizon, "lipschitz_over",
            self.boundary_exits, self.n_starts, self.n_policies, note,
        )


def _lipschitz_estimate(sys: PerturbedSystem, grid: Grid, sample: int) -> float:
    n = sys.dim
    pts = grid.points
    if pts.shape[0] > sample:
        idx = np.linspace(0, pts.shape[0] - 1, sample).astype(int)
        pts = pts[idx]
    J = np.empty((pts.shape[0], n, n))
    for i, comp in enumerate(sys.f.components):
        J[:, i, :] = comp.grad().eval_many(pts)
    J = np.where(np.isfinite(J), J, 0.0)
    return float(np.linalg.norm(J, ord=2, axis=(1, 2)).max()) if pts.size else 0.0


class _Occupancy:
    def __init__(self, grid: Grid, t_lo: float = 0.0):
        self.grid = grid
        self.t_lo = t_lo
        self.mask = np.zeros(grid.size, dtype=bool)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        if t < self.t_lo or not np.any(active):
            return
        flat, inside = self.grid.cell_index_many(X[active])
        self.mask[flat[inside]] = True


def reach_tube(
    sys: PerturbedSystem,
    W: SetSpec,
    horizon,
    grid: Grid,
    battery,
    dt: float,
    *,
    blowup_bound: float = 1e6,
) -> ReachResult:
    """Cells visited by any battery trajectory started from the grid points
    in W during [t_lo, t_hi] (scalar horizon means [0, horizon])."""
    if isinstance(horizon, (tuple, list)):
        t_lo, t_hi = float(horizon[0]), float(horizon[1])
    else:
        t_lo, t_hi = 0.0, float(horizon)
    starts_idx = grid.select(W)
    if starts_idx.size == 0:
        raise ValueError(
            "W contains no grid points; refine the grid resolution or enlarge W"
        )
    starts = grid.point_of(starts_idx)
    occ = _Occupancy(grid, t_lo)
    res = run_sweep(
        sys, starts, battery, t_hi, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=occ,
    )
    exits = int(np.count_nonzero(res.status == STATUS_LEFT_DOMAIN))
    return ReachResult(
        grid, occ.mask, (t_lo, t_hi), "sampled_under",
        boundary_exits=exits, n_starts=starts.shape[0], n_policies=len(list(battery)),
    )


# ---------------------------------------------------------------------------
# Forward invariance


@dataclass
class InvarianceReport:
    verdict: str
    escapes: list
    tolerance: float
    n_starts: int
    n_policies: int
    semantics: str = "sampled"

    @property
    def first_escape(self):
        return self.escapes[0] if self.escapes else None

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "tolerance": self.tolerance,
            "n_starts": self.n_starts,
            "n_policies": self.n_policies,
            "escapes": [c.to_dict() for c in self.escapes[:50]],
            "n_escapes": len(self.escapes),
            "semantics": self.semantics,
        }


class _FirstExit:
    """Per-row first time the membership test fails."""

    def __init__(self, member, n_rows: int):
        self.member = member
        self.time = np.full(n_rows, np.inf)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        fresh = active & np.isinf(self.time)
        if not np.any(fresh):
            return
        rows = np.nonzero(fresh)[0]
        out = ~self.member(X[rows])
        self.time[rows[out]] = t


def check_invariance(
    sys: PerturbedSystem,
    S: SetSpec,
    grid: Grid,
    battery,
    horizon: float,
    dt: float,
    *,
    tol: float | None = None,
    blowup_bound: float = 1e6,
) -> InvarianceReport:
    """Simulate the battery from every grid point in S and report the first
    escape (point, policy, time) or a sampled-invariance verdict.  Containment
    is tested with a one-cell-radius tolerance by default, consistent with the
    grid resolution."""
    battery = list(battery)
    starts_idx = grid.select(S)
    if starts_idx.size == 0:
        raise ValueError("S contains no grid points; refine the grid")
    starts = grid.point_of(starts_idx)
    if tol is None:
        tol = grid.cell_radius
    member = _tolerant_membership(S, grid, tol)
    obs = _FirstExit(member, starts.shape[0] * len(battery))
    res = run_sweep(
        sys, starts, battery, horizon, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=obs,
    )
    escapes = []
    order = np.argsort(obs.time, kind="stable")
    for r in order:
        if not np.isfinite(obs.time[r]):
            break
        escapes.append(
            Counterexample(
                x0=tuple(float(v) for v in starts[res.start_index[r]]),
                policy=battery[res.policy_index[r]].label,
                time=float(obs.time[r]),
                kind="escape",
            )
        )
    for r in np.nonzero(res.status == STATUS_BLOWUP)[0]:
        escapes.append(
            Counterexample(
                x0=tuple(float(v) for v in starts[res.start_index[r]]),
                policy=battery[res.policy_index[r]].label,
                time=float(res.end_times[r]),
                kind="blow_up",
            )
        )
    verdict = YES if not escapes else NO
    return InvarianceReport(verdict, escapes, float(tol), starts.shape[0], len(battery))


# ---------------------------------------------------------------------------
# Maximal invariant set


@dataclass
class InvariantSetResult:
    grid: Grid
    mask: MaskSet          # the returned set
    kernel: MaskSet        # the stay-in-Omega fixpoint (mode-independent)
    iterations: int
    mode: str
    empty: bool
    notes: str = ""

    def endpoints(self):
        """Per-axis (min, max) of marked cell centers."""
        if self.mask.is_empty:
            return None
        pts = self.grid.points[self.mask.mask]
        return [(float(pts[:, i].min()), float(pts[:, i].max())) for i in range(self.grid.dim)]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "empty": self.empty,
            "n_cells": int(self.mask.mask.sum()),
            "n_kernel_cells": int(self.kernel.mask.sum()),
            "endpoints": self.endpoints(),
            "notes": self.notes,
        }


class _CellTrace:
    """Visited cell index per row per step of a short window (-1 = outside)."""

    def __init__(self, grid: Grid, n_rows: int, n_steps: int):
        self.grid = grid
        self.cells = np.full((n_rows, n_steps + 1), -1, dtype=np.int64)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        flat, inside = self.grid.cell_index_many(X)
        flat = np.where(inside & active, flat, -1)
        self.cells[:, step] = flat


def maximal_invariant(
    sys: PerturbedSystem,
    omega_set: SetSpec,
    grid: Grid,
    battery,
    horizon: float,
    dt: float,
    *,
    dwell_window: float | None = None,
    mode: str = "core",
    tail_fraction: float = 0.75,
    blowup_bound: float = 1e6,
) -> InvariantSetResult:
    """Largest sampled subset of Omega from which no battery trajectory can be
    driven out.

    mode='kernel' returns the stay-in-Omega fixpoint: starting from all Omega
    cells, cells from which some battery trajectory leaves the current
    candidate within one dwell window are removed until nothing changes
    (window traces are simulated once; the pruning cascades over them).

    mode='core' (default) additionally trims transient cells: it keeps the
    cells occupied at late times (t >= tail_fraction * horizon) by battery
    runs started all over the kernel, closed forward under the battery.  The
    core is an inner estimate of the kernel that discards one-way-transit
    regions; it is the set a long-run battery simulation actually settles
    into, and it remains sampled-invariant by construction.
    """
    if mode not in ("core", "kernel"):
        raise ValueError(f"unknown mode {mode!r}")
    battery = list(battery)
    if dwell_window is None:
        dwell_window = 10.0 * dt
    cells0 = grid.select(omega_set)
    if cells0.size == 0:
        raise ValueError("Omega contains no grid points; refine the grid")
    starts = grid.point_of(cells0)
    m = starts.shape[0]
    P = len(battery)
    w_steps = max(1, int(round(dwell_window / dt)))

    trace = _CellTrace(grid, m * P, w_steps)
    run_sweep(
        sys, starts, battery, w_steps * dt, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=trace,
    )

    candidate = np.zeros(grid.size, dtype=bool)
    candidate[cells0] = True
    visited = trace.cells  # (m*P, w_steps+1)
    valid = visited >= 0
    iterations = 0
    while True:
        iterations += 1
        inside = np.where(valid, candidate[np.where(valid, visited, 0)], False)
        row_ok = np.all(inside | ~valid, axis=1) & np.all(valid, axis=1)
        start_ok = row_ok.reshape(P, m).all(axis=0)
        new_candidate = np.zeros_like(candidate)
        new_candidate[cells0[start_ok]] = True
        new_candidate &= candidate
        if np.array_equal(new_candidate, candidate):
            break
        candidate = new_candidate
        if not candidate.any():
            break
    kernel_mask = candidate
    kernel = MaskSet(grid, kernel_mask)

    if mode == "kernel" or not kernel_mask.any():
        return InvariantSetResult(
            grid, kernel, kernel, iterations, mode,
            empty=not kernel_mask.any(),
            notes="" if kernel_mask.any() else "empty fixpoint: Omega holds no sampled-invariant cells",
        )

    # late-time occupancy over the kernel, then forward closure
    kern_idx = np.nonzero(kernel_mask)[0]
    tail = _Occupancy(grid, t_lo=tail_fraction * horizon)
    run_sweep(
        sys, grid.point_of(kern_idx), battery, horizon, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=tail,
    )
    seed_mask = tail.mask & kernel_mask
    notes = ""
    if not seed_mask.any():
        return InvariantSetResult(
            grid, kernel, kernel, iterations, mode,
            empty=False,
            notes="no late-time occupancy inside the kernel; returning the kernel",
        )
    closure = _Occupancy(grid, t_lo=0.0)
    run_sweep(
        sys, grid.point_of(np.nonzero(seed_mask)[0]), battery, horizon, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=closure,
    )
    core_mask = (closure.mask | seed_mask) & kernel_mask
    clipped = int(np.count_nonzero(closure.mask & ~kernel_mask))
    if clipped:
        notes = f"{clipped} closure cells fell outside the kernel and were clipped"
    return InvariantSetResult(
        grid, MaskSet(grid, core_mask), kernel, iterations, mode,
        empty=not core_mask.any(), notes=notes,
    )


# ---------------------------------------------------------------------------
# Winning set


@dataclass
class WinningSetResult:
    grid: Grid
    mask: np.ndarray
    inconclusive: np.ndarray
    eval_cells: np.ndarray
    conv_radius: float
    settle_deadline: float
    notes: str = ""

    def mask_set(self) -> MaskSet:
        return MaskSet(self.grid, self.mask)

    def n_inconclusive(self) -> int:
        return int(self.inconclusive.sum())


class _WinObserver:
    def __init__(self, target_member, unsafe: SetSpec, n_rows: int):
        self.target_member = target_member
        self.unsafe = unsafe
        self.entered_unsafe = np.full(n_rows, np.inf)
        self.last_outside_target = np.full(n_rows, -np.inf)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        consider = active | (step == 0)
        rows = np.nonzero(consider)[0]
        if rows.size == 0:
            return
        pts = X[rows]
        hit = self.unsafe.contains_many(pts)
        fresh = hit & np.isinf(self.entered_unsafe[rows])
        self.entered_unsafe[rows[fresh]] = t
        outside = ~self.target_member(pts)
        self.last_outside_target[rows[outside]] = t


def winning_set(
    sys: PerturbedSystem,
    A: SetSpec,
    U: SetSpec,
    grid: Grid,
    battery,
    horizon: float,
    dt: float,
    *,
    conv_radius: float | None = None,
    settle_fraction: float = 0.75,
    eval_cells: np.ndarray | None = None,
    blowup_bound: float = 1e6,
) -> WinningSetResult:
    """Mark the grid cells from which every battery trajectory (i) never
    enters U and (ii) has entered A + conv_radius*B by the settle deadline and
    stays there for the rest of the horizon.  Sampled semantics throughout.

    conv_radius defaults to twice the grid cell radius: below the grid
    resolution, membership in A is not observable.
    """
    battery = list(battery)
    if conv_radius is None:
        conv_radius = 2.0 * grid.cell_radius
    both = A.contains_many(grid.points) & U.contains_many(grid.points)
    if np.any(both):
        raise ValueError("A and U intersect on the grid; the query is ill-posed")
    if eval_cells is None:
        eval_cells = np.arange(grid.size)
    eval_cells = np.asarray(eval_cells, dtype=np.int64)
    starts = grid.point_of(eval_cells)
    m, P = starts.shape[0], len(battery)
    member = _tolerant_membership(A, grid, conv_radius)
    obs = _WinObserver(member, U, m * P)
    res = run_sweep(
        sys, starts, battery, horizon, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=obs,
    )
    deadline = settle_fraction * horizon
    safe_row = np.isinf(obs.entered_unsafe)
    settled_row = (obs.last_outside_target <= deadline) & (res.status == STATUS_HORIZON)
    safe = safe_row.reshape(P, m).all(axis=0)
    settled = settled_row.reshape(P, m).all(axis=0)

    win = np.zeros(grid.size, dtype=bool)
    inconclusive = np.zeros(grid.size, dtype=bool)
    win[eval_cells[safe & settled]] = True
    inconclusive[eval_cells[safe & ~settled]] = True
    notes = ""
    if not win.any() and inconclusive.any():
        notes = "no cell settled within the horizon; increase the horizon"
    return WinningSetResult(
        grid, win, inconclusive, eval_cells, conv_radius, deadline, notes
    )


# ---------------------------------------------------------------------------
# Specification verdicts


@dataclass
class SpecVerdict:
    spec: str
    satisfied: str                # yes_sampled | no | inconclusive
    witness_T: float | None = None
    counterexamples: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    semantics: str = "sampled battery: 'no' is falsification, 'yes' is evidence"

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "satisfied": self.satisfied,
            "witness_T": self.witness_T,
            "counterexamples": [c.to_dict() for c in self.counterexamples[:50]],
            "n_counterexamples": len(self.counterexamples),
            "details": self.details,
            "semantics": self.semantics,
        }


class _RasObserver:
    def __init__(self, omega_member, unsafe: SetSpec, n_rows: int):
        self.omega_member = omega_member
        self.unsafe = unsafe
        self.entered_unsafe = np.full(n_rows, np.inf)
        self.last_outside_omega = np.full(n_rows, -np.inf)
        self.min_unsafe_dist = math.inf

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        consider = active | (step == 0)
        rows = np.nonzero(consider)[0]
        if rows.size == 0:
            return
        pts = X[rows]
        hit = self.unsafe.contains_many(pts)
        fresh = hit & np.isinf(self.entered_unsafe[rows])
        self.entered_unsafe[rows[fresh]] = t
        if self.unsafe.exact_distance:
            d = self.unsafe.dist_many(pts).min()
            if d < self.min_unsafe_dist:
                self.min_unsafe_dist = float(d)
        outside = ~self.omega_member(pts)
        self.last_outside_omega[rows[outside]] = t


def check_ras(
    sys: PerturbedSystem,
    W: SetSpec,
    U: SetSpec,
    Omega: SetSpec,
    grid: Grid,
    battery,
    horizon: float,
    dt: float,
    *,
    settle_fraction: float = 0.75,
    omega_tol: float | None = None,
    blowup_bound: float = 1e6,
) -> SpecVerdict:
    """Reach-avoid-stay: every battery trajectory from the W grid points must
    avoid U on [0, horizon] and be inside Omega from some time T on, where
    "stay" is sampled as remaining in Omega over the final
    (1 - settle_fraction) of the horizon.  witness_T is the smallest sampled
    settle time over the whole battery."""
    battery = list(battery)
    starts_idx = grid.select(W)
    if starts_idx.size == 0:
        raise ValueError("W contains no grid points; refine the grid")
    starts = grid.point_of(starts_idx)
    m, P = starts.shape[0], len(battery)
    member = _tolerant_membership(Omega, grid, grid.cell_radius if omega_tol is None else omega_tol)
    obs = _RasObserver(member, U, m * P)
    res = run_sweep(
        sys, starts, battery, horizon, dt,
        blowup_bound=blowup_bound, freeze_domain=grid.domain, observer=obs,
    )
    deadline = settle_fraction * horizon

    counterexamples: list[Counterexample] = []
    soft = 0
    for r in range(m * P):
        x0 = tuple(float(v) for v in starts[res.start_index[r]])
        label = battery[res.policy_index[r]].label
        if np.isfinite(obs.entered_unsafe[r]):
            counterexamples.append(
                Counterexample(x0, label, float(obs.entered_unsafe[r]), "entered_unsafe")
            )
        elif res.status[r] == STATUS_BLOWUP:
            counterexamples.append(
                Counterexample(x0, label, float(res.end_times[r]), "blow_up")
            )
        elif res.status[r] == STATUS_LEFT_DOMAIN:
            counterexamples.append(
                Counterexample(x0, label, float(res.end_times[r]), "left_grid_domain")
            )
            soft += 1
        elif obs.last_outside_omega[r] > deadline:
            counterexamples.append(
                Counterexample(x0, label, float(obs.last_outside_omega[r]), "never_settled")
            )
            soft += 1

    hard = [c for c in counterexamples if c.kind in ("entered_unsafe", "blow_up")]
    if hard:
        verdict = NO
    elif soft:
        verdict = INCONCLUSIVE
    else:
        verdict = YES
    witness_T = None
    if verdict == YES:
        last = obs.last_outside_omega.max()
        witness_T = float(max(0.0, last + dt)) if np.isfinite(last) else 0.0
    details = {
        "n_starts": m,
        "n_policies": P,
        "settle_deadline": deadline,
        "min_dist_to_unsafe": None
        if not math.isfinite(obs.min_unsafe_dist)
        else obs.min_unsafe_dist,
    }
    return SpecVerdict("ras", verdict, witness_T, counterexamples, details)


def check_sws(
    sys: PerturbedSystem,
    W: SetSpec,
    U: SetSpec,
    A: SetSpec,
    grid: Grid,
    battery,
    horizon: float,
    dt: float,
    *,
    eps_schedule=(0.1, 0.25, 0.5),
    probe_horizon: float | None = None,
    conv_radius: float | None = None,
    blowup_bound: float = 1e6,
    delta_floor: float = 1e-3,
) -> SpecVerdict:
    """Stability with safety: A must probe as uniformly asymptotically stable
    and every W grid cell must lie in the sampled winning set (trajectories
    converge to A and never touch U)."""
    probe = probe_uas(
        sys, A, eps_schedule, battery,
        probe_horizon if probe_horizon is not None else horizon, dt,
        blowup_bound=blowup_bound, delta_floor=delta_floor,
    )
    w_cells = grid.select(W)
    if w_cells.size == 0:
        raise ValueError("W contains no grid points; refine the grid")
    win = winning_set(
        sys, A, U, grid, battery, horizon, dt,
        conv_radius=conv_radius, eval_cells=w_cells, blowup_bound=blowup_bound,
    )
    missing = w_cells[~win.mask[w_cells]]
    counterexamples = list(probe.counterexamples)
    for c in missing[:50]:
        x0 = tuple(float(v) for v in grid.point_of(np.array([c]))[0])
        kind = "unsettled_from_W" if win.inconclusive[c] else "unsafe_or_divergent_from_W"
        counterexamples.append(Counterexample(x0, "battery", math.nan, kind))
    stable = probe.verdict == "consistent_with_UAS"
    if stable and missing.size == 0:
        verdict = YES
    elif probe.verdict == "violated" or np.any(~win.inconclusive[missing]):
        verdict = NO
    else:
        verdict = INCONCLUSIVE
    details = {
        "probe": probe.to_dict(),
        "n_W_cells": int(w_cells.size),
        "n_W_not_winning": int(missing.size),
        "conv_radius": win.conv_radius,
    }
    return SpecVerdict("sws", verdict, None, counterexamples, details)


# ---------------------------------------------------------------------------
# UAS probe


@dataclass
class UASProbeReport:
    eps_table: list            # [(eps, delta_eps)]
    rho: float | None
    attractivity: list         # [(eps, T_eps)]
    verdict: str               # consistent_with_UAS | violated
    counterexamples: list
    delta_floor: float
    horizon: float
    semantics: str = "sampled"

    def to_dict(self) -> dict:
        return {
            "eps_table": [[e, d] for e, d in self.eps_table],
            "rho": self.rho,
            "attractivity": [[e, (None if t is None or math.isinf(t) else t)] for e, t in self.attractivity],
            "verdict": self.verdict,
            "counterexamples": [c.to_dict() for c in self.counterexamples[:50]],
            "delta_floor": self.delta_floor,
            "horizon": self.horizon,
            "semantics": self.semantics,
        }


def _shell_points(hull: Box, c: float) -> np.ndarray:
    """Points at distance exactly c from the box: face centers pushed out
    along each axis and corners pushed out along the diagonals."""
    lo = np.asarray(hull.lo)
    hi = np.asarray(hull.hi)
    mid = 0.5 * (lo + hi)
    n = lo.size
    pts = []
    for i in range(n):
        p = mid.copy()
        p[i] = hi[i] + c
        pts.append(p.copy())
        p[i] = lo[i] - c
        pts.append(p.copy())
    if n > 1:
        shift = c / math.sqrt(n)
        for bits in range(2**n):
            sgn = np.array([1.0 if (bits >> i) & 1 else -1.0 for i in range(n)])
            corner = np.where(sgn > 0, hi, lo)
            pts.append(corner + sgn * shift)
    uniq = np.unique(np.round(np.asarray(pts), 12), axis=0)
    return uniq


class _DistTracker:
    """Distance-to-A statistics, sampled every ``stride`` steps (containment
    is sampled semantics anyway; the stride trades resolution for speed)."""

    def __init__(self, A: SetSpec, n_rows: int, abort_above: float | None = None,
                 stride: int = 1):
        self.A = A
        self.max_dist = np.zeros(n_rows)
        self.first_exceed = np.full(n_rows, np.inf)
        self.final_dist = np.zeros(n_rows)
        self.abort_above = abort_above
        self.stride = max(1, stride)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        if step % self.stride and step != 0:
            return False
        consider = active | (step == 0)
        rows = np.nonzero(consider)[0]
        if rows.size == 0:
            return False
        d = self.A.dist_many(X[rows])
        grow = d > self.max_dist[rows]
        self.max_dist[rows[grow]] = d[grow]
        self.final_dist[rows] = d
        if self.abort_above is not None:
            exceed = (d >= self.abort_above) & np.isinf(self.first_exceed[rows])
            self.first_exceed[rows[exceed]] = t
            return bool(np.any(self.max_dist >= self.abort_above))
        return False


def probe_uas(
    sys: PerturbedSystem,
    A: SetSpec,
    eps_schedule,
    battery,
    horizon: float,
    dt: float,
    *,
    rho: float | None = None,
    delta_floor: float = 1e-3,
    bisect_iters: int = 10,
    growth_flag: float = 1.25,
    blowup_bound: float = 1e6,
    observe_dt: float = 0.01,
) -> UASProbeReport:
    """Empirical probe of uniform asymptotic stability of A.

    Uniform stability: for each eps in the schedule, bisection over the shell
    radius c finds the largest c (>= delta_floor) such that every battery
    trajectory started at distance c stays strictly inside the eps
    neighborhood; runs whose distance is still growing at the horizon
    (final > growth_flag * start) count as failures, so slow escapes are not
    mistaken for containment.  Attractivity: from the rho shell (default: 90%
    of the largest verified stability radius), the settle time into each eps
    neighborhood is the last sampled time at distance >= eps.

    A trajectory that blows up, leaves every shell, or never settles yields a
    'violated' verdict with the offending start, policy, and peak distance.
    """
    battery = list(battery)
    eps_schedule = sorted(float(e) for e in eps_schedule)
    if not eps_schedule:
        raise ValueError("eps_schedule must be non-empty")
    hull = A.hull_box() if hasattr(A, "hull_box") else None
    if hull is None:
        raise TypeError(f"probe needs a box hull for {type(A).__name__}")

    counterexamples: list[Counterexample] = []
    violated = False
    stride = max(1, int(round(observe_dt / dt)))

    def shell_run(c: float, eps: float):
        starts = _shell_points(hull, c)
        tracker = _DistTracker(A, starts.shape[0] * len(battery), abort_above=eps,
                               stride=stride)
        res = run_sweep(
            sys, starts, battery, horizon, dt,
            blowup_bound=blowup_bound, observer=tracker,
        )
        hard = (tracker.max_dist >= eps) | (res.status == STATUS_BLOWUP)
        soft = tracker.final_dist > growth_flag * c
        fails = hard | soft
        if np.any(fails):
            r = int(np.argmax(np.where(hard, tracker.max_dist, -np.inf)))
            if not hard[r]:
                r = int(np.nonzero(fails)[0][0])
            t_fail = tracker.first_exceed[r]
            if not np.isfinite(t_fail):
                t_fail = res.end_times[r]
            kind = "blow_up" if res.status[r] == STATUS_BLOWUP else (
                "left_eps_shell" if hard[r] else "still_growing_at_horizon"
            )
            ce = Counterexample(
                x0=tuple(float(v) for v in starts[res.start_index[r]]),
                policy=battery[res.policy_index[r]].label,
                time=float(t_fail),
                kind=kind,
                value=float(tracker.max_dist[r]),
            )
            return False, ce
        return True, None

    eps_table: list[tuple[float, float]] = []
    best = 0.0
    for eps in eps_schedule:
        lo_c, hi_c = 0.0, eps
        fail_ces: list[Counterexample] = []
        for _ in range(bisect_iters):
            mid = 0.5 * (lo_c + hi_c)
            if mid < delta_floor:
                break  # the stability radius is already known to be sub-floor
            ok, ce = shell_run(mid, eps)
            if ok:
                lo_c = mid
            else:
                hi_c = mid
                fail_ces.append(ce)
        delta_eps = lo_c
        if delta_eps < delta_floor:
            violated = True
            counterexamples.extend(fail_ces[:20])
        best = max(best, delta_eps)
        eps_table.append((eps, max(delta_eps, eps_table[-1][1] if eps_table else 0.0)))

    attractivity: list[tuple[float, float]] = []
    rho_used = rho
    if not violated:
        if rho_used is None:
            rho_used = 0.9 * best if best > 0 else delta_floor
        starts = _shell_points(hull, rho_used)
        obs = _SettleObserver(A, eps_schedule, starts.shape[0] * len(battery),
                              stride=stride)
        res = run_sweep(
            sys, starts, battery, horizon, dt,
            blowup_bound=blowup_bound, observer=obs,
        )
        bad = res.status == STATUS_BLOWUP
        unsettled = obs.final_dist >= eps_schedule[0]
        if np.any(bad) or np.any(unsettled):
            violated = True
            r = int(np.argmax(np.where(bad, np.inf, obs.final_dist)))
            counterexamples.append(
                Counterexample(
                    x0=tuple(float(v) for v in starts[res.start_index[r]]),
                    policy=battery[res.policy_index[r]].label,
                    time=float(horizon),
                    kind="blow_up" if bad[r] else "not_attracted",
                    value=float(obs.final_dist[r]),
                )
            )
            attractivity = [(eps, math.inf) for eps in eps_schedule]
        else:
            times = []
            for j in range(len(eps_schedule)):
                worst = obs.last_above[j].max()
                times.append(float(worst + dt) if np.isfinite(worst) else 0.0)
            for j in range(1, len(times)):  # T(eps) nonincreasing in eps
                times[j] = min(times[j], times[j - 1])
            attractivity = list(zip(eps_schedule, times))

    verdict = "violated" if violated else "consistent_with_UAS"
    return UASProbeReport(
        eps_table, rho_used, attractivity, verdict, counterexamples,
        delta_floor, horizon,
    )


class _SettleObserver:
    """Last time each row was at distance >= eps, for every eps at once,
    plus the final distance (for the never-settled check)."""

    def __init__(self, A: SetSpec, thresholds, n_rows: int, stride: int = 1):
        self.A = A
        self.thresholds = np.asarray(sorted(thresholds))
        self.last_above = np.full((len(self.thresholds), n_rows), -np.inf)
        self.final_dist = np.zeros(n_rows)
        self.stride = max(1, stride)

    def __call__(self, step, t, X, active, s_idx, p_idx, D):
        if step % self.stride and step != 0:
            return
        consider = active | (step == 0)
        rows = np.nonzero(consider)[0]
        if rows.size == 0:
            return
        d = self.A.dist_many(X[rows])
        self.final_dist[rows] = d
        for j, thr in enumerate(self.thresholds):
            above = d >= thr
            self.last_above[j, rows[above]] = t
