"""Integration of the disturbed system x' = f(x) + d(t), |d(t)| <= delta.

Disturbance signals are sampled from a finite family of policies (the
"battery").  Every verdict computed from battery simulations is evidence, not
proof: a violation is a true counterexample up to integration error, while a
pass means no battery member falsified the property.  Callers label such
results "sampled".

Integration is fixed-step RK4 with the disturbance held constant within each
step.  The batched engine (`run_sweep`) advances many trajectories at once as
numpy arrays; `integrate` is the single-trajectory wrapper that also records
the full path.  Both share the same arithmetic, and results are bit-identical
for identical (system, start, policy, horizon, dt, seed).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .expr import ScalarField, VectorField
from .geometry import Box

__all__ = [
    "PerturbedSystem",
    "DisturbancePolicy",
    "ZeroPolicy",
    "ConstantPolicy",
    "PiecewiseRandomPolicy",
    "ExtremalFeedbackPolicy",
    "Trajectory",
    "integrate",
    "ensemble",
    "default_policy_battery",
    "run_sweep",
    "SweepResult",
    "STATUS_RUNNING",
    "STATUS_HORIZON",
    "STATUS_BLOWUP",
    "STATUS_LEFT_DOMAIN",
]

STATUS_RUNNING = 0
STATUS_HORIZON = 1
STATUS_BLOWUP = 2
STATUS_LEFT_DOMAIN = 3
STATUS_ABORTED = 4

_STATUS_REASON = {
    STATUS_HORIZON: "horizon_reached",
    STATUS_BLOWUP: "blow_up",
    STATUS_LEFT_DOMAIN: "left_domain",
    STATUS_ABORTED: "aborted",
}


@dataclass(frozen=True)
class PerturbedSystem:
    """x' = f(x) + d(t) with |d(t)| <= delta; delta = 0 is the nominal system."""

    f: VectorField
    delta: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if len(self.f.components) != self.f.dim:
            raise ValueError(
                f"vector field has {len(self.f.components)} components "
                f"but {self.f.dim} variables"
            )

    @property
    def dim(self) -> int:
        return self.f.dim


def _project_ball(D: np.ndarray, delta: float) -> np.ndarray:
    """Clamp rows of D onto the ball of radius delta."""
    if delta == 0.0:
        D[:] = 0.0
        return D
    norms = np.sqrt(np.sum(D * D, axis=1))
    over = norms > delta
    if np.any(over):
        D[over] *= (delta / norms[over])[:, None]
    return D


class DisturbancePolicy:
    """One disturbance signal d(t) (possibly state feedback).  ``values``
    fills an (m, n) array for a batch of trajectories at time t; emitted
    values always satisfy |d| <= delta."""

    label: str = "policy"
    #: True when d depends on the current state and must be refreshed each step
    needs_state: bool = False

    def prepare(self, sys: PerturbedSystem, horizon: float, dt: float) -> None:
        pass

    def refresh_period(self, dt: float) -> int:
        """Number of dt-steps between disturbance updates (1 = every step)."""
        return 1

    def values(self, t: float, X: np.ndarray, out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__, "label": self.label}


class ZeroPolicy(DisturbancePolicy):
    label = "zero"

    def refresh_period(self, dt: float) -> int:
        return 1 << 30

    def values(self, t, X, out):
        out[:] = 0.0
        return out


class ConstantPolicy(DisturbancePolicy):
    def __init__(self, vector, label: str | None = None):
        self.vector = np.asarray(vector, dtype=float).ravel()
        self.label = label or "const[" + ",".join(f"{v:+.4g}" for v in self.vector) + "]"
        self._clamped = self.vector.copy()

    def prepare(self, sys, horizon, dt):
        self._clamped = _project_ball(self.vector.copy()[None, :], sys.delta)[0]

    def refresh_period(self, dt: float) -> int:
        return 1 << 30

    def values(self, t, X, out):
        out[:] = self._clamped
        return out


class PiecewiseRandomPolicy(DisturbancePolicy):
    """Piecewise-constant signal refreshed every ``dwell`` time units, each
    value drawn uniformly from the surface of the delta-sphere (extreme points
    of the disturbance set generate the widest tubes).  Deterministic given
    the seed."""

    def __init__(self, seed: int, dwell: float = 0.1):
        if dwell <= 0:
            raise ValueError("dwell must be positive")
        self.seed = int(seed)
        self.dwell = float(dwell)
        self.label = f"random[seed={self.seed},dwell={self.dwell:g}]"
        self._table: np.ndarray | None = None
        self._dt = 1.0

    def prepare(self, sys, horizon, dt):
        n_dwell = int(math.ceil(horizon / self.dwell)) + 2
        rng = np.random.default_rng(self.seed)
        raw = rng.standard_normal((n_dwell, sys.dim))
        norms = np.sqrt(np.sum(raw * raw, axis=1))
        norms[norms == 0.0] = 1.0
        self._table = (sys.delta / norms)[:, None] * raw
        self._dt = dt

    def refresh_period(self, dt: float) -> int:
        return max(1, int(round(self.dwell / dt)))

    def values(self, t, X, out):
        idx = min(int(t / self.dwell + 1e-12), self._table.shape[0] - 1)
        out[:] = self._table[idx]
        return out

    def describe(self) -> dict:
        return {"kind": "PiecewiseRandomPolicy", "label": self.label,
                "seed": self.seed, "dwell": self.dwell}


class ExtremalFeedbackPolicy(DisturbancePolicy):
    """State feedback d(x) = sign * delta * grad g(x)/|grad g(x)| for a
    set-defining function g (or a fixed unit direction), driving trajectories
    up or down that function as fast as the disturbance budget allows."""

    needs_state = True

    def __init__(self, source: ScalarField | np.ndarray, sign: int = +1, name: str = ""):
        self.sign = 1 if sign >= 0 else -1
        if isinstance(source, ScalarField):
            self.field = source
            self.direction = None
            self.label = f"extremal[{'+' if self.sign > 0 else '-'}grad {name or source.source}]"
        else:
            self.field = None
            v = np.asarray(source, dtype=float).ravel()
            norm = np.linalg.norm(v)
            self.direction = v / norm if norm > 0 else v
            self.label = f"extremal[{'+' if self.sign > 0 else '-'}dir {np.round(self.direction, 3).tolist()}]"
        self._delta = 0.0
        self._grad: VectorField | None = None

    def prepare(self, sys, horizon, dt):
        self._delta = sys.delta
        if self.field is not None:
            self._grad = self.field.grad()

    def values(self, t, X, out):
        if self.direction is not None:
            out[:] = (self.sign * self._delta) * self.direction
            return out
        G = self._grad.eval_many(X)
        norms = np.sqrt(np.sum(G * G, axis=1))
        safe = norms > 1e-12
        out[:] = 0.0
        out[safe] = (self.sign * self._delta / norms[safe])[:, None] * G[safe]
        return out


# ---------------------------------------------------------------------------
# Batched RK4 sweep engine


@dataclass
class SweepResult:
    states: np.ndarray        # (R, n) final (or frozen) states
    status: np.ndarray        # (R,) termination codes
    end_times: np.ndarray     # (R,) time of freeze or horizon
    start_index: np.ndarray   # (R,) row -> index into `starts`
    policy_index: np.ndarray  # (R,) row -> index into `policies`
    snapshots: dict = field(default_factory=dict)  # time -> (R, n) copies

    def reason(self, row: int) -> str:
        return _STATUS_REASON.get(int(self.status[row]), "running")


def run_sweep(
    sys: PerturbedSystem,
    starts: np.ndarray,
    policies,
    horizon: float,
    dt: float,
    *,
    blowup_bound: float = 1e6,
    freeze_domain: Box | None = None,
    observer=None,
    snapshot_times=(),
) -> SweepResult:
    """Advance every (start, policy) pair with fixed-step RK4.

    Rows that blow up (non-finite or |x|_inf > blowup_bound) or leave
    ``freeze_domain`` are frozen at their last state and excluded from further
    updates; this is always recorded in ``status``, never silent.

    ``observer(step, t, X, active, start_index, policy_index, D)`` is invoked
    once at t=0 and after every step; it must treat the arrays as read-only.
    An observer returning a truthy value aborts the sweep early; rows still
    running are then marked ``aborted``.
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("horizon and dt must be positive")
    if dt > horizon:
        raise ValueError(f"dt={dt} exceeds horizon={horizon}")
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if not np.all(np.isfinite(starts)):
        raise ValueError("initial states must be finite")
    m, n = starts.shape
    if n != sys.dim:
        raise ValueError(f"starts have dimension {n}, system expects {sys.dim}")
    policies = list(policies)
    if not policies:
        raise ValueError("at least one policy is required")
    P = len(policies)
    R = m * P

    X = np.tile(starts, (P, 1))
    start_index = np.tile(np.arange(m), P)
    policy_index = np.repeat(np.arange(P), m)
    status = np.zeros(R, dtype=np.int8)
    end_times = np.full(R, horizon)
    D = np.zeros((R, n))

    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        n_steps = 1
    snap_steps = {}
    for ts in snapshot_times:
        k = int(round(ts / dt))
        snap_steps.setdefault(min(max(k, 0), n_steps), float(ts))

    groups = []
    for p, pol in enumerate(policies):
        pol.prepare(sys, horizon, dt)
        rows = slice(p * m, (p + 1) * m)
        groups.append((pol, rows, pol.refresh_period(dt), pol.needs_state))

    comps = [c._compiled for c in sys.f.components]
    k1 = np.empty((R, n))
    k2 = np.empty((R, n))
    k3 = np.empty((R, n))
    k4 = np.empty((R, n))
    Xt = np.empty((R, n))

    def rhs(Xin: np.ndarray, out: np.ndarray) -> np.ndarray:
        cols = [Xin[:, j] for j in range(n)]
        for j, c in enumerate(comps):
            out[:, j] = c(*cols)
        out += D
        return out

    active = status == STATUS_RUNNING
    snapshots: dict = {}
    for pol, rows, _, _ in groups:
        pol.values(0.0, X[rows], D[rows])
    _project_ball(D, sys.delta)

    if freeze_domain is not None:
        inside = freeze_domain.contains_many(X)
        newly = active & ~inside
        status[newly] = STATUS_LEFT_DOMAIN
        end_times[newly] = 0.0
        active = status == STATUS_RUNNING

    aborted = False
    if observer is not None:
        aborted = bool(observer(0, 0.0, X, active, start_index, policy_index, D))
    if 0 in snap_steps:
        snapshots[snap_steps[0]] = X.copy()

    half = 0.5 * dt
    sixth = dt / 6.0
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            if aborted:
                break
            t = k * dt
            for pol, rows, period, needs_state in groups:
                if needs_state or k % period == 0:
                    pol.values(t, X[rows], D[rows])
                    _project_ball(D[rows], sys.delta)
            rhs(X, k1)
            np.multiply(k1, half, out=Xt)
            Xt += X
            rhs(Xt, k2)
            np.multiply(k2, half, out=Xt)
            Xt += X
            rhs(Xt, k3)
            np.multiply(k3, dt, out=Xt)
            Xt += X
            rhs(Xt, k4)
            # Xt := X + dt/6 (k1 + 2 k2 + 2 k3 + k4)
            np.add(k2, k3, out=k2)
            k2 *= 2.0
            k2 += k1
            k2 += k4
            np.multiply(k2, sixth, out=Xt)
            Xt += X

            t1 = (k + 1) * dt
            ok = np.isfinite(Xt).all(axis=1) & (np.abs(Xt).max(axis=1) <= blowup_bound)
            newly_blown = active & ~ok
            if np.any(newly_blown):
                status[newly_blown] = STATUS_BLOWUP
                end_times[newly_blown] = t1
            advance = active & ok
            X[advance] = Xt[advance]
            if freeze_domain is not None:
                inside = freeze_domain.contains_many(X)
                newly_out = active & ok & ~inside
                if np.any(newly_out):
                    status[newly_out] = STATUS_LEFT_DOMAIN
                    end_times[newly_out] = t1
            active = status == STATUS_RUNNING
            if observer is not None:
                aborted = bool(observer(k + 1, t1, X, active, start_index, policy_index, D))
            if (k + 1) in snap_steps:
                snapshots[snap_steps[k + 1]] = X.copy()
            if aborted:
                end_times[status == STATUS_RUNNING] = t1
                break

    status[status == STATUS_RUNNING] = STATUS_ABORTED if aborted else STATUS_HORIZON
    return SweepResult(X, status, end_times, start_index, policy_index, snapshots)


# ---------------------------------------------------------------------------
# Single trajectories


@dataclass
class Trajectory:
    """One solution record: strictly increasing times from 0, the states, and
    the disturbance applied on each step (last entry repeats)."""

    times: np.ndarray
    states: np.ndarray
    disturbances: np.ndarray
    terminated_reason: str
    policy_label: str = ""

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def max_disturbance_norm(self) -> float:
        return float(np.sqrt(np.sum(self.disturbances**2, axis=1)).max())

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        header = ",".join(
            ["t"] + [f"x{i+1}" for i in range(n)] + [f"d{i+1}" for i in range(n)]
        )
        data = np.column_stack([self.times, self.states, self.disturbances])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def integrate(
    sys: PerturbedSystem,
    x0,
    policy: DisturbancePolicy,
    horizon: float,
    dt: float,
    *,
    blowup_bound: float = 1e6,
    domain: Box | None = None,
) -> Trajectory:
    """Integrate one trajectory, recording every step.  Non-finite states
    terminate with reason 'blow_up'; they never raise."""
    x0 = np.asarray(x0, dtype=float).ravel()
    n_steps = int(round(horizon / dt))
    n = x0.size
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, n))
    dists = np.zeros((n_steps + 1, n))

    def recorder(step, t, X, active, s_idx, p_idx, D):
        times[step] = t
        states[step] = X[0]
        dists[step] = D[0]

    res = run_sweep(
        sys,
        x0[None, :],
        [policy],
        horizon,
        dt,
        blowup_bound=blowup_bound,
        freeze_domain=domain,
        observer=recorder,
    )
    reason = res.reason(0)
    if reason == "horizon_reached":
        last = n_steps
    elif reason == "blow_up":
        # the state at the freeze time is undefined; keep the last good one
        last = int(round(res.end_times[0] / dt)) - 1
    else:  # left_domain: the exit state is defined and recorded
        last = int(round(res.end_times[0] / dt))
    last = min(max(last, 0), n_steps)
    return Trajectory(
        times[: last + 1].copy(),
        states[: last + 1].copy(),
        dists[: last + 1].copy(),
        terminated_reason=reason,
        policy_label=policy.label,
    )


def ensemble(
    sys: PerturbedSystem,
    x0,
    policies,
    horizon: float,
    dt: float,
    *,
    blowup_bound: float = 1e6,
    domain: Box | None = None,
    threads: int = 1,
) -> list[Trajectory]:
    """One trajectory per policy from the same start; per-trajectory failures
    terminate that trajectory without aborting the ensemble."""
    policies = list(policies)
    if not policies:
        raise ValueError("ensemble needs a non-empty policy list")

    def one(pol):
        return integrate(sys, x0, pol, horizon, dt, blowup_bound=blowup_bound, domain=domain)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, policies))
    return [one(pol) for pol in policies]


# ---------------------------------------------------------------------------
# Policy battery


def default_policy_battery(
    sys: PerturbedSystem,
    n_random: int = 8,
    seed: int = 0,
    set_fields=(),
    dwell: float = 0.1,
) -> list[DisturbancePolicy]:
    """The standard adversarial family: the zero signal, constants at the
    extreme axis and cube-vertex directions of the disturbance ball, extremal
    feedback along the gradients of any declared set-defining functions, and
    ``n_random`` seeded piecewise-random signals."""
    if n_random < 0:
        raise ValueError("n_random must be nonnegative")
    n = sys.dim
    delta = sys.delta
    policies: list[DisturbancePolicy] = [ZeroPolicy()]
    seen: set[tuple] = set()

    def add_constant(direction: np.ndarray):
        key = tuple(np.round(direction, 12))
        if key in seen or not np.any(direction):
            return
        seen.add(key)
        policies.append(ConstantPolicy(delta * direction))

    for i in range(n):
        for s in (+1.0, -1.0):
            e = np.zeros(n)
            e[i] = s
            add_constant(e)
    if n > 1:
        for bits in range(2**n):
            v = np.array([1.0 if (bits >> i) & 1 else -1.0 for i in range(n)])
            add_constant(v / np.sqrt(n))
    for g in set_fields:
        policies.append(ExtremalFeedbackPolicy(g, +1))
        policies.append(ExtremalFeedbackPolicy(g, -1))
    seeds = np.random.SeedSequence(seed).generate_state(max(n_random, 1))
    for i in range(n_random):
        policies.append(PiecewiseRandomPolicy(int(seeds[i]), dwell=dwell))
    return policies
