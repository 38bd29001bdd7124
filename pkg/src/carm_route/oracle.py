"""Reference solvers for small instances and gap reporting.

``brute_force_optimal`` is exact: it enumerates every feasible route by
label-setting search over (customer set, last customer) with Pareto pruning
on (length, time, peak load, pickup load, backhaul phase), then solves the
set-partitioning problem over customer subsets by dynamic programming.
Each constraint is monotone along a route, so pruning never loses a
feasible completion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import feasible_actions, initial_state, split_routes, step, tour_cost, validate_solution
from .instances import VrpInstance

MAX_BRUTE_FORCE_N = 9
IMPROVE_EPS = 1e-12


class OracleSizeError(ValueError):
    pass


class InfeasibleInstanceError(RuntimeError):
    pass


def _matrix(instance: VrpInstance) -> np.ndarray:
    xy = instance.locations
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)


def _best_routes(instance: VrpInstance) -> dict[int, tuple[float, tuple[int, ...]]]:
    """Cheapest feasible route for every customer subset that admits one."""
    n = instance.n
    v = instance.variant
    D = _matrix(instance)
    cap = instance.capacity
    qty = [0] + [abs(int(q)) for q in instance.demands]
    bh = [False] + [bool(b) for b in instance.backhaul_flags]
    tw = v.time_windows
    if tw:
        early = instance.windows[:, 0]
        late = instance.windows[:, 1]
        service = instance.service_times
        horizon = float(late[0])
    limit = instance.duration_limit if v.duration_limit else math.inf
    closed = not v.open_route

    def extend(label, last, j):
        length, time, peak, pickup, phase, seq = label
        if bh[j]:
            if pickup + qty[j] > cap:
                return None
            pickup2 = pickup + qty[j]
            peak2 = max(peak, pickup2)
            phase2 = True
        else:
            if v.precedence and phase:
                return None
            if peak + qty[j] > cap:
                return None
            peak2, pickup2, phase2 = peak + qty[j], pickup, phase
        length2 = length + D[last, j]
        back = D[j, 0] if closed else 0.0
        if length2 + back > limit:
            return None
        time2 = 0.0
        if tw:
            start = max(time + D[last, j], early[j])
            if start > late[j]:
                return None
            time2 = start + service[j]
            if time2 + back > horizon:
                return None
        return (length2, time2, peak2, pickup2, phase2, seq + (j,))

    def dominated(a, b):
        # b dominates a
        return b[0] <= a[0] and b[1] <= a[1] and b[2] <= a[2] and b[3] <= a[3] and (b[4] <= a[4])

    best: dict[int, tuple[float, tuple[int, ...]]] = {}
    root = (0.0, 0.0, 0, 0, False, ())
    frontier: dict[tuple[int, int], list] = {}
    for j in range(1, n + 1):
        lab = extend(root, 0, j)
        if lab is not None:
            frontier[(1 << (j - 1), j)] = [lab]
    while frontier:
        nxt: dict[tuple[int, int], list] = {}
        for (mask, last), labels in frontier.items():
            closing = D[last, 0] if closed else 0.0
            for lab in labels:
                total = lab[0] + closing
                if mask not in best or total < best[mask][0]:
                    best[mask] = (total, lab[5])
                for j in range(1, n + 1):
                    if mask >> (j - 1) & 1:
                        continue
                    new = extend(lab, last, j)
                    if new is None:
                        continue
                    key = (mask | 1 << (j - 1), j)
                    bucket = nxt.setdefault(key, [])
                    if any(dominated(new, other) for other in bucket):
                        continue
                    bucket[:] = [o for o in bucket if not dominated(o, new)]
                    bucket.append(new)
        frontier = nxt
    return best


def brute_force_optimal(instance: VrpInstance, max_n: int = MAX_BRUTE_FORCE_N) -> tuple[list[int], float]:
    """Provably optimal tour (depot separators, no leading depot) and its cost."""
    n = instance.n
    if n > max_n:
        raise OracleSizeError(f"exact search is limited to n <= {max_n}, got n={n}")
    routes = _best_routes(instance)
    full = (1 << n) - 1
    INF = math.inf
    f = [INF] * (full + 1)
    choice = [0] * (full + 1)
    f[0] = 0.0
    for S in range(1, full + 1):
        low = S & -S
        rest = S ^ low
        # enumerate routes R containing the lowest customer of S
        sub = rest
        while True:
            R = sub | low
            r = routes.get(R)
            if r is not None:
                c = r[0] + f[S ^ R]
                if c < f[S]:
                    f[S] = c
                    choice[S] = R
            if sub == 0:
                break
            sub = (sub - 1) & rest
    if f[full] == INF:
        raise InfeasibleInstanceError("no feasible solution exists for this instance")
    tour: list[int] = []
    S = full
    while S:
        R = choice[S]
        if tour:
            tour.append(0)
        tour.extend(routes[R][1])
        S ^= R
    return tour, tour_cost(instance, tour)


def greedy_nearest_feasible(instance: VrpInstance) -> tuple[list[int], float]:
    """Nearest unmasked customer from each position; depot only when none is."""
    state = initial_state(instance)
    D = _matrix(instance)
    while not state.done:
        keep = feasible_actions(state)
        cand = np.flatnonzero(keep[1:]) + 1
        if cand.size:
            d = D[state.current, cand]
            action = int(cand[np.argmin(d)])
        else:
            action = 0
        state = step(state, action)
    tour = list(state.tour)
    while tour and tour[-1] == 0:
        tour.pop()
    return tour, tour_cost(instance, tour)


def _route_len(D: np.ndarray, route: Sequence[int], closed: bool) -> float:
    total = D[0, route[0]]
    for a, b in zip(route, route[1:]):
        total += D[a, b]
    if closed:
        total += D[route[-1], 0]
    return float(total)


def two_opt_improve(instance: VrpInstance, tour: Sequence[int]) -> list[int]:
    """Intra-route 2-opt, first improvement, until no feasible move helps."""
    D = _matrix(instance)
    closed = not instance.variant.open_route
    routes = split_routes(tour)
    out_routes = []
    for route in routes:
        route = list(route)
        improved = True
        while improved:
            improved = False
            cur = _route_len(D, route, closed)
            for i in range(len(route) - 1):
                for j in range(i + 1, len(route)):
                    cand = route[:i] + route[i:j + 1][::-1] + route[j + 1:]
                    new = _route_len(D, cand, closed)
                    if new < cur - IMPROVE_EPS and not validate_solution(instance, cand, complete=False):
                        route, cur, improved = cand, new, True
                        break
                if improved:
                    break
        out_routes.append(route)
    out: list[int] = []
    for r in out_routes:
        if out:
            out.append(0)
        out.extend(r)
    return out


# ---------------------------------------------------------------------------
# gaps


@dataclass
class GapReport:
    model_costs: np.ndarray
    ref_costs: np.ndarray
    reference: str = "reference"

    def __post_init__(self):
        self.model_costs = np.asarray(self.model_costs, dtype=np.float64)
        self.ref_costs = np.asarray(self.ref_costs, dtype=np.float64)

    @property
    def gaps(self) -> np.ndarray:
        """Per-instance gaps in percent."""
        return 100.0 * (self.model_costs - self.ref_costs) / self.ref_costs

    @property
    def mean_gap(self) -> float:
        return float(self.gaps.mean()) if self.gaps.size else 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance", "model_cost", "ref_cost", "gap_pct"])
            for i, (m, r, g) in enumerate(zip(self.model_costs, self.ref_costs, self.gaps)):
                w.writerow([i, repr(float(m)), repr(float(r)), f"{g:.6f}"])

    def summary(self) -> str:
        return "\n".join([
            f"reference     : {self.reference}",
            f"instances     : {self.model_costs.size}",
            f"mean model    : {self.model_costs.mean():.4f}",
            f"mean reference: {self.ref_costs.mean():.4f}",
            f"mean gap      : {self.mean_gap:.2f}%",
        ])


def optimality_gap(model_costs: Sequence[float], ref_costs: Sequence[float], reference: str = "reference") -> GapReport:
    model = np.asarray(model_costs, dtype=np.float64)
    ref = np.asarray(ref_costs, dtype=np.float64)
    if model.shape != ref.shape:
        raise ValueError(f"cost lists differ in length: {model.size} vs {ref.size}")
    if np.any(ref <= 0):
        raise ValueError("reference costs must be positive")
    return GapReport(model, ref, reference)


def reference_costs(instances: Sequence[VrpInstance], kind: str = "auto") -> tuple[np.ndarray, str]:
    """Optimal costs when every instance is small enough, else greedy + 2-opt."""
    if kind == "auto":
        kind = "optimal" if all(inst.n <= 7 for inst in instances) else "greedy+2opt"
    if kind == "optimal":
        return np.array([brute_force_optimal(inst)[1] for inst in instances]), "optimal"
    if kind != "greedy+2opt":
        raise ValueError(f"unknown reference kind {kind!r}")
    costs = []
    for inst in instances:
        tour, _ = greedy_nearest_feasible(inst)
        costs.append(tour_cost(inst, two_opt_improve(inst, tour)))
    return np.array(costs), "greedy+2opt"
