"""Solution-construction MDP for the capacity/open/backhaul/limit/time-window family.

Two implementations of the same transition rules live here:

* :class:`DecodingState` plus the free functions :func:`reset`,
  :func:`feasibility_mask`, :func:`step` ... operate on one state and are used
  by the heuristics, the exhaustive mask checks and the tests;
* :class:`BatchEnv` runs ``B`` instances times ``P`` parallel rollouts with numpy
  and backs model decoding and the random-policy soak.

Load bookkeeping covers every backhaul flavour with one rule. Linehaul goods
for a route are loaded at the depot, pickups stay on board, so the on-board
peak after serving a prefix is ``peak``; a linehaul of size q is admissible iff
``peak + q <= C`` and a pickup of size q iff ``pickup + q <= C``. Remaining
load is reported as ``C - peak``.

:func:`validate_solution` re-checks complete tours route by route without
touching any of the above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .instances import InstanceBatch, VrpInstance, distance

STRATEGIES = ("PRE", "FGE", "CARM")
VALIDATION_TOL = 1e-9
NEG_INF = -np.inf


class InfeasibleActionError(ValueError):
    """An action outside the feasibility mask was applied."""


class NoFeasibleActionError(RuntimeError):
    """The feasibility mask forbids every node."""


# ---------------------------------------------------------------------------
# single-state API


@dataclass(frozen=True)
class DecodingState:
    instance: VrpInstance = field(repr=False)
    current: int
    visited: tuple[bool, ...]  # length n+1, entry 0 always False
    peak: int = 0
    pickup: int = 0
    time: float = 0.0
    length: float = 0.0
    t: int = 0
    tour: tuple[int, ...] = ()
    backhaul_phase: bool = False
    start_fallback: bool = False

    @property
    def remaining_load(self) -> int:
        return self.instance.capacity - self.peak

    @property
    def done(self) -> bool:
        return all(self.visited[1:])

    def key(self) -> tuple:
        """Hashable summary of everything that influences future feasibility."""
        return (self.current, self.visited, self.peak, self.pickup, self.time, self.length, self.backhaul_phase)


def initial_state(instance: VrpInstance) -> DecodingState:
    return DecodingState(instance, 0, (False,) * (instance.n + 1))


def reset(instance: VrpInstance, start_nodes: Sequence[int]) -> list[DecodingState]:
    """One state per start node with that customer forced as the first move.

    A start that is infeasible from the depot yields a fresh depot state with
    ``start_fallback`` set.
    """
    if len(set(start_nodes)) != len(start_nodes):
        raise ValueError("start nodes must be distinct")
    out = []
    s0 = initial_state(instance)
    keep = feasible_actions(s0)
    for node in start_nodes:
        if not 1 <= node <= instance.n:
            raise ValueError(f"start node {node} is not a customer index")
        out.append(step(s0, node) if keep[node] else replace(s0, start_fallback=True))
    return out


def feasible_actions(state: DecodingState) -> np.ndarray:
    """Boolean mask over the n+1 nodes; True = selectable."""
    inst = state.instance
    v = inst.variant
    n = inst.n
    keep = np.zeros(n + 1, dtype=bool)
    if state.done:
        keep[0] = True
        return keep
    keep[0] = state.current != 0
    cap = inst.capacity
    horizon = inst.horizon
    for j in range(1, n + 1):
        if state.visited[j]:
            continue
        q = inst.quantity(j)
        if inst.is_backhaul(j):
            if state.pickup + q > cap:
                continue
        else:
            if state.peak + q > cap:
                continue
            if v.precedence and state.backhaul_phase:
                continue
        d = inst.dist(state.current, j)
        if v.time_windows:
            e, l = inst.windows[j]
            start = max(state.time + d, e)
            if start > l:
                continue
            finish = start + inst.service_times[j]
            if v.open_route:
                if finish > horizon:
                    continue
            elif finish + inst.dist(j, 0) > horizon:
                continue
        if v.duration_limit:
            span = state.length + d
            if not v.open_route:
                span = span + inst.dist(j, 0)
            if span > inst.duration_limit:
                continue
        keep[j] = True
    return keep


def _bias(keep: np.ndarray) -> np.ndarray:
    return np.where(keep, 0.0, NEG_INF)


def feasibility_mask(state: DecodingState) -> np.ndarray:
    """0 / -inf bias over nodes used at the compatibility (pointer) stage."""
    keep = feasible_actions(state)
    if not keep.any():
        raise NoFeasibleActionError(f"no feasible action from node {state.current} at step {state.t}")
    return _bias(keep)


def attention_keep(state: DecodingState, strategy: str) -> np.ndarray:
    if strategy == "PRE":
        return feasible_actions(state)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    keep = np.array([not v for v in state.visited])
    keep[0] = state.done or state.current != 0
    return keep


def attention_mask(state: DecodingState, strategy: str) -> np.ndarray:
    """PRE masks visited and infeasible nodes; FGE/CARM mask visited only.

    The depot follows the feasibility rule under every strategy.
    """
    return _bias(attention_keep(state, strategy))


def dynamic_features(state: DecodingState, m: int = 4) -> np.ndarray:
    inst = state.instance
    v = inst.variant
    load = state.remaining_load / inst.capacity
    if m == 1:
        return np.array([load])
    if m != 4:
        raise ValueError(f"dynamic feature layout is defined for m in (1, 4), got {m}")
    time = state.time / inst.horizon if v.time_windows else 0.0
    budget = (inst.duration_limit - state.length) / inst.duration_limit if v.duration_limit else 1.0
    return np.array([load, time, budget, 1.0 if v.open_route else 0.0])


def step(state: DecodingState, action: int) -> DecodingState:
    keep = feasible_actions(state)
    if not (0 <= action < len(keep)) or not keep[action]:
        raise InfeasibleActionError(f"action {action} is masked at step {state.t}")
    inst = state.instance
    if action == 0:
        return replace(state, current=0, peak=0, pickup=0, time=0.0, length=0.0, t=state.t + 1,
                       tour=state.tour + (0,), backhaul_phase=False)
    d = inst.dist(state.current, action)
    q = inst.quantity(action)
    peak, pickup, phase = state.peak, state.pickup, state.backhaul_phase
    if inst.is_backhaul(action):
        pickup += q
        peak = max(peak, pickup)
        phase = True
    else:
        peak += q
    time = state.time
    if inst.variant.time_windows:
        time = max(time + d, float(inst.windows[action, 0])) + float(inst.service_times[action])
    visited = list(state.visited)
    visited[action] = True
    return replace(state, current=action, visited=tuple(visited), peak=peak, pickup=pickup, time=time,
                   length=state.length + d, t=state.t + 1, tour=state.tour + (action,), backhaul_phase=phase)


# ---------------------------------------------------------------------------
# tours


def split_routes(tour: Sequence[int]) -> list[list[int]]:
    routes, cur = [], []
    for node in tour:
        if node == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(node))
    if cur:
        routes.append(cur)
    return routes


def route_cost(instance: VrpInstance, route: Sequence[int]) -> float:
    total = 0.0
    prev = 0
    for node in route:
        total += instance.dist(prev, node)
        prev = node
    if not instance.variant.open_route:
        total += instance.dist(prev, 0)
    return total


def tour_cost(instance: VrpInstance, tour: Sequence[int]) -> float:
    """Total Euclidean length; open routes drop each route's return leg."""
    seen = sorted(n for n in tour if n != 0)
    if seen != list(range(1, instance.n + 1)):
        raise ValueError("tour_cost needs a complete tour visiting every customer exactly once")
    return sum(route_cost(instance, r) for r in split_routes(tour))


def route_violations(instance: VrpInstance, route: Sequence[int], tol: float = VALIDATION_TOL) -> list[str]:
    """Side-constraint violations of one depot-to-depot route."""
    v = instance.variant
    out = []
    cap = instance.capacity
    # on-board profile: all linehaul goods loaded at the depot, pickups accumulate
    onboard = sum(instance.quantity(c) for c in route if not instance.is_backhaul(c))
    worst = onboard
    for c in route:
        onboard += instance.quantity(c) if instance.is_backhaul(c) else -instance.quantity(c)
        worst = max(worst, onboard)
    if worst > cap:
        out.append(f"capacity exceeded on route {list(route)}: load {worst} > {cap}")
    if v.precedence:
        seen_backhaul = False
        for c in route:
            if instance.is_backhaul(c):
                seen_backhaul = True
            elif seen_backhaul:
                out.append(f"linehaul customer {c} served after a backhaul on route {list(route)}")
                break
    if v.time_windows:
        horizon = instance.horizon
        time, prev = 0.0, 0
        for c in route:
            start = max(time + instance.dist(prev, c), float(instance.windows[c, 0]))
            if start > instance.windows[c, 1] + tol:
                out.append(f"customer {c}: service starts at {start:.6f} after window close {instance.windows[c, 1]:.6f}")
            time = start + float(instance.service_times[c])
            if v.open_route and time > horizon + tol:
                out.append(f"customer {c}: service ends at {time:.6f} after the horizon")
            prev = c
        if not v.open_route and time + instance.dist(prev, 0) > horizon + tol:
            out.append(f"route {list(route)} returns after depot close")
    if v.duration_limit:
        length = route_cost(instance, route)
        if length > instance.duration_limit + tol:
            out.append(f"route {list(route)} length {length:.6f} exceeds limit {instance.duration_limit:.6f}")
    return out


def validate_solution(instance: VrpInstance, tour: Sequence[int], complete: bool = True) -> list[str]:
    """Check a tour (depot = 0 separators) against every active constraint.

    With ``complete=False`` missing customers are tolerated, which makes the
    check usable on construction prefixes.
    """
    out = []
    n = instance.n
    tour = [int(x) for x in tour]
    bad = [x for x in tour if not 0 <= x <= n]
    if bad:
        return [f"unknown node indices {bad}"]
    if tour and tour[0] == 0:
        out.append("tour starts with an empty route")
    for a, b in zip(tour, tour[1:]):
        if a == 0 and b == 0:
            out.append("consecutive depot visits (empty route)")
            break
    counts = np.bincount([x for x in tour if x], minlength=n + 1)
    for k in range(1, n + 1):
        if counts[k] > 1:
            out.append(f"customer {k} visited {counts[k]} times")
        elif complete and counts[k] == 0:
            out.append(f"customer {k} unvisited")
    for route in split_routes(tour):
        out.extend(route_violations(instance, route))
    return out


# ---------------------------------------------------------------------------
# vectorized environment


class BatchEnv:
    """B instances x P rollouts advanced in lock step."""

    def __init__(self, batch: InstanceBatch, n_rollouts: int):
        self.batch = batch
        self.variant = batch.variant
        B, N = batch.size, batch.n + 1
        P = n_rollouts
        self.B, self.P, self.N = B, P, N
        self._bidx = np.arange(B)[:, None]
        xy = batch.coords
        self.to_depot = distance(xy[:, :, 0], xy[:, :, 1], xy[:, :1, 0], xy[:, :1, 1])  # (B, N)
        self.current = np.zeros((B, P), dtype=np.int64)
        self.visited = np.zeros((B, P, N), dtype=bool)
        self.peak = np.zeros((B, P))
        self.pickup = np.zeros((B, P))
        self.time = np.zeros((B, P))
        self.length = np.zeros((B, P))
        self.phase = np.zeros((B, P), dtype=bool)
        self.cost = np.zeros((B, P))
        self.start_fallback = np.zeros((B, P), dtype=bool)
        self.actions: list[np.ndarray] = []
        self.t = 0

    def reset(self, starts: np.ndarray | None = None) -> None:
        """Force ``starts`` (shape (P,) or (B, P)) as first moves, if given."""
        if starts is None:
            return
        starts = np.broadcast_to(np.asarray(starts, dtype=np.int64), (self.B, self.P))
        ok = np.take_along_axis(self.feasible(), starts[..., None], axis=-1)[..., 0]
        self.start_fallback = ~ok
        if ok.all():
            self.step(starts)
            return
        # infeasible starts stay at the depot; record nothing for them
        action = np.where(ok, starts, 0)
        self._advance(action, record_mask=ok)

    @property
    def done(self) -> np.ndarray:
        return self.visited[:, :, 1:].all(axis=-1)

    def _dist_from_current(self) -> np.ndarray:
        xy = self.batch.coords
        here = xy[self._bidx, self.current]  # (B, P, 2)
        return distance(here[:, :, None, 0], here[:, :, None, 1], xy[:, None, :, 0], xy[:, None, :, 1])

    def feasible(self) -> np.ndarray:
        b = self.batch
        v = self.variant
        cap = b.capacity[:, None, None]
        qty = b.quantity[:, None, :]
        bh = b.backhaul[:, None, :]
        keep = ~self.visited
        keep &= np.where(bh, self.pickup[..., None] + qty <= cap, self.peak[..., None] + qty <= cap)
        if v.precedence:
            keep &= ~(self.phase[..., None] & ~bh)
        if v.time_windows or v.duration_limit:
            d = self._dist_from_current()
        if v.time_windows:
            start = np.maximum(self.time[..., None] + d, b.early[:, None, :])
            finish = start + b.service[:, None, :]
            horizon = b.horizon[:, None, None]
            keep &= start <= b.late[:, None, :]
            if v.open_route:
                keep &= finish <= horizon
            else:
                keep &= finish + self.to_depot[:, None, :] <= horizon
        if v.duration_limit:
            span = self.length[..., None] + d
            if not v.open_route:
                span = span + self.to_depot[:, None, :]
            keep &= span <= b.limit[:, None, None]
        done = self.done
        keep[..., 0] = (self.current != 0) | done
        keep[done] = False
        keep[..., 0] |= done
        return keep

    def attention_keep(self, strategy: str, feasible: np.ndarray | None = None) -> np.ndarray:
        if strategy == "PRE":
            return self.feasible() if feasible is None else feasible
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        keep = ~self.visited
        keep[..., 0] = (self.current != 0) | self.done
        return keep

    def features(self, m: int = 4) -> np.ndarray:
        b = self.batch
        v = self.variant
        load = (b.capacity[:, None] - self.peak) / b.capacity[:, None]
        if m == 1:
            return load[..., None]
        if m != 4:
            raise ValueError(f"dynamic feature layout is defined for m in (1, 4), got {m}")
        time = self.time / b.horizon[:, None] if v.time_windows else np.zeros_like(load)
        if v.duration_limit:
            budget = (b.limit[:, None] - self.length) / b.limit[:, None]
        else:
            budget = np.ones_like(load)
        flag = np.full_like(load, 1.0 if v.open_route else 0.0)
        return np.stack([load, time, budget, flag], axis=-1)

    def step(self, action: np.ndarray, check: bool = True) -> None:
        action = np.asarray(action, dtype=np.int64)
        if check:
            keep = np.take_along_axis(self.feasible(), action[..., None], axis=-1)[..., 0]
            if not keep.all():
                raise InfeasibleActionError(f"{int((~keep).sum())} masked actions at step {self.t}")
        self._advance(action)

    def _advance(self, action: np.ndarray, record_mask: np.ndarray | None = None) -> None:
        b = self.batch
        v = self.variant
        bi = self._bidx
        xy = b.coords
        here = xy[bi, self.current]
        there = xy[bi, action]
        d = distance(here[..., 0], here[..., 1], there[..., 0], there[..., 1])
        depot = action == 0
        moving = np.ones_like(depot) if record_mask is None else record_mask
        leg_cost = d if not v.open_route else np.where(depot, 0.0, d)
        self.cost = self.cost + np.where(moving, leg_cost, 0.0)
        qty = b.quantity[bi, action]
        is_bh = b.backhaul[bi, action]
        pickup = np.where(is_bh, self.pickup + qty, self.pickup)
        peak = np.where(is_bh, np.maximum(self.peak, pickup), self.peak + qty)
        phase = self.phase | is_bh
        time = self.time
        if v.time_windows:
            time = np.maximum(time + d, b.early[bi, action]) + b.service[bi, action]
        length = self.length + d
        self.peak = np.where(depot, 0.0, peak)
        self.pickup = np.where(depot, 0.0, pickup)
        self.phase = np.where(depot, False, phase)
        self.time = np.where(depot, 0.0, time)
        self.length = np.where(depot, 0.0, length)
        self.visited[bi, np.broadcast_to(np.arange(self.P), action.shape), action] |= moving & ~depot
        self.visited[..., 0] = False
        self.current = np.where(moving, action, self.current)
        self.actions.append(np.where(moving, action, -1))
        self.t += 1

    def finish(self) -> np.ndarray:
        """Close every rollout and return its cost (B, P)."""
        if not self.done.all():
            raise RuntimeError("finish() called before every rollout visited all customers")
        if not self.variant.open_route:
            back = self.to_depot[self._bidx, self.current]
            self.cost = self.cost + back
        self.current = np.zeros_like(self.current)
        return self.cost

    def tours(self) -> list[list[list[int]]]:
        """Action sequences with padding and trailing depot returns removed."""
        if not self.actions:
            return [[[] for _ in range(self.P)] for _ in range(self.B)]
        acts = np.stack(self.actions, axis=-1)  # (B, P, T)
        out = []
        for b in range(self.B):
            row = []
            for p in range(self.P):
                seq = [int(a) for a in acts[b, p] if a >= 0]
                while seq and seq[-1] == 0:
                    seq.pop()
                row.append(seq)
            out.append(row)
        return out


def random_rollouts(batch: InstanceBatch, n_rollouts: int, rng: np.random.Generator,
                    max_steps: int | None = None) -> tuple[BatchEnv, np.ndarray]:
    """Uniformly random feasible policy; returns the finished env and its costs."""
    env = BatchEnv(batch, n_rollouts)
    limit = max_steps or 4 * (batch.n + 1) + 4
    while not env.done.all():
        keep = env.feasible()
        counts = keep.sum(-1)
        if (counts == 0).any():
            raise NoFeasibleActionError(f"empty feasibility mask at step {env.t}")
        u = rng.random(counts.shape)
        pick = np.floor(u * counts).astype(np.int64)
        order = np.cumsum(keep, axis=-1) - 1
        action = np.argmax(keep & (order == pick[..., None]), axis=-1)
        env.step(action, check=False)
        if env.t > limit:
            raise RuntimeError("random rollout did not terminate")
    return env, env.finish()


# ---------------------------------------------------------------------------
# solution files


def serialize_solutions(records: Iterable[tuple[VrpInstance, Sequence[int], float]], path: str | Path) -> None:
    with open(path, "w") as f:
        for inst, tour, cost in records:
            f.write(json.dumps({"seed": int(inst.seed), "variant": inst.variant.to_json(),
                                "tour": [int(x) for x in tour], "cost": float(cost)}))
            f.write("\n")


def deserialize_solutions(path: str | Path) -> list[dict]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                out.append({"seed": int(doc["seed"]), "variant": doc["variant"], "tour": [int(x) for x in doc["tour"]],
                            "cost": float(doc["cost"])})
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed solution record ({exc})") from None
    return out
