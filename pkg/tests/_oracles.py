"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from carm_route.env import tour_cost, validate_solution


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error with a floor for all-zero gradients."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(num / den)


def enumerate_optimum(instance) -> float:
    """Minimum cost over every permutation and every split pattern."""
    n = instance.n
    best = math.inf
    for perm in itertools.permutations(range(1, n + 1)):
        for cuts in itertools.product((0, 1), repeat=n - 1):
            tour = [perm[0]]
            for cut, node in zip(cuts, perm[1:]):
                if cut:
                    tour.append(0)
                tour.append(node)
            if not validate_solution(instance, tour):
                best = min(best, tour_cost(instance, tour))
    return best


def softmax(x: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    x = np.where(keep, x, -np.inf) if keep is not None else x
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reachable_states(instance):
    """Every state reachable from the empty solution under the feasibility mask."""
    from carm_route.env import feasible_actions, initial_state, step

    seen = {}
    stack = [initial_state(instance)]
    while stack:
        s = stack.pop()
        k = s.key()
        if k in seen:
            continue
        seen[k] = s
        if s.done:
            continue
        for a in np.flatnonzero(feasible_actions(s)):
            stack.append(step(s, int(a)))
    return list(seen.values())


def witness_completion(state, memo=None):
    """A full tour extending ``state`` found by depth-first search, or None."""
    from carm_route.env import feasible_actions, step

    memo = {} if memo is None else memo
    k = state.key()
    if k in memo:
        return memo[k]
    if state.done:
        memo[k] = ()
        return ()
    result = None
    for a in np.flatnonzero(feasible_actions(state)):
        rest = witness_completion(step(state, int(a)), memo)
        if rest is not None:
            result = (int(a),) + rest
            break
    memo[k] = result
    return result
