"""VRP variant specifications, random instance generators and JSONL storage.

Two generation protocols are supported. ``mvmoe`` follows the MVMoE setup
(negative backhaul demands, fixed duration limit, [0, 3] horizon); ``routefinder``
follows RouteFinder (positive demands with role flags, sampled limits and a
4.6 horizon) and is the only protocol that admits mixed backhauls.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CAPACITY = 50
DEMAND_LOW, DEMAND_HIGH = 1, 9

MVMOE_BACKHAUL_FRACTION = 0.2
MVMOE_DURATION_LIMIT = 3.0
MVMOE_HORIZON = 3.0
MVMOE_SERVICE_TIME = 0.2
MVMOE_HALF_WIDTH = (0.1, 1.0)

RF_BACKHAUL_PROB = 0.2
RF_MAX_LIMIT = 3.0
RF_HORIZON = 4.6
RF_SERVICE_TIME = (0.15, 0.18)
RF_WINDOW_LENGTH = (0.18, 0.2)

BACKHAUL_KINDS = ("none", "classic", "mixed")
PROTOCOLS = ("mvmoe", "routefinder")


class EmptyInstanceError(ValueError):
    pass


class InstanceParseError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    open_route: bool = False
    backhaul: str = "none"
    duration_limit: bool = False
    time_windows: bool = False
    protocol: str = "mvmoe"

    def __post_init__(self):
        if self.backhaul not in BACKHAUL_KINDS:
            raise ValueError(f"backhaul must be one of {BACKHAUL_KINDS}, got {self.backhaul!r}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.backhaul == "mixed" and self.protocol != "routefinder":
            raise ValueError("mixed backhaul is only defined under the routefinder protocol")

    @property
    def capacity(self) -> bool:
        return True

    @property
    def has_backhaul(self) -> bool:
        return self.backhaul != "none"

    @property
    def precedence(self) -> bool:
        """Linehaul-before-backhaul ordering within a route."""
        return self.backhaul == "classic" and self.protocol == "routefinder"

    @property
    def name(self) -> str:
        b = {"none": "", "classic": "B", "mixed": "MB"}[self.backhaul]
        return ("O" if self.open_route else "") + "CVRP" + b + ("L" if self.duration_limit else "") + (
            "TW" if self.time_windows else ""
        )

    @property
    def token(self) -> str:
        return self.name.lower()

    def to_json(self) -> dict:
        return {"name": self.token, "protocol": self.protocol}

    def __str__(self) -> str:
        return self.name if self.protocol == "mvmoe" or self.backhaul == "mixed" else f"{self.name}[{self.protocol}]"


_TOKEN = re.compile(r"^(o)?cvrp(mb|b)?(l)?(tw)?$")


def parse_variant(token: str, protocol: str | None = None) -> VariantSpec:
    """Parse a variant token such as ``ocvrpbltw`` or ``cvrpmb``."""
    m = _TOKEN.match(token.strip().lower())
    if m is None:
        raise ValueError(f"unknown variant {token!r}; valid tokens: {', '.join(VARIANT_TOKENS)}")
    o, b, l, tw = m.groups()
    backhaul = {None: "none", "b": "classic", "mb": "mixed"}[b]
    if protocol is None:
        protocol = "routefinder" if backhaul == "mixed" else "mvmoe"
    return VariantSpec(bool(o), backhaul, bool(l), bool(tw), protocol)


MVMOE_VARIANTS: tuple[VariantSpec, ...] = tuple(
    VariantSpec(o, "classic" if b else "none", l, tw, "mvmoe")
    for tw, l, b, o in itertools.product((False, True), repeat=4)
)
MB_VARIANTS: tuple[VariantSpec, ...] = tuple(
    VariantSpec(o, "mixed", l, tw, "routefinder") for tw, l, o in itertools.product((False, True), repeat=3)
)
ALL_VARIANTS = MVMOE_VARIANTS + MB_VARIANTS
VARIANT_TOKENS = tuple(v.token for v in ALL_VARIANTS)
# seen tasks of the multi-task benchmarks
TRAIN_TASKS = tuple(parse_variant(t) for t in ("cvrp", "ocvrp", "cvrpb", "cvrpl", "cvrptw", "ocvrptw"))


def distance(ax, ay, bx, by):
    """Euclidean distance; one formula everywhere so float results agree."""
    dx = ax - bx
    dy = ay - by
    return np.sqrt(dx * dx + dy * dy) if isinstance(dx, np.ndarray) else math.sqrt(dx * dx + dy * dy)


@dataclass(eq=False)
class VrpInstance:
    variant: VariantSpec
    seed: int
    depot: np.ndarray  # (2,)
    coords: np.ndarray  # (n, 2) customers only
    demands: np.ndarray  # (n,) signed ints
    capacity: int = CAPACITY
    windows: np.ndarray | None = None  # (n+1, 2) depot first
    service_times: np.ndarray | None = None  # (n+1,)
    duration_limit: float | None = None
    backhaul_flags: np.ndarray | None = None  # (n,) bool

    def __post_init__(self):
        self.depot = np.asarray(self.depot, dtype=np.float64).reshape(2)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.demands = np.asarray(self.demands, dtype=np.int64).reshape(-1)
        if self.backhaul_flags is None:
            self.backhaul_flags = np.zeros(len(self.demands), dtype=bool)
        self.backhaul_flags = np.asarray(self.backhaul_flags, dtype=bool).reshape(-1)
        if self.windows is not None:
            self.windows = np.asarray(self.windows, dtype=np.float64).reshape(-1, 2)
        if self.service_times is not None:
            self.service_times = np.asarray(self.service_times, dtype=np.float64).reshape(-1)
        if self.duration_limit is not None:
            self.duration_limit = float(self.duration_limit)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def locations(self) -> np.ndarray:
        """(n+1, 2) with the depot at row 0."""
        return np.vstack([self.depot[None, :], self.coords])

    @property
    def horizon(self) -> float:
        return float(self.windows[0, 1]) if self.windows is not None else math.inf

    def dist(self, i: int, j: int) -> float:
        a = self.depot if i == 0 else self.coords[i - 1]
        b = self.depot if j == 0 else self.coords[j - 1]
        return distance(float(a[0]), float(a[1]), float(b[0]), float(b[1]))

    def quantity(self, i: int) -> int:
        """Unsigned demand of node ``i`` (depot = 0)."""
        return 0 if i == 0 else abs(int(self.demands[i - 1]))

    def is_backhaul(self, i: int) -> bool:
        return i != 0 and bool(self.backhaul_flags[i - 1])

    def with_coords(self, depot: np.ndarray, coords: np.ndarray) -> "VrpInstance":
        return VrpInstance(self.variant, self.seed, depot, coords, self.demands.copy(), self.capacity,
                           None if self.windows is None else self.windows.copy(),
                           None if self.service_times is None else self.service_times.copy(),
                           self.duration_limit, self.backhaul_flags.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, VrpInstance):
            return NotImplemented
        return (
            self.variant == other.variant
            and self.seed == other.seed
            and self.capacity == other.capacity
            and self.duration_limit == other.duration_limit
            and _arr_eq(self.depot, other.depot)
            and _arr_eq(self.coords, other.coords)
            and _arr_eq(self.demands, other.demands)
            and _arr_eq(self.windows, other.windows)
            and _arr_eq(self.service_times, other.service_times)
            and _arr_eq(self.backhaul_flags, other.backhaul_flags)
        )

    __hash__ = None

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "variant": self.variant.to_json(),
            "seed": int(self.seed),
            "depot": self.depot.tolist(),
            "coords": self.coords.tolist(),
            "demands": self.demands.tolist(),
            "capacity": int(self.capacity),
            "windows": None if self.windows is None else self.windows.tolist(),
            "service_times": None if self.service_times is None else self.service_times.tolist(),
            "duration_limit": self.duration_limit,
            "backhaul_flags": self.backhaul_flags.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VrpInstance":
        field = "variant"
        try:
            v = doc["variant"]
            variant = parse_variant(v["name"], v.get("protocol"))
            field = "seed"
            seed = _as_int(doc["seed"])
            field = "depot"
            depot = _float_array(doc["depot"], (2,))
            field = "coords"
            coords = _float_array(doc["coords"], (-1, 2))
            n = len(coords)
            field = "demands"
            demands = _int_array(doc["demands"], n)
            field = "capacity"
            capacity = _as_int(doc["capacity"])
            field = "windows"
            windows = None if doc["windows"] is None else _float_array(doc["windows"], (n + 1, 2))
            field = "service_times"
            service = None if doc["service_times"] is None else _float_array(doc["service_times"], (n + 1,))
            field = "duration_limit"
            limit = doc["duration_limit"]
            if limit is not None and (isinstance(limit, bool) or not isinstance(limit, (int, float))):
                raise ValueError("not a number")
            field = "backhaul_flags"
            flags = _int_array(doc["backhaul_flags"], n)
            if not np.isin(flags, (0, 1)).all():
                raise ValueError("flags must be 0 or 1")
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceParseError(f"field {field!r}: {exc}") from None
        return cls(variant, seed, depot, coords, demands, capacity, windows, service, limit, flags.astype(bool))


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


def _as_int(x) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise ValueError(f"expected an integer, got {x!r}")
    return x


def _float_array(x, shape) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    want_ok = arr.ndim == len(shape) and all(w in (-1, g) for w, g in zip(shape, arr.shape))
    if not want_ok:
        raise ValueError(f"shape {arr.shape} does not match {shape}")
    return arr


def _int_array(x, n) -> np.ndarray:
    if not isinstance(x, list) or len(x) != n or any(isinstance(v, bool) or not isinstance(v, int) for v in x):
        raise ValueError(f"expected {n} integers")
    return np.asarray(x, dtype=np.int64)


# ---------------------------------------------------------------------------
# generation


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for one instance; ``seed`` fully determines it."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def instance_seeds(base_seed: int, count: int) -> list[int]:
    """Split ``base_seed`` into ``count`` independent per-instance seeds."""
    children = np.random.SeedSequence(int(base_seed)).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def generate_instance(spec: VariantSpec, n: int, seed: int) -> VrpInstance:
    if n < 1:
        raise EmptyInstanceError(f"an instance needs at least one customer, got n={n}")
    rng = make_rng(seed)
    depot = rng.random(2)
    coords = rng.random((n, 2))
    demands = rng.integers(DEMAND_LOW, DEMAND_HIGH + 1, size=n)
    d0 = distance(coords[:, 0], coords[:, 1], depot[0], depot[1])

    flags = np.zeros(n, dtype=bool)
    if spec.has_backhaul:
        if spec.protocol == "mvmoe":
            k = int(math.floor(MVMOE_BACKHAUL_FRACTION * n))
            flags[rng.choice(n, size=k, replace=False)] = True
            demands = np.where(flags, -demands, demands)
        else:
            flags = rng.random(n) < RF_BACKHAUL_PROB

    limit = None
    if spec.duration_limit:
        if spec.protocol == "mvmoe":
            limit = MVMOE_DURATION_LIMIT
        else:
            limit = float(rng.uniform(2.0 * d0.max(), RF_MAX_LIMIT))

    windows = service = None
    if spec.time_windows:
        if spec.protocol == "mvmoe":
            windows, service = _mvmoe_windows(rng, d0)
        else:
            windows, service = _routefinder_windows(rng, d0)

    return VrpInstance(spec, int(seed), depot, coords, demands, CAPACITY, windows, service, limit, flags)


def _mvmoe_windows(rng, d0):
    n = len(d0)
    e0, l0 = 0.0, MVMOE_HORIZON
    s = np.full(n, MVMOE_SERVICE_TIME)
    center = rng.uniform(e0 + d0, l0 - d0 - s)
    half = rng.uniform(*MVMOE_HALF_WIDTH, size=n)
    early = np.maximum(e0, center - half)
    late = np.minimum(l0, center + half)
    windows = np.vstack([[e0, l0], np.stack([early, late], axis=1)])
    return windows, np.concatenate([[0.0], s])


def _routefinder_windows(rng, d0):
    n = len(d0)
    s = rng.uniform(*RF_SERVICE_TIME, size=n)
    length = rng.uniform(*RF_WINDOW_LENGTH, size=n)
    # (1 + (upper - 1) u) d0 with upper = (H - s - len) / d0 - 1, rearranged to avoid dividing by d0
    early = d0 + rng.random(n) * (RF_HORIZON - s - length - 2.0 * d0)
    windows = np.vstack([[0.0, RF_HORIZON], np.stack([early, early + length], axis=1)])
    return windows, np.concatenate([[0.0], s])


def generate_dataset(spec: VariantSpec, n: int, count: int, seed: int) -> list[VrpInstance]:
    return [generate_instance(spec, n, s) for s in instance_seeds(seed, count)]


# ---------------------------------------------------------------------------
# validation


def validate_instance(inst: VrpInstance) -> list[str]:
    """Return a human-readable violation per broken invariant; empty when valid."""
    out: list[str] = []
    v = inst.variant
    n = inst.n
    loc = inst.locations
    if n == 0:
        out.append("instance has no customers")
    if not np.all((loc >= 0.0) & (loc <= 1.0)):
        out.append("coordinates outside the unit square")
    mag = np.abs(inst.demands)
    bad = np.flatnonzero((mag < DEMAND_LOW) | (mag > DEMAND_HIGH))
    if bad.size:
        out.append(f"demand bound violated at customers {(bad + 1).tolist()} (|demand| must be in 1..9)")
    if inst.capacity <= 0:
        out.append("capacity must be positive")
    flags = inst.backhaul_flags
    if len(flags) != n:
        out.append("backhaul flag count differs from customer count")
    elif not v.has_backhaul and flags.any():
        out.append("backhaul customers present in a variant without backhauls")
    elif v.has_backhaul and v.protocol == "mvmoe":
        if not np.array_equal(flags, inst.demands < 0):
            out.append("mvmoe backhaul customers must be exactly those with negative demand")
        if int(flags.sum()) != int(math.floor(MVMOE_BACKHAUL_FRACTION * n)):
            out.append("mvmoe backhaul count differs from floor(0.2 n)")
    if (inst.demands < 0).any() and not (v.has_backhaul and v.protocol == "mvmoe"):
        out.append("negative demands are only used for mvmoe backhauls")

    if v.duration_limit:
        if inst.duration_limit is None:
            out.append("duration limit missing")
        else:
            lim = inst.duration_limit
            if v.protocol == "mvmoe" and lim != MVMOE_DURATION_LIMIT:
                out.append("mvmoe duration limit must be 3")
            if v.protocol == "routefinder" and lim > RF_MAX_LIMIT:
                out.append("routefinder duration limit exceeds 3")
            round_trip = 2.0 * max(inst.dist(0, i) for i in range(1, n + 1)) if n else 0.0
            if round_trip > lim:
                out.append("duration limit below the longest depot round trip")
    elif inst.duration_limit is not None:
        out.append("duration limit set on a variant without L")

    if v.time_windows:
        if inst.windows is None or inst.service_times is None:
            out.append("time windows or service times missing")
        else:
            w, s = inst.windows, inst.service_times
            horizon = MVMOE_HORIZON if v.protocol == "mvmoe" else RF_HORIZON
            if w[0, 0] != 0.0 or w[0, 1] != horizon or s[0] != 0.0:
                out.append(f"depot window must be (0, {horizon}) with zero service time")
            e0, l0 = w[0]
            for i in range(1, n + 1):
                e, l = w[i]
                if e < e0:
                    out.append(f"customer {i}: window opens before depot open")
                if l > l0:
                    out.append(f"customer {i}: window exceeds depot close")
                if e > l:
                    out.append(f"customer {i}: empty window")
                if e + s[i] + inst.dist(i, 0) > l0:
                    out.append(f"customer {i}: depot round trip cannot finish by depot close")
            if v.protocol == "mvmoe" and not np.all(s[1:] == MVMOE_SERVICE_TIME):
                out.append("mvmoe service times must be 0.2")
    elif inst.windows is not None or inst.service_times is not None:
        out.append("time windows set on a variant without TW")
    return out


# ---------------------------------------------------------------------------
# JSONL storage


def serialize_instances(instances: Iterable[VrpInstance], path: str | Path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_json()))
            f.write("\n")


def deserialize_instances(path: str | Path) -> list[VrpInstance]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                if not isinstance(doc, dict):
                    raise InstanceParseError("record is not a JSON object")
                out.append(VrpInstance.from_json(doc))
            except json.JSONDecodeError as exc:
                raise InstanceParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except InstanceParseError as exc:
                raise InstanceParseError(f"line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# batches for the vectorized environment and the model


@dataclass
class InstanceBatch:
    """Same-variant, same-size instances stacked along a leading axis."""

    variant: VariantSpec
    coords: np.ndarray  # (B, N, 2), node 0 = depot
    quantity: np.ndarray  # (B, N) unsigned demand
    backhaul: np.ndarray  # (B, N) bool
    capacity: np.ndarray  # (B,)
    early: np.ndarray  # (B, N)
    late: np.ndarray  # (B, N)
    service: np.ndarray  # (B, N)
    limit: np.ndarray  # (B,) inf when unconstrained

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1] - 1

    @property
    def horizon(self) -> np.ndarray:
        return self.late[:, 0]

    @classmethod
    def from_instances(cls, instances: Sequence[VrpInstance]) -> "InstanceBatch":
        if not instances:
            raise EmptyInstanceError("cannot batch zero instances")
        variant, n = instances[0].variant, instances[0].n
        for inst in instances:
            if inst.variant != variant or inst.n != n:
                raise ValueError("a batch needs instances of one variant and size")
        coords = np.stack([inst.locations for inst in instances])
        qty = np.zeros((len(instances), n + 1))
        qty[:, 1:] = np.abs(np.stack([inst.demands for inst in instances]))
        bh = np.zeros((len(instances), n + 1), dtype=bool)
        bh[:, 1:] = np.stack([inst.backhaul_flags for inst in instances])
        if variant.time_windows:
            w = np.stack([inst.windows for inst in instances])
            early, late = w[..., 0], w[..., 1]
            service = np.stack([inst.service_times for inst in instances])
        else:
            early = np.zeros((len(instances), n + 1))
            late = np.full((len(instances), n + 1), np.inf)
            service = np.zeros((len(instances), n + 1))
        limit = np.array([inst.duration_limit if inst.duration_limit is not None else np.inf for inst in instances])
        cap = np.array([inst.capacity for inst in instances], dtype=np.float64)
        return cls(variant, coords, qty, bh, cap, early, late, service, limit)
