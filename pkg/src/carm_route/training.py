"""REINFORCE with the POMO shared baseline, multi-task trainer and x8 augmentation.

Costs are stored as positive route lengths and minimized; the estimator
therefore uses ``(cost - baseline) * log p`` as its loss.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .instances import InstanceBatch, VrpInstance, generate_instance, instance_seeds, parse_variant, VariantSpec
from .model import ModelConfig, Rollout, Trajectory, init_params, rollout
from .optim import AdamState, adam_step, clip_grad_norm, multistep_lr
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "variant", "mean_cost", "loss", "lr", "wall_time")


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    instances_per_epoch: int = 2000
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-6
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    tasks: tuple[str, ...] = ("cvrp",)
    protocol: str = "mvmoe"
    n: int = 20
    seed: int = 0
    grad_clip: float | None = None
    decoupled_weight_decay: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_size", "instances_per_epoch", "epochs", "n"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("lr milestones must be sorted")
        if not self.tasks:
            raise ValueError("task list is empty")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for token in self.tasks:
            parse_variant(token, self.protocol)

    @property
    def variants(self) -> list[VariantSpec]:
        return [parse_variant(t, self.protocol) for t in self.tasks]

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["milestones"] = list(self.milestones)
        doc["tasks"] = list(self.tasks)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "TrainConfig":
        return cls(**doc)


# ---------------------------------------------------------------------------
# objective


def advantages(costs: np.ndarray) -> np.ndarray:
    """Cost minus the per-instance mean over its trajectories (last axis)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape[-1] < 2:
        raise ValueError("the shared baseline needs at least two trajectories per instance")
    return costs - costs.mean(axis=-1, keepdims=True)


def reinforce_loss(costs: np.ndarray, log_prob: Tensor) -> Tensor:
    """Surrogate whose gradient is the shared-baseline policy gradient.

    ``costs`` and ``log_prob`` are (B, P); descending the returned scalar
    lowers the expected cost.
    """
    adv = advantages(costs)
    if log_prob.shape != adv.shape:
        raise ValueError(f"log_prob shape {log_prob.shape} does not match costs {adv.shape}")
    return T.mean(log_prob * adv)


def trajectory_loss(trajectories: Sequence[Trajectory]) -> float:
    """Value of the surrogate for one instance's trajectories (no gradient)."""
    costs = np.array([t.cost for t in trajectories])
    adv = advantages(costs)
    return float(np.mean(adv * np.array([t.log_prob for t in trajectories])))


def default_starts(n: int, n_starts: int | None = None) -> np.ndarray:
    k = n if n_starts is None else n_starts
    if not 1 <= k <= n:
        raise ValueError(f"n_starts must lie in [1, {n}], got {k}")
    return np.arange(1, k + 1)


def rollout_multistart(instance: VrpInstance, params: Mapping[str, Tensor], config: ModelConfig,
                       n_starts: int | None = None, rng: np.random.Generator | None = None,
                       mode: str = "sample") -> list[Trajectory]:
    """One trajectory per distinct first customer, sharing one encoding."""
    from .model import decode

    rng = rng if rng is not None else np.random.default_rng(0)
    starts = default_starts(instance.n, n_starts)
    return decode(instance, params, config, mode=mode, starts=list(starts), rng=rng)


# ---------------------------------------------------------------------------
# augmentation

TRANSFORMS = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - y, x),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


def transform_coords(xy: np.ndarray, k: int) -> np.ndarray:
    x, y = TRANSFORMS[k](xy[..., 0], xy[..., 1])
    return np.stack([x, y], axis=-1)


def augment_x8(instance: VrpInstance) -> list[VrpInstance]:
    """The eight dihedral images of an instance; index 0 is the original."""
    out = []
    for k in range(8):
        depot = transform_coords(instance.depot, k)
        coords = transform_coords(instance.coords, k)
        out.append(instance.with_coords(depot, coords))
    return out


def augment_batch(batch: InstanceBatch) -> InstanceBatch:
    """Stack the eight images transform-major: row ``k * B + b``."""
    from dataclasses import replace

    def tile(a):
        return np.concatenate([a] * 8, axis=0)

    coords = np.concatenate([transform_coords(batch.coords, k) for k in range(8)], axis=0)
    return replace(batch, coords=coords, quantity=tile(batch.quantity), backhaul=tile(batch.backhaul),
                   capacity=tile(batch.capacity), early=tile(batch.early), late=tile(batch.late),
                   service=tile(batch.service), limit=tile(batch.limit))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    costs: np.ndarray  # (count,) best cost per instance
    tours: list[list[int]]
    single_costs: np.ndarray  # (count,) best over starts without augmentation


def evaluate(params: Mapping[str, Tensor], config: ModelConfig, instances: Sequence[VrpInstance],
             augment: bool = False, n_starts: int | None = None, batch_size: int = 100,
             strategy: str | None = None) -> EvalResult:
    """Greedy multi-start decoding, best-of over starts (and the 8 transforms)."""
    groups: dict[tuple, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault((inst.variant, inst.n), []).append(i)
    out_cost = np.zeros(len(instances))
    out_single = np.zeros(len(instances))
    out_tours: list[list[int]] = [[] for _ in instances]
    for idxs in groups.values():
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo:lo + batch_size]
            batch = InstanceBatch.from_instances([instances[i] for i in chunk])
            starts = default_starts(batch.n, n_starts)
            if augment:
                batch = augment_batch(batch)
            res = rollout(params, config, batch, starts, "greedy", strategy=strategy)
            B = len(chunk)
            c = res.costs.reshape(8 if augment else 1, B, -1)
            for j, i in enumerate(chunk):
                flat = c[:, j, :]
                k, p = np.unravel_index(np.argmin(flat), flat.shape)
                out_cost[i] = flat[k, p]
                out_single[i] = flat[0].min()
                out_tours[i] = res.tours[k * B + j][p]
    return EvalResult(out_cost, out_tours, out_single)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    wall_time: float
    per_variant: dict[str, dict[str, float]] = field(default_factory=dict)
    skipped: int = 0

    def rows(self) -> list[dict]:
        return [{"epoch": self.epoch, "variant": v, "mean_cost": s["mean_cost"], "loss": s["loss"],
                 "lr": self.lr, "wall_time": self.wall_time} for v, s in sorted(self.per_variant.items())]


def train_batch(params: Mapping[str, Tensor], model_config: ModelConfig, batch: InstanceBatch,
                rng: np.random.Generator) -> tuple[Tensor, Rollout, dict[str, np.ndarray]]:
    starts = default_starts(batch.n)
    with T.Tape() as tape:
        res = rollout(params, model_config, batch, starts, "sample", rng)
        loss = reinforce_loss(res.costs, res.log_prob)
        grads = tape.backward(loss)
    named = {name: grads[p] for name, p in params.items() if p in grads}
    return loss, res, named


def train_epoch(params: Mapping[str, Tensor], model_config: ModelConfig, config: TrainConfig,
                rng: np.random.Generator, epoch: int = 1, adam: AdamState | None = None) -> tuple[EpochStats, AdamState]:
    """One pass over ``instances_per_epoch`` freshly generated instances.

    Each batch is a single variant drawn uniformly from ``config.tasks``.
    """
    adam = adam if adam is not None else AdamState()
    lr = multistep_lr(config.lr, epoch, config.milestones, config.gamma)
    variants = config.variants
    sums: dict[str, list[float]] = {}
    t0 = time.perf_counter()
    remaining = config.instances_per_epoch
    batch_index = 0
    skipped = 0
    while remaining > 0:
        size = min(config.batch_size, remaining)
        remaining -= size
        spec = variants[int(rng.integers(len(variants)))]
        seeds = rng.integers(0, 2**63 - 1, size=size)
        batch = InstanceBatch.from_instances([generate_instance(spec, config.n, int(s)) for s in seeds])
        loss, res, grads = train_batch(params, model_config, batch, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}, batch {batch_index} ({spec.name}): "
                f"mean cost {float(np.mean(res.costs)):.4f}, "
                f"min log-prob {float(np.min(res.log_prob.data)):.4g}")
        if config.grad_clip:
            clip_grad_norm(grads, config.grad_clip)
        skipped += len(adam_step(params, grads, adam, lr, weight_decay=config.weight_decay,
                                 decoupled=config.decoupled_weight_decay))
        acc = sums.setdefault(spec.name, [0.0, 0.0, 0])
        acc[0] += float(res.costs.mean()) * size
        acc[1] += value * size
        acc[2] += size
        batch_index += 1
    stats = EpochStats(epoch, lr, time.perf_counter() - t0, skipped=skipped)
    for name, (c, l, k) in sums.items():
        stats.per_variant[name] = {"mean_cost": c / k, "loss": l / k}
    return stats, adam


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], model_config: ModelConfig,
                    train_config: TrainConfig | None = None, epoch: int = 0, adam: AdamState | None = None,
                    rng: np.random.Generator | None = None) -> None:
    extra = {"model_config": model_config.to_json(), "epoch": epoch}
    if train_config is not None:
        extra["train_config"] = train_config.to_json()
    if adam is not None:
        extra["adam"] = adam.to_json()
    if rng is not None:
        extra["rng_state"] = rng.bit_generator.state
    T.save_params(params, path, extra)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    params, doc = T.load_params(path)
    try:
        config = ModelConfig.from_json(doc["model_config"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: checkpoint has no usable model_config ({exc})") from None
    return params, config, doc


def _json_safe(state) -> dict:
    return json.loads(json.dumps(state, default=int))


def train(model_config: ModelConfig, config: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None, model_seed: int | None = None,
          evaluate_on: Sequence[VrpInstance] | None = None) -> tuple[dict[str, Tensor], list[EpochStats]]:
    """Full training run; writes ``train_log.csv`` and checkpoints under ``out_dir``."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    start_epoch = 1
    adam = AdamState()
    if resume is not None:
        params, saved_config, doc = load_checkpoint(resume)
        if saved_config != model_config:
            raise ValueError("resume checkpoint was trained with a different model config")
        start_epoch = int(doc.get("epoch", 0)) + 1
        if "adam" in doc:
            adam = AdamState.from_json(doc["adam"], params)
        if "rng_state" in doc:
            rng.bit_generator.state = doc["rng_state"]
    else:
        params = init_params(model_config, config.seed if model_seed is None else model_seed)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = resume is None or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    history = []
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            stats, adam = train_epoch(params, model_config, config, rng, epoch, adam)
            history.append(stats)
            logger.info("epoch %d: %s (%.1fs)", epoch,
                        ", ".join(f"{k}={v['mean_cost']:.4f}" for k, v in sorted(stats.per_variant.items())),
                        stats.wall_time)
            if writer is not None:
                writer.writerows(stats.rows())
                log_file.flush()
            last = epoch == start_epoch + config.epochs - 1
            if out is not None and (last or (config.checkpoint_every and epoch % config.checkpoint_every == 0)):
                state = _json_safe(rng.bit_generator.state)
                extra_rng = np.random.Generator(np.random.PCG64())
                extra_rng.bit_generator.state = state
                save_checkpoint(out / f"checkpoint_epoch{epoch}.json", params, model_config, config, epoch,
                                adam, extra_rng)
                if last:
                    save_checkpoint(out / "checkpoint.json", params, model_config, config, epoch, adam, extra_rng)
    finally:
        if log_file is not None:
            log_file.close()
    return params, history


def held_out_set(spec: VariantSpec, n: int, count: int, seed: int) -> list[VrpInstance]:
    return [generate_instance(spec, n, s) for s in instance_seeds(seed, count)]


def iter_batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for lo in range(0, len(items), size):
        yield items[lo:lo + size]
