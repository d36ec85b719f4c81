"""Weakly supervised triplet training with cached descriptors and hard-negative mining."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import rng
from .events import EventVolume, pairwise_distances
from .model import SpikeEVPR
from .snn import NonFiniteGradient, check_grads, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    margin: float = 0.1
    negatives: int = 5
    lr: float = 0.001
    batch: int = 2
    cache_batch: int = 100
    r_pos: float = 15.0
    r_neg: float = 75.0
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    negative_pool: int = 1000
    checkpoint_every: int = 0
    validate_every: int = 0

    def __post_init__(self):
        if not self.r_neg >= self.r_pos > 0:
            raise ValueError("need r_neg >= r_pos > 0")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Triplet:
    query: int
    positive: int
    negatives: list[int]


class TrainingAborted(RuntimeError):
    pass


def triplet_loss(d_q: torch.Tensor, d_pos: torch.Tensor, negatives, margin: float = 0.1) -> torch.Tensor:
    """Sum over negatives of ``[|q - pos|^2 - |q - neg|^2 + margin]_+``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    negs = torch.stack(list(negatives)) if not torch.is_tensor(negatives) else negatives
    if d_q.shape != d_pos.shape or negs.shape[-1] != d_q.shape[-1]:
        raise ValueError("descriptor dimensions differ")
    d_pos2 = ((d_q - d_pos) ** 2).sum(-1)
    d_neg2 = ((d_q.unsqueeze(0) - negs) ** 2).sum(-1)
    return torch.clamp(d_pos2 - d_neg2 + margin, min=0).sum()


class DescriptorCache:
    """Volume id -> descriptor snapshot; ``staleness`` counts queries since the last refresh."""

    def __init__(self):
        self.descriptors: dict[int, torch.Tensor] = {}
        self.staleness = 0

    def refresh(self, model: SpikeEVPR, volumes, ids, seeds, chunk: int = 64) -> None:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            for i in range(0, len(ids), chunk):
                sl = slice(i, i + chunk)
                desc = model.describe([volumes[j] for j in ids[sl]], seeds[sl])
                for j, d in zip(ids[sl], desc):
                    self.descriptors[j] = d.clone()
        model.train(was_training)
        self.staleness = 0

    def matrix(self, ids) -> torch.Tensor:
        return torch.stack([self.descriptors[i] for i in ids])

    def __contains__(self, i) -> bool:
        return i in self.descriptors


def mine_triplets(query_ids, db_ids, poses, cache: DescriptorCache, config: TrainConfig, generator=None):
    """Pick the nearest db volume within ``r_pos`` as positive and the N
    descriptor-closest db volumes beyond ``r_neg`` as negatives.

    Negatives come from a random pool of ``config.negative_pool`` eligible
    candidates. Returns ``(triplets, skipped)`` where ``skipped`` counts
    queries without any positive.
    """
    generator = generator if generator is not None else np.random.default_rng(config.seed)
    db_ids = list(db_ids)
    geo = pairwise_distances([poses[q] for q in query_ids], [poses[d] for d in db_ids])
    db_desc = cache.matrix(db_ids)
    triplets, skipped = [], 0
    for row, q in enumerate(query_ids):
        dist = geo[row]
        within = np.flatnonzero(dist <= config.r_pos)
        if within.size == 0:
            skipped += 1
            continue
        pos = int(within[np.argmin(dist[within])])
        far = np.flatnonzero(dist > config.r_neg)
        if far.size < config.negatives:
            raise ValueError(
                f"query {q}: only {far.size} db volumes beyond r_neg={config.r_neg} m, need {config.negatives}"
            )
        if far.size > config.negative_pool:
            far = np.sort(generator.choice(far, size=config.negative_pool, replace=False))
        desc_d = ((db_desc[far] - cache.descriptors[q]) ** 2).sum(-1).numpy()
        hardest = far[np.argsort(desc_d, kind="stable")[: config.negatives]]
        assert np.all(dist[hardest] > config.r_neg)
        triplets.append(Triplet(q, db_ids[pos], [db_ids[i] for i in hardest]))
    return triplets, skipped


@dataclass
class TrainResult:
    model: SpikeEVPR
    losses: list[tuple[int, float, int]] = field(default_factory=list)
    steps: int = 0
    best_recall: float | None = None


def volume_seed(root: int, role: str, index: int, step: int = 0) -> int:
    """Seed for the Bernoulli draws of one volume, fanned out from the run's root seed."""
    return int(rng.hash_counters(rng.derive_seed(root, role), index, step) & np.uint64(0x7FFFFFFFFFFFFFFF))


def calibrate_batchnorm(model: SpikeEVPR, volumes, seeds, chunk: int = 64) -> None:
    """Replace BN running statistics with exact averages over ``volumes``."""
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [m.momentum for m in bns]
    was_training = model.training
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for i in range(0, len(volumes), chunk):
            model.describe(volumes[i:i + chunk], seeds[i:i + chunk])
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.train(was_training)


def _make_optimizer(model, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr)
    momentum = config.momentum if config.optimizer == "momentum" else 0.0
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=momentum)


def train(
    model: SpikeEVPR,
    db_volumes: list[EventVolume],
    query_volumes: list[EventVolume],
    config: TrainConfig,
    out_dir=None,
    validate=None,
) -> TrainResult:
    """Triplet training; queries come from ``query_volumes``, positives and negatives from ``db_volumes``.

    ``validate(model) -> recall`` is called every ``validate_every`` steps
    when given; the best-scoring state is written to ``best.ckpt``.
    """
    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng([config.seed, 1])
    mine_rng = np.random.default_rng([config.seed, 2])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    volumes = list(db_volumes) + list(query_volumes)
    n_db = len(db_volumes)
    db_ids = [i for i in range(n_db) if not volumes[i].empty]
    q_ids = [i for i in range(n_db, len(volumes)) if not volumes[i].empty]
    poses = {i: v.pose for i, v in enumerate(volumes)}
    if any(poses[i] is None for i in db_ids + q_ids):
        raise ValueError("every training volume needs a pose")
    cache_seeds = [volume_seed(config.seed, "cache", i) for i in range(len(volumes))]
    all_ids = db_ids + q_ids

    result = TrainResult(model)
    if config.epochs == 0 or config.max_steps == 0 or not q_ids:
        _finish(model, out_dir, result)
        return result

    calibrate_batchnorm(model, [volumes[i] for i in all_ids], [cache_seeds[i] for i in all_ids])
    optimizer = _make_optimizer(model, config)
    cache = DescriptorCache()
    cache.refresh(model, volumes, all_ids, [cache_seeds[i] for i in all_ids])

    step, skipped_total = 0, 0
    last_good = copy.deepcopy(model.state_dict())
    for _epoch in range(config.epochs):
        order = order_rng.permutation(len(q_ids))
        for b in range(0, len(order), config.batch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            batch_q = [q_ids[k] for k in order[b:b + config.batch]]
            if cache.staleness + len(batch_q) > config.cache_batch:
                cache.refresh(model, volumes, all_ids, [cache_seeds[i] for i in all_ids])
            triplets, skipped = mine_triplets(batch_q, db_ids, poses, cache, config, mine_rng)
            cache.staleness += len(batch_q)
            skipped_total += skipped
            if not triplets:
                continue
            ids = [i for t in triplets for i in (t.query, t.positive, *t.negatives)]
            seeds = [volume_seed(config.seed, "train", i, step) for i in ids]
            model.train()
            optimizer.zero_grad(set_to_none=True)
            desc = model.describe([volumes[i] for i in ids], seeds)
            per = 2 + config.negatives
            loss = sum(
                triplet_loss(desc[k * per], desc[k * per + 1], desc[k * per + 2:(k + 1) * per], config.margin)
                for k in range(len(triplets))
            ) / len(triplets)
            if not torch.isfinite(loss):
                _abort(model, last_good, out_dir, f"non-finite loss at step {step}")
            loss.backward()
            try:
                check_grads(model)
            except NonFiniteGradient as exc:
                _abort(model, last_good, out_dir, f"step {step}: {exc}")
            optimizer.step()
            step += 1
            last_good = copy.deepcopy(model.state_dict())
            result.losses.append((step, float(loss.detach()), skipped_total))
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_model(model, out_dir / f"step{step:06d}.ckpt")
            if validate is not None and config.validate_every and step % config.validate_every == 0:
                recall = validate(model)
                if result.best_recall is None or recall > result.best_recall:
                    result.best_recall = recall
                    if out_dir is not None:
                        save_model(model, out_dir / "best.ckpt")
                model.train()
        if config.max_steps is not None and step >= config.max_steps:
            break

    result.steps = step
    _finish(model, out_dir, result)
    return result


def _abort(model, last_good, out_dir, message):
    model.load_state_dict(last_good)
    if out_dir is not None:
        save_model(model, out_dir / "last_good.ckpt")
    raise TrainingAborted(message)


def _finish(model, out_dir, result: TrainResult) -> None:
    model.eval()
    if out_dir is None:
        return
    save_model(model, out_dir / "model.ckpt")
    write_loss_trace(result.losses, out_dir / "loss.csv")


def write_loss_trace(losses, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,skipped_queries\n")
        for step, loss, skipped in losses:
            fh.write(f"{step},{loss!r},{skipped}\n")


def checkpoint_manifest(model: SpikeEVPR) -> dict[str, str]:
    c = model.config
    return {
        "sr13_mcs": "mcs_net", "sr13_tss": "tss_net", "cda": "cda", "encoder": "encoder",
        "steps": str(c.steps), "scale": repr(c.scale), "widths": ",".join(map(str, c.widths)),
        "smlp_hidden": str(c.smlp_hidden), "cda_hidden": str(c.cda_hidden), "eta": repr(c.eta),
        "v_threshold": repr(c.lif.v_threshold), "decay": repr(c.lif.decay), "alpha": repr(c.lif.alpha),
    }


def save_model(model: SpikeEVPR, path) -> None:
    save_checkpoint(model.state_tensors(), path, checkpoint_manifest(model))


def load_model(path) -> SpikeEVPR:
    from .model import ModelConfig
    from .snn import LifParams, load_checkpoint

    tensors, man = load_checkpoint(path)
    try:
        config = ModelConfig(
            steps=int(man["steps"]), scale=float(man["scale"]),
            widths=tuple(int(v) for v in man["widths"].split(",")),
            smlp_hidden=int(man["smlp_hidden"]), cda_hidden=int(man["cda_hidden"]), eta=float(man["eta"]),
            lif=LifParams(float(man["v_threshold"]), float(man["decay"]), float(man["alpha"])),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint manifest lacks {exc}") from None
    model = SpikeEVPR(config)
    model.load_state_tensors(tensors)
    model.eval()
    return model
