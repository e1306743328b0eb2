"""Contrastive pre-training over pairs of modified models.

Each source model spawns two independently modified children; drawings of
both children are embedded by the pair-scoring network, and a binary
classifier is trained to tell matching (same-child) view pairs from
mismatched ones. The averaged binary cross-entropy over the four cross
pairings is the training loss. A trained bundle can be scored directly on a
T2I bank without any fine-tuning.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry, nets, render, tasks
from .seeding import derive_seed, substream

PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the optimization loss becomes non-finite."""


@dataclass
class PairBatch:
    """Pairs of branch-1/branch-2 view sets, each derived from one source model."""

    pairs: list  # [(ViewSet, ViewSet), ...]
    model_ids: list

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ValueError("batch must contain at least one pair")
        if len(self.model_ids) != len(self.pairs):
            raise ValueError("one model id per pair required")
        for vs1, vs2 in self.pairs:
            if vs1.model_ref != vs2.model_ref:
                raise ValueError("both branches of a pair must come from one model")

    def __len__(self):
        return len(self.pairs)


@dataclass
class PretrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    init: str = "random"            # "random" or a bundle path to warm-start from
    network: nets.NetworkSpec = field(default_factory=lambda: nets.NetworkSpec(
        head="contrastive", fusion="late"))
    image_size: int = render.IMAGE_SIZE
    iso_pose: int = tasks.CANONICAL_POSE
    pair_variants: int = 1          # distinct augmented pairs per source model
    early_stop_patience: int | None = None  # steps without trailing-mean improvement

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning rate, batch size and steps must be positive")
        if self.network.head != "contrastive":
            raise ValueError("pre-training needs a contrastive-head network spec")
        if self.pair_variants < 1:
            raise ValueError("pair_variants must be >= 1")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def contrastive_loss(p1, p2, p3, p4):
    """Mean of four binary cross-entropies with targets (1, 0, 0, 1):
    (1/4) [-ln p1 - ln(1 - p2) - ln(1 - p3) - ln p4], probabilities clamped
    to [eps, 1 - eps]. Accepts scalars or batched tensors (mean over batch).
    """
    probs = [torch.as_tensor(p, dtype=torch.float64)
             if not torch.is_tensor(p) else p for p in (p1, p2, p3, p4)]
    c1, c2, c3, c4 = (torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS) for p in probs)
    per_pair = -(torch.log(c1) + torch.log1p(-c2) + torch.log1p(-c3)
                 + torch.log(c4)) / 4.0
    return per_pair.mean()


# --------------------------------------------------------------------------
# pair construction
# --------------------------------------------------------------------------

def make_pair(model: geometry.CsgModel, config: PretrainConfig,
              variant: int = 0) -> tuple[render.ViewSet, render.ViewSet]:
    """The deterministic (branch 1, branch 2) view sets for one source model."""
    rng = substream(config.seed, "pretrain", "augment",
                    model.model_id, str(variant))
    child1, child2 = geometry.augment_pair(model, rng)
    return (render.render_viewset(child1, config.iso_pose, size=config.image_size),
            render.render_viewset(child2, config.iso_pose, size=config.image_size))


def build_pair_batch(models, config: PretrainConfig, variant: int = 0) -> PairBatch:
    """Render one fixed pair per model (cached pair generation entry point)."""
    pairs, ids = [], []
    for i, m in enumerate(models):
        if not m.model_id:
            m.model_id = f"model{i}"
        pairs.append(make_pair(m, config, variant))
        ids.append(m.model_id)
    return PairBatch(pairs=pairs, model_ids=ids)


def _branch_tensors(viewsets, dtype):
    return tuple(nets.stack_drawings([getattr(vs, k) for vs in viewsets], dtype)
                 for k in ("F", "R", "T", "I"))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def pretrain(models, config: PretrainConfig):
    """Optimize the contrastive objective; returns (ParamBundle, loss curve).

    Deterministic given the config seed: batch composition, augmentations and
    initialization all derive from it. Callers are responsible for keeping
    ``models`` disjoint from any evaluation bank (see tasks.ensure_disjoint).
    Raises TrainingDiverged with the step and pair ids if the loss leaves the
    finite range.
    """
    net = nets.build_network(config.network, seed=config.seed)
    if config.init != "random":
        nets.warm_start(net, nets.read_bundle(config.init))
    net.train()
    dtype = next(net.parameters()).dtype
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng(derive_seed(config.seed, "pretrain", "batches"))

    for i, m in enumerate(models):
        if not m.model_id:
            m.model_id = f"model{i}"
    cache: dict = {}

    def pair_for(index: int, variant: int):
        key = (models[index].model_id, variant)
        if key not in cache:
            cache[key] = make_pair(models[index], config, variant)
        return cache[key]

    curve: list[float] = []
    queue: list[tuple[int, int]] = []
    epoch = 0
    for step in range(config.steps):
        while len(queue) < config.batch_size:
            perm = order_rng.permutation(len(models))
            queue.extend((int(j), epoch % config.pair_variants) for j in perm)
            epoch += 1
        picks, queue = queue[:config.batch_size], queue[config.batch_size:]
        batch = [pair_for(j, v) for j, v in picks]
        views1 = _branch_tensors([p[0] for p in batch], dtype)
        views2 = _branch_tensors([p[1] for p in batch], dtype)

        optimizer.zero_grad()
        p1, p2, p3, p4 = net.cross_pair_probs(views1, views2)
        loss = contrastive_loss(p1, p2, p3, p4)
        if not torch.isfinite(loss):
            ids = [models[j].model_id for j, _ in picks]
            raise TrainingDiverged(f"non-finite loss at step {step}; pairs {ids}")
        loss.backward()
        optimizer.step()
        curve.append(loss.detach().item())

        patience = config.early_stop_patience
        if patience and len(curve) >= 2 * patience:
            recent = float(np.mean(curve[-patience:]))
            previous = float(np.mean(curve[-2 * patience:-patience]))
            if recent >= previous - 1e-5:
                break

    net.eval()
    return nets.save_bundle(net), curve


def write_loss_curve(curve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, value in enumerate(curve):
            writer.writerow([step, f"{value:.8f}"])


def read_loss_curve(path) -> list[float]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [float(r["loss"]) for r in rows]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def pair_accuracy(net: nets.PairScoringNet, batch: PairBatch,
                  chunk: int = 16) -> float:
    """Fraction of the four cross pairings per pair classified correctly
    (matching pairs score >= 0.5, mismatched < 0.5)."""
    net.eval()
    dtype = next(net.parameters()).dtype
    hits = 0
    with torch.no_grad():
        for lo in range(0, len(batch), chunk):
            part = batch.pairs[lo:lo + chunk]
            views1 = _branch_tensors([p[0] for p in part], dtype)
            views2 = _branch_tensors([p[1] for p in part], dtype)
            p1, p2, p3, p4 = net.cross_pair_probs(views1, views2)
            hits += int((p1 >= 0.5).sum() + (p2 < 0.5).sum()
                        + (p3 < 0.5).sum() + (p4 >= 0.5).sum())
    return hits / (4 * len(batch))


def network_from_bundle(bundle: nets.ParamBundle, head: str = "t2i_binary") -> torch.nn.Module:
    """Rebuild a network shaped like the bundle's fingerprint (with the given
    head) and load the parameters into it."""
    spec = nets.spec_from_fingerprint(bundle.header["fingerprint"], head=head)
    net = nets.build_network(spec)
    nets.load_bundle(net, bundle)
    return net


def direct_evaluate(bundle: nets.ParamBundle, bank: tasks.QuestionBank) -> float:
    """Score a T2I bank with the pair classifier exactly as trained: each
    candidate's probability of pairing with (F, R, T); argmax predicts."""
    if bank.task != "t2i":
        raise ValueError("direct evaluation runs on a t2i bank")
    net = network_from_bundle(bundle, head="t2i_binary")
    predictions = [nets.predict_t2i(net, q) for q in bank.questions]
    return tasks.bank_accuracy(bank, predictions)
