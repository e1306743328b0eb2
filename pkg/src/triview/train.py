"""Supervised fine-tuning and evaluation on the three question tasks.

Candidate-selection tasks (T2I, P2I) train with the mean of four binary
cross-entropies per question (correct candidate targets 1, the rest 0); pose
classification (I2P) trains with 8-way cross-entropy. Networks can start
from random parameters or warm-start from a saved bundle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nets, tasks
from .contrast import PROB_EPS, TrainingDiverged
from .seeding import derive_seed, substream

TASK_HEADS = {"t2i": "t2i_binary", "i2p": "i2p_multiclass", "p2i": "p2i_pose_logits"}
DEFAULT_BATCH = {"late": 3, "early": 16}


@dataclass
class TrainConfig:
    task: str = "t2i"
    fusion: str = "late"
    learning_rate: float = 1e-5
    batch_size: int | None = None   # None -> 3 (late) / 16 (early)
    epochs: int = 10
    seed: int = 0
    init: str = "random"            # "random" or a bundle path to warm-start from
    network: nets.NetworkSpec | None = None  # None -> default spec for task/fusion
    heldout_fraction: float = 0.1
    runs: int = 1                   # >1: train `runs` seeds, keep the best report

    def __post_init__(self):
        if self.task not in TASK_HEADS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.fusion not in DEFAULT_BATCH:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.fusion]
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate and batch size must be positive, epochs >= 0")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must be in [0, 1)")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.network is None:
            channels = 12 if self.fusion == "early" else 3
            self.network = nets.NetworkSpec(
                backbone=nets.BackboneSpec(in_channels=channels),
                fusion=self.fusion, head=TASK_HEADS[self.task])
        if self.network.head != TASK_HEADS[self.task]:
            raise ValueError(f"network head {self.network.head!r} does not serve "
                             f"task {self.task!r}")
        if self.network.fusion != self.fusion:
            raise ValueError("network fusion disagrees with config fusion")


@dataclass
class EvalReport:
    """Accuracy of one network on one bank, with enough metadata to rerun."""

    task: str
    bank_id: str
    accuracy: float
    predictions: list
    fingerprint: dict

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=1, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


def report_from_json(text_or_path) -> EvalReport:
    p = Path(str(text_or_path))
    text = p.read_text() if p.is_file() else str(text_or_path)
    return EvalReport(**json.loads(text))


def bank_id(bank: tasks.QuestionBank) -> str:
    return f"{bank.task}/seed{bank.seed}/n{len(bank)}"


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def task_loss(task: str, outputs, ground_truth):
    """Mean-reduced training loss.

    t2i / p2i: `outputs` are per-candidate probabilities (B, 4) and
    `ground_truth` the correct candidate indices (B,); the loss is the mean
    over candidates of binary cross-entropies against the one-hot target.
    i2p: `outputs` are pose logits (B, 8) scored with cross-entropy against
    the answer poses (B,).
    """
    if task not in TASK_HEADS:
        raise ValueError(f"unknown task {task!r}")
    out = outputs if torch.is_tensor(outputs) else torch.as_tensor(
        np.asarray(outputs), dtype=torch.float64)
    if out.dim() == 1:
        out = out[None]
    target = torch.as_tensor(np.asarray(ground_truth)).reshape(-1).long()
    if out.shape[0] != target.shape[0]:
        raise ValueError("one ground-truth entry per output row required")

    if task == "i2p":
        if out.shape[-1] != nets.N_POSES:
            raise ValueError(f"i2p expects {nets.N_POSES} pose logits per row")
        return torch.nn.functional.cross_entropy(out, target)

    if out.shape[-1] != tasks.N_CANDIDATES:
        raise ValueError(f"{task} expects {tasks.N_CANDIDATES} candidate "
                         "probabilities per row")
    probs = torch.clamp(out, PROB_EPS, 1.0 - PROB_EPS)
    onehot = torch.nn.functional.one_hot(target, tasks.N_CANDIDATES).to(probs.dtype)
    bce = -(onehot * torch.log(probs) + (1 - onehot) * torch.log1p(-probs))
    return bce.mean(dim=-1).mean()


# --------------------------------------------------------------------------
# batched forward passes (training mode, differentiable)
# --------------------------------------------------------------------------

def _stack(questions, attr, dtype):
    return nets.stack_drawings([getattr(q, attr) for q in questions], dtype)


def _candidate_probs(net, questions, dtype):
    """(B, 4) correctness probabilities for t2i questions."""
    n = tasks.N_CANDIDATES
    if isinstance(net, nets.PairScoringNet):
        a = net.encode_triple(_stack(questions, "F", dtype),
                              _stack(questions, "R", dtype),
                              _stack(questions, "T", dtype))
        b = net.encode_iso(nets.stack_drawings(
            [c for q in questions for c in q.candidates], dtype))
        a4 = a[:, None, :].expand(-1, n, -1).reshape(len(questions) * n, -1)
        return net.pair_prob(a4, b).reshape(len(questions), n)
    comps = torch.stack([nets.composite_tensor(q.F, q.R, q.T, c, dtype)
                         for q in questions for c in q.candidates])
    return torch.sigmoid(net(comps).reshape(len(questions), n))


def _pose_logits(net, questions, dtype):
    """(B, 8) pose logits for i2p questions."""
    if isinstance(net, nets.EarlyFusionNet):
        comps = torch.stack([nets.composite_tensor(q.F, q.R, q.T, q.I, dtype)
                             for q in questions])
        return net(comps)
    return net(_stack(questions, "F", dtype), _stack(questions, "R", dtype),
               _stack(questions, "T", dtype), _stack(questions, "I", dtype))


def _selected_probs(net, questions, dtype):
    """(B, 4) probabilities of each candidate sitting at the given pose."""
    n = tasks.N_CANDIDATES
    flat = [(q, c) for q in questions for c in q.candidates]
    if isinstance(net, nets.EarlyFusionNet):
        comps = torch.stack([nets.composite_tensor(q.F, q.R, q.T, c, dtype)
                             for q, c in flat])
        grid = net(comps)
    else:
        grid = net(nets.stack_drawings([q.F for q, _ in flat], dtype),
                   nets.stack_drawings([q.R for q, _ in flat], dtype),
                   nets.stack_drawings([q.T for q, _ in flat], dtype),
                   nets.stack_drawings([c for _, c in flat], dtype))
    poses = torch.tensor([q.given_pose for q, _ in flat])
    picked = grid.gather(1, poses[:, None]).squeeze(1)
    return torch.sigmoid(picked).reshape(len(questions), n)


def _batch_loss(net, task: str, questions, dtype):
    if task == "t2i":
        probs = _candidate_probs(net, questions, dtype)
        target = [q.answer_index for q in questions]
    elif task == "p2i":
        probs = _selected_probs(net, questions, dtype)
        target = [q.answer_index for q in questions]
    else:
        probs = _pose_logits(net, questions, dtype)
        target = [q.answer_pose for q in questions]
    return task_loss(task, probs, target)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

def split_bank(bank: tasks.QuestionBank, seed: int,
               fraction: float = 0.1) -> tuple[tasks.QuestionBank, tasks.QuestionBank]:
    """Deterministic (train, held-out) split; held-out gets round(fraction*N),
    at least 1 question when the fraction is positive and the bank has >= 2."""
    n = len(bank)
    rng = substream(seed, "train", "split")
    order = [int(i) for i in rng.permutation(n)]
    n_held = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        n_held = min(max(n_held, 1), n - 1)
    held, kept = sorted(order[:n_held]), sorted(order[n_held:])

    def sub(indices):
        return tasks.QuestionBank(task=bank.task,
                                  questions=[bank.questions[i] for i in indices],
                                  seed=bank.seed,
                                  model_ids=[bank.model_ids[i] for i in indices])
    return sub(kept), sub(held)


def finetune(bank: tasks.QuestionBank, config: TrainConfig, log_path=None):
    """Train on a bank; returns (network, EvalReport on the held-out split).

    The split, batch order and initialization all derive from the config
    seed. The parameters snapshot with the best held-out accuracy is
    restored before returning. With ``runs > 1`` the whole procedure repeats
    under derived seeds and the best-scoring run wins.
    """
    if bank.task != config.task:
        raise ValueError(f"bank task {bank.task!r} != config task {config.task!r}")
    if config.runs > 1:
        base = config.seed
        best = None
        for r in range(config.runs):
            sub = TrainConfig(**{**asdict(config),
                                 "network": config.network,
                                 "seed": derive_seed(base, "run", str(r)) % (2 ** 31),
                                 "runs": 1})
            net_r, report_r = finetune(bank, sub, log_path=None)
            if best is None or report_r.accuracy > best[1].accuracy:
                best = (net_r, report_r)
        return best

    net = nets.build_network(config.network, seed=config.seed)
    if config.init != "random":
        nets.warm_start(net, nets.read_bundle(config.init))
    dtype = next(net.parameters()).dtype
    train_bank, held_bank = split_bank(bank, config.seed, config.heldout_fraction)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng(derive_seed(config.seed, "train", "batches"))
    torch.manual_seed(derive_seed(config.seed, "train", "loop") % (2 ** 63))

    def held_accuracy():
        if len(held_bank) == 0:
            return 0.0
        return evaluate(net, held_bank).accuracy

    # Without a held-out split there is no selection signal: keep the final
    # parameters instead of snapshotting.
    use_snapshots = len(held_bank) > 0
    best_state = {k: v.detach().clone() for k, v in net.state_dict().items()} \
        if use_snapshots else None
    best_acc = held_accuracy()
    history = [(0, float("nan"), best_acc)]
    step = 0
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = order_rng.permutation(len(train_bank))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            picks = [train_bank.questions[int(i)]
                     for i in order[lo:lo + config.batch_size]]
            optimizer.zero_grad()
            loss = _batch_loss(net, config.task, picks, dtype)
            if not torch.isfinite(loss):
                ids = [q.model_id for q in picks]
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}); questions {ids}")
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.detach().item())
            step += 1
        acc = held_accuracy()
        history.append((epoch, float(np.mean(epoch_losses)), acc))
        if use_snapshots and acc > best_acc:
            best_acc = acc
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    if use_snapshots:
        net.load_state_dict(best_state)
    net.eval()
    if log_path is not None:
        write_training_log(history, log_path)
    report = evaluate(net, held_bank) if len(held_bank) else EvalReport(
        task=config.task, bank_id=bank_id(held_bank), accuracy=0.0,
        predictions=[], fingerprint=config.network.fingerprint())
    return net, report


def write_training_log(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "heldout_accuracy"])
        for epoch, loss, acc in history:
            writer.writerow([epoch, f"{loss:.8f}", f"{acc:.6f}"])


def read_training_log(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [(int(r["epoch"]), float(r["train_loss"]), float(r["heldout_accuracy"]))
            for r in rows]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

_PREDICTORS = {"t2i": nets.predict_t2i, "i2p": nets.predict_i2p,
               "p2i": nets.predict_p2i}


def evaluate(net, bank: tasks.QuestionBank) -> EvalReport:
    """Argmax predictions over the whole bank; exact accuracy fraction."""
    head = getattr(net.spec, "head", None)
    if TASK_HEADS.get(bank.task) != head:
        raise ValueError(f"network head {head!r} cannot answer task {bank.task!r}")
    net.eval()
    predict = _PREDICTORS[bank.task]
    predictions = [predict(net, q) for q in bank.questions]
    return EvalReport(task=bank.task, bank_id=bank_id(bank),
                      accuracy=tasks.bank_accuracy(bank, predictions),
                      predictions=predictions,
                      fingerprint=net.spec.fingerprint())
