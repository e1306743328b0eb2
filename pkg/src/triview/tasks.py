"""Question banks for the three matching tasks.

T2I: given front/right/top drawings, pick the matching isometric drawing out
of four candidates. I2P: given all four drawings, name the isometric camera
pose. P2I: given the three views plus a pose code, pick the isometric drawing
rendered from that pose. Banks serialize to a manifest plus PNG files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, render
from .seeding import substream

BANK_SCHEMA_VERSION = 1
CANONICAL_POSE = 7  # isometric corner (+1, +1, +1)/sqrt(3)
N_CANDIDATES = 4
DISTRACTOR_SIZE_RANGE = (0.08, 0.15)
TASKS = ("t2i", "i2p", "p2i")


class BankError(ValueError):
    """Malformed bank on disk or inconsistent bank assembly."""


@dataclass
class T2IQuestion:
    F: render.LineDrawing
    R: render.LineDrawing
    T: render.LineDrawing
    candidates: list  # 4 LineDrawings at the canonical isometric pose
    answer_index: int
    model_id: str = ""
    candidate_pose: int = CANONICAL_POSE

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES:
            raise ValueError("t2i question needs exactly 4 candidates")
        if not 0 <= self.answer_index < N_CANDIDATES:
            raise ValueError("answer index out of range")


@dataclass
class I2PQuestion:
    F: render.LineDrawing
    R: render.LineDrawing
    T: render.LineDrawing
    I: render.LineDrawing
    answer_pose: int
    candidate_poses: list = field(default_factory=lambda: list(range(render.N_ISO_POSES)))
    model_id: str = ""

    def __post_init__(self):
        if self.answer_pose not in self.candidate_poses:
            raise ValueError("answer pose must be among the candidate poses")


@dataclass
class P2IQuestion:
    F: render.LineDrawing
    R: render.LineDrawing
    T: render.LineDrawing
    given_pose: int
    candidates: list          # 4 LineDrawings at pairwise-distinct poses
    candidate_poses: list     # the pose of each candidate
    answer_index: int
    model_id: str = ""

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES or len(self.candidate_poses) != N_CANDIDATES:
            raise ValueError("p2i question needs exactly 4 candidates with poses")
        if len(set(self.candidate_poses)) != N_CANDIDATES:
            raise ValueError("candidate poses must be pairwise distinct")
        if self.candidate_poses[self.answer_index] != self.given_pose:
            raise ValueError("answer candidate must be rendered from the given pose")


@dataclass
class QuestionBank:
    task: str
    questions: list
    seed: int
    model_ids: list

    def __len__(self):
        return len(self.questions)


# --------------------------------------------------------------------------
# question synthesis
# --------------------------------------------------------------------------

def _drawings_equal(a: render.LineDrawing, b: render.LineDrawing) -> bool:
    return a.gray.shape == b.gray.shape and np.array_equal(a.gray, b.gray)


def make_t2i(model: geometry.CsgModel, rng, *, size: int = render.IMAGE_SIZE,
             max_attempts: int = 50,
             distractor_size_range: tuple = DISTRACTOR_SIZE_RANGE) -> T2IQuestion:
    """One T2I question: distractors come from small Boolean perturbations of
    the model, re-drawn at the canonical pose; any distractor drawing that
    duplicates an existing candidate is regenerated. ``distractor_size_range``
    dials how salient the perturbations are (the default keeps them subtle)."""
    rng = geometry.as_rng(rng)
    vs = render.render_viewset(model, CANONICAL_POSE, size=size)
    truth = vs.I
    occupied = geometry.occupied_check_bounds(model)
    place = occupied if occupied is not None else geometry.PLACEMENT_BOX
    distractors = []
    attempts = 0
    while len(distractors) < N_CANDIDATES - 1:
        if attempts >= max_attempts:
            raise geometry.GenerationError(
                f"could not build 3 distinct distractors in {max_attempts} attempts")
        attempts += 1
        try:
            perturbed = geometry.modify_model(model, rng, bounds=place,
                                              size_range=distractor_size_range,
                                              max_attempts=1)
        except geometry.GenerationError:
            continue
        drawing = render.render_view(perturbed, f"iso{CANONICAL_POSE}", size=size)
        if any(_drawings_equal(drawing, d) for d in [truth, *distractors]):
            continue
        distractors.append(drawing)
    answer_index = int(rng.integers(N_CANDIDATES))
    candidates = distractors.copy()
    candidates.insert(answer_index, truth)
    return T2IQuestion(F=vs.F, R=vs.R, T=vs.T, candidates=candidates,
                       answer_index=answer_index, model_id=model.model_id)


def make_i2p(model: geometry.CsgModel, rng, *, size: int = render.IMAGE_SIZE,
             candidate_poses=None) -> I2PQuestion:
    """One I2P question: the isometric drawing is rendered from a pose chosen
    uniformly among the candidates (all 8 by default)."""
    rng = geometry.as_rng(rng)
    poses = list(range(render.N_ISO_POSES)) if candidate_poses is None \
        else list(candidate_poses)
    answer_pose = int(poses[rng.integers(len(poses))])
    vs = render.render_viewset(model, answer_pose, size=size)
    return I2PQuestion(F=vs.F, R=vs.R, T=vs.T, I=vs.I, answer_pose=answer_pose,
                       candidate_poses=poses, model_id=model.model_id)


def make_p2i(model: geometry.CsgModel, rng, *, size: int = render.IMAGE_SIZE) -> P2IQuestion:
    """One P2I question: four isometric candidates at distinct random poses,
    with the given pose code pointing at one of them."""
    rng = geometry.as_rng(rng)
    poses = [int(p) for p in rng.choice(render.N_ISO_POSES, size=N_CANDIDATES,
                                        replace=False)]
    answer_index = int(rng.integers(N_CANDIDATES))
    given_pose = poses[answer_index]
    vs = render.render_viewset(model, given_pose, size=size)
    frame = render.model_frame(model)
    candidates = []
    for idx, pose in enumerate(poses):
        if idx == answer_index:
            candidates.append(vs.I)
        else:
            candidates.append(render.render_view(model, f"iso{pose}",
                                                 size=size, frame=frame))
    return P2IQuestion(F=vs.F, R=vs.R, T=vs.T, given_pose=given_pose,
                       candidates=candidates, candidate_poses=poses,
                       answer_index=answer_index, model_id=model.model_id)


_MAKERS = {"t2i": make_t2i, "i2p": make_i2p, "p2i": make_p2i}


def ensure_disjoint(model_ids, reserved_ids) -> None:
    """Raise when a bank would reuse models reserved for another stage."""
    overlap = set(model_ids) & set(reserved_ids)
    if overlap:
        raise BankError(f"models reused across stages: {sorted(overlap)[:5]} ...")


def build_bank(models, task: str, seed: int, *, size: int = render.IMAGE_SIZE,
               exclude_ids=None, **task_kwargs) -> QuestionBank:
    """One question per model; a pure function of (models, task, seed)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    ids = [m.model_id for m in models]
    if exclude_ids is not None:
        ensure_disjoint(ids, exclude_ids)
    make = _MAKERS[task]
    questions = [make(m, substream(seed, "tasks", task, str(i)), size=size,
                      **task_kwargs)
                 for i, m in enumerate(models)]
    return QuestionBank(task=task, questions=questions, seed=seed, model_ids=ids)


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def score_answer(question, predicted) -> bool:
    """True when the prediction names the correct candidate (index) or pose."""
    if isinstance(question, I2PQuestion):
        if predicted not in question.candidate_poses:
            raise ValueError(f"pose {predicted} not among candidates "
                             f"{question.candidate_poses}")
        return int(predicted) == question.answer_pose
    if not 0 <= int(predicted) < N_CANDIDATES:
        raise ValueError(f"candidate index {predicted} out of range")
    return int(predicted) == question.answer_index


def bank_accuracy(bank: QuestionBank, predictions) -> float:
    if len(predictions) != len(bank.questions):
        raise ValueError("one prediction per question required")
    hits = [score_answer(q, p) for q, p in zip(bank.questions, predictions)]
    return float(np.mean(hits))


# --------------------------------------------------------------------------
# serialization: bank/<task>/manifest.json + images/*.png
# --------------------------------------------------------------------------

def _save(drawing, images_dir: Path, name: str) -> str:
    render.save_drawing(drawing, images_dir / name)
    return f"images/{name}"


def write_bank(bank: QuestionBank, root) -> Path:
    """Write under <root>/<task>/: images first, manifest last (atomically)."""
    task_dir = Path(root) / bank.task
    images = task_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, q in enumerate(bank.questions):
        entry = {"model_id": q.model_id,
                 "views": {t: _save(getattr(q, t.upper()), images, f"q{i}_{t}.png")
                           for t in ("f", "r", "t")}}
        if isinstance(q, T2IQuestion):
            entry["candidates"] = [_save(c, images, f"q{i}_c{j}.png")
                                   for j, c in enumerate(q.candidates)]
            entry["answer"] = q.answer_index
            entry["poses"] = [q.candidate_pose] * N_CANDIDATES
        elif isinstance(q, I2PQuestion):
            entry["views"]["i"] = _save(q.I, images, f"q{i}_i.png")
            entry["answer"] = q.answer_pose
            entry["poses"] = list(q.candidate_poses)
        else:
            entry["candidates"] = [_save(c, images, f"q{i}_c{j}.png")
                                   for j, c in enumerate(q.candidates)]
            entry["answer"] = q.answer_index
            entry["poses"] = list(q.candidate_poses)
            entry["given_pose"] = q.given_pose
        entries.append(entry)
    manifest = {"schema_version": BANK_SCHEMA_VERSION, "task": bank.task,
                "seed": bank.seed, "model_ids": list(bank.model_ids),
                "entries": entries}
    tmp = task_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(task_dir / "manifest.json")
    return task_dir


def read_bank(task_dir) -> QuestionBank:
    task_dir = Path(task_dir)
    try:
        manifest = json.loads((task_dir / "manifest.json").read_text())
    except (json.JSONDecodeError, OSError) as e:
        raise BankError(f"unreadable bank manifest in {task_dir}: {e}") from e
    if manifest.get("schema_version") != BANK_SCHEMA_VERSION:
        raise BankError(f"unsupported bank schema {manifest.get('schema_version')!r}")
    task = manifest["task"]
    if task not in TASKS:
        raise BankError(f"unknown task {task!r} in manifest")

    def img(rel):
        return render.load_drawing(task_dir / rel)

    questions = []
    for e in manifest["entries"]:
        f, r, t = (img(e["views"][k]) for k in ("f", "r", "t"))
        if task == "t2i":
            questions.append(T2IQuestion(
                F=f, R=r, T=t, candidates=[img(p) for p in e["candidates"]],
                answer_index=e["answer"], model_id=e["model_id"],
                candidate_pose=e["poses"][0]))
        elif task == "i2p":
            questions.append(I2PQuestion(
                F=f, R=r, T=t, I=img(e["views"]["i"]), answer_pose=e["answer"],
                candidate_poses=list(e["poses"]), model_id=e["model_id"]))
        else:
            questions.append(P2IQuestion(
                F=f, R=r, T=t, given_pose=e["given_pose"],
                candidates=[img(p) for p in e["candidates"]],
                candidate_poses=list(e["poses"]), answer_index=e["answer"],
                model_id=e["model_id"]))
    return QuestionBank(task=task, questions=questions, seed=manifest["seed"],
                        model_ids=list(manifest["model_ids"]))


def read_folder_bank(root, task: str) -> QuestionBank:
    """Read a folder-per-question layout (one directory per question holding
    front/right/top PNGs, candidate PNGs or an isometric PNG, and an
    answer.json). Import path for externally produced banks."""
    root = Path(root)
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    questions = []
    ids = []
    for qdir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta = json.loads((qdir / "answer.json").read_text())
        f, r, t = (render.load_drawing(qdir / f"{n}.png")
                   for n in ("front", "right", "top"))
        if task == "i2p":
            questions.append(I2PQuestion(
                F=f, R=r, T=t, I=render.load_drawing(qdir / "isometric.png"),
                answer_pose=meta["answer"],
                candidate_poses=meta.get("poses", list(range(render.N_ISO_POSES))),
                model_id=qdir.name))
        else:
            cands = [render.load_drawing(p)
                     for p in sorted(qdir.glob("candidate_*.png"))]
            if task == "t2i":
                questions.append(T2IQuestion(
                    F=f, R=r, T=t, candidates=cands, answer_index=meta["answer"],
                    model_id=qdir.name,
                    candidate_pose=meta.get("pose", CANONICAL_POSE)))
            else:
                questions.append(P2IQuestion(
                    F=f, R=r, T=t, given_pose=meta["given_pose"], candidates=cands,
                    candidate_poses=meta["poses"], answer_index=meta["answer"],
                    model_id=qdir.name))
        ids.append(qdir.name)
    return QuestionBank(task=task, questions=questions, seed=-1, model_ids=ids)
