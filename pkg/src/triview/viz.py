"""Activation-based attention maps and question panels.

An attention map is the per-pixel sum of squared channel activations taken
after a chosen convolution (post-ReLU), normalized to [0, 1] and bilinearly
upsampled to the source drawing's size. Late-fusion networks yield one map
per view (each view meets its own branch); early-fusion networks see one
12-channel composite and yield a single shared map. Panels compose the
question drawings with overlay rows, marking absent maps as "N/A".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402
import torch  # noqa: E402
from torch import nn  # noqa: E402

from . import nets, tasks  # noqa: E402

VIEW_LABELS = ("Front", "Right", "Top", "Isometric")


@dataclass
class AttentionMap:
    """Normalized attention values aligned to one source drawing."""

    values: np.ndarray  # (H, W) float32 in [0, 1]
    layer: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("attention map must be a 2-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attention map must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("attention map values must lie in [0, 1]")


def aggregate_activations(block) -> np.ndarray:
    """(C, h, w) activations -> (h, w) sum of squares over channels,
    normalized to [0, 1] (a constant block maps to all zeros)."""
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError("expected a (channels, height, width) block")
    summed = (arr ** 2).sum(axis=0)
    lo, hi = summed.min(), summed.max()
    if hi - lo <= 0.0:
        return np.zeros_like(summed, dtype=np.float32)
    return ((summed - lo) / (hi - lo)).astype(np.float32)


def upsample(values, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a (h, w) map to (height, width), kept in [0, 1]."""
    t = torch.as_tensor(np.asarray(values, dtype=np.float32))[None, None]
    out = torch.nn.functional.interpolate(t, size=(height, width),
                                          mode="bilinear", align_corners=False)
    return out[0, 0].numpy().clip(0.0, 1.0)


def conv_layer_names(net) -> list:
    """Layer ids accepted by attention_map, shallow to deep."""
    count = sum(1 for m in net.f1.features if isinstance(m, nn.Conv2d))
    return [f"conv{k}" for k in range(count)]


def _conv_position(backbone, layer: str, names) -> int:
    positions = [i for i, m in enumerate(backbone.features)
                 if isinstance(m, nn.Conv2d)]
    if layer == "last":
        return positions[-1]
    if layer not in names:
        raise ValueError(f"unknown layer {layer!r}; expected one of "
                         f"{names} or 'last'")
    return positions[names.index(layer)]


def _branch_map(backbone, tensor, position: int, layer: str,
                height: int, width: int) -> AttentionMap:
    with torch.no_grad():
        # position indexes the conv; the following module is its ReLU
        acts = backbone.features[:position + 2](tensor[None])[0]
    values = upsample(aggregate_activations(acts.numpy()), height, width)
    return AttentionMap(values=values, layer=layer)


def attention_map(net, drawings, layer: str = "last") -> list:
    """Attention maps for the four drawings (F, R, T, isometric).

    Late fusion returns four maps, one per view through its own branch;
    early fusion returns a single map for the 12-channel composite.
    """
    if len(drawings) != 4:
        raise ValueError("expected the four drawings (F, R, T, isometric)")
    names = conv_layer_names(net)
    resolved = names[-1] if layer == "last" else layer
    dtype = next(net.parameters()).dtype
    if isinstance(net, nets.EarlyFusionNet):
        position = _conv_position(net.f1, layer, names)
        comp = nets.composite_tensor(*drawings, dtype)
        h, w = drawings[0].gray.shape
        return [_branch_map(net.f1, comp, position, resolved, h, w)]
    maps = []
    for branch, drawing in zip((net.f1, net.f2, net.f3, net.f4), drawings):
        position = _conv_position(branch, layer, names)
        tensor = nets.drawing_to_tensor(drawing, dtype)
        h, w = drawing.gray.shape
        maps.append(_branch_map(branch, tensor, position, resolved, h, w))
    return maps


def question_views(question) -> tuple:
    """The (F, R, T, isometric) drawings a question panel displays; the
    isometric slot shows the correct candidate where one exists."""
    if isinstance(question, tasks.I2PQuestion):
        return question.F, question.R, question.T, question.I
    return (question.F, question.R, question.T,
            question.candidates[question.answer_index])


def compose_panels(question, maps: dict, out_dir, question_id: str = "") -> Path:
    """Write a panel grid for one question: first row the drawings, one row
    per named map set, absent maps rendered as "N/A" cells.

    ``maps`` is {row label -> list of 4 (AttentionMap | None)}. Returns the
    path of `attn_<question_id>.png`. Input drawings are never modified.
    """
    drawings = question_views(question)
    for label, row in maps.items():
        if len(row) != 4:
            raise ValueError(f"row {label!r} must hold 4 entries (or None)")
        for m, d in zip(row, drawings):
            if m is not None and m.values.shape != d.gray.shape:
                raise ValueError(f"row {label!r}: map shape {m.values.shape} "
                                 f"does not match drawing {d.gray.shape}")
    qid = question_id or question.model_id.replace("/", "_") or "question"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"attn_{qid}.png"

    n_rows = 1 + len(maps)
    fig, axes = plt.subplots(n_rows, 4, figsize=(8, 2 * n_rows), squeeze=False)
    for col, (drawing, title) in enumerate(zip(drawings, VIEW_LABELS)):
        ax = axes[0][col]
        ax.imshow(drawing.gray, cmap="gray", vmin=0, vmax=255)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    for r, (label, row) in enumerate(maps.items(), start=1):
        for col, (m, drawing) in enumerate(zip(row, drawings)):
            ax = axes[r][col]
            ax.axis("off")
            if col == 0:
                ax.set_ylabel(label)
            if m is None:
                ax.text(0.5, 0.5, "N/A", ha="center", va="center",
                        fontsize=14, transform=ax.transAxes)
                continue
            ax.imshow(drawing.gray, cmap="gray", vmin=0, vmax=255)
            ax.imshow(m.values, cmap="viridis", alpha=0.5, vmin=0.0, vmax=1.0)
        axes[r][0].set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
