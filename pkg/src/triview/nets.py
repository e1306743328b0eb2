"""Configurable VGG-family networks for the view-matching tasks.

Backbones follow the classic 5-stage VGG layout with stage widths scaled
from the width of the last convolutional stage. Three network topologies
cover the tasks: an early-fusion net over a 12-channel composite image, a
late-fusion net with four single-image backbones, and a pair-scoring net
(four backbones -> two embedding MLPs -> a binary pair classifier) used both
for contrastive pre-training and for the late-fusion T2I task. Parameters
move between networks through a named-section bundle archive.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .seeding import derive_seed

FAMILIES = {"vgg13": (2, 2, 2, 2, 2), "vgg16": (2, 2, 3, 3, 3), "vgg19": (2, 2, 4, 4, 4)}
STAGE_FRACTIONS = (0.125, 0.25, 0.5, 1.0, 1.0)
FEATURE_GRID = 6                       # spatial size after the five pool stages at 200 px
PAPER_WIDTHS = (384, 448, 512, 1024)   # published capacity-sweep levels
FUSIONS = ("early", "late")
HEADS = ("t2i_binary", "i2p_multiclass", "p2i_pose_logits", "contrastive")
N_POSES = 8
BUNDLE_FORMAT_VERSION = 1


class ArchitectureMismatch(ValueError):
    """Bundle and network disagree on a parameter shape or name."""


@dataclass(frozen=True)
class BackboneSpec:
    """Shape of one convolutional feature extractor."""

    family: str = "vgg16"
    width_last: int = 512
    in_channels: int = 3
    use_pooling: bool = True
    use_dropout: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.width_last <= 0 or self.width_last % 8:
            raise ValueError("width_last must be a positive multiple of 8")
        if self.in_channels not in (3, 12):
            raise ValueError("in_channels must be 3 (late fusion) or 12 (early)")

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(int(self.width_last * f) for f in STAGE_FRACTIONS)

    @property
    def feature_dim(self) -> int:
        """Flattened feature size C = 6*6*width_last."""
        return FEATURE_GRID * FEATURE_GRID * self.width_last


@dataclass(frozen=True)
class NetworkSpec:
    """Full network shape: backbone, fusion topology, task head, variants."""

    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fusion: str = "late"
    head: str = "t2i_binary"
    share_weights: bool = False
    separate_fc: bool = False
    embed_dim: int = 4096   # K, the pair-embedding width
    mlp_width: int = 4096   # hidden width of the classifier / embedding MLPs
    init: str = "random"    # "random" or a bundle path

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "contrastive" and self.fusion != "late":
            raise ValueError("the contrastive head requires late fusion")
        if self.fusion == "early" and (self.share_weights or self.separate_fc):
            raise ValueError("early fusion has one backbone: no share_weights/separate_fc")
        if self.separate_fc and self.head not in ("i2p_multiclass", "p2i_pose_logits"):
            raise ValueError("separate_fc applies to the late-fusion i2p/p2i classifiers")
        expected = 12 if self.fusion == "early" else 3
        if self.backbone.in_channels != expected:
            raise ValueError(f"{self.fusion} fusion needs {expected}-channel input")
        if self.embed_dim <= 0 or self.mlp_width <= 0:
            raise ValueError("embed_dim and mlp_width must be positive")

    def fingerprint(self) -> dict:
        d = asdict(self)
        d.pop("init")
        return d


def spec_from_fingerprint(fp: dict, head: str | None = None) -> NetworkSpec:
    """Rebuild the network spec recorded in a bundle header. ``head`` swaps
    the task head while keeping every dimension (e.g. loading contrastive
    parameters into the equivalent paired-image scorer)."""
    fields = dict(fp)
    fields["backbone"] = BackboneSpec(**fields["backbone"])
    if head is not None:
        fields["head"] = head
    return NetworkSpec(**fields)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

class VggBackbone(nn.Module):
    """Five conv stages of 3x3/ReLU layers, each followed by 2x2 max pooling;
    adaptive 6x6 average pooling (optional) and flattening to C."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        layers = []
        channels = spec.in_channels
        for width, n_convs in zip(spec.stage_widths, FAMILIES[spec.family]):
            for _ in range(n_convs):
                layers += [nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(inplace=True)]
                channels = width
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((FEATURE_GRID, FEATURE_GRID)) \
            if spec.use_pooling else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.pool(self.features(x))
        return torch.flatten(out, 1)


def _classifier(in_dim: int, hidden: int, out_dim: int, use_dropout: bool) -> nn.Sequential:
    drop = [nn.Dropout(0.5)] if use_dropout else []
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), *drop,
        nn.Linear(hidden, hidden), nn.ReLU(inplace=True), *drop,
        nn.Linear(hidden, out_dim))


def _embedding_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    # three linear layers, no dropout
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim))


def _make_branches(owner: nn.Module, spec: NetworkSpec) -> None:
    if spec.share_weights:
        shared = VggBackbone(spec.backbone)
        owner.f1 = owner.f2 = owner.f3 = owner.f4 = shared
    else:
        owner.f1 = VggBackbone(spec.backbone)
        owner.f2 = VggBackbone(spec.backbone)
        owner.f3 = VggBackbone(spec.backbone)
        owner.f4 = VggBackbone(spec.backbone)


# --------------------------------------------------------------------------
# network topologies
# --------------------------------------------------------------------------

class PairScoringNet(nn.Module):
    """Four backbones feeding two embedding MLPs and a binary pair classifier.

    Embeds (F, R, T) into ``a`` and an isometric drawing into ``b``; the
    score of a pair is sigmoid applied to a one-hidden-layer MLP over the
    concatenation of the two embeddings. Serves the contrastive objective
    and the late-fusion T2I head, which share this architecture (and
    therefore exchange parameter bundles).

    The hidden layer in ``h`` is essential: a purely affine pair score
    w.[a;b]+c makes the four cross-pair targets of the contrastive loss
    jointly unsatisfiable (the (1,1) and (2,2) constraints sum to the same
    expression as the (1,2) and (2,1) constraints, with opposite signs),
    pinning the loss at its ln 2 floor regardless of the embeddings.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        _make_branches(self, spec)
        c = spec.backbone.feature_dim
        self.g1 = _embedding_mlp(3 * c, spec.mlp_width, spec.embed_dim)
        self.g2 = _embedding_mlp(c, spec.mlp_width, spec.embed_dim)
        self.h = nn.Sequential(
            nn.Linear(2 * spec.embed_dim, spec.mlp_width), nn.ReLU(inplace=True),
            nn.Linear(spec.mlp_width, 1))

    def sections(self) -> dict[str, nn.Module]:
        return {"theta1": self.f1, "theta2": self.f2, "theta3": self.f3,
                "theta4": self.f4, "phi1": self.g1, "phi2": self.g2, "psi": self.h}

    def encode_triple(self, f: torch.Tensor, r: torch.Tensor, t: torch.Tensor):
        return self.g1(torch.cat([self.f1(f), self.f2(r), self.f3(t)], dim=1))

    def encode_iso(self, i: torch.Tensor) -> torch.Tensor:
        return self.g2(self.f4(i))

    def pair_prob(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.h(torch.cat([a, b], dim=1))).squeeze(-1)

    def forward(self, f, r, t, i) -> torch.Tensor:
        return self.pair_prob(self.encode_triple(f, r, t), self.encode_iso(i))

    def cross_pair_probs(self, views1, views2):
        """Probabilities for the four cross pairings of two branches:
        (a1,b1), (a1,b2), (a2,b1), (a2,b2)."""
        a1 = self.encode_triple(*views1[:3])
        b1 = self.encode_iso(views1[3])
        a2 = self.encode_triple(*views2[:3])
        b2 = self.encode_iso(views2[3])
        return (self.pair_prob(a1, b1), self.pair_prob(a1, b2),
                self.pair_prob(a2, b1), self.pair_prob(a2, b2))


class EarlyFusionNet(nn.Module):
    """One backbone over the 12-channel composite F+R+T+I, then a classifier."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.f1 = VggBackbone(spec.backbone)
        out_dim = 1 if spec.head == "t2i_binary" else N_POSES
        self.head = _classifier(spec.backbone.feature_dim, spec.mlp_width,
                                out_dim, spec.backbone.use_dropout)

    def sections(self) -> dict[str, nn.Module]:
        return {"theta1": self.f1, "head": self.head}

    def forward(self, composite: torch.Tensor) -> torch.Tensor:
        return self.head(self.f1(composite))


class LateFusionNet(nn.Module):
    """Four backbones whose features are concatenated into a classifier;
    used for the i2p and p2i heads."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        _make_branches(self, spec)
        c = spec.backbone.feature_dim
        if spec.separate_fc:
            self.sfc = nn.Sequential(nn.Linear(3 * c, c), nn.ReLU(inplace=True))
            in_dim = 2 * c
        else:
            in_dim = 4 * c
        self.head = _classifier(in_dim, spec.mlp_width, N_POSES,
                                spec.backbone.use_dropout)

    def sections(self) -> dict[str, nn.Module]:
        out = {"theta1": self.f1, "theta2": self.f2, "theta3": self.f3,
               "theta4": self.f4, "head": self.head}
        if self.spec.separate_fc:
            out["sfc"] = self.sfc
        return out

    def forward(self, f, r, t, i) -> torch.Tensor:
        feats = [self.f1(f), self.f2(r), self.f3(t)]
        iso = self.f4(i)
        if self.spec.separate_fc:
            merged = self.sfc(torch.cat(feats, dim=1))
            body = torch.cat([merged, iso], dim=1)
        else:
            body = torch.cat([*feats, iso], dim=1)
        return self.head(body)


def _he_init(net: nn.Module) -> None:
    """ReLU-gain (He) initialization for every conv and linear layer.

    PyTorch's default layer init under-scales activations by roughly half
    per layer, which through a 10+-conv stack attenuates input differences
    to float-noise level (~1e-5) and leaves the pair classifier blind to
    its inputs. fan-out He init keeps signal variance roughly constant
    through conv/ReLU stages at any width; biases start at zero.
    """
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build_network(spec: NetworkSpec, seed: int = 0) -> nn.Module:
    """Instantiate the network for ``spec`` with seeded random parameters,
    then apply the spec's bundle path if one is given. Returned in eval mode."""
    torch.manual_seed(derive_seed(seed, "net-init", spec.fusion, spec.head,
                                  spec.backbone.family))
    if spec.head == "contrastive" or (spec.head == "t2i_binary" and spec.fusion == "late"):
        net: nn.Module = PairScoringNet(spec)
    elif spec.fusion == "early":
        net = EarlyFusionNet(spec)
    else:
        net = LateFusionNet(spec)
    _he_init(net)
    if spec.init != "random":
        warm_start(net, read_bundle(spec.init))
    return net.eval()


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# --------------------------------------------------------------------------
# drawing <-> tensor plumbing
# --------------------------------------------------------------------------

def drawing_to_tensor(drawing, dtype=torch.float32) -> torch.Tensor:
    """LineDrawing -> (3, H, W) tensor in [0, 1]."""
    arr = np.ascontiguousarray(drawing.pixels.transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype)


def stack_drawings(drawings, dtype=torch.float32) -> torch.Tensor:
    """List of LineDrawings -> (B, 3, H, W) batch."""
    return torch.stack([drawing_to_tensor(d, dtype) for d in drawings])


def composite_tensor(f, r, t, i, dtype=torch.float32) -> torch.Tensor:
    """Four drawings -> (12, H, W) channel-concatenated composite."""
    return torch.cat([drawing_to_tensor(d, dtype) for d in (f, r, t, i)])


# --------------------------------------------------------------------------
# head-level scoring (single questions, eval mode)
# --------------------------------------------------------------------------

def encode_views(net: PairScoringNet, f, r, t, i):
    """Embed drawings into the pair vectors (a, b), each of length K."""
    if not isinstance(net, PairScoringNet):
        raise TypeError("encode_views needs a pair-scoring network")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        a = net.encode_triple(*(stack_drawings([d], dtype) for d in (f, r, t)))
        b = net.encode_iso(stack_drawings([i], dtype))
    return a[0].numpy(), b[0].numpy()


def pair_logit(net: PairScoringNet, a, b) -> float:
    """Pair probability in (0, 1) from the two embeddings."""
    dtype = next(net.parameters()).dtype
    ta = torch.as_tensor(np.asarray(a), dtype=dtype).reshape(1, -1)
    tb = torch.as_tensor(np.asarray(b), dtype=dtype).reshape(1, -1)
    with torch.no_grad():
        return float(net.pair_prob(ta, tb)[0])


def t2i_scores(net: nn.Module, question) -> np.ndarray:
    """Per-candidate correctness probabilities for a T2I question."""
    if getattr(net.spec, "head", None) != "t2i_binary":
        raise ValueError("network head is not t2i_binary")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        if isinstance(net, PairScoringNet):
            a = net.encode_triple(*(stack_drawings([d], dtype)
                                    for d in (question.F, question.R, question.T)))
            b = net.encode_iso(stack_drawings(question.candidates, dtype))
            probs = net.pair_prob(a.expand(len(question.candidates), -1), b)
        else:
            comps = torch.stack([composite_tensor(question.F, question.R, question.T,
                                                  c, dtype)
                                 for c in question.candidates])
            probs = torch.sigmoid(net(comps).squeeze(-1))
    return probs.numpy().astype(np.float64)


def i2p_logits(net: nn.Module, f, r, t, i) -> np.ndarray:
    """Logits over the 8 poses for an I2P network."""
    if getattr(net.spec, "head", None) != "i2p_multiclass":
        raise ValueError("network head is not i2p_multiclass")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        if isinstance(net, EarlyFusionNet):
            out = net(composite_tensor(f, r, t, i, dtype)[None])
        else:
            out = net(*(stack_drawings([d], dtype) for d in (f, r, t, i)))
    return out[0].numpy().astype(np.float64)


def p2i_pose_logits(net: nn.Module, f, r, t, i_candidate) -> np.ndarray:
    """Logits over the 8 poses for one candidate drawing of a P2I question."""
    if getattr(net.spec, "head", None) != "p2i_pose_logits":
        raise ValueError("network head is not p2i_pose_logits")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        if isinstance(net, EarlyFusionNet):
            out = net(composite_tensor(f, r, t, i_candidate, dtype)[None])
        else:
            out = net(*(stack_drawings([d], dtype) for d in (f, r, t, i_candidate)))
    return out[0].numpy().astype(np.float64)


def select_at(logits, pose: int) -> float:
    """Candidate score: sigmoid of the logit at the given pose index."""
    logits = np.asarray(logits)
    if not 0 <= pose < logits.shape[-1]:
        raise ValueError(f"pose {pose} out of range")
    return float(1.0 / (1.0 + np.exp(-logits[..., pose])))


def p2i_scores(net: nn.Module, question) -> np.ndarray:
    """Scores of the four candidates at the question's given pose."""
    return np.array([select_at(p2i_pose_logits(net, question.F, question.R,
                                               question.T, c), question.given_pose)
                     for c in question.candidates])


def predict_t2i(net, question) -> int:
    return int(np.argmax(t2i_scores(net, question)))  # first max wins ties


def predict_i2p(net, question) -> int:
    logits = i2p_logits(net, question.F, question.R, question.T, question.I)
    poses = list(question.candidate_poses)
    return int(poses[int(np.argmax(logits[poses]))])


def predict_p2i(net, question) -> int:
    return int(np.argmax(p2i_scores(net, question)))


# --------------------------------------------------------------------------
# parameter bundles
# --------------------------------------------------------------------------

@dataclass
class ParamBundle:
    """Named sections of float32 arrays plus a descriptive header."""

    header: dict
    arrays: dict  # section -> {param name -> np.ndarray float32}

    def shapes(self) -> dict:
        return {sec: {name: list(arr.shape) for name, arr in params.items()}
                for sec, params in self.arrays.items()}


def save_bundle(net: nn.Module) -> ParamBundle:
    """Snapshot all parameters into named sections (float32)."""
    arrays = {}
    for sec_name, module in net.sections().items():
        arrays[sec_name] = {name: tensor.detach().cpu().numpy().astype("<f4")
                            for name, tensor in module.state_dict().items()}
    dims = {"C": net.spec.backbone.feature_dim}
    if isinstance(net, PairScoringNet):
        dims["K"] = net.spec.embed_dim
    header = {"format_version": BUNDLE_FORMAT_VERSION,
              "fingerprint": net.spec.fingerprint(), "dims": dims}
    bundle = ParamBundle(header=header, arrays=arrays)
    bundle.header["sections"] = bundle.shapes()
    return bundle


def load_bundle(net: nn.Module, bundle: ParamBundle) -> None:
    """Copy bundle arrays into the network; every network parameter must be
    matched exactly, otherwise ArchitectureMismatch names the first offender."""
    plan = []
    seen_modules = set()
    for sec_name, module in net.sections().items():
        if sec_name not in bundle.arrays:
            raise ArchitectureMismatch(f"bundle lacks section {sec_name!r}")
        src = bundle.arrays[sec_name]
        state = module.state_dict()
        for pname, tensor in state.items():
            if pname not in src:
                raise ArchitectureMismatch(f"{sec_name}/{pname}: missing from bundle")
            if tuple(src[pname].shape) != tuple(tensor.shape):
                raise ArchitectureMismatch(
                    f"{sec_name}/{pname}: bundle {tuple(src[pname].shape)} "
                    f"vs network {tuple(tensor.shape)}")
        extra = set(src) - set(state)
        if extra:
            raise ArchitectureMismatch(
                f"{sec_name}/{sorted(extra)[0]}: not a network parameter")
        # weight-sharing: four section names may alias one module
        if id(module) not in seen_modules:
            seen_modules.add(id(module))
            plan.append((module, src))
    with torch.no_grad():
        for module, src in plan:
            for pname, tensor in module.state_dict().items():
                tensor.copy_(torch.from_numpy(np.asarray(src[pname])))


def warm_start(net: nn.Module, bundle: ParamBundle) -> dict[str, str]:
    """Best-effort transfer: exact-matching sections load; backbone sections
    absent from the bundle fall back to its theta1 when shapes agree (so a
    single-backbone bundle warms all four branches). Returns a report."""
    report = {}
    loaded_modules = set()
    with torch.no_grad():
        for sec_name, module in net.sections().items():
            if id(module) in loaded_modules:
                report[sec_name] = "shared-with-loaded"
                continue
            source, how = None, ""
            if sec_name in bundle.arrays:
                source, how = bundle.arrays[sec_name], "loaded"
            elif sec_name.startswith("theta") and "theta1" in bundle.arrays:
                source, how = bundle.arrays["theta1"], "replicated-from-theta1"
            if source is None:
                report[sec_name] = "skipped: not in bundle"
                continue
            state = module.state_dict()
            if set(state) != set(source) or any(
                    tuple(source[k].shape) != tuple(v.shape) for k, v in state.items()):
                report[sec_name] = "skipped: shape mismatch"
                continue
            for pname, tensor in state.items():
                tensor.copy_(torch.from_numpy(np.asarray(source[pname])))
            loaded_modules.add(id(module))
            report[sec_name] = how
    return report


def write_bundle(bundle: ParamBundle, path) -> None:
    """Single zip archive: header.json + data/<section>/<param>.f32 raw
    little-endian float32; deterministic bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = (1980, 1, 1, 0, 0, 0)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        header = json.dumps(bundle.header, indent=1, sort_keys=True)
        zf.writestr(zipfile.ZipInfo("header.json", date_time=stamp), header)
        for sec in sorted(bundle.arrays):
            for pname in sorted(bundle.arrays[sec]):
                arr = np.ascontiguousarray(bundle.arrays[sec][pname], dtype="<f4")
                info = zipfile.ZipInfo(f"data/{sec}/{pname}.f32", date_time=stamp)
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, arr.tobytes())
    tmp.replace(path)


def read_bundle(path) -> ParamBundle:
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json").decode())
        if header.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise ValueError(f"unsupported bundle format {header.get('format_version')!r}")
        arrays: dict = {}
        for sec, params in header["sections"].items():
            arrays[sec] = {}
            for pname, shape in params.items():
                raw = zf.read(f"data/{sec}/{pname}.f32")
                arrays[sec][pname] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return ParamBundle(header=header, arrays=arrays)
