"""Per-modality static/dynamic networks and their multi-modal fusion graphs.

One modality network carries up to three convolutional branches over four
feature levels: a static branch fed by a raw frame, a dynamic branch fed by
the rank-pooled dynamic image, and a static-dynamic branch that starts from
the elementwise sum of the level-1 static and dynamic maps and therefore
owns no stem or level-1 block. Every branch ends in global average pooling
and a linear two-class head, and a fourth head reads the elementwise sum of
the three pooled vectors. The per-modality loss is the plain sum of the
branch losses.

The multi-modal network adds a shared branch over levels 2..4 that the
modality branches talk to in both directions:

    forward feeding   level input of shared block t+1 is the sum of all
                      static and dynamic level-t maps plus the shared
                      level-t output (which is defined as zero at level 1)
    backward feeding  static and dynamic level-t maps (t = 2, 3) get the
                      shared level-t output added before entering level t+1

Static-dynamic branch maps never take part in either exchange, so hybrid
features stay unmixed with cross-modality semantics; an automated graph
walk asserts this. The whole-network head reads the elementwise sum of all
pooled branch vectors plus the pooled shared vector, and the overall loss
is the whole-network loss plus the per-modality losses.

Fusion variants: ``SDNET_ONLY`` (one modality, no shared branch), ``NHF``
(streams merge by summation once after level 1 into a single trunk),
``PSMM_WOBF`` (shared branch, forward feeding only) and ``PSMM`` (both
feeding directions). All fusion points are elementwise sums, never
concatenations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .diffcore import Graph, forward

__all__ = [
    "MODALITY_CHANNELS",
    "BackboneSpec",
    "FusionVariant",
    "FusionState",
    "LossBundle",
    "Model",
    "build_sdnet",
    "build_psmm",
    "sdnet_forward",
    "psmm_forward",
    "model_forward",
    "sdnet_loss",
    "psmm_loss",
    "loss_bundle",
    "fused_branch_is_isolated",
    "shared_tail_is_isolated",
    "backbone_from_config",
]

MODALITY_CHANNELS = {"color": 3, "depth": 1, "ir": 1}
BRANCH_KEY = {"static": "s", "dynamic": "d", "fused": "f"}
BRANCH_SETS = {"s": ("static",), "d": ("dynamic",), "sd": ("static", "dynamic", "fused")}


class FusionVariant(Enum):
    SDNET_ONLY = "sdnet"
    NHF = "nhf"
    PSMM_WOBF = "psmm-wobf"
    PSMM = "psmm"


@dataclass(frozen=True)
class BackboneSpec:
    """Four-level backbone geometry shared by every branch.

    Each level block is conv3x3(stride 2) + relu + conv3x3 + relu, so the
    spatial extent halves per level; a stride-1 stem precedes level 1.
    """

    input_size: int = 112
    stem_channels: int = 8
    level_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    num_classes: int = 2

    def __post_init__(self):
        if len(self.level_channels) != 4:
            raise ValueError("backbone has exactly 4 feature levels")
        if self.input_size < 8:
            raise ValueError("input size must be at least 8 (four halvings)")


@dataclass
class FusionState:
    """Per-level feature maps captured from one forward pass.

    Keys are ``(level, modality)`` for branch features and ``level`` for the
    shared branch. ``shared[1]`` is exactly zero by definition.
    """

    static: dict = field(default_factory=dict)
    dynamic: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)
    shared: dict = field(default_factory=dict)
    shared_input: dict = field(default_factory=dict)
    static_fb: dict = field(default_factory=dict)
    dynamic_fb: dict = field(default_factory=dict)


@dataclass
class LossBundle:
    """Per-head cross-entropy losses and their exact sums."""

    components: dict[str, float]          # e.g. "color/s", "color/sdf", "whole"
    per_modality: dict[str, float]        # left-fold sums in branch order
    whole: float | None
    total: float


@dataclass
class Model:
    """A built graph plus the name registries needed to drive it."""

    graph: Graph
    spec: BackboneSpec
    variant: FusionVariant
    modalities: tuple[str, ...]
    branches: tuple[str, ...]
    input_nodes: dict[tuple[str, str], str]
    label_node: str
    logit_nodes: dict[str, str]
    loss_nodes: dict[str, str]
    total_loss_node: str
    score_logits: str
    feature_nodes: dict[str, dict]

    def init_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.graph.params.items()}

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for name in self.graph.params:
            if name not in params:
                raise KeyError(f"missing parameter '{name}'")
            if params[name].shape != self.graph.params[name].shape:
                raise ValueError(f"parameter shape mismatch for '{name}'")
            self.graph.params[name] = np.asarray(params[name], dtype=np.float64)


# -- construction -------------------------------------------------------------


class _Builder:
    def __init__(self, graph: Graph, spec: BackboneSpec, rng):
        self.g = graph
        self.spec = spec
        self.rng = rng

    def _conv_params(self, prefix: str, kh: int, cin: int, cout: int) -> tuple[str, str]:
        fan_in = kh * kh * cin
        w = self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(kh, kh, cin, cout))
        # slight positive bias keeps narrow deep stacks off the dead-unit
        # manifold, where finite differences straddle the relu kink
        return (self.g.param(f"{prefix}/w", w),
                self.g.param(f"{prefix}/b", np.full(cout, 0.02)))

    def stem(self, prefix: str, x: str, cin: int) -> str:
        w, b = self._conv_params(f"{prefix}/stem", 3, cin, self.spec.stem_channels)
        conv = self.g.conv2d(f"{prefix}/stem/conv", x, w, b, stride=1)
        return self.g.relu(f"{prefix}/stem/out", conv)

    def block(self, prefix: str, x: str, cin: int, cout: int) -> str:
        w1, b1 = self._conv_params(f"{prefix}/c1", 3, cin, cout)
        c1 = self.g.conv2d(f"{prefix}/c1", x, w1, b1, stride=2)
        r1 = self.g.relu(f"{prefix}/r1", c1)
        w2, b2 = self._conv_params(f"{prefix}/c2", 3, cout, cout)
        c2 = self.g.conv2d(f"{prefix}/c2", r1, w2, b2, stride=1)
        return self.g.relu(f"{prefix}/out", c2)

    def head(self, prefix: str, vec: str, width: int) -> str:
        # heads start at zero so an untrained network is exactly indifferent
        w = self.g.param(f"{prefix}/head/w", np.zeros((width, self.spec.num_classes)))
        b = self.g.param(f"{prefix}/head/b", np.zeros(self.spec.num_classes))
        return self.g.linear(f"{prefix}/logits", vec, w, b)


def _branch_levels(b: _Builder, modality: str, branch: str, source: str) -> dict[int, str]:
    """Stem plus the four level blocks of one static or dynamic branch."""
    spec = b.spec
    stem_out = b.stem(f"{modality}/{branch}", source, MODALITY_CHANNELS[modality])
    outs: dict[int, str] = {}
    prev, cin = stem_out, spec.stem_channels
    for t, cout in enumerate(spec.level_channels, start=1):
        outs[t] = b.block(f"{modality}/{branch}/L{t}", prev, cin, cout)
        prev, cin = outs[t], cout
    return outs


def _xent_order(branches: Sequence[str]) -> list[str]:
    keys = [BRANCH_KEY[br] for br in branches if br != "fused"]
    if "fused" in branches:
        keys.append("f")
        keys.append("sdf")
    return keys


def _attach_heads(b: _Builder, owner: str, level4: dict[str, str],
                  model_logits: dict[str, str], model_losses: dict[str, str],
                  label: str) -> str:
    """GAP + linear heads for one modality (or the fused trunk).

    Returns the node holding the summed per-owner loss. ``level4`` maps
    branch name to its level-4 output node.
    """
    g, width = b.g, b.spec.level_channels[-1]
    gaps: dict[str, str] = {}
    for branch, node in level4.items():
        gaps[branch] = g.gap(f"{owner}/{branch}/gap", node)
        key = BRANCH_KEY[branch]
        model_logits[f"{owner}/{key}"] = b.head(f"{owner}/{branch}", gaps[branch], width)
    if "fused" in level4:
        gsum = g.scale_sum(f"{owner}/gapsum",
                           [gaps[br] for br in ("static", "dynamic", "fused")])
        model_logits[f"{owner}/sdf"] = b.head(f"{owner}/sdf", gsum, width)
    for key in _xent_order(list(level4)):
        model_losses[f"{owner}/{key}"] = g.softmax_xent(
            f"{owner}/loss/{key}", model_logits[f"{owner}/{key}"], label)
    total = g.scale_sum(f"{owner}/loss/total",
                        [model_losses[f"{owner}/{key}"] for key in _xent_order(list(level4))])
    model_losses[owner] = total
    return total


def _shape_for(spec: BackboneSpec, modality: str) -> tuple[int, int, int]:
    return (spec.input_size, spec.input_size, MODALITY_CHANNELS[modality])


def build_sdnet(spec: BackboneSpec, modality: str = "color",
                branches: str = "sd", seed: int = 0) -> Model:
    """Single-modality network; ``branches`` picks 's', 'd' or 'sd'."""
    return build_psmm(spec, FusionVariant.SDNET_ONLY, (modality,), branches, seed)


def build_psmm(spec: BackboneSpec, variant: FusionVariant,
               modalities: Sequence[str] = ("color", "depth", "ir"),
               branches: str = "sd", seed: int = 0) -> Model:
    """Assemble the requested fusion graph.

    ``modalities`` is any non-empty subset of color/depth/ir in canonical
    order; ``branches`` restricts every modality network to its static or
    dynamic branch for ablations.
    """
    if isinstance(variant, str):
        variant = FusionVariant(variant)
    modalities = tuple(modalities)
    if not modalities:
        raise ValueError("need at least one modality")
    for m in modalities:
        if m not in MODALITY_CHANNELS:
            raise ValueError(f"unknown modality '{m}'")
    if branches not in BRANCH_SETS:
        raise ValueError(f"unknown branch mode '{branches}'")
    if variant == FusionVariant.SDNET_ONLY and len(modalities) != 1:
        raise ValueError("single-network variant takes exactly one modality")

    branch_set = BRANCH_SETS[branches]
    g = Graph()
    b = _Builder(g, spec, np.random.default_rng(seed))
    label = g.input("in/label", ())
    inputs: dict[tuple[str, str], str] = {}
    for m in modalities:
        for kind in ("static", "dynamic"):
            if kind in branch_set or "fused" in branch_set:
                inputs[(m, kind)] = g.input(f"in/{m}/{kind}", _shape_for(spec, m))

    logit_nodes: dict[str, str] = {}
    loss_nodes: dict[str, str] = {}
    features: dict[str, dict] = {"static": {}, "dynamic": {}, "fused": {},
                                 "shared": {}, "shared_input": {},
                                 "static_fb": {}, "dynamic_fb": {}}

    if variant == FusionVariant.NHF:
        total = _build_nhf(b, modalities, branch_set, inputs, label,
                           logit_nodes, loss_nodes, features)
        score = logit_nodes.get("trunk/sdf") or next(iter(logit_nodes.values()))
        return Model(g, spec, variant, modalities, branch_set, inputs, label,
                     logit_nodes, loss_nodes, total, score, features)

    with_shared = variant in (FusionVariant.PSMM, FusionVariant.PSMM_WOBF)
    backward_feed = variant == FusionVariant.PSMM

    # stems and level-1 blocks first: level-1 features feed everything else
    flow: dict[tuple[str, str], str] = {}     # (modality, branch) -> current node
    chans = spec.level_channels
    for m in modalities:
        for br in ("static", "dynamic"):
            if br in branch_set or "fused" in branch_set:
                outs_stem = b.stem(f"{m}/{br}", inputs[(m, br)], MODALITY_CHANNELS[m])
                lvl1 = b.block(f"{m}/{br}/L1", outs_stem, spec.stem_channels, chans[0])
                flow[(m, br)] = lvl1
                features[br][(1, m)] = lvl1
        if "fused" in branch_set:
            seedf = g.add(f"{m}/fused/L1/out", flow[(m, "static")], flow[(m, "dynamic")])
            flow[(m, "fused")] = seedf
            features["fused"][(1, m)] = seedf

    exchanged = [br for br in ("static", "dynamic") if (modalities[0], br) in flow]

    shared_prev: str | None = None
    for t in range(2, 5):
        if with_shared:
            # forward feeding: level t-1 static+dynamic maps plus the shared
            # output (zero at level 1, where the term is simply absent)
            terms = [flow[(m, br)] for br in exchanged for m in modalities]
            if shared_prev is not None:
                terms.append(shared_prev)
            stilde = g.scale_sum(f"fusion/stilde/L{t - 1}", terms)
            features["shared_input"][t - 1] = stilde
            shared_out = b.block(f"shared/L{t}", stilde, chans[t - 2], chans[t - 1])
            features["shared"][t] = shared_out
        for m in modalities:
            for br in exchanged:
                src = flow[(m, br)]
                if backward_feed and t in (3, 4):
                    # backward feeding touches levels 2 and 3 only
                    src = g.add(f"{m}/{br}/L{t - 1}/fb", src, features["shared"][t - 1])
                    features[f"{br}_fb"][(t - 1, m)] = src
                nxt = b.block(f"{m}/{br}/L{t}", src, chans[t - 2], chans[t - 1])
                flow[(m, br)] = nxt
                features[br][(t, m)] = nxt
            if "fused" in branch_set:
                nxt = b.block(f"{m}/fused/L{t}", flow[(m, "fused")],
                              chans[t - 2], chans[t - 1])
                flow[(m, "fused")] = nxt
                features["fused"][(t, m)] = nxt
        if with_shared:
            shared_prev = features["shared"][t]

    modality_totals = []
    for m in modalities:
        level4 = {br: flow[(m, br)] for br in branch_set}
        modality_totals.append(_attach_heads(b, m, level4, logit_nodes, loss_nodes, label))

    if with_shared:
        gap_terms = [f"{m}/{br}/gap" for m in modalities for br in branch_set]
        gap_terms.append(g.gap("shared/gap", features["shared"][4]))
        whole_sum = g.scale_sum("whole/gapsum", gap_terms)
        logit_nodes["whole"] = b.head("whole", whole_sum, chans[-1])
        loss_nodes["whole"] = g.softmax_xent("loss/whole", logit_nodes["whole"], label)
        total = g.scale_sum("loss/total", [loss_nodes["whole"]] + modality_totals)
        score = logit_nodes["whole"]
    else:
        total = modality_totals[0]
        score = logit_nodes.get(f"{modalities[0]}/sdf") \
            or logit_nodes[f"{modalities[0]}/{BRANCH_KEY[branch_set[0]]}"]

    return Model(g, spec, variant, modalities, branch_set, inputs, label,
                 logit_nodes, loss_nodes, total, score, features)


def _build_nhf(b: _Builder, modalities, branch_set, inputs, label,
               logit_nodes, loss_nodes, features) -> str:
    """Naive halfway fusion: modality streams sum after level 1, then one
    trunk continues through levels 2..4 with the usual heads."""
    g, spec = b.g, b.spec
    chans = spec.level_channels
    lvl1: dict[tuple[str, str], str] = {}
    streams = [br for br in ("static", "dynamic")
               if br in branch_set or "fused" in branch_set]
    for m in modalities:
        for br in streams:
            stem_out = b.stem(f"{m}/{br}", inputs[(m, br)], MODALITY_CHANNELS[m])
            node = b.block(f"{m}/{br}/L1", stem_out, spec.stem_channels, chans[0])
            lvl1[(m, br)] = node
            features[br][(1, m)] = node

    trunk: dict[str, str] = {}
    for br in streams:
        trunk[br] = g.scale_sum(f"fusion/nhf/{br}", [lvl1[(m, br)] for m in modalities])
    if "fused" in branch_set:
        trunk["fused"] = g.add("trunk/fused/L1/out", trunk["static"], trunk["dynamic"])

    level4: dict[str, str] = {}
    for br, node in trunk.items():
        prev, cin = node, chans[0]
        for t in range(2, 5):
            prev = b.block(f"trunk/{br}/L{t}", prev, cin, chans[t - 1])
            cin = chans[t - 1]
        level4[br] = prev
    return _attach_heads(b, "trunk", level4, logit_nodes, loss_nodes, label)


# -- execution ----------------------------------------------------------------


def model_forward(model: Model, images: Mapping[tuple[str, str], np.ndarray],
                  label: int = 0) -> dict[str, np.ndarray]:
    missing = [k for k in model.input_nodes if k not in images]
    if missing:
        raise ValueError(f"missing inputs: {missing}")
    feed = {node: images[key] for key, node in model.input_nodes.items()}
    feed[model.label_node] = np.asarray(float(label))
    return forward(model.graph, feed)


def fusion_state(model: Model, values: Mapping[str, np.ndarray]) -> FusionState:
    state = FusionState()
    for kind in ("static", "dynamic", "fused"):
        for key, node in model.feature_nodes[kind].items():
            getattr(state, kind)[key] = values[node]
    for key, node in model.feature_nodes["shared"].items():
        state.shared[key] = values[node]
    for key, node in model.feature_nodes["shared_input"].items():
        state.shared_input[key] = values[node]
    for kind in ("static_fb", "dynamic_fb"):
        for key, node in model.feature_nodes[kind].items():
            getattr(state, kind)[key] = values[node]
    if model.feature_nodes["shared"]:
        # the shared branch has no level-1 block; its output there is zero
        lvl1_shape = values[model.feature_nodes["static"][(1, model.modalities[0])]].shape
        state.shared[1] = np.zeros(lvl1_shape)
    return state


def sdnet_forward(model: Model, static_img: np.ndarray, dynamic_img: np.ndarray,
                  label: int = 0) -> tuple[FusionState, dict[str, np.ndarray]]:
    if len(model.modalities) != 1:
        raise ValueError("sdnet_forward drives single-modality models")
    m = model.modalities[0]
    values = model_forward(model, {(m, "static"): static_img,
                                   (m, "dynamic"): dynamic_img}, label)
    logits = {name: values[node] for name, node in model.logit_nodes.items()}
    return fusion_state(model, values), logits


def psmm_forward(model: Model, images: Mapping[str, tuple[np.ndarray, np.ndarray]],
                 label: int = 0) -> tuple[FusionState, dict[str, np.ndarray]]:
    feed = {}
    for m in model.modalities:
        if m not in images:
            raise ValueError(f"missing modality '{m}'")
        feed[(m, "static")], feed[(m, "dynamic")] = images[m]
    values = model_forward(model, feed, label)
    logits = {name: values[node] for name, node in model.logit_nodes.items()}
    return fusion_state(model, values), logits


# -- losses -------------------------------------------------------------------


def _xent(logits: np.ndarray, label: int) -> float:
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def loss_bundle(logits: Mapping[str, np.ndarray], label: int,
                owners: Sequence[str], branch_keys: Sequence[str],
                with_whole: bool) -> LossBundle:
    components: dict[str, float] = {}
    per_modality: dict[str, float] = {}
    for owner in owners:
        acc = None
        for key in branch_keys:
            val = _xent(np.asarray(logits[f"{owner}/{key}"], dtype=np.float64), label)
            components[f"{owner}/{key}"] = val
            acc = val if acc is None else acc + val
        per_modality[owner] = acc
    whole = None
    if with_whole:
        whole = _xent(np.asarray(logits["whole"], dtype=np.float64), label)
        components["whole"] = whole
    total = whole if whole is not None else None
    for owner in owners:
        total = per_modality[owner] if total is None else total + per_modality[owner]
    return LossBundle(components, per_modality, whole, total)


def _model_branch_keys(model: Model) -> list[str]:
    return _xent_order(list(model.branches))


def _model_owners(model: Model) -> list[str]:
    return ["trunk"] if model.variant == FusionVariant.NHF else list(model.modalities)


def sdnet_loss(logits: Mapping[str, np.ndarray], label: int,
               modality: str = "color",
               branch_keys: Sequence[str] = ("s", "d", "f", "sdf")) -> LossBundle:
    """Per-branch losses and their sum for one modality network."""
    return loss_bundle(logits, label, [modality], branch_keys, with_whole=False)


def psmm_loss(model: Model, logits: Mapping[str, np.ndarray], label: int) -> LossBundle:
    """Whole-network plus per-modality losses, summed exactly."""
    with_whole = "whole" in logits and model.variant in (FusionVariant.PSMM,
                                                         FusionVariant.PSMM_WOBF)
    return loss_bundle(logits, label, _model_owners(model),
                       _model_branch_keys(model), with_whole)


# -- structure inspection ------------------------------------------------------


def fused_branch_is_isolated(model: Model) -> bool:
    """No path from any static-dynamic map into either fusion exchange."""
    fused_nodes = set(model.feature_nodes["fused"].values())
    if not fused_nodes:
        return True
    reach = model.graph.descendants(fused_nodes) | fused_nodes
    fusion_sums = {n for n in model.graph.nodes
                   if n.startswith("fusion/stilde/") or n.endswith("/fb")
                   or n.startswith("shared/")}
    return not (reach & fusion_sums)


def shared_tail_is_isolated(model: Model) -> bool:
    """Shared level-4 parameters must feed only the whole-network head."""
    tail = {n for n in model.graph.nodes if n.startswith("shared/L4/")}
    if not tail:
        return True
    reach = model.graph.descendants(tail)
    per_modality_losses = {model.loss_nodes[m] for m in model.modalities}
    return not (reach & per_modality_losses)


# -- config file --------------------------------------------------------------


def backbone_from_config(cfg: Mapping[str, str]):
    """(spec, variant, modalities, branches) from a flat key-value mapping."""
    short = {"r": "color", "d": "depth", "i": "ir"}
    spec = BackboneSpec(
        input_size=int(cfg.get("input_size", 112)),
        stem_channels=int(cfg.get("stem_channels", 8)),
        level_channels=tuple(int(c) for c in
                             cfg.get("level_channels", "8,16,32,64").split(",")),
        num_classes=int(cfg.get("num_classes", 2)),
    )
    variant = FusionVariant(cfg.get("variant", "psmm"))
    raw = cfg.get("modalities", "color,depth,ir").strip().lower()
    tokens = [t.strip() for t in raw.split(",") if t.strip()] if "," in raw else \
        ([raw] if raw in MODALITY_CHANNELS else list(raw))   # "rdi" shorthand
    mods = tuple(short.get(tok, tok) for tok in tokens)
    branches = cfg.get("branches", "sd")
    return spec, variant, mods, branches
