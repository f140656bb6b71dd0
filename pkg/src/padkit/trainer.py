"""Deterministic training loop: Adam, step schedule, paired augmentation,
clip sampling, scoring and evaluation.

Labels are binary with class 1 = bona fide; a model's liveness score is the
softmax probability of class 1 from its scoring head (the whole-network
head for fusion models, the summed-branch head for single networks).

Everything is driven by one seeded generator, synchronous and single
threaded, so a fixed seed reproduces losses bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .diffcore import backward, load_checkpoint, save_checkpoint
from .dynimg import FrameSequence, RankPoolConfig, dynamic_image_at
from .datasyn import MODALITY_CODES, load_video, prepare_clip, video_group_id
from .netgraph import Model, model_forward, psmm_loss
from .protocols import ManifestEntry

__all__ = [
    "TrainConfig",
    "AugmentConfig",
    "AdamState",
    "NumericError",
    "adam_step",
    "lr_at",
    "Augmentation",
    "draw_augment",
    "augment",
    "Sample",
    "ClipSampler",
    "train",
    "TrainResult",
    "score",
    "load_model_params",
    "evaluate_entries",
]


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 25
    lr: float = 1e-3                 # reference preset uses 0.1; unstable here
    decay_epochs: tuple[int, ...] = (15, 20)
    decay_factor: float = 10.0
    batch_size: int = 64
    window: int = 7                  # rank pooling window length
    seed: int = 0
    deterministic: bool = True       # forces synchronous, ordered sampling
    samples_per_video: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError("decay epochs must precede the final epoch")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.window < 2:
            raise ValueError("rank pooling window must be >= 2")

    @classmethod
    def reference(cls, **overrides) -> "TrainConfig":
        """Full-scale preset: lr 0.1 with the 25-epoch tenfold-drop schedule."""
        return cls(**{"lr": 0.1, **overrides})


@dataclass
class AugmentConfig:
    rotation_range: tuple[float, float] = (-180.0, 180.0)
    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    brightness: float = 0.1          # additive, color static frames only
    contrast: float = 0.1            # multiplicative about the mean

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must be in [0, 1]")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected moment update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: the rate drops by the decay factor at each boundary."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(epoch >= boundary for boundary in cfg.decay_epochs)
    return cfg.lr / (cfg.decay_factor ** drops)


# -- augmentation -------------------------------------------------------------


@dataclass
class Augmentation:
    """One sampled transform, applied identically to aligned images.

    Geometry (rotation, flip, crop-rescale) is shared by the static frame,
    the dynamic image, and every modality of one sample; photometric jitter
    touches only color static frames.
    """

    angle_deg: float
    flip: bool
    scale: float
    offset: tuple[float, float]
    brightness: float
    contrast: float

    def is_identity_geometry(self) -> bool:
        return (self.angle_deg == 0.0 and self.scale == 1.0
                and self.offset == (0.0, 0.0))

    def apply_geometry(self, img: np.ndarray) -> np.ndarray:
        out = img[:, ::-1, :] if self.flip else img
        if self.is_identity_geometry():
            return np.ascontiguousarray(out)
        h, w = out.shape[:2]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        vy, vx = yy - cy, xx - cx
        rad = math.radians(self.angle_deg)
        cos_a, sin_a = math.cos(rad), math.sin(rad)
        # inverse map: rotate by -angle, shrink by the crop scale
        sy = self.scale * (cos_a * vy - sin_a * vx) + cy + self.offset[0]
        sx = self.scale * (sin_a * vy + cos_a * vx) + cx + self.offset[1]
        return _bilinear_sample(out, sy, sx)

    def apply_pair(self, static: np.ndarray, dynamic: np.ndarray,
                   color: bool) -> tuple[np.ndarray, np.ndarray]:
        st = self.apply_geometry(static)
        dy = self.apply_geometry(dynamic)
        if color and (self.brightness != 0.0 or self.contrast != 1.0):
            mean = st.mean()
            st = np.clip((st - mean) * self.contrast + mean + self.brightness,
                         0.0, 1.0)
        return st, dy


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample at fractional coordinates with zero fill outside the frame."""
    h, w = img.shape[:2]
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    ys = np.clip(sy, 0, h - 1)
    xs = np.clip(sx, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, :, None]
    fx = (xs - x0)[:, :, None]
    out = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
           + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)
    return out * inside[:, :, None]


def draw_augment(rng: np.random.Generator, cfg: AugmentConfig,
                 frame_size: int) -> Augmentation:
    angle = float(rng.uniform(*cfg.rotation_range))
    flip = bool(rng.uniform() < cfg.flip_prob)
    scale = float(rng.uniform(*cfg.crop_scale))
    slack = (1.0 - scale) * (frame_size - 1) / 2.0
    offset = (float(rng.uniform(-slack, slack)), float(rng.uniform(-slack, slack)))
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
    contrast = float(1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
    return Augmentation(angle, flip, scale, offset, brightness, contrast)


def augment(static: np.ndarray, dynamic: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig, color: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw one transform and apply it to an aligned (static, dynamic) pair."""
    aug = draw_augment(rng, cfg, static.shape[0])
    return aug.apply_pair(static, dynamic, color)


# -- clip sampling ------------------------------------------------------------


@dataclass
class Sample:
    images: dict[tuple[str, str], np.ndarray]
    label: int
    group_id: str
    pai: str


class ClipSampler:
    """Deterministic stream of (static frame, dynamic image, label) samples.

    Groups manifest entries into multi-modal recordings, preprocesses each
    clip once, and caches dynamic images per (clip, frame index). Only
    groups covering every requested modality participate.
    """

    def __init__(self, entries: Sequence[ManifestEntry], root,
                 modalities: Sequence[str], input_size: int,
                 cfg: TrainConfig, augment_cfg: AugmentConfig | None = None,
                 rank_cfg: RankPoolConfig | None = None):
        self.root = Path(root)
        self.modalities = tuple(modalities)
        self.input_size = input_size
        self.cfg = cfg
        self.augment_cfg = augment_cfg
        self.rank_cfg = rank_cfg or RankPoolConfig(window=cfg.window,
                                                   max_iters=400, tol=1e-10)
        groups: dict[str, dict[str, ManifestEntry]] = {}
        for e in entries:
            groups.setdefault(video_group_id(e), {})[MODALITY_CODES[e.modality]] = e
        wanted = set(self.modalities)
        self.groups = [(gid, by_mod) for gid, by_mod in sorted(groups.items())
                       if wanted <= set(by_mod)]
        if not self.groups:
            raise ValueError("no recordings cover the requested modalities")
        self._clips: dict[str, np.ndarray] = {}
        self._dyn: dict[tuple[str, int], np.ndarray] = {}

    def _prepared(self, entry: ManifestEntry) -> np.ndarray:
        if entry.path not in self._clips:
            seq = load_video(self.root / entry.path)
            self._clips[entry.path] = prepare_clip(seq, self.input_size)
        return self._clips[entry.path]

    def _dynamic(self, entry: ManifestEntry, index: int, modality: str) -> np.ndarray:
        key = (entry.path, index)
        if key not in self._dyn:
            clip = self._prepared(entry)
            seq = FrameSequence(clip, modality)
            self._dyn[key] = dynamic_image_at(seq, index, self.rank_cfg).data
        return self._dyn[key]

    def _sample(self, gid: str, by_mod: dict[str, ManifestEntry], index: int,
                rng: np.random.Generator | None) -> Sample:
        entry0 = by_mod[self.modalities[0]]
        aug = None
        if rng is not None and self.augment_cfg is not None:
            aug = draw_augment(rng, self.augment_cfg, self.input_size)
        images: dict[tuple[str, str], np.ndarray] = {}
        for m in self.modalities:
            entry = by_mod[m]
            clip = self._prepared(entry)
            static = clip[index]
            dynamic = self._dynamic(entry, index, m)
            if aug is not None:
                static, dynamic = aug.apply_pair(static, dynamic, color=(m == "color"))
            images[(m, "static")] = static
            images[(m, "dynamic")] = dynamic
        return Sample(images, int(entry0.is_bonafide), gid, entry0.pai)

    def batches(self, epoch: int) -> Iterable[list[Sample]]:
        """Shuffled per-epoch batches; each recording contributes
        ``samples_per_video`` random frame indices."""
        rng = np.random.default_rng(
            np.random.SeedSequence((self.cfg.seed, 1000 + epoch)))
        picks: list[tuple[int, int]] = []
        for gi, (_, by_mod) in enumerate(self.groups):
            t_max = len(self._prepared(by_mod[self.modalities[0]]))
            for _ in range(self.cfg.samples_per_video):
                picks.append((gi, int(rng.integers(0, t_max))))
        order = rng.permutation(len(picks))
        batch: list[Sample] = []
        for k in order:
            gi, t = picks[k]
            gid, by_mod = self.groups[gi]
            batch.append(self._sample(gid, by_mod, t, rng))
            if len(batch) == self.cfg.batch_size:
                yield batch
                batch = []
        if batch:
            yield batch

    def eval_samples(self) -> Iterable[Sample]:
        """One deterministic sample per recording: the final frame with its
        full trailing window, no augmentation."""
        for gid, by_mod in self.groups:
            t = len(self._prepared(by_mod[self.modalities[0]])) - 1
            yield self._sample(gid, by_mod, t, None)


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def _zero_grads(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(p) for k, p in params.items()}


def train(model: Model, sampler, cfg: TrainConfig, out_dir=None,
          valid_sampler=None, log_file=None) -> TrainResult:
    """Optimize the model's total loss over the sampler's batches.

    Writes one checkpoint per epoch under ``out_dir`` (when given) and
    appends line-delimited JSON records per step. A non-finite loss aborts
    with the previous epoch checkpoints left on disk.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.graph.params
    state = AdamState.for_params(params)
    log: list[dict] = []
    checkpoints: list[Path] = []
    log_fh = open(log_file, "a") if log_file else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for batch in sampler.batches(epoch):
                grads = _zero_grads(params)
                batch_loss = 0.0
                comp_acc: dict[str, float] = {}
                for sample in batch:
                    values = model_forward(model, sample.images, sample.label)
                    loss = float(values[model.total_loss_node])
                    if not math.isfinite(loss):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch} step {step}")
                    batch_loss += loss
                    logits = {n: values[node] for n, node in model.logit_nodes.items()}
                    bundle = psmm_loss(model, logits, sample.label)
                    for k, v in bundle.components.items():
                        comp_acc[k] = comp_acc.get(k, 0.0) + v
                    sample_grads = backward(model.graph, values, model.total_loss_node)
                    for k in grads:
                        grads[k] += sample_grads[k]
                n = len(batch)
                for k in grads:
                    grads[k] /= n
                adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                record = {"epoch": epoch, "step": step, "lr": lr,
                          "loss": batch_loss / n,
                          "components": {k: v / n for k, v in comp_acc.items()}}
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                step += 1
            if valid_sampler is not None:
                rows = [(score(model, s), s.label) for s in valid_sampler.eval_samples()]
                correct = sum((p >= 0.5) == bool(y) for p, y in rows)
                record = {"epoch": epoch, "valid_accuracy": correct / len(rows)}
                log.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            if out is not None:
                path = out / f"epoch{epoch:03d}.ckpt"
                save_checkpoint(path, params)
                checkpoints.append(path)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult({k: p.copy() for k, p in params.items()}, log, checkpoints)


# -- scoring ------------------------------------------------------------------


def score(model: Model, sample: Sample) -> float:
    """Liveness probability from the model's scoring head."""
    values = model_forward(model, sample.images, sample.label)
    logits = values[model.score_logits]
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return float(p[1])


def load_model_params(model: Model, checkpoint_path) -> None:
    model.set_params(load_checkpoint(checkpoint_path))


def evaluate_entries(model: Model, entries: Sequence[ManifestEntry], root,
                     input_size: int, cfg: TrainConfig,
                     subprotocol: str = "") -> list[tuple[str, float, bool, str, str]]:
    """Score one deterministic sample per recording of ``entries``.

    Returns (video_id, score, is_bonafide, pai, subprotocol) rows ready for
    the score-file writer.
    """
    sampler = ClipSampler(entries, root, model.modalities, input_size, cfg)
    rows = []
    for gid, by_mod in sampler.groups:
        t = len(sampler._prepared(by_mod[sampler.modalities[0]])) - 1
        sample = sampler._sample(gid, by_mod, t, None)
        entry = by_mod[sampler.modalities[0]]
        rows.append((gid, score(model, sample), entry.is_bonafide,
                     entry.pai, subprotocol))
    return rows
