"""Synthetic multi-modal clip corpus with learnable liveness signatures.

Stands in for an unavailable large-scale recording campaign. Every subject
gets one bona fide clip and three attack clips (indoor print, outdoor
print, replay), each rendered in color, depth and infrared:

    real    a textured blob drifting on a smooth trajectory in all three
            modalities, with a non-planar depth dome
    print   a single rendered frame repeated verbatim, flat tilted depth
            plane (its pooled dynamic image is therefore exactly zero)
    replay  fixed pose with a scanline overlay and periodic brightness
            flicker in color/infrared; depth stays a constant plane

By construction the classes are linearly separable in (temporal variance,
depth plane residual), which is asserted by a direct feature test rather
than assumed. Everything derives from per-subject seed sequences, so
output is byte-identical for a given seed regardless of generation order.

Raw clip container (little endian)::

    magic    8 bytes  b"PADVID\\x00\\x00"
    version  uint32   1
    frames   uint32   T
    height   uint32   H
    width    uint32   W
    channels uint32   C
    modality 1 byte   'R' | 'D' | 'I'
    dtype    1 byte   0 = uint8, 1 = float64
    payload  T*H*W*C values, row major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynimg import FrameSequence
from .protocols import ManifestEntry, write_manifest

__all__ = [
    "SynthConfig",
    "ContainerError",
    "build_manifest",
    "canonical_manifest",
    "synth_dataset",
    "write_video",
    "load_video",
    "preprocess",
    "prepare_clip",
    "temporal_variance",
    "depth_plane_residual",
]

VIDEO_MAGIC = b"PADVID\x00\x00"
VIDEO_VERSION = 1
MODALITY_CODES = {"R": "color", "D": "depth", "I": "ir"}
CODE_BY_MODALITY = {v: k for k, v in MODALITY_CODES.items()}
ATTACKS = ("real", "print_indoor", "print_outdoor", "replay")
ETH_TINT = {"A": (0.03, 0.0, -0.02), "C": (-0.01, 0.025, 0.0), "E": (-0.02, 0.0, 0.03)}


class ContainerError(ValueError):
    pass


@dataclass
class SynthConfig:
    subjects_per_ethnicity: int = 10
    clip_len: int = 16
    frame_size: int = 16
    seed: int = 0
    window: int = 7                  # shortest pooling window the corpus serves
    motion_amplitude: float = 2.2    # pixels of head drift for bona fide clips
    flicker_period: int = 4
    flicker_magnitude: float = 0.12
    scanline_strength: float = 0.10
    ir_noise: float = 0.004
    payload: str = "u8"              # "u8" | "f64"
    mask_subjects: int = 0           # 3D subset sizing (manifest-level)
    mask_samples: int = 18
    silica_subjects: int = 0
    silica_samples: int = 8

    def __post_init__(self):
        if self.subjects_per_ethnicity < 1:
            raise ValueError("need at least one subject per ethnicity")
        if self.clip_len < self.window:
            raise ValueError(f"clip_len {self.clip_len} < pooling window {self.window}")
        if self.payload not in ("u8", "f64"):
            raise ValueError(f"unknown payload '{self.payload}'")


# -- raw clip container -------------------------------------------------------


def write_video(path, frames: np.ndarray, modality: str, payload: str = "u8") -> None:
    """Store float frames in [0, 1] (or raw uint8) in the documented layout."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be (T, H, W, C), got {frames.shape}")
    code = CODE_BY_MODALITY[modality].encode()
    t, h, w, c = frames.shape
    if payload == "u8":
        if frames.dtype != np.uint8:
            frames = np.floor(np.clip(frames, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        body, dtype_tag = frames.tobytes(), 0
    else:
        body, dtype_tag = frames.astype("<f8").tobytes(), 1
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(VIDEO_MAGIC)
        f.write(struct.pack("<IIIII", VIDEO_VERSION, t, h, w, c))
        f.write(code)
        f.write(bytes([dtype_tag]))
        f.write(body)


def load_video(path) -> FrameSequence:
    """Decode a clip; truncation or a bad header raises, never partial data."""
    with open(path, "rb") as f:
        raw = f.read()
    head = len(VIDEO_MAGIC) + 20 + 2
    if len(raw) < head or raw[:len(VIDEO_MAGIC)] != VIDEO_MAGIC:
        raise ContainerError(f"'{path}' is not a clip container")
    version, t, h, w, c = struct.unpack_from("<IIIII", raw, len(VIDEO_MAGIC))
    if version != VIDEO_VERSION:
        raise ContainerError(f"unsupported clip version {version}")
    code = chr(raw[head - 2])
    dtype_tag = raw[head - 1]
    if code not in MODALITY_CODES:
        raise ContainerError(f"unknown modality tag '{code}' in '{path}'")
    count = t * h * w * c
    if dtype_tag == 0:
        need = head + count
        if len(raw) != need:
            raise ContainerError(f"truncated clip '{path}'")
        frames = np.frombuffer(raw, dtype=np.uint8, offset=head).astype(np.float64)
        peak = 255.0
    elif dtype_tag == 1:
        need = head + 8 * count
        if len(raw) != need:
            raise ContainerError(f"truncated clip '{path}'")
        frames = np.frombuffer(raw, dtype="<f8", offset=head).copy()
        peak = 1.0
    else:
        raise ContainerError(f"unknown dtype tag {dtype_tag} in '{path}'")
    return FrameSequence(frames.reshape(t, h, w, c), MODALITY_CODES[code], 0, peak)


# -- preprocessing ------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1, 1) if img.ndim == 3 else (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1, 1) if img.ndim == 3 else (xs - x0).reshape(1, -1)
    rows0 = img[y0]
    rows1 = img[y1]
    top = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(frame: np.ndarray, size: int = 112, peak: float = 255.0) -> np.ndarray:
    """Scale to [0, 1] by the source full-scale value, then resize bilinear."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.size == 0:
        raise ValueError("empty frame")
    return _resize_bilinear(frame / peak, size, size)


def prepare_clip(seq: FrameSequence, size: int) -> np.ndarray:
    """Preprocess every frame of a clip; result is (T, size, size, C) in [0, 1]."""
    return np.stack([preprocess(f, size, seq.peak) for f in seq.frames])


# -- corpus synthesis ---------------------------------------------------------


def _subject_rng(cfg: SynthConfig, eth_idx: int, subject: int, stream: int):
    return np.random.default_rng(
        np.random.SeedSequence((cfg.seed, eth_idx, subject, stream)))


def _smooth_field(rng, size: int, channels: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(4, 4, channels))
    return _resize_bilinear(coarse, size, size)


def _render_face(texture: np.ndarray, cx: float, cy: float, radius: float,
                 size: int) -> tuple[np.ndarray, np.ndarray]:
    """Color frame and dome mask for a face centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
    dome = np.maximum(0.0, 1.0 - r2)[:, :, None]
    color = 0.12 + texture * dome
    return color, dome


def _luminance(color: np.ndarray) -> np.ndarray:
    return (0.299 * color[:, :, :1] + 0.587 * color[:, :, 1:2]
            + 0.114 * color[:, :, 2:3])


def _clip_for(cfg: SynthConfig, ethnicity: str, eth_idx: int, subject: int,
              attack: str) -> dict[str, np.ndarray]:
    """All three modality clips of one recording, values in [0, 1]."""
    size, t_len = cfg.frame_size, cfg.clip_len
    ident = _subject_rng(cfg, eth_idx, subject, 0)
    texture = _smooth_field(ident, size, 3, 0.25, 0.85)
    texture = np.clip(texture + np.asarray(ETH_TINT[ethnicity]), 0.05, 0.95)
    radius = size * ident.uniform(0.34, 0.44)
    base_c = size / 2.0 + ident.uniform(-1.0, 1.0, size=2)
    plane = None  # attacks share the subject's presentation plane
    gx, gy = ident.uniform(-0.06, 0.06, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    plane = 0.45 + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    plane = plane[:, :, None]

    clip_rng = _subject_rng(cfg, eth_idx, subject, 1 + ATTACKS.index(attack))

    if attack == "real":
        freq = clip_rng.uniform(0.06, 0.14, size=2)
        phase = clip_rng.uniform(0.0, 2 * np.pi, size=2)
        color_frames, depth_frames, ir_frames = [], [], []
        for t in range(t_len):
            dx = cfg.motion_amplitude * np.sin(2 * np.pi * freq[0] * t + phase[0])
            dy = cfg.motion_amplitude * np.cos(2 * np.pi * freq[1] * t + phase[1])
            color, dome = _render_face(texture, base_c[1] + dx, base_c[0] + dy,
                                       radius, size)
            depth = 0.25 + 0.6 * dome
            ir = 0.85 * _luminance(color)
            ir += cfg.ir_noise * clip_rng.standard_normal(ir.shape)
            color_frames.append(color)
            depth_frames.append(depth)
            ir_frames.append(ir)
        clips = {"color": np.stack(color_frames),
                 "depth": np.stack(depth_frames),
                 "ir": np.stack(ir_frames)}
    else:
        pose = base_c + clip_rng.uniform(-0.8, 0.8, size=2)
        color, _ = _render_face(texture, pose[1], pose[0], radius, size)
        if attack == "print_indoor":
            color = color * 0.92
        elif attack == "print_outdoor":
            color = color * 1.08
        else:  # replay: a visible static screen artifact
            stripes = (yy % 3 == 0).astype(np.float64)[:, :, None]
            color = color + cfg.scanline_strength * stripes
        ir = 0.85 * _luminance(color)
        if attack == "replay":
            phase = clip_rng.uniform(0.0, 2 * np.pi)
            gains = 1.0 + cfg.flicker_magnitude * np.sin(
                2 * np.pi * np.arange(t_len) / cfg.flicker_period + phase)
            color_frames = np.stack([color * g for g in gains])
            ir_frames = np.stack([ir * g for g in gains])
        else:   # prints repeat one frame verbatim
            color_frames = np.repeat(color[None], t_len, axis=0)
            ir_frames = np.repeat(ir[None], t_len, axis=0)
        depth_frames = np.repeat(plane[None], t_len, axis=0)
        clips = {"color": color_frames, "depth": depth_frames, "ir": ir_frames}

    return {m: np.clip(c, 0.0, 1.0) for m, c in clips.items()}


def _2d_video_path(ethnicity: str, subject: int, attack: str, mod_code: str) -> str:
    return f"{ethnicity}/{ethnicity}{subject:04d}_{attack}_{mod_code}.vid"


def video_group_id(entry: ManifestEntry) -> str:
    """Identity of a multi-modal recording (modality stripped)."""
    if entry.is_3d:
        return Path(entry.path).stem.rsplit("_", 1)[0]
    return f"{entry.ethnicity}{entry.subject_id:04d}_{entry.attack_type}"


def build_manifest(cfg: SynthConfig) -> list[ManifestEntry]:
    """Manifest entries for the corpus shape, without touching disk."""
    entries = []
    for ethnicity in ("A", "C", "E"):
        for subject in range(1, cfg.subjects_per_ethnicity + 1):
            for attack in ATTACKS:
                for code in ("R", "D", "I"):
                    entries.append(ManifestEntry(
                        subject, ethnicity, code, attack,
                        _2d_video_path(ethnicity, subject, attack, code)))
    for kind, n_subj, n_samples in (("mask3d", cfg.mask_subjects, cfg.mask_samples),
                                    ("silicagel", cfg.silica_subjects, cfg.silica_samples)):
        for subject in range(1, n_subj + 1):
            for sample in range(n_samples):
                for code in ("R", "D", "I"):
                    entries.append(ManifestEntry(
                        subject, "", code, kind,
                        f"3d/{kind}{subject:03d}_s{sample:02d}_{code}.vid"))
    return entries


def canonical_manifest() -> list[ManifestEntry]:
    """Full-scale corpus shape: 18000 2D clips plus the 3D subset."""
    return build_manifest(SynthConfig(subjects_per_ethnicity=500,
                                      mask_subjects=99, silica_subjects=8))


def synth_dataset(cfg: SynthConfig, out_dir) -> tuple[Path, list[ManifestEntry]]:
    """Render the 2D corpus to ``out_dir`` and write its manifest CSV.

    3D subset entries, when configured, are rendered as static non-planar
    presentations (a mask has shape but no motion).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = build_manifest(cfg)
    for ethnicity_idx, ethnicity in enumerate(("A", "C", "E")):
        for subject in range(1, cfg.subjects_per_ethnicity + 1):
            for attack in ATTACKS:
                clips = _clip_for(cfg, ethnicity, ethnicity_idx, subject, attack)
                for code, modality in MODALITY_CODES.items():
                    path = out / _2d_video_path(ethnicity, subject, attack, code)
                    write_video(path, clips[modality], modality, cfg.payload)
    for kind_idx, (kind, n_subj, n_samples) in enumerate(
            (("mask3d", cfg.mask_subjects, cfg.mask_samples),
             ("silicagel", cfg.silica_subjects, cfg.silica_samples))):
        for subject in range(1, n_subj + 1):
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 17 + kind_idx, subject)))
            size = cfg.frame_size
            texture = _smooth_field(rng, size, 3, 0.25, 0.85)
            radius = size * rng.uniform(0.34, 0.44)
            for sample in range(n_samples):
                pose = size / 2.0 + rng.uniform(-1.5, 1.5, size=2)
                color, dome = _render_face(texture, pose[1], pose[0], radius, size)
                depth = 0.25 + 0.55 * dome
                ir = 0.85 * _luminance(color)
                frames = {"color": color, "depth": depth, "ir": ir}
                for code, modality in MODALITY_CODES.items():
                    clip = np.repeat(np.clip(frames[modality], 0, 1)[None],
                                     cfg.clip_len, axis=0)
                    path = out / f"3d/{kind}{subject:03d}_s{sample:02d}_{code}.vid"
                    write_video(path, clip, modality, cfg.payload)
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, entries)
    return manifest_path, entries


# -- separability features ----------------------------------------------------


def temporal_variance(seq: FrameSequence) -> float:
    """Mean per-pixel variance across time, on the [0, 1] scale."""
    frames = seq.frames / seq.peak
    return float(frames.var(axis=0).mean())


def depth_plane_residual(depth_frame: np.ndarray) -> float:
    """RMS residual of the best-fit plane: ~0 for flat presentations."""
    z = np.asarray(depth_frame, dtype=np.float64)
    if z.ndim == 3:
        z = z[:, :, 0]
    h, w = z.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    basis = np.stack([np.ones(h * w), yy.ravel(), xx.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(basis, z.ravel(), rcond=None)
    resid = z.ravel() - basis @ coef
    return float(np.sqrt(np.mean(resid ** 2)))
