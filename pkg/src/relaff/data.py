"""Synthetic long-video corpus, clip/context sampling, augmentation and label scaling.

On-disk corpus layout (directory):

``metadata.json``
    ``{"format": "RAFV1", "scale": str, "C": int, "videos": [...]}`` where each
    video entry holds ``video_id, subject_id, labels (native range), total
    (native or null), fps, L, H, W, file``.

``<video_id>.raf``
    5-byte magic ``b"RAFV1"``, then ``L, H, W`` as little-endian uint32, then
    ``L*H*W*3`` little-endian float32 pixels in row-major ``(L, H, W, 3)`` order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoder import Clip, ConfigError

log = logging.getLogger(__name__)

MAGIC = b"RAFV1"
RENDERER_SEED = 20230


class RangeError(ValueError):
    pass


# ----------------------------------------------------------------- labels


@dataclass(frozen=True)
class LabelScale:
    names: tuple[str, ...]
    native: tuple[tuple[float, float], ...]
    train: tuple[tuple[float, float], ...]
    total_native: tuple[float, float] | None = None
    total_train: tuple[float, float] | None = None
    # range used only when building the label cosine-similarity matrix
    similarity: tuple[float, float] | None = None


SCALES: dict[str, LabelScale] = {
    "affect": LabelScale(
        names=("arousal", "valence"),
        native=((0.0, 1.0), (-1.0, 1.0)),
        train=((-1.0, 1.0), (-1.0, 1.0)),
        similarity=(0.05, 1.0),
    ),
    # three selected negative symptoms plus the pooled remainder (total only)
    "panss": LabelScale(
        names=("N1", "N2", "N3", "rest"),
        native=((1.0, 7.0),) * 4,
        train=((1.0, 7.0),) * 4,
        total_native=(7.0, 49.0),
        total_train=(1.0, 7.0),
    ),
    "cains": LabelScale(
        names=("EXP1", "EXP2", "EXP3", "EXP4"),
        native=((0.0, 4.0),) * 4,
        train=((0.0, 4.0),) * 4,
        total_native=(0.0, 16.0),
        total_train=(0.0, 4.0),
        similarity=(0.05, 1.0),
    ),
}


def _affine(x, src, dst):
    x = np.asarray(x, dtype=float)
    lo, hi = np.asarray(src, dtype=float).T
    dlo, dhi = np.asarray(dst, dtype=float).T
    return dlo + (x - lo) * (dhi - dlo) / (hi - lo)


def _check_range(x, ranges, what):
    x = np.asarray(x, dtype=float)
    lo, hi = np.asarray(ranges, dtype=float).T
    tol = 1e-9 * np.maximum(1.0, hi - lo)
    bad = (x < lo - tol) | (x > hi + tol)
    if np.any(bad):
        raise RangeError(f"{what} value(s) {x[bad].tolist()} outside declared range(s) {np.asarray(ranges).tolist()}")


def scale_labels(y, scale_id: str, direction: str) -> np.ndarray:
    """Affine map between native and training ranges, per label."""
    sc = SCALES[scale_id]
    y = np.asarray(y, dtype=float)
    if direction == "to_train_range":
        src, dst = sc.native, sc.train
    elif direction == "to_native_range":
        src, dst = sc.train, sc.native
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if y.shape[-1] != len(src):
        raise ValueError(f"scale {scale_id!r} has {len(src)} labels, got {y.shape[-1]}")
    _check_range(y, src, f"{scale_id} label")
    return _affine(y, src, dst)


def scale_total(t, scale_id: str, direction: str):
    sc = SCALES[scale_id]
    if sc.total_native is None:
        raise ValueError(f"scale {scale_id!r} has no total score")
    src, dst = (sc.total_native, sc.total_train) if direction == "to_train_range" else (sc.total_train, sc.total_native)
    t = np.asarray(t, dtype=float)
    _check_range(t, [src], f"{scale_id} total")
    lo, hi = src
    dlo, dhi = dst
    return dlo + (t - lo) * (dhi - dlo) / (hi - lo)


def similarity_labels(y_train: np.ndarray, scale_id: str) -> np.ndarray:
    """Training-range labels shifted to a strictly positive range for cosine use."""
    sc = SCALES[scale_id]
    if sc.similarity is None:
        return np.asarray(y_train, dtype=float)
    C = y_train.shape[-1]
    return _affine(y_train, sc.train[:C], [sc.similarity] * C)


def _unit_label(y_train: np.ndarray, scale_id: str) -> np.ndarray:
    C = y_train.shape[-1]
    return _affine(y_train, SCALES[scale_id].train[:C], [(-1.0, 1.0)] * C)


# ---------------------------------------------------------------- corpus


@dataclass
class SynthConfig:
    subjects: int = 8
    videos_per_subject: int = 4
    L: int = 96
    C: int = 2
    scale: str = "affect"
    context_dependence: float = 0.3
    noise: float = 0.1
    H: int = 16
    W: int = 16
    fps: float = 3.0
    # frames per drift cycle; 0 means (2K+1)*T, filled in by the experiment config
    drift_period: int = 0
    drift_amplitude: float = 3.0
    signal_amplitude: float = 0.05
    subject_amplitude: float = 0.15
    video_amplitude: float = 0.03
    # subject/video looks are combinations of this many fixed identity images
    identity_rank: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("subjects", "videos_per_subject", "L", "C", "H", "W", "identity_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name}", "must be >= 1")
        if self.scale not in SCALES:
            raise ConfigError("synth.scale", f"unknown scale {self.scale!r}; choose from {sorted(SCALES)}")
        if self.C != len(SCALES[self.scale].names):
            raise ConfigError("synth.C", f"scale {self.scale!r} has {len(SCALES[self.scale].names)} labels, got {self.C}")
        if not 0.0 <= self.context_dependence <= 1.0:
            raise ConfigError("synth.context_dependence", "must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("synth.noise", "must be >= 0")
        if self.drift_period < 0:
            raise ConfigError("synth.drift_period", "must be >= 0")
        if self.fps <= 0:
            raise ConfigError("synth.fps", "must be > 0")


@dataclass
class Video:
    frames: np.ndarray  # (L, H, W, 3) float32
    subject_id: str
    labels: np.ndarray  # native range, length C
    fps: float
    video_id: str
    scale: str = "affect"
    total: float | None = None

    @property
    def L(self) -> int:
        return self.frames.shape[0]

    def train_labels(self) -> np.ndarray:
        return scale_labels(self.labels, self.scale, "to_train_range")

    def train_total(self) -> float | None:
        if self.total is None:
            return None
        return float(scale_total(self.total, self.scale, "to_train_range"))


def _smooth_image(rng: np.random.Generator, H: int, W: int, grid: int = 4) -> np.ndarray:
    coarse = rng.normal(size=(grid, grid, 3))
    img = np.kron(coarse, np.ones((-(-H // grid), -(-W // grid), 1)))[:H, :W]
    return img / np.abs(img).max()


def _renderer_basis(C: int, rank: int, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(RENDERER_SEED)
    raw = np.stack([_smooth_image(rng, H, W) for _ in range(C + rank)]).reshape(C + rank, -1)
    q, _ = np.linalg.qr(raw.T)
    basis = q.T[: C + rank]
    basis /= np.abs(basis).max(axis=1, keepdims=True)
    basis = basis.reshape(C + rank, H, W, 3)
    return basis[:C], basis[C:]


def label_patterns(C: int, H: int, W: int) -> np.ndarray:
    """Fixed mutually orthogonal label images, ``(C, H, W, 3)``, max |pixel| = 1."""
    return _renderer_basis(C, 0, H, W)[0]


def _look(rng: np.random.Generator, identity: np.ndarray) -> np.ndarray:
    img = np.tensordot(rng.normal(size=identity.shape[0]), identity, axes=(0, 0))
    return img / np.abs(img).max()


def _draw_labels(rng: np.random.Generator, scale_id: str) -> tuple[np.ndarray, float | None]:
    sc = SCALES[scale_id]
    if scale_id == "panss":
        symptoms = rng.uniform(1.0, 7.0, size=7)
        labels = np.concatenate([symptoms[:3], [symptoms[3:].mean()]])
        return labels, float(symptoms.sum())
    lo, hi = np.asarray(sc.native).T
    labels = rng.uniform(lo, hi)
    total = float(labels.sum()) if sc.total_native is not None else None
    return labels, total


def drift_signal(L: int, period: int, phase: np.ndarray) -> np.ndarray:
    """``(L, C)`` cosine drift; any ``period`` consecutive frames sum to zero."""
    f = np.arange(L, dtype=float)[:, None]
    return np.cos(2.0 * np.pi * f / period + phase[None, :])


def generate_corpus(cfg: SynthConfig, seed: int = 0) -> list[Video]:
    """Deterministic synthetic corpus.

    Frame ``f`` of a video renders ``0.5 + subject look + video look +
    signal * sum_c a[f, c] * pattern_c + noise``, where ``a[f, c]`` is the
    label mapped to ``[-1, 1]`` plus ``context_dependence * drift_amplitude``
    times a cosine drift with period ``drift_period`` frames and a random
    phase.  The drift cancels over any full context window, so a larger
    ``context_dependence`` moves label evidence from the clip into its
    neighbours.
    """
    if cfg.drift_period < 1:
        raise ConfigError("synth.drift_period", "must be resolved to >= 1 before generation")
    rng = np.random.default_rng(seed)
    H, W, C = cfg.H, cfg.W, cfg.C
    patterns, identity = _renderer_basis(C, cfg.identity_rank, H, W)
    videos = []
    for s in range(cfg.subjects):
        subject_look = _look(rng, identity)
        for v in range(cfg.videos_per_subject):
            labels, total = _draw_labels(rng, cfg.scale)
            unit = _unit_label(scale_labels(labels, cfg.scale, "to_train_range"), cfg.scale)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=C)
            video_look = _look(rng, identity)
            amp = unit[None, :] + cfg.context_dependence * cfg.drift_amplitude * drift_signal(cfg.L, cfg.drift_period, phase)
            frames = (
                0.5
                + cfg.subject_amplitude * subject_look
                + cfg.video_amplitude * video_look
                + cfg.signal_amplitude * np.tensordot(amp, patterns, axes=(1, 0))
            )
            if cfg.noise:
                frames = frames + cfg.noise * rng.normal(size=frames.shape)
            frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
            videos.append(Video(
                frames=frames,
                subject_id=f"S{s:03d}",
                labels=labels,
                fps=cfg.fps,
                video_id=f"S{s:03d}_V{v:02d}",
                scale=cfg.scale,
                total=total,
            ))
    return videos


def save_corpus(videos: list[Video], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in videos:
        fname = f"{v.video_id}.raf"
        L, H, W, _ = v.frames.shape
        with open(out_dir / fname, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", L, H, W))
            fh.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())
        entries.append({
            "video_id": v.video_id,
            "subject_id": v.subject_id,
            "labels": [float(x) for x in v.labels],
            "total": v.total,
            "fps": v.fps,
            "L": L,
            "H": H,
            "W": W,
            "file": fname,
        })
    scale = videos[0].scale if videos else "affect"
    meta = {"format": "RAFV1", "scale": scale, "C": int(len(videos[0].labels)) if videos else 0,
            "videos": entries}
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_frames(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:5]!r}")
    L, H, W = struct.unpack("<III", raw[5:17])
    data = np.frombuffer(raw, dtype="<f4", offset=17)
    if data.size != L * H * W * 3:
        raise ValueError(f"{path}: payload has {data.size} floats, header says {L * H * W * 3}")
    return data.reshape(L, H, W, 3).astype(np.float32)


def load_corpus(corpus_dir: Path) -> list[Video]:
    corpus_dir = Path(corpus_dir)
    with open(corpus_dir / "metadata.json") as fh:
        meta = json.load(fh)
    videos = []
    for e in meta["videos"]:
        frames = read_frames(corpus_dir / e["file"])
        if frames.shape[:3] != (e["L"], e["H"], e["W"]):
            raise ValueError(f"{e['file']}: frame shape {frames.shape} disagrees with metadata")
        videos.append(Video(frames=frames, subject_id=e["subject_id"], labels=np.array(e["labels"], dtype=float),
                            fps=float(e["fps"]), video_id=e["video_id"], scale=meta["scale"], total=e["total"]))
    return videos


# -------------------------------------------------------------- sampling


@dataclass
class SamplingConfig:
    T: int = 16
    K: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("sampling.T", "must be >= 1")
        if self.K < 0:
            raise ConfigError("sampling.K", "must be >= 0")


def clip_indices(L: int, T: int, start: int) -> np.ndarray:
    """Frame indices of a T-frame clip; wraps around (loops) past the end."""
    return (start + np.arange(T)) % L


def clip_at(video: Video, T: int, start: int) -> Clip:
    idx = clip_indices(video.L, T, start)
    return Clip(frames=video.frames[idx], video_id=video.video_id, start_frame=int(start % video.L),
                label=video.labels, total=video.total, indices=idx)


def sample_clip(video: Video, cfg: SamplingConfig, rng: np.random.Generator) -> Clip:
    return clip_at(video, cfg.T, int(rng.integers(0, video.L)))


def window_starts(L: int, T: int, start: int, K: int) -> list[int]:
    return [(start + j * T) % L for j in range(-K, K + 1)]


def context_window(video: Video, clip: Clip, cfg: SamplingConfig) -> list[Clip]:
    """The ``2K+1`` clips at stride T around ``clip`` (itself in the centre)."""
    out = [clip_at(video, cfg.T, s) for s in window_starts(video.L, cfg.T, clip.start_frame, cfg.K)]
    out[cfg.K] = clip
    return out


# ---------------------------------------------------------- augmentation


@dataclass
class AugmentParams:
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0  # fraction of a full hue turn
    flip: bool = False
    angle: float = 0.0  # degrees

    @classmethod
    def draw(cls, rng: np.random.Generator, factor: float = 0.2, rotation_range: float = 30.0):
        return cls(
            contrast=float(rng.uniform(1 - factor, 1 + factor)),
            saturation=float(rng.uniform(1 - factor, 1 + factor)),
            hue=float(rng.uniform(-factor, factor)),
            flip=bool(rng.random() < 0.5),
            angle=float(rng.uniform(-rotation_range / 2, rotation_range / 2)),
        )

    def is_identity(self) -> bool:
        return self == AugmentParams()


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def apply_augment(frames: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Apply one transform set to every frame of ``(..., H, W, 3)``."""
    if p.is_identity():
        return frames
    x = np.asarray(frames, dtype=np.float64)
    gray = x @ np.array([0.299, 0.587, 0.114])
    if p.contrast != 1.0:
        m = gray.mean(axis=(-2, -1), keepdims=True)[..., None]
        x = m + p.contrast * (x - m)
    if p.saturation != 1.0:
        g = (x @ np.array([0.299, 0.587, 0.114]))[..., None]
        x = g + p.saturation * (x - g)
    if p.hue != 0.0:
        yiq = x @ _RGB2YIQ.T
        a = 2.0 * np.pi * p.hue
        c, s = np.cos(a), np.sin(a)
        i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
        yiq[..., 1] = c * i - s * q
        yiq[..., 2] = s * i + c * q
        x = yiq @ _YIQ2RGB.T
    if p.flip:
        x = x[..., ::-1, :]
    if p.angle != 0.0:
        lead = x.shape[:-3]
        flat = x.reshape(-1, *x.shape[-3:])
        flat = ndimage.rotate(flat, p.angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        x = flat.reshape(*lead, *flat.shape[1:])
    return np.clip(x, 0.0, 1.0).astype(frames.dtype)


def augment(clip: Clip, seed, params: AugmentParams | None = None) -> Clip:
    """Return a copy of ``clip`` with one random transform set applied to all frames."""
    if params is None:
        params = AugmentParams.draw(np.random.default_rng(seed))
    return Clip(frames=apply_augment(clip.frames, params), video_id=clip.video_id,
                start_frame=clip.start_frame, label=clip.label, total=clip.total, indices=clip.indices)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    clips: list[Clip]
    contexts: list[list[Clip]]
    labels: np.ndarray  # (B, C) training range
    totals: np.ndarray | None  # (B,) training range
    video_index: np.ndarray
    scale: str = "affect"
    params: list[AugmentParams] = field(default_factory=list)

    @property
    def B(self) -> int:
        return len(self.clips)

    def clip_frames(self) -> np.ndarray:
        return np.stack([c.frames for c in self.clips])

    def context_frames(self, K: int) -> np.ndarray | None:
        """Neighbours only, ``(B, 2K, T, H, W, 3)``; ``None`` when ``K == 0``."""
        if K == 0:
            return None
        return np.stack([np.stack([c.frames for i, c in enumerate(ctx) if i != K]) for ctx in self.contexts])


def make_batch(corpus: list[Video], B: int, cfg: SamplingConfig, rng: np.random.Generator,
               augment_clips: bool = False, augment_factor: float = 0.2,
               rotation_range: float = 30.0) -> Batch:
    """``B`` clips from distinct videos when possible, each with its context window."""
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    if not corpus:
        raise ValueError("empty corpus")
    if len(corpus) >= B:
        chosen = rng.choice(len(corpus), size=B, replace=False)
    else:
        log.warning("corpus has %d videos < batch size %d; sampling with replacement", len(corpus), B)
        chosen = rng.choice(len(corpus), size=B, replace=True)
    clips, contexts, params = [], [], []
    for vi in chosen:
        video = corpus[int(vi)]
        clip = sample_clip(video, cfg, rng)
        window = context_window(video, clip, cfg)
        if augment_clips:
            p = AugmentParams.draw(rng, augment_factor, rotation_range)
            window = [augment(c, None, p) for c in window]
            clip = window[cfg.K]
            params.append(p)
        clips.append(clip)
        contexts.append(window)
    scale_id = corpus[0].scale
    labels = np.stack([corpus[int(i)].train_labels() for i in chosen])
    totals = None
    if SCALES[scale_id].total_native is not None:
        totals = np.array([corpus[int(i)].train_total() for i in chosen])
    return Batch(clips, contexts, labels, totals, np.asarray(chosen), scale_id, params)
