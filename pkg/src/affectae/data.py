"""Preprocessing, windowing, the synthetic audio-visual generator and the
``AFR1`` recording container.

A recording is a 25 fps stream: one 96x96x3 face crop and one 640-sample
audio frame (0.04 s at 16 kHz) per step, plus an (arousal, valence) label.
Frames are held as float32 arrays (the on-disk precision) and widened when a
batch is assembled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SAMPLE_RATE = 16_000
FRAME_RATE = 25
AUDIO_FRAME = SAMPLE_RATE // FRAME_RATE  # 640
IMAGE_SHAPE = (96, 96, 3)
K_DEFAULT = 4

MAGIC = b"AFR1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, N, H, W, C, audio length


class RecordingFormatError(ValueError):
    """Base class for container read/write failures."""


class BadMagicError(RecordingFormatError):
    pass


class TruncatedFileError(RecordingFormatError):
    def __init__(self, path, offset: int, expected: int):
        super().__init__(f"{path}: truncation at byte offset {offset} (expected {expected} bytes)")
        self.offset = offset
        self.expected = expected


class DimensionMismatchError(RecordingFormatError):
    pass


@dataclass
class Recording:
    id: str
    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    audio: np.ndarray  # (N, 640) float32, recording-normalised
    labels: np.ndarray  # (N, 2) float32: arousal, valence

    def __post_init__(self):
        n = len(self.images)
        if len(self.audio) != n or len(self.labels) != n:
            raise DimensionMismatchError(
                f"recording {self.id}: {n} images, {len(self.audio)} audio frames, {len(self.labels)} labels"
            )
        if self.labels.ndim != 2 or self.labels.shape[1] != 2:
            raise DimensionMismatchError(f"labels must be (N, 2), got {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.images)

    def equals(self, other: Recording) -> bool:
        return (
            self.id == other.id
            and self.images.dtype == other.images.dtype
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class Window:
    recording_id: str
    t: int
    images: np.ndarray  # (k+1, H, W, C)
    audio: np.ndarray  # (k+1, 640)
    label: np.ndarray  # (2,) at step t


# ---------------------------------------------------------------------------
# preprocessing


def normalize_image(raw, max_value: float = 255.0) -> np.ndarray:
    """Map intensities in ``[0, max_value]`` affinely onto ``[-1, 1]``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > max_value):
        raise ValueError(f"image intensities must lie in [0, {max_value}]")
    return 2.0 * (raw / max_value) - 1.0


def denormalize_image(img, max_value: float = 255.0) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * max_value


def normalize_audio(waveform) -> np.ndarray:
    """Zero-mean, unit (population) variance over the whole recording."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < 2:
        raise ValueError("waveform needs at least two samples")
    sd = x.std()
    if sd <= 1e-12 * np.abs(x).max():
        raise ValueError("constant waveform cannot be normalised")
    return (x - x.mean()) / sd


def frame_audio(waveform, frame_length: int = AUDIO_FRAME) -> np.ndarray:
    """Split into consecutive non-overlapping frames; a short tail is dropped."""
    x = np.asarray(waveform)
    if x.size < frame_length:
        raise ValueError(f"waveform of {x.size} samples is shorter than one frame ({frame_length})")
    n = x.size // frame_length
    return x[: n * frame_length].reshape(n, frame_length)


def window_indices(n_frames: int, k: int = K_DEFAULT) -> np.ndarray:
    """Final-step indices ``t = k .. N-1`` of every stride-1 window."""
    if n_frames < k + 1:
        raise ValueError(f"recording of {n_frames} frames is too short for windows of {k + 1}")
    return np.arange(k, n_frames)


def window_stream(rec: Recording, k: int = K_DEFAULT) -> Iterator[Window]:
    for t in window_indices(len(rec), k):
        yield Window(rec.id, int(t), rec.images[t - k : t + 1], rec.audio[t - k : t + 1], rec.labels[t])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class NoiseConfig:
    image_sigma: float = 0.0  # pixel noise on the [0, 1] intensity scale
    audio_sigma: float = 0.0  # white noise relative to a unit-amplitude tone


NOISE_PRESETS = {
    "clean": NoiseConfig(0.0, 0.0),
    "moderate": NoiseConfig(0.15, 0.5),
    "heavy": NoiseConfig(0.4, 1.5),
}

REVERSION = 0.05
STEP_SIGMA = 0.05
SMOOTH = 5
BLOB_SIGMA = 8.0
BLOB_SWING = 28.0
BACKGROUND = 0.1
CHANNEL_GAIN = (1.0, 0.85, 0.7)


def blob_amplitude(arousal):
    return 0.3 + 0.6 * (np.asarray(arousal) + 1.0) / 2.0


def tone_amplitude(arousal):
    return 0.1 + 0.9 * (np.asarray(arousal) + 1.0) / 2.0


def tone_frequency(valence):
    return 220.0 * 2.0 ** np.asarray(valence)


def affect_trajectory(rng: np.random.Generator, n: int) -> np.ndarray:
    """Mean-reverting walk, smoothed by a centred moving average, clipped."""
    stationary = STEP_SIGMA / np.sqrt(1.0 - (1.0 - REVERSION) ** 2)
    x = np.empty(n)
    x[0] = rng.normal(0.0, stationary)
    steps = rng.normal(0.0, STEP_SIGMA, n - 1)
    for t in range(1, n):
        x[t] = (1.0 - REVERSION) * x[t - 1] + steps[t - 1]
    pad = SMOOTH // 2
    xp = np.pad(x, pad, mode="edge")
    smooth = np.convolve(xp, np.ones(SMOOTH) / SMOOTH, mode="valid")
    return np.clip(smooth, -1.0, 1.0)


def render_faces(arousal, valence, rng: np.random.Generator, sigma: float, size: int = 96) -> np.ndarray:
    """Raw [0, 1] frames: a Gaussian blob whose x-position tracks valence and
    whose brightness tracks arousal."""
    arousal = np.asarray(arousal)
    valence = np.asarray(valence)
    grid = np.arange(size, dtype=np.float64)
    centre = size / 2.0
    cx = centre + BLOB_SWING * valence
    gx = np.exp(-((grid[None, :] - cx[:, None]) ** 2) / (2 * BLOB_SIGMA**2))  # (N, W)
    gy = np.exp(-((grid - centre) ** 2) / (2 * BLOB_SIGMA**2))  # (H,)
    blob = gy[None, :, None] * gx[:, None, :]  # (N, H, W)
    amp = blob_amplitude(arousal)[:, None, None, None]
    gain = np.asarray(CHANNEL_GAIN)[None, None, None, :]
    img = BACKGROUND + amp * gain * blob[..., None]
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize_waveform(arousal, valence, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Raw waveform: a phase-continuous tone, loudness from arousal, pitch
    from valence (one octave either side of 220 Hz), plus white noise."""
    amp = np.repeat(tone_amplitude(arousal), AUDIO_FRAME)
    freq = np.repeat(tone_frequency(valence), AUDIO_FRAME)
    phase = 2.0 * np.pi * np.cumsum(freq) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    wave = amp * np.sin(phase)
    if sigma > 0:
        wave = wave + rng.normal(0.0, sigma, wave.shape)
    return wave


def generate_recording(seed: int, n_frames: int, noise: NoiseConfig | str = "moderate", rec_id: str | None = None) -> Recording:
    """Deterministic synthetic recording; labels are the latent trajectories."""
    if n_frames < K_DEFAULT + 1:
        raise ValueError(f"need at least {K_DEFAULT + 1} frames")
    if isinstance(noise, str):
        noise = NOISE_PRESETS[noise]
    rng = np.random.default_rng(seed)
    arousal = affect_trajectory(rng, n_frames)
    valence = affect_trajectory(rng, n_frames)
    faces = normalize_image(render_faces(arousal, valence, rng, noise.image_sigma), max_value=1.0)
    audio = frame_audio(normalize_audio(synthesize_waveform(arousal, valence, rng, noise.audio_sigma)))
    labels = np.stack([arousal, valence], axis=1)
    return Recording(
        rec_id or f"syn{seed:06d}",
        faces.astype(np.float32),
        audio.astype(np.float32),
        labels.astype(np.float32),
    )


def make_benchmark(
    seed: int = 0,
    n_train: int = 16,
    n_val: int = 4,
    n_frames: int = 500,
    noise: NoiseConfig | str = "moderate",
) -> tuple[list[Recording], list[Recording]]:
    """Train/validation recordings with disjoint derived seeds."""
    base = 1000 * seed
    train = [generate_recording(base + i, n_frames, noise, f"train{i:02d}") for i in range(n_train)]
    val = [generate_recording(base + 500 + i, n_frames, noise, f"val{i:02d}") for i in range(n_val)]
    return train, val


# ---------------------------------------------------------------------------
# probe features


FEATURE_CHUNK = 256


def _chunked(fn, *arrays) -> np.ndarray:
    """Apply a per-frame feature map in slices to bound float64 temporaries."""
    n = len(arrays[0])
    return np.concatenate([fn(*(a[s : s + FEATURE_CHUNK] for a in arrays)) for s in range(0, n, FEATURE_CHUNK)])


def blob_features(images) -> np.ndarray:
    """Per-frame (blob intensity, horizontal centroid) from [-1, 1] frames."""
    return _chunked(_blob_features, images)


def _blob_features(images) -> np.ndarray:
    raw = (np.asarray(images, dtype=np.float64) + 1.0) / 2.0
    excess = np.clip(raw - BACKGROUND, 0.0, None).mean(axis=3)  # (N, H, W)
    mass = excess.sum(axis=(1, 2))
    cols = np.arange(raw.shape[2], dtype=np.float64)
    centroid = (excess.sum(axis=1) * cols).sum(axis=1) / np.maximum(mass, 1e-12)
    return np.stack([excess.mean(axis=(1, 2)), centroid], axis=1)


def summary_features(images, audio) -> np.ndarray:
    """Position- and pitch-agnostic moments: pixel mean/std, audio RMS/mean |x|."""
    return _chunked(_summary_features, images, audio)


def _summary_features(images, audio) -> np.ndarray:
    img = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    aud = np.asarray(audio, dtype=np.float64)
    return np.stack(
        [img.mean(axis=1), img.std(axis=1), np.sqrt((aud**2).mean(axis=1)), np.abs(aud).mean(axis=1)],
        axis=1,
    )


# ---------------------------------------------------------------------------
# AFR1 container


def write_recording(path, rec: Recording) -> None:
    """Little-endian: header, id, frame-major float32 payload, then labels."""
    n, h, w, c = rec.images.shape
    length = rec.audio.shape[1]
    rid = rec.id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, length))
        fh.write(struct.pack("<I", len(rid)))
        fh.write(rid)
        img = np.ascontiguousarray(rec.images, dtype="<f4").reshape(n, -1)
        aud = np.ascontiguousarray(rec.audio, dtype="<f4")
        fh.write(np.concatenate([img, aud], axis=1).tobytes())
        fh.write(np.ascontiguousarray(rec.labels, dtype="<f4").tobytes())


def read_recording(path, image_shape: Sequence[int] | None = None, audio_length: int | None = None) -> Recording:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size + 4:
        raise TruncatedFileError(path, len(buf), _HEADER.size + 4)
    _, version, n, h, w, c, length = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise RecordingFormatError(f"{path}: unsupported container version {version}")
    if min(n, h, w, c, length) == 0:
        raise DimensionMismatchError(f"{path}: zero-sized dimension in header")
    if image_shape is not None and (h, w, c) != tuple(image_shape):
        raise DimensionMismatchError(f"{path}: image dims {(h, w, c)}, expected {tuple(image_shape)}")
    if audio_length is not None and length != audio_length:
        raise DimensionMismatchError(f"{path}: audio frame length {length}, expected {audio_length}")
    (id_len,) = struct.unpack_from("<I", buf, _HEADER.size)
    off = _HEADER.size + 4
    per_frame = h * w * c + length
    expected = off + id_len + 4 * n * per_frame + 8 * n
    if len(buf) < expected:
        raise TruncatedFileError(path, len(buf), expected)
    if len(buf) > expected:
        raise DimensionMismatchError(f"{path}: {len(buf) - expected} trailing bytes after payload")
    rid = buf[off : off + id_len].decode("utf-8")
    off += id_len
    payload = np.frombuffer(buf, dtype="<f4", count=n * per_frame, offset=off).reshape(n, per_frame)
    off += 4 * n * per_frame
    labels = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=off).reshape(n, 2)
    images = payload[:, : h * w * c].reshape(n, h, w, c).astype(np.float32)
    audio = payload[:, h * w * c :].astype(np.float32)
    return Recording(rid, images, audio, labels.astype(np.float32))


def write_manifest(path, recording_paths: Sequence) -> None:
    base = Path(path).resolve().parent
    lines = []
    for p in recording_paths:
        p = Path(p).resolve()
        try:
            lines.append(str(p.relative_to(base)))
        except ValueError:
            lines.append(str(p))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[Path]:
    base = Path(path).resolve().parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def load_manifest(path) -> list[Recording]:
    return [read_recording(p) for p in read_manifest(path)]


# ---------------------------------------------------------------------------
# window tables


class FrameStore:
    """Row access over several per-recording arrays as if they were
    concatenated, without copying them."""

    def __init__(self, parts: Sequence[np.ndarray]):
        self.parts = list(parts)
        self.offsets = np.cumsum([0] + [len(p) for p in self.parts])
        self.shape = (int(self.offsets[-1]), *self.parts[0].shape[1:])
        self.dtype = self.parts[0].dtype

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, rows) -> np.ndarray:
        if isinstance(rows, slice):
            rows = np.arange(*rows.indices(len(self)))
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        if rows.size and (rows.min() < -len(self) or rows.max() >= len(self)):
            raise IndexError(f"row index out of range for {len(self)} frames")
        rows = rows % max(len(self), 1)
        flat = rows.reshape(-1)
        out = np.empty((flat.size, *self.shape[1:]), dtype=self.dtype)
        part = np.searchsorted(self.offsets, flat, side="right") - 1
        for j in np.unique(part):
            sel = part == j
            out[sel] = self.parts[j][flat[sel] - self.offsets[j]]
        return out.reshape(*rows.shape, *self.shape[1:])

    def __array__(self, dtype=None, copy=None):
        arr = np.concatenate(self.parts)
        return arr if dtype is None else arr.astype(dtype)


@dataclass
class FrameTable:
    """Frames of several recordings laid end to end, with every valid window
    expressed as row indices into the table. Frame arrays are shared with
    the recordings, not copied."""

    images: FrameStore
    audio: FrameStore
    labels: np.ndarray
    windows: np.ndarray  # (W, k+1) row indices
    window_rec: np.ndarray  # (W,) recording position
    window_t: np.ndarray  # (W,) time step within the recording
    rec_ids: list = field(default_factory=list)

    @classmethod
    def build(cls, recordings: Sequence[Recording], k: int = K_DEFAULT) -> FrameTable:
        if not recordings:
            raise ValueError("no recordings given")
        offsets = np.cumsum([0] + [len(r) for r in recordings])
        wins, wrec, wt = [], [], []
        span = np.arange(-k, 1)
        for i, rec in enumerate(recordings):
            ts = window_indices(len(rec), k)
            wins.append(offsets[i] + ts[:, None] + span[None, :])
            wrec.append(np.full(len(ts), i))
            wt.append(ts)
        return cls(
            FrameStore([r.images for r in recordings]),
            FrameStore([r.audio for r in recordings]),
            np.concatenate([r.labels for r in recordings]),
            np.concatenate(wins),
            np.concatenate(wrec),
            np.concatenate(wt),
            [r.id for r in recordings],
        )

    def __len__(self) -> int:
        return len(self.windows)

    def batch(self, which, dtype=np.float64):
        """Distinct frames used by the selected windows, the (B, k+1) index
        into them, and the (B, 2) labels at each window's last step."""
        rows = self.windows[np.asarray(which)]
        uniq, inverse = np.unique(rows, return_inverse=True)
        index = inverse.reshape(rows.shape)
        return (
            self.images[uniq].astype(dtype),
            self.audio[uniq].astype(dtype),
            index,
            self.labels[rows[:, -1]].astype(dtype),
        )
