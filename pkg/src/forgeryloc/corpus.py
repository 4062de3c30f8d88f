"""Synthetic partial-forgery corpus: generation, frame labels and on-disk format."""
from __future__ import annotations

import dataclasses
import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .config import CorpusConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "corpus.json"


class CorpusError(RuntimeError):
    pass


class InfeasibleConfigError(ValueError):
    pass


@dataclass
class AudioClip:
    id: str
    samples: np.ndarray
    sample_rate: int = 16000

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ForgerySegment:
    start_s: float
    dur_s: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.dur_s

    def to_json(self) -> dict:
        return {"start_s": self.start_s, "dur_s": self.dur_s}


@dataclass
class FrameLabelTrack:
    y_fake: np.ndarray
    y_boundary: np.ndarray
    frame_period_s: float = 0.02

    @property
    def n_frames(self) -> int:
        return len(self.y_fake)


@dataclass
class ClipRecord:
    id: str
    audio: str
    duration_s: float
    segments: list[ForgerySegment] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "audio": self.audio,
            "duration_s": self.duration_s,
            "segments": [s.to_json() for s in self.segments],
        }


@dataclass
class CorpusManifest:
    clips: list[ClipRecord]
    seed: int
    config: dict
    root: Path | None = None

    def __eq__(self, other):
        if not isinstance(other, CorpusManifest):
            return NotImplemented
        return (self.clips == other.clips and self.seed == other.seed
                and self.config == other.config)

    def audio_path(self, record: ClipRecord) -> Path:
        if self.root is None:
            raise CorpusError("manifest has no root directory")
        return self.root / record.audio

    def load_clip(self, record: ClipRecord) -> AudioClip:
        return read_wav(self.audio_path(record), record.id)


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------

def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / (np.std(x) + 1e-12)


def _tilted_noise(rng: np.random.Generator, n: int, db_per_oct: float) -> np.ndarray:
    """Noise whose spectrum rises by ``db_per_oct`` per octave."""
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    gain = f ** (db_per_oct / (20.0 * np.log10(2.0)))
    x = np.fft.irfft(spec * gain, n)
    return x / (np.std(x) + 1e-12)


def _carrier(rng: np.random.Generator, n: int, sr: int, cfg: CorpusConfig) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(cfg.f0_min_hz, cfg.f0_max_hz)
    vib = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    x = np.zeros(n)
    for k in range(1, cfg.n_harmonics + 1):
        if k * f0 * 1.05 >= sr / 2:
            break
        x += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    # syllable-like amplitude envelope
    env_rate = rng.uniform(2.5, 5.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * env_rate * t + rng.uniform(0, 2 * np.pi)) ** 2
    x = x / (np.std(x) + 1e-12) * env
    return x + cfg.noise_level * _pink_noise(rng, n)


def _forgery(rng: np.random.Generator, carrier: np.ndarray, sr: int, cfg: CorpusConfig) -> np.ndarray:
    n = len(carrier)
    kind = cfg.forgery_kind
    if kind == "mixed":
        kind = "tilted_noise" if rng.random() < 0.5 else "ring_mod"
    if kind == "tilted_noise":
        y = _tilted_noise(rng, n, cfg.noise_tilt_db_per_oct)
    elif kind == "ring_mod":
        t = np.arange(n) / sr
        fr = rng.uniform(cfg.ring_freq_min_hz, cfg.ring_freq_max_hz)
        y = carrier * np.sin(2 * np.pi * fr * t)
    else:
        raise InfeasibleConfigError(f"unknown forgery_kind {cfg.forgery_kind!r}")
    return y / (np.std(y) + 1e-12)


def _place_segments(rng, n_frames: int, cfg: CorpusConfig) -> list[tuple[int, int]]:
    """Draw segment (first_frame, n_frames) pairs on the frame grid."""
    p = cfg.frame_period_s
    lo = max(1, int(round(cfg.seg_dur_min_s / p)))
    hi = max(lo, int(round(cfg.seg_dur_max_s / p)))
    gap = max(1, int(round(cfg.min_gap_s / p)))
    n_seg = int(rng.integers(cfg.n_segments_min, cfg.n_segments_max + 1))
    if n_seg == 0:
        return []
    need = n_seg * lo + (n_seg - 1) * gap
    if need > n_frames:
        raise InfeasibleConfigError(
            f"{n_seg} segments of >= {lo} frames with gap {gap} need {need} frames, "
            f"clip has {n_frames}")
    lengths = []
    budget = n_frames - (n_seg - 1) * gap
    for i in range(n_seg):
        reserve = (n_seg - i - 1) * lo
        cap = min(hi, budget - reserve)
        ln = int(rng.integers(lo, cap + 1))
        lengths.append(ln)
        budget -= ln
    slack = n_frames - sum(lengths) - (n_seg - 1) * gap
    cuts = np.sort(rng.integers(0, slack + 1, size=n_seg))
    out = []
    pos = 0
    prev_cut = 0
    for i, ln in enumerate(lengths):
        pos += int(cuts[i] - prev_cut)
        prev_cut = int(cuts[i])
        out.append((pos, ln))
        pos += ln + gap
    return out


def _place_distractors(rng, n_frames: int, forged: list[tuple[int, int]], cfg: CorpusConfig
                       ) -> list[tuple[int, int]]:
    """Short real transients placed in genuine regions, clear of forged segments."""
    p = cfg.frame_period_s
    n_draw = int(rng.poisson(cfg.distractor_rate_hz * n_frames * p))
    lo = max(1, int(round(cfg.distractor_dur_min_s / p)))
    hi = max(lo, int(round(cfg.distractor_dur_max_s / p)))
    guard = max(1, int(round(cfg.min_gap_s / p)))
    busy = np.zeros(n_frames, dtype=bool)
    for first, ln in forged:
        busy[max(0, first - guard):first + ln + guard] = True
    out = []
    for _ in range(n_draw):
        ln = int(rng.integers(lo, hi + 1))
        first = int(rng.integers(0, max(1, n_frames - ln + 1)))
        if ln > n_frames or busy[first:first + ln].any():
            continue
        busy[max(0, first - guard):first + ln + guard] = True
        out.append((first, ln))
    return out


def _transient(rng: np.random.Generator, n: int) -> np.ndarray:
    """Decaying broadband burst, unit peak envelope."""
    env = np.exp(-np.arange(n) / max(1.0, n * rng.uniform(0.15, 0.4)))
    return rng.standard_normal(n) * env


def synth_clip(seed: int, cfg: CorpusConfig, clip_id: str | None = None
               ) -> tuple[AudioClip, list[ForgerySegment]]:
    """Generate one clip with spliced forgeries; a pure function of (seed, cfg).

    Segment boundaries lie on the frame grid so frame rasterization is exact.
    """
    if cfg.n_segments_min < 0 or cfg.n_segments_max < cfg.n_segments_min:
        raise InfeasibleConfigError("need 0 <= n_segments_min <= n_segments_max")
    if cfg.duration_min_s <= 0 or cfg.duration_max_s < cfg.duration_min_s:
        raise InfeasibleConfigError("need 0 < duration_min_s <= duration_max_s")
    if not 0.0 < cfg.forgery_strength_min <= cfg.forgery_strength_max <= 1.0:
        raise InfeasibleConfigError("need 0 < forgery_strength_min <= forgery_strength_max <= 1")
    rng = np.random.default_rng(seed)
    sr = cfg.sample_rate
    p = cfg.frame_period_s
    dur = rng.uniform(cfg.duration_min_s, cfg.duration_max_s)
    n_frames = int(np.floor(dur / p + 1e-9))
    hop = int(round(p * sr))
    n = n_frames * hop
    placed = _place_segments(rng, n_frames, cfg)

    x = _carrier(rng, n, sr, cfg)
    fade = max(1, int(round(cfg.crossfade_ms * 1e-3 * sr)))
    for first, ln in placed:
        a, b = first * hop, (first + ln) * hop
        fake = _forgery(rng, x[a:b], sr, cfg) * np.std(x[a:b])
        strength = cfg.forgery_strength_max
        if cfg.forgery_strength_min < cfg.forgery_strength_max:
            strength = rng.uniform(cfg.forgery_strength_min, cfg.forgery_strength_max)
        w = np.full(b - a, strength)
        k = min(fade, (b - a) // 2)
        if k > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(k) + 0.5) / k)
            w[:k] *= ramp
            w[-k:] *= ramp[::-1]
        x[a:b] = (1 - w) * x[a:b] + w * fake
    # transients draw from their own stream so forgeries do not depend on their rate
    drng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    for first, ln in _place_distractors(drng, n_frames, placed, cfg):
        a, b = first * hop, (first + ln) * hop
        gain = cfg.distractor_gain * drng.uniform(0.5, 1.0) * (np.std(x[a:b]) + 1e-12)
        x[a:b] += gain * _transient(drng, b - a)
    x = 0.9 * x / (np.max(np.abs(x)) + 1e-12)
    x = np.clip(x, -1.0, 1.0)
    segments = [ForgerySegment(round(first * p, 10), round(ln * p, 10)) for first, ln in placed]
    clip = AudioClip(id=clip_id or f"clip_{seed}", samples=x, sample_rate=sr)
    return clip, segments


def clip_seed(corpus_seed: int, index: int) -> int:
    """Independent per-clip seed derived from the corpus seed."""
    ss = np.random.SeedSequence([corpus_seed, index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_corpus(cfg: CorpusConfig) -> list[tuple[AudioClip, list[ForgerySegment]]]:
    out = []
    for i in range(cfg.n_clips):
        out.append(synth_clip(clip_seed(cfg.seed, i), cfg, clip_id=f"clip{i:05d}"))
    return out


# --------------------------------------------------------------------------
# frame labels
# --------------------------------------------------------------------------

def rasterize_labels(segments: list[ForgerySegment], duration_s: float,
                     frame_period_s: float = 0.02) -> FrameLabelTrack:
    """Frame t is fake iff its midpoint lies inside a segment.

    Boundary frames are the first and last frame of every fake run.
    """
    if frame_period_s <= 0:
        raise ValueError("frame_period_s must be positive")
    n = int(np.floor(duration_s / frame_period_s + 1e-9))
    mid = (np.arange(n) + 0.5) * frame_period_s
    y = np.zeros(n, dtype=np.int8)
    for seg in segments:
        y[(mid >= seg.start_s) & (mid < seg.end_s)] = 1
    starts, lengths = _kernels.runs_above(y, 0.5)
    yb = np.zeros(n, dtype=np.int8)
    yb[starts] = 1
    yb[starts + lengths - 1] = 1
    return FrameLabelTrack(y_fake=y, y_boundary=yb, frame_period_s=frame_period_s)


def deraster_segments(track: FrameLabelTrack) -> list[ForgerySegment]:
    p = track.frame_period_s
    starts, lengths = _kernels.runs_above(track.y_fake, 0.5)
    return [ForgerySegment(round(s * p, 10), round(ln * p, 10))
            for s, ln in zip(starts.tolist(), lengths.tolist())]


# --------------------------------------------------------------------------
# on-disk format
# --------------------------------------------------------------------------

def write_wav(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: Path, clip_id: str | None = None) -> AudioClip:
    clip_id = clip_id or Path(path).stem
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise CorpusError(f"{clip_id}: expected 16-bit mono PCM WAV")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except FileNotFoundError as exc:
        raise CorpusError(f"{clip_id}: audio file missing: {path}") from exc
    except (wave.Error, EOFError) as exc:
        raise CorpusError(f"{clip_id}: corrupt WAV {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioClip(id=clip_id, samples=samples, sample_rate=sr)


def write_corpus(clips: list[tuple[AudioClip, list[ForgerySegment]]], out_dir: str | Path,
                 seed: int, config: CorpusConfig | dict) -> CorpusManifest:
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    cfg_dict = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    records = []
    for clip, segs in clips:
        rel = f"audio/{clip.id}.wav"
        write_wav(out_dir / rel, clip.samples, clip.sample_rate)
        records.append(ClipRecord(clip.id, rel, clip.duration_s, list(segs)))
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
    (out_dir / META_NAME).write_text(json.dumps({"seed": seed, "config": cfg_dict}, indent=2))
    return CorpusManifest(records, seed, cfg_dict, root=out_dir)


def _parse_record(line: str, lineno: int) -> ClipRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"manifest line {lineno}: invalid JSON") from exc
    missing = {"id", "audio", "duration_s", "segments"} - set(d)
    if missing:
        raise CorpusError(f"{d.get('id', f'line {lineno}')}: missing fields {sorted(missing)}")
    try:
        segs = [ForgerySegment(float(s["start_s"]), float(s["dur_s"])) for s in d["segments"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"{d['id']}: malformed segment entry") from exc
    return ClipRecord(str(d["id"]), str(d["audio"]), float(d["duration_s"]), segs)


def load_corpus(corpus_dir: str | Path, check_audio: bool = True) -> CorpusManifest:
    corpus_dir = Path(corpus_dir)
    mpath = corpus_dir / MANIFEST_NAME
    if not mpath.exists():
        raise CorpusError(f"manifest not found in {corpus_dir}")
    records = []
    with open(mpath) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append(_parse_record(line, lineno))
    meta_path = corpus_dir / META_NAME
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"seed": None, "config": {}}
    manifest = CorpusManifest(records, meta.get("seed"), meta.get("config", {}), root=corpus_dir)
    if check_audio:
        period = manifest.config.get("frame_period_s", 0.02)
        for r in records:
            path = corpus_dir / r.audio
            if not path.exists():
                raise CorpusError(f"{r.id}: audio file missing: {path}")
            with wave.open(str(path), "rb") as w:
                dur = w.getnframes() / w.getframerate()
            if abs(dur - r.duration_s) > period:
                raise CorpusError(f"{r.id}: audio is {dur:.3f}s, manifest says {r.duration_s:.3f}s")
    return manifest
