"""Frame-rate feature extraction: log-mel front-end and external embeddings."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import FrontendConfig

EXTERNAL_MAGIC = b"TFRF"
EXTERNAL_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    data: np.ndarray
    frame_period_s: float = 0.02
    stage: str = "front"

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / max(c - lo, 1e-9)
        down = (hi - bins) / max(hi - c, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def extract_features(samples: np.ndarray, cfg: FrontendConfig | None = None,
                     sample_rate: int | None = None) -> FeatureMatrix:
    """Log-mel magnitude features, one row per 20 ms frame.

    Frame t is analysed with a Hann window centred on the frame midpoint, so
    ``T = floor(len(samples) / hop)`` matches the label raster exactly.
    """
    cfg = cfg or FrontendConfig()
    sr = sample_rate or cfg.sample_rate
    if sr != cfg.sample_rate:
        raise FeatureError(f"expected {cfg.sample_rate} Hz audio, got {sr} Hz")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("expected mono audio")
    hop = int(round(cfg.hop_s * sr))
    win = int(round(cfg.win_s * sr))
    n_frames = len(x) // hop
    if n_frames == 0:
        raise FeatureError("audio is empty or shorter than one frame")
    n_fft = max(cfg.n_fft, win)
    left = win // 2 - hop // 2
    padded = np.concatenate([np.zeros(max(left, 0)), x, np.zeros(win)])
    offset = max(-left, 0)
    frames = np.lib.stride_tricks.sliding_window_view(padded[offset:], win)[::hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * np.hanning(win + 2)[1:-1], n=n_fft, axis=1))
    fmax = cfg.fmax_hz or sr / 2
    fb = mel_filterbank(sr, n_fft, cfg.n_mels, cfg.fmin_hz, fmax)
    feats = np.log(spec @ fb.T + cfg.log_floor)
    return FeatureMatrix(feats, frame_period_s=cfg.hop_s, stage="front")


def project_to_model_dim(features: FeatureMatrix | np.ndarray, weight: np.ndarray,
                         bias: np.ndarray | None = None) -> FeatureMatrix:
    """Row-wise affine map ``F @ W.T + b``; ``weight`` has shape (out, in)."""
    data = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    period = features.frame_period_s if isinstance(features, FeatureMatrix) else 0.02
    weight = np.asarray(weight)
    if data.shape[1] != weight.shape[1]:
        raise FeatureError(f"feature width {data.shape[1]} does not match projection input {weight.shape[1]}")
    out = data @ weight.T
    if bias is not None:
        out = out + bias
    return FeatureMatrix(out, frame_period_s=period, stage="ssl")


def save_external_features(path: str | Path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise FeatureError("external features must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EXTERNAL_MAGIC, EXTERNAL_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def load_external_features(path: str | Path, expected_dim: int | None = None) -> FeatureMatrix:
    """Read a ``TFRF`` file: header (magic, version, T, D) then T*D float32 LE."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureError("file too short for TFRF header")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != EXTERNAL_MAGIC:
        raise FeatureError(f"bad magic {magic!r}, expected {EXTERNAL_MAGIC!r}")
    if version != EXTERNAL_VERSION:
        raise FeatureError(f"unsupported TFRF version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * t * d:
        raise FeatureError(f"payload size mismatch: header declares {t}x{d}, "
                           f"got {len(payload)} bytes")
    if expected_dim is not None and d != expected_dim:
        raise FeatureError(f"feature width {d} does not match expected {expected_dim}")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)
    bad = ~np.isfinite(data)
    if bad.any():
        row = int(np.argwhere(bad)[0, 0])
        raise FeatureError(f"non-finite value at row {row}")
    return FeatureMatrix(data, stage="front")
