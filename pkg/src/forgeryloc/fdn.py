"""Frame-level detection network.

Data flow for one clip of T frames::

    front features (T x in) -> normalise -> linear -> F_ssl (T x model_dim)
    F_ssl -> 6 residual conv blocks -> F_sc (C x T x S)
    F_sc -> channel/spectral means -> (F_s, F_c) -> dual attention -> F_da (T x D)
    F_da -> aMLP x2 -> F_b -> cosine head -> boundary scores
    (F_da, F_b) -> cross-attention block -> F_ba -> aMLP + cosine head -> forgery scores

Class index 1 is "fake" for the forgery head and "boundary" for the boundary
head, so both score tracks read as probabilities of the positive event.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig

logger = logging.getLogger(__name__)


class _ZeroNormCounter:
    """Counts cosine evaluations that hit a zero-norm vector."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            self.count += n
            logger.debug("cosine similarity on %d zero-norm vectors; returning 0", n)


zero_norm_events = _ZeroNormCounter()


# --------------------------------------------------------------------------
# functional pieces
# --------------------------------------------------------------------------

def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis with broadcasting; zero-norm inputs give 0."""
    dot = (a * b).sum(-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    zero = denom == 0
    if zero.any():
        zero_norm_events.add(int(zero.sum()))
    safe = torch.where(zero, torch.ones_like(denom), denom)
    return torch.where(zero, torch.zeros_like(dot), dot / safe)


def cosine_sim(f_a, f_b) -> float:
    """Cosine similarity of two vectors (numpy or torch); 0 when either norm is 0."""
    a = torch.as_tensor(np.asarray(f_a, dtype=np.float64)) if not torch.is_tensor(f_a) else f_a
    b = torch.as_tensor(np.asarray(f_b, dtype=np.float64)) if not torch.is_tensor(f_b) else f_b
    return float(cosine(a, b))


def class_cosines(x: torch.Tensor, class_vectors: torch.Tensor) -> torch.Tensor:
    """(..., D) rows against (K, D) class vectors -> (..., K) cosines."""
    return cosine(x.unsqueeze(-2), class_vectors)


def p2sgrad_mse(cos_acts: torch.Tensor, target_class) -> torch.Tensor:
    """Mean over frames of the squared distance between cosines and one-hot targets."""
    target = torch.as_tensor(np.asarray(target_class), device=cos_acts.device).long()
    onehot = F.one_hot(target, cos_acts.shape[-1]).to(cos_acts.dtype)
    per_frame = ((cos_acts - onehot) ** 2).sum(-1)
    return per_frame.mean()


def sample_pairs(y_fake, n_pairs: int, rng: np.random.Generator):
    """Draw frame pairs for the contrastive loss.

    Each draw is a same-label pair with probability 1/2, otherwise a
    real/fake pair; cross pairs fall back to same-label pairs when one class
    is absent, and vice versa. Returns index arrays (a, b) and the similarity
    flag (1 when both frames carry the same label).
    """
    y = np.asarray(y_fake).astype(np.int64)
    if y.size < 2:
        raise ValueError("contrastive sampling needs at least two frames")
    groups = [np.flatnonzero(y == k) for k in (0, 1)]
    n_same = np.array([len(g) * (len(g) - 1) / 2 for g in groups], dtype=np.float64)
    can_same = n_same.sum() > 0
    can_cross = len(groups[0]) > 0 and len(groups[1]) > 0
    a = np.empty(n_pairs, dtype=np.int64)
    b = np.empty(n_pairs, dtype=np.int64)
    sim = np.empty(n_pairs, dtype=np.int64)
    for j in range(n_pairs):
        same = rng.random() < 0.5
        if same and not can_same:
            same = False
        if not same and not can_cross:
            same = True
        if same:
            k = rng.choice(2, p=n_same / n_same.sum())
            i1, i2 = rng.choice(len(groups[k]), size=2, replace=False)
            a[j], b[j] = groups[k][i1], groups[k][i2]
            sim[j] = 1
        else:
            a[j] = groups[1][rng.integers(len(groups[1]))]
            b[j] = groups[0][rng.integers(len(groups[0]))]
            sim[j] = 0
    return a, b, sim


def crl_terms(f_a: torch.Tensor, f_b: torch.Tensor, similar, alpha: float) -> torch.Tensor:
    sim = cosine(f_a, f_b)
    flag = torch.as_tensor(np.asarray(similar), dtype=sim.dtype, device=sim.device)
    return flag * (1 - sim) ** 2 + (1 - flag) * torch.clamp(sim - alpha, min=0) ** 2


def crl_loss(F_da: torch.Tensor, y_fake=None, n_pairs: int | None = None, seed: int = 0,
             alpha: float = 0.3, pairs=None) -> torch.Tensor:
    """Contrastive frame-pair loss on a (T, D) feature matrix.

    Either pass ``pairs=(a, b, similar)`` or the labels plus a sampler seed.
    """
    if F_da.shape[0] < 2:
        raise ValueError("contrastive loss needs T >= 2")
    if pairs is None:
        n_pairs = n_pairs or 4 * F_da.shape[0]
        pairs = sample_pairs(y_fake, n_pairs, np.random.default_rng(seed))
    a, b, similar = pairs
    a = torch.as_tensor(a, device=F_da.device)
    b = torch.as_tensor(b, device=F_da.device)
    return crl_terms(F_da[a], F_da[b], similar, alpha).mean()


def sinusoidal_pe(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def split_spectral_channel(F_sc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(..., C, T, S) -> F_s (..., T, S) averaged over channels, F_c (..., T, C) over bins."""
    F_s = F_sc.mean(-3)
    F_c = F_sc.mean(-1).transpose(-1, -2)
    return F_s, F_c


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

class ResBlock2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, freq_stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=(1, freq_stride), padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        if c_in != c_out or freq_stride != 1:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=(1, freq_stride))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return F.selu(self.conv2(F.selu(self.conv1(x))) + self.skip(x))


class ResidualStack(nn.Module):
    """Six residual blocks mapping (B, 1, T, model_dim) to (B, C, T, S).

    The first log2(model_dim / S) blocks halve the spectral axis.
    """

    def __init__(self, model_dim: int, channels: int, spectral_bins: int, n_blocks: int = 6):
        super().__init__()
        ratio = model_dim / spectral_bins
        n_down = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if n_down < 0 or 2 ** n_down != ratio or n_down > n_blocks:
            raise ConfigError(f"model_dim/spectral_bins must be a power of two <= 2^{n_blocks}, "
                              f"got {model_dim}/{spectral_bins}")
        blocks = []
        c_in = 1
        for i in range(n_blocks):
            blocks.append(ResBlock2d(c_in, channels, 2 if i < n_down else 1))
            c_in = channels
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class DualAttention(nn.Module):
    """Spectral and channel attention whose weighted branches are concatenated."""

    def __init__(self, channels: int, spectral_bins: int):
        super().__init__()
        d = channels + spectral_bins
        self.enc_s = nn.Linear(spectral_bins, spectral_bins)
        self.enc_c = nn.Linear(channels, channels)
        self.out = nn.Linear(d, d)

    def forward(self, F_s, F_c, details: bool = False):
        M_s = torch.softmax(self.enc_s(F_s), dim=-1)
        M_c = torch.softmax(self.enc_c(F_c), dim=-1)
        F_t = torch.cat([F_c * M_c, F_s * M_s], dim=-1)
        F_da = F.selu(self.out(F_t))
        if details:
            return F_da, {"M_s": M_s, "M_c": M_c, "F_t": F_t}
        return F_da


class TinyAttention(nn.Module):
    def __init__(self, d_in: int, d_attn: int, d_out: int):
        super().__init__()
        self.d_attn = d_attn
        self.qkv = nn.Linear(d_in, 3 * d_attn)
        self.proj = nn.Linear(d_attn, d_out)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_attn), dim=-1)
        return self.proj(w @ v)


class AMLPBlock(nn.Module):
    """Gated MLP whose gate adds a single-head tiny self-attention over time.

    The usual spatial projection over a fixed sequence length is replaced by a
    position-wise one so clips of any length pass through.
    """

    def __init__(self, d: int, hidden_ratio: int = 2, attn_dim: int = 16):
        super().__init__()
        h = d * hidden_ratio
        self.norm = nn.LayerNorm(d)
        self.fc_in = nn.Linear(d, 2 * h)
        self.gate_norm = nn.LayerNorm(h)
        self.gate_proj = nn.Linear(h, h)
        self.attn = TinyAttention(d, attn_dim, h)
        self.fc_out = nn.Linear(h, d)
        nn.init.normal_(self.gate_proj.weight, std=1e-2)
        nn.init.ones_(self.gate_proj.bias)

    def forward(self, x):
        z = self.norm(x)
        u, v = F.gelu(self.fc_in(z)).chunk(2, dim=-1)
        gate = self.gate_proj(self.gate_norm(v)) + self.attn(z)
        return x + self.fc_out(u * gate)


class CosineHead(nn.Module):
    """Cosine activations against learnable class vectors plus softmax score of class 1."""

    def __init__(self, d: int, n_classes: int = 2):
        super().__init__()
        self.class_vectors = nn.Parameter(torch.randn(n_classes, d) / math.sqrt(d))

    def forward(self, x):
        cos = class_cosines(x, self.class_vectors)
        return cos, torch.softmax(cos, dim=-1)[..., 1]


class CrossAttentionFusion(nn.Module):
    """Temporal features attend to boundary features; transformer-style post-norm block."""

    def __init__(self, d: int, d_attn: int, use_pe: bool = True, ff_ratio: int = 2):
        super().__init__()
        self.d_attn = d_attn
        self.use_pe = use_pe
        self.w_q = nn.Linear(d, d_attn, bias=False)
        self.w_k = nn.Linear(d, d_attn, bias=False)
        self.w_v = nn.Linear(d, d_attn, bias=False)
        self.proj = nn.Linear(d_attn, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_ratio * d), nn.GELU(), nn.Linear(ff_ratio * d, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, F_da, F_b, details: bool = False):
        a, b = F_da, F_b
        if self.use_pe:
            pe = sinusoidal_pe(F_da.shape[-2], F_da.shape[-1], F_da.dtype).to(F_da.device)
            a, b = a + pe, b + pe
        q, k, v = self.w_q(a), self.w_k(b), self.w_v(a)
        M_ba = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_attn), dim=-1)
        F_ca = M_ba @ v
        residual = F_da + self.proj(F_ca)
        x = self.norm1(residual)
        F_ba = self.norm2(x + self.ff(x))
        if details:
            return F_ba, {"M_ba": M_ba, "F_ca": F_ca, "residual": residual}
        return F_ba


@dataclass
class FdnOutput:
    y_f: torch.Tensor
    y_b: torch.Tensor
    F_ba: torch.Tensor
    cos_f: torch.Tensor
    cos_b: torch.Tensor
    F_da: torch.Tensor


class FDN(nn.Module):
    def __init__(self, cfg: ModelConfig, in_dim: int):
        super().__init__()
        self.cfg = cfg
        self.in_dim = in_dim
        d = cfg.feature_dim
        self.register_buffer("feat_mean", torch.zeros(in_dim))
        self.register_buffer("feat_std", torch.ones(in_dim))
        self.proj = nn.Linear(in_dim, cfg.model_dim)
        self.res_stack = ResidualStack(cfg.model_dim, cfg.channels, cfg.spectral_bins)
        self.dafl = DualAttention(cfg.channels, cfg.spectral_bins)
        self.boundary_encoder = nn.Sequential(
            AMLPBlock(d, cfg.amlp_hidden_ratio, cfg.amlp_attn_dim),
            AMLPBlock(d, cfg.amlp_hidden_ratio, cfg.amlp_attn_dim),
        )
        self.boundary_head = CosineHead(d)
        self.fusion = CrossAttentionFusion(d, cfg.attn_dim, use_pe=cfg.use_pe)
        self.decoder = AMLPBlock(d, cfg.amlp_hidden_ratio, cfg.amlp_attn_dim)
        self.frame_head = CosineHead(d)

    def set_input_stats(self, mean, std) -> None:
        self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.feat_mean.dtype))
        std = torch.as_tensor(std, dtype=self.feat_std.dtype)
        self.feat_std.copy_(torch.clamp(std, min=1e-5))

    def spectro(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T, in_dim) -> F_sc of shape (B, C, T, S)."""
        x = (feats - self.feat_mean) / self.feat_std
        F_ssl = self.proj(x)
        return self.res_stack(F_ssl.unsqueeze(1))

    def head(self, F_sc: torch.Tensor) -> FdnOutput:
        F_s, F_c = split_spectral_channel(F_sc)
        F_da = self.dafl(F_s, F_c)
        if self.cfg.use_bafe:
            F_b = self.boundary_encoder(F_da)
            cos_b, y_b = self.boundary_head(F_b)
            F_ba = self.fusion(F_da, F_b)
        else:
            F_ba = F_da
            cos_b = torch.zeros(*F_da.shape[:-1], 2, dtype=F_da.dtype, device=F_da.device)
            y_b = torch.full(F_da.shape[:-1], 0.5, dtype=F_da.dtype, device=F_da.device)
        cos_f, y_f = self.frame_head(self.decoder(F_ba))
        return FdnOutput(y_f=y_f, y_b=y_b, F_ba=F_ba, cos_f=cos_f, cos_b=cos_b, F_da=F_da)

    def forward(self, feats: torch.Tensor) -> FdnOutput:
        squeeze = feats.dim() == 2
        if squeeze:
            feats = feats.unsqueeze(0)
        out = self.head(self.spectro(feats))
        if squeeze:
            out = FdnOutput(*(getattr(out, f)[0] for f in FdnOutput.__dataclass_fields__))
        return out


def fdn_forward(feats, model: FDN) -> FdnOutput:
    """Run the FDN on one clip's (T, in_dim) features (numpy or tensor)."""
    p = next(model.parameters())
    x = torch.as_tensor(np.asarray(feats) if not torch.is_tensor(feats) else feats,
                        dtype=p.dtype, device=p.device)
    return model(x)


def fdn_loss(out: FdnOutput, y_fake, y_boundary, pairs, lambda_c: float = 0.15,
             lambda_b: float = 0.1, alpha: float = 0.3, use_bafe: bool = True):
    """Weighted FDN objective for a single clip; returns (total, L_f, L_c, L_b)."""
    L_f = p2sgrad_mse(out.cos_f, y_fake)
    L_c = crl_loss(out.F_da, pairs=pairs, alpha=alpha)
    if use_bafe:
        L_b = p2sgrad_mse(out.cos_b, y_boundary)
    else:
        L_b = torch.zeros((), dtype=L_f.dtype, device=L_f.device)
    return combine_fdn_loss(L_f, L_c, L_b, lambda_c, lambda_b), L_f, L_c, L_b


def combine_fdn_loss(L_f, L_c, L_b, lambda_c: float = 0.15, lambda_b: float = 0.1):
    return L_f + lambda_c * L_c + lambda_b * L_b
