"""Proposal refinement network: coarse proposals, region pooling, typing, heads and losses."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import _kernels
from .corpus import ForgerySegment
from .metrics import tiou

logger = logging.getLogger(__name__)

MOSTLY_COMPLETE_TIOU = 0.7
INCOMPLETE_TIOU = 0.4


class ProposalType(str, enum.Enum):
    MOSTLY_COMPLETE = "mostly_complete"
    INCOMPLETE = "incomplete"
    NEGATIVE = "negative"


@dataclass
class ProposalInterval:
    start_s: float
    dur_s: float
    score: float | None = None

    @property
    def end_s(self) -> float:
        return self.start_s + self.dur_s

    def to_json(self) -> dict:
        return {"start_s": self.start_s, "dur_s": self.dur_s,
                "score": None if self.score is None else float(self.score)}


@dataclass
class TypedProposal:
    interval: ProposalInterval
    tiou: float
    type: ProposalType
    matched_gt: ForgerySegment | None = None
    offset_labels: tuple[float, float] | None = None
    region_feature: np.ndarray | None = None
    predicted_confidence: float | None = None
    predicted_offsets: tuple[float, float] | None = None

    def to_json(self) -> dict:
        d = self.interval.to_json()
        d.update(tiou=self.tiou, type=self.type.value,
                 offsets=None if self.offset_labels is None else list(self.offset_labels))
        return d


def extract_coarse_proposals(y_f, theta_f: float = 0.5, frame_period_s: float = 0.02
                             ) -> list[ProposalInterval]:
    """Maximal runs of frames with score > theta_f, scored by their mean frame score."""
    y = np.asarray(y_f, dtype=np.float64)
    starts, lengths = _kernels.runs_above(y, theta_f)
    out = []
    for s, n in zip(starts.tolist(), lengths.tolist()):
        out.append(ProposalInterval(round(s * frame_period_s, 10), round(n * frame_period_s, 10),
                                    float(y[s:s + n].mean())))
    return out


def proposal_type(t: float) -> ProposalType:
    if t > MOSTLY_COMPLETE_TIOU:
        return ProposalType.MOSTLY_COMPLETE
    if INCOMPLETE_TIOU <= t < MOSTLY_COMPLETE_TIOU:
        return ProposalType.INCOMPLETE
    return ProposalType.NEGATIVE


def encode_offsets(gt, proposal) -> tuple[float, float]:
    """(shift, log-duration) offsets of ``gt`` relative to ``proposal``."""
    if gt.dur_s <= 0 or proposal.dur_s <= 0:
        raise ValueError("offsets need positive durations")
    r_s = (gt.start_s - proposal.start_s) / gt.dur_s
    r_d = math.log(gt.dur_s / proposal.dur_s)
    return r_s, r_d


def decode_offsets(proposal, r_s: float, r_d: float, clip_duration_s: float | None = None,
                   min_dur_s: float = 1e-3, score: float | None = None) -> ProposalInterval:
    """Inverse of :func:`encode_offsets`, clamped to the clip when a duration is given."""
    dur = proposal.dur_s * math.exp(r_d)
    start = proposal.start_s + r_s * dur
    if clip_duration_s is not None:
        start = min(max(start, 0.0), max(clip_duration_s - min_dur_s, 0.0))
        end = min(start + dur, clip_duration_s)
        dur = max(end - start, min_dur_s)
    return ProposalInterval(start, dur, proposal.score if score is None else score)


def match_and_type(proposals, gts) -> list[TypedProposal]:
    """Match each proposal to its best-TIoU ground truth and assign its type.

    Offset labels (and the matched segment) are attached when TIoU >= 0.4.
    """
    out = []
    for p in proposals:
        best, best_gt = 0.0, None
        for g in gts:
            t = tiou(p, g)
            if t > best:
                best, best_gt = t, g
        kind = proposal_type(best)
        if best >= INCOMPLETE_TIOU:
            out.append(TypedProposal(p, best, kind, best_gt, encode_offsets(best_gt, p)))
        else:
            out.append(TypedProposal(p, best, kind))
    return out


def region_frames(proposal, n_frames: int, frame_period_s: float = 0.02) -> tuple[int, int]:
    first = int(round(proposal.start_s / frame_period_s))
    length = max(1, int(round(proposal.dur_s / frame_period_s)))
    if first < 0 or first + length > n_frames:
        raise ValueError(f"proposal [{proposal.start_s}, {proposal.end_s}) lies outside "
                         f"the {n_frames}-frame feature range")
    return first, length


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class MaskedBatchNorm1d(nn.BatchNorm1d):
    """Batch norm over (N, C, L) whose statistics ignore padded positions."""

    def forward(self, x, mask):
        if self.training:
            m = mask.to(x.dtype)
            count = m.sum()
            mean = (x * m).sum(dim=(0, 2)) / count
            var = (((x - mean[None, :, None]) * m) ** 2).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * count / max(float(count) - 1.0, 1.0)
                self.num_batches_tracked += 1
                # momentum None means a cumulative average, as in torch's BatchNorm
                mom = (1.0 / float(self.num_batches_tracked) if self.momentum is None
                       else self.momentum)
                self.running_mean.mul_(1 - mom).add_(mom * mean.detach())
                self.running_var.mul_(1 - mom).add_(mom * unbiased.detach())
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        y = y * self.weight[None, :, None] + self.bias[None, :, None]
        return y * mask.to(x.dtype)


class ResBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.bn1 = MaskedBatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.bn2 = MaskedBatchNorm1d(c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, mask):
        m = mask.to(x.dtype)
        h = F.selu(self.bn1(self.conv1(x) * m, mask))
        h = self.bn2(self.conv2(h) * m, mask)
        skip = x if self.skip is None else self.skip(x) * m
        return F.selu(h + skip) * m


N_EXTRA_CHANNELS = 5


@dataclass
class Region:
    """PRN input for one proposal: a context-widened slice plus extra channels."""
    x: torch.Tensor
    first: int
    last: int
    zone: int


def _score_slice(y, lo: int, hi: int, like: torch.Tensor) -> torch.Tensor:
    if y is None:
        return torch.full((hi - lo,), 0.5, dtype=like.dtype, device=like.device)
    y = y[lo:hi] if torch.is_tensor(y) else np.asarray(y[lo:hi])
    return torch.as_tensor(y, dtype=like.dtype, device=like.device)


def region_input(F_ba: torch.Tensor, first: int, length: int, ctx: int, y_f=None, y_b=None
                 ) -> Region:
    """Rows [first - ctx, first + length + ctx) of F_ba with five per-frame channels.

    The extra channels are the frame and boundary scores, an inside-proposal
    mask and the position relative to the proposal start and end (in
    proposal lengths).
    """
    n = F_ba.shape[0]
    lo, hi = max(0, first - ctx), min(n, first + length + ctx)
    t = torch.arange(lo, hi, dtype=F_ba.dtype, device=F_ba.device)
    inside = ((t >= first) & (t < first + length)).to(F_ba.dtype)
    pos_start = (t - first) / length
    pos_end = (first + length - 1 - t) / length
    extra = torch.stack([_score_slice(y_f, lo, hi, F_ba), _score_slice(y_b, lo, hi, F_ba),
                         inside, pos_start, pos_end], dim=1)
    return Region(torch.cat([F_ba[lo:hi], extra], dim=1), first - lo, first + length - 1 - lo, ctx)


class PRN(nn.Module):
    """Two masked residual conv blocks, a verification head and a boundary head.

    The TRoI feature concatenates max-pools over the start zone, the whole
    region and the end zone, each zone spanning ``context`` frames either
    side of a proposal boundary. Offsets come from a soft-argmax of per-frame
    start/end logits inside the two zones, converted to (r_s, r_d).
    """

    def __init__(self, d_in: int, d_out: int = 64, hidden: int = 64, context_ratio: float = 0.25,
                 context_min: int = 2):
        super().__init__()
        self.context_ratio = context_ratio
        self.context_min = context_min
        self.block1 = ResBlock1d(d_in + N_EXTRA_CHANNELS, d_out)
        self.block2 = ResBlock1d(d_out, d_out)
        self.d_roi = 3 * d_out
        self.verify = nn.Sequential(nn.Linear(self.d_roi, hidden), nn.SELU(), nn.Linear(hidden, 1))
        self.boundary = nn.Conv1d(d_out, 2, 1)

    def context(self, length: int) -> int:
        return max(self.context_min, int(round(self.context_ratio * length)))

    def regions(self, F_ba: torch.Tensor, proposals, frame_period_s: float = 0.02, y_f=None,
                y_b=None) -> list[Region]:
        out = []
        for p in proposals:
            first, length = region_frames(p, F_ba.shape[0], frame_period_s)
            out.append(region_input(F_ba, first, length, self.context(length), y_f, y_b))
        return out

    def encode(self, regions: list[Region]):
        """Padded batch -> (features (N, d_out, L), valid mask, zone masks, rel. positions)."""
        lmax = max(r.x.shape[0] for r in regions)
        d = regions[0].x.shape[1]
        x = regions[0].x.new_zeros(len(regions), d, lmax)
        mask = torch.zeros(len(regions), 1, lmax, dtype=torch.bool, device=x.device)
        zones = torch.zeros(len(regions), 2, lmax, dtype=torch.bool, device=x.device)
        rel = x.new_zeros(len(regions), 2, lmax)
        t = torch.arange(lmax, device=x.device)
        for i, r in enumerate(regions):
            n = r.x.shape[0]
            x[i, :, :n] = r.x.transpose(0, 1)
            mask[i, 0, :n] = True
            zones[i, 0] = ((t - r.first).abs() <= r.zone) & (t < n)
            zones[i, 1] = ((t - r.last).abs() <= r.zone) & (t < n)
            rel[i, 0] = t - r.first
            rel[i, 1] = t - r.last
        h = self.block2(self.block1(x, mask), mask)
        return h, mask, zones, rel

    def _pool(self, h, mask, zones) -> torch.Tensor:
        pooled = [h.masked_fill(~m, float("-inf")).max(dim=2).values
                  for m in (zones[:, :1], mask, zones[:, 1:])]
        return torch.cat(pooled, dim=1)

    def _offsets(self, h, zones, rel, lengths) -> torch.Tensor:
        logits = self.boundary(h).masked_fill(~zones, float("-inf"))
        shift = (torch.softmax(logits, dim=2) * rel).sum(dim=2)
        dur = (lengths + shift[:, 1] - shift[:, 0]).clamp(min=0.5)
        return torch.stack([shift[:, 0] / dur, torch.log(dur / lengths)], dim=1)

    def pool(self, regions: list[Region]) -> torch.Tensor:
        """Regions -> TRoI features (H, 3 * d_out)."""
        if not regions:
            p = self.verify[0].weight
            return torch.zeros(0, self.d_roi, dtype=p.dtype, device=p.device)
        h, mask, zones, _ = self.encode(regions)
        return self._pool(h, mask, zones)

    def forward(self, regions: list[Region]):
        """(TRoI features, confidences (H,), offsets (H, 2) as (r_s, r_d))."""
        if not regions:
            F_r = self.pool(regions)
            return F_r, F_r.new_zeros(0), F_r.new_zeros(0, 2)
        h, mask, zones, rel = self.encode(regions)
        F_r = self._pool(h, mask, zones)
        conf = torch.sigmoid(self.verify(F_r)[:, 0])
        lengths = h.new_tensor([float(r.last - r.first + 1) for r in regions])
        return F_r, conf, self._offsets(h, zones, rel, lengths)


def pool_region(F_ba: torch.Tensor, proposal, model: PRN, frame_period_s: float = 0.02,
                y_f=None, y_b=None) -> torch.Tensor:
    """TRoI feature of one proposal."""
    return model.pool(model.regions(F_ba, [proposal], frame_period_s, y_f, y_b))[0]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def balance_negatives(types, rng: np.random.Generator) -> np.ndarray:
    """Indices entering the verification loss.

    Positives are mostly-complete proposals, negatives are negative ones;
    incomplete proposals are left out. Negatives are subsampled without
    replacement down to the positive count when positives exist.
    """
    types = list(types)
    pos = [i for i, t in enumerate(types) if t == ProposalType.MOSTLY_COMPLETE]
    neg = [i for i, t in enumerate(types) if t == ProposalType.NEGATIVE]
    if pos and len(neg) > len(pos):
        neg = sorted(rng.choice(neg, size=len(pos), replace=False).tolist())
    return np.array(sorted(pos + neg), dtype=np.int64)


def verification_loss(conf: torch.Tensor, types, rng: np.random.Generator | None = None,
                      indices=None) -> torch.Tensor:
    """Binary cross-entropy over the balanced sample (probabilities clipped at 1e-7)."""
    if indices is None:
        indices = balance_negatives(types, rng or np.random.default_rng(0))
    if len(indices) == 0:
        logger.warning("verification loss over an empty sample; returning 0")
        return conf.sum() * 0.0
    idx = torch.as_tensor(indices, device=conf.device)
    target = torch.tensor([1.0 if types[i] == ProposalType.MOSTLY_COMPLETE else 0.0
                           for i in indices], dtype=conf.dtype, device=conf.device)
    c = conf[idx].clamp(1e-7, 1 - 1e-7)
    return -(target * torch.log(c) + (1 - target) * torch.log(1 - c)).mean()


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def regression_loss(pred: torch.Tensor, labels, tious) -> torch.Tensor:
    """Per-component smooth-L1 summed, averaged over proposals with TIoU >= 0.4."""
    keep = [i for i, t in enumerate(tious) if t >= INCOMPLETE_TIOU]
    if not keep:
        logger.debug("regression loss without positive proposals; returning 0")
        return pred.sum() * 0.0
    idx = torch.as_tensor(keep, device=pred.device)
    target = torch.as_tensor(np.asarray([labels[i] for i in keep], dtype=np.float64),
                             dtype=pred.dtype, device=pred.device)
    return smooth_l1(target - pred[idx]).sum(dim=1).mean()


def prn_loss(L_v, L_reg, lambda_r: float = 0.15):
    return L_v + lambda_r * L_reg
