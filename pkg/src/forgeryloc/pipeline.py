"""Two-step training, inference with Soft-NMS, checkpoints and gradient checks."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import _kernels
from .config import Config, ModelConfig
from .corpus import CorpusManifest, ForgerySegment, rasterize_labels
from .fdn import FDN, FdnOutput, fdn_loss, sample_pairs
from .frontend import extract_features, load_external_features
from .prn import (PRN, ProposalInterval, ProposalType, balance_negatives, decode_offsets,
                  extract_coarse_proposals, match_and_type, prn_loss, regression_loss,
                  verification_loss)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "forgeryloc.checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class ClipData:
    id: str
    feats: np.ndarray
    y_fake: np.ndarray
    y_boundary: np.ndarray
    segments: list[ForgerySegment]
    duration_s: float
    frame_period_s: float = 0.02

    @property
    def n_frames(self) -> int:
        return self.feats.shape[0]


def clip_features(manifest: CorpusManifest, record, cfg: Config) -> np.ndarray:
    if cfg.frontend.external_dim:
        path = manifest.root / "features" / f"{record.id}.tfrf"
        return load_external_features(path, cfg.frontend.external_dim).data
    clip = manifest.load_clip(record)
    return extract_features(clip.samples, cfg.frontend, clip.sample_rate).data


def prepare_clips(manifest: CorpusManifest, cfg: Config) -> list[ClipData]:
    """Features plus rasterized labels for every clip of a corpus."""
    period = cfg.frontend.hop_s
    out = []
    for r in manifest.clips:
        feats = clip_features(manifest, r, cfg)
        track = rasterize_labels(r.segments, r.duration_s, period)
        t = min(len(feats), track.n_frames)
        out.append(ClipData(r.id, feats[:t].astype(np.float32), track.y_fake[:t],
                            track.y_boundary[:t], list(r.segments), r.duration_s, period))
    return out


def in_dim_for(cfg: Config) -> int:
    return cfg.frontend.external_dim or cfg.frontend.n_mels


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _plain(obj):
    # weights-only loading accepts builtins only, so numpy scalars must go
    return json.loads(json.dumps(obj, default=lambda v: v.item() if hasattr(v, "item") else str(v)))


@dataclass
class Checkpoint:
    stage: str
    params: dict[str, torch.Tensor]
    config: dict
    in_dim: int
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "in_dim": self.in_dim,
            "config": _plain(self.config),
            "params": {k: v.detach().cpu().clone() for k, v in self.params.items()},
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "history": _plain(self.history),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-", suffix=".pt")
        try:
            with os.fdopen(fd, "wb") as fh:
                torch.save(payload, fh)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a forgeryloc checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
        for k, v in payload["params"].items():
            if list(v.shape) != payload["shapes"][k]:
                raise CheckpointError(f"shape metadata mismatch for {k}")
        return cls(payload["stage"], payload["params"], payload["config"], payload["in_dim"],
                   payload.get("history", []))

    def config_obj(self) -> Config:
        return Config.from_dict(self.config)


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_fdn(model_cfg: ModelConfig, in_dim: int) -> FDN:
    return FDN(model_cfg, in_dim)


def build_prn(model_cfg: ModelConfig) -> PRN:
    return PRN(model_cfg.feature_dim, model_cfg.prn_dim, model_cfg.prn_hidden,
               model_cfg.prn_context_ratio, model_cfg.prn_context_min)


def fdn_from_checkpoint(ckpt: Checkpoint) -> FDN:
    if ckpt.stage != "fdn":
        raise CheckpointError(f"expected an fdn checkpoint, got stage {ckpt.stage!r}")
    model = build_fdn(ckpt.config_obj().model, ckpt.in_dim)
    model.load_state_dict(ckpt.params)
    return model.eval()


def prn_from_checkpoint(ckpt: Checkpoint) -> PRN:
    if ckpt.stage != "prn":
        raise CheckpointError(f"expected a prn checkpoint, got stage {ckpt.stage!r}")
    model = build_prn(ckpt.config_obj().model)
    model.load_state_dict(ckpt.params)
    return model.eval()


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size].tolist()


def _log_epoch(log_path, row: dict) -> None:
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(row) + "\n")


def _check_finite(loss: torch.Tensor, epoch: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {what} at epoch {epoch}: {loss.item()}")


def train_fdn(clips: list[ClipData], cfg: Config, log_path=None, model: FDN | None = None
              ) -> tuple[FDN, list[dict]]:
    """Adam on the weighted FDN objective over seeded mini-batches of clips."""
    tc = cfg.train_fdn
    torch.manual_seed(tc.seed)
    in_dim = clips[0].feats.shape[1]
    if model is None:
        model = build_fdn(cfg.model, in_dim)
        stacked = np.concatenate([c.feats for c in clips])
        model.set_input_stats(stacked.mean(0), stacked.std(0))
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    history = []
    if log_path is not None:
        Path(log_path).write_text("")
    model.train()
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        n_batches = 0
        for batch in _batches(len(clips), tc.batch_size, rng):
            group = [clips[i] for i in batch]
            if len({c.n_frames for c in group}) == 1:
                x = torch.as_tensor(np.stack([c.feats for c in group]))
                outs = model(x)
                per_clip = [(outs, k) for k in range(len(group))]
            else:
                per_clip = [(model(torch.as_tensor(c.feats)[None]), 0) for c in group]
            losses = []
            for (out, k), c in zip(per_clip, group):
                pairs = sample_pairs(c.y_fake, tc.pairs_per_frame * c.n_frames, rng)
                one = _select(out, k)
                losses.append(fdn_loss(one, c.y_fake, c.y_boundary, pairs, tc.lambda_c,
                                       tc.lambda_b, tc.alpha, cfg.model.use_bafe))
            total = torch.stack([l[0] for l in losses]).mean()
            _check_finite(total, epoch, "FDN loss")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [float(torch.stack([l[i].detach() for l in losses]).mean()) for i in range(4)]
            n_batches += 1
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch, "L_total": means[0], "L_f": means[1], "L_c": means[2],
               "L_b": means[3], "wall_s": time.perf_counter() - t0}
        history.append(row)
        _log_epoch(log_path, row)
        logger.info("fdn epoch %d: L_total=%.4f L_f=%.4f L_c=%.4f L_b=%.4f", epoch, *means)
    return model.eval(), history


def _select(out, k):
    return FdnOutput(*(getattr(out, f)[k] for f in FdnOutput.__dataclass_fields__))


@torch.no_grad()
def run_fdn(model: FDN, clips: Iterable[ClipData]):
    """Frozen forward pass; returns per-clip (y_f, y_b, F_ba) as float32 tensors."""
    model.eval()
    out = {}
    for c in clips:
        o = model(torch.as_tensor(c.feats))
        out[c.id] = (o.y_f.clone(), o.y_b.clone(), o.F_ba.clone())
    return out


def training_proposals(c: ClipData, y_f: np.ndarray, cfg: Config, rng: np.random.Generator
                       ) -> list[ProposalInterval]:
    """Coarse proposals at several thresholds plus jittered and random intervals."""
    tc = cfg.train_prn
    p = c.frame_period_s
    n = c.n_frames
    seen = set()
    out = []

    def add(first, length, score=None):
        first = int(np.clip(first, 0, n - 1))
        length = int(np.clip(length, 1, n - first))
        if (first, length) not in seen:
            seen.add((first, length))
            out.append(ProposalInterval(round(first * p, 10), round(length * p, 10), score))

    for thr in tc.proposal_thresholds:
        for prop in extract_coarse_proposals(y_f, thr, p):
            add(int(round(prop.start_s / p)), int(round(prop.dur_s / p)), prop.score)
    for seg in c.segments:
        first, length = int(round(seg.start_s / p)), int(round(seg.dur_s / p))
        for _ in range(tc.jitter_per_gt):
            scale = np.exp(rng.uniform(-tc.jitter_scale, tc.jitter_scale) * 2)
            new_len = max(1, int(round(length * scale)))
            centre = first + length / 2 + rng.uniform(-tc.jitter_scale, tc.jitter_scale) * length
            add(int(round(centre - new_len / 2)), new_len)
    for _ in range(tc.random_negatives):
        length = int(rng.integers(1, max(2, min(n, 50))))
        add(int(rng.integers(0, max(1, n - length + 1))), length)
    return out


def train_prn(clips: list[ClipData], fdn: FDN, cfg: Config, log_path=None
              ) -> tuple[PRN, list[dict]]:
    """Train the refinement heads on frozen FDN outputs."""
    tc = cfg.train_prn
    torch.manual_seed(tc.seed)
    for p in fdn.parameters():
        p.requires_grad_(False)
    cache = run_fdn(fdn, clips)
    model = build_prn(cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    history = []
    if log_path is not None:
        Path(log_path).write_text("")
    for epoch in range(1, tc.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        sums = np.zeros(3)
        correct = total_seen = 0
        n_batches = 0
        for batch in _batches(len(clips), tc.batch_size, rng):
            regions, typed = [], []
            for i in batch:
                c = clips[i]
                y_f, y_b, F_ba = cache[c.id]
                props = training_proposals(c, y_f.numpy(), cfg, rng)
                if not props:
                    continue
                regions += model.regions(F_ba, props, c.frame_period_s, y_f, y_b)
                typed += match_and_type(props, c.segments)
            if not typed:
                continue
            _, conf, offsets = model(regions)
            types = [t.type for t in typed]
            idx = balance_negatives(types, rng)
            L_v = verification_loss(conf, types, indices=idx)
            L_reg = regression_loss(offsets, [t.offset_labels for t in typed],
                                    [t.tiou for t in typed])
            loss = prn_loss(L_v, L_reg, tc.lambda_r)
            _check_finite(loss, epoch, "PRN loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [float(loss.detach()), float(L_v.detach()), float(L_reg.detach())]
            n_batches += 1
            with torch.no_grad():
                for i, t in enumerate(types):
                    if t != ProposalType.INCOMPLETE:
                        correct += int((conf[i] >= 0.5) == (t == ProposalType.MOSTLY_COMPLETE))
                        total_seen += 1
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch, "L_total": means[0], "L_v": means[1], "L_reg": means[2],
               "verify_acc": correct / max(total_seen, 1), "wall_s": time.perf_counter() - t0}
        history.append(row)
        _log_epoch(log_path, row)
        logger.info("prn epoch %d: L=%.4f L_v=%.4f L_reg=%.4f acc=%.3f", epoch, *means,
                    row["verify_acc"])
    recalibrate_batchnorm(model, clips, cache, cfg)
    return model.eval(), history


@torch.no_grad()
def recalibrate_batchnorm(model: PRN, clips: list[ClipData], cache: dict, cfg: Config) -> None:
    """Replace the running BN statistics by exact averages under the final weights.

    The exponential running averages lag behind the weights and small
    proposal batches make them noisy; one pass over the training proposals
    with a cumulative average removes the resulting offset bias.
    """
    tc = cfg.train_prn
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm1d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    rng = np.random.default_rng(tc.seed + 1)
    model.train()
    for batch in _batches(len(clips), tc.batch_size, rng):
        regions = []
        for i in batch:
            c = clips[i]
            y_f, y_b, F_ba = cache[c.id]
            regions += model.regions(F_ba, training_proposals(c, y_f.numpy(), cfg, rng),
                                     c.frame_period_s, y_f, y_b)
        if regions:
            model(regions)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def soft_nms(proposals: list[ProposalInterval], sigma: float = 0.5, min_score: float = 0.001
             ) -> list[ProposalInterval]:
    """Gaussian Soft-NMS: overlapping proposals decay by exp(-TIoU^2 / sigma)."""
    if not proposals:
        return []
    starts = np.array([p.start_s for p in proposals])
    ends = np.array([p.end_s for p in proposals])
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    order, final = _kernels.soft_nms(starts, ends, scores, sigma, min_score)
    return [ProposalInterval(proposals[i].start_s, proposals[i].dur_s, float(s))
            for i, s in zip(order.tolist(), final.tolist())]


def snap_interval(p: ProposalInterval, frame_period_s: float, duration_s: float | None = None
                  ) -> ProposalInterval:
    """Round both ends to the frame grid, keeping at least one frame."""
    n_max = None if duration_s is None else int(round(duration_s / frame_period_s))
    first = int(round(p.start_s / frame_period_s))
    last = max(int(round(p.end_s / frame_period_s)), first + 1)
    if n_max is not None:
        last = min(last, n_max)
        first = min(first, last - 1)
    return ProposalInterval(round(first * frame_period_s, 10),
                            round((last - first) * frame_period_s, 10), p.score)


@dataclass
class InferenceResult:
    frame_scores: np.ndarray
    boundary_scores: np.ndarray
    coarse: list[ProposalInterval]
    verified: list[ProposalInterval]
    proposals: list[ProposalInterval]


@torch.no_grad()
def refine_proposals(y_f, y_b, F_ba: torch.Tensor, prn: PRN, cfg: Config, duration_s: float,
                     frame_period_s: float = 0.02):
    """Coarse proposals -> verification filter -> offset decoding -> Soft-NMS.

    Returns (coarse, verified-before-NMS, final) proposal lists.
    """
    ic = cfg.inference
    coarse = extract_coarse_proposals(np.asarray(y_f), ic.theta_f, frame_period_s)
    if not coarse:
        return [], [], []
    prn.eval()
    regions = prn.regions(F_ba, coarse, frame_period_s, y_f, y_b)
    _, conf, offsets = prn(regions)
    verified = []
    for p, c, (r_s, r_d) in zip(coarse, conf.tolist(), offsets.tolist()):
        if c >= ic.theta_p:
            fine = decode_offsets(p, r_s, r_d, duration_s, frame_period_s, score=c)
            if ic.snap_to_frames:
                fine = snap_interval(fine, frame_period_s, duration_s)
            verified.append(fine)
    return coarse, verified, soft_nms(verified, ic.nms_sigma, ic.nms_min_score)


@torch.no_grad()
def infer(feats, fdn: FDN, prn: PRN, cfg: Config, duration_s: float | None = None,
          frame_period_s: float = 0.02) -> InferenceResult:
    fdn.eval()
    x = torch.as_tensor(np.asarray(feats, dtype=np.float32))
    out = fdn(x)
    if duration_s is None:
        duration_s = x.shape[0] * frame_period_s
    coarse, verified, fine = refine_proposals(out.y_f.numpy(), out.y_b.numpy(), out.F_ba, prn,
                                              cfg, duration_s, frame_period_s)
    return InferenceResult(out.y_f.numpy().astype(np.float64), out.y_b.numpy().astype(np.float64),
                           coarse, verified, fine)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
               eps: float = 1e-5, max_per_tensor: int | None = None, seed: int = 0,
               floor: float = 1e-6) -> float:
    """Worst relative error between autograd and central finite differences.

    Relative error per scalar is ``|a - n| / max(|a| + |n|, floor)``; the
    floor keeps gradients that are zero up to rounding (say, biases feeding
    a batch norm) from dividing finite-difference noise by ~0. Run in
    float64. ``max_per_tensor`` checks a seeded random subset of each tensor.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and idx.size > max_per_tensor:
                idx = rng.choice(idx, size=max_per_tensor, replace=False)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss_fn().item()
                flat[i] = orig - eps
                lm = loss_fn().item()
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                ana = gflat[i].item()
                err = abs(num - ana) / max(abs(num) + abs(ana), floor)
                worst = max(worst, err)
    return worst


def tiny_model_config() -> ModelConfig:
    """Desk-scale dimensions used by the gradient checks and fast tests."""
    return ModelConfig(model_dim=8, channels=4, spectral_bins=4, attn_dim=4, amlp_attn_dim=4,
                       prn_dim=4, prn_hidden=4, prn_context_min=1)


def standard_grad_checks(seed: int = 0, n_frames: int = 8, in_dim: int = 6,
                         max_per_tensor: int | None = 4, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error of every training loss on a random float64 instance."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    mcfg = tiny_model_config()
    fdn = build_fdn(mcfg, in_dim).double().train()
    x = torch.as_tensor(rng.standard_normal((n_frames, in_dim)))
    y_fake = np.zeros(n_frames, dtype=np.int64)
    y_fake[n_frames // 4: n_frames // 4 + max(2, n_frames // 3)] = 1
    y_bound = np.zeros(n_frames, dtype=np.int64)
    runs = np.flatnonzero(np.diff(np.concatenate([[0], y_fake, [0]])))
    y_bound[runs[0]] = y_bound[runs[1] - 1] = 1
    pairs = sample_pairs(y_fake, 4 * n_frames, rng)
    fdn_params = list(fdn.parameters())

    def fdn_terms():
        return fdn_loss(fdn(x), y_fake, y_bound, pairs)

    report = {
        "L_f": grad_check(lambda: fdn_terms()[1], fdn_params, eps, max_per_tensor, seed),
        "L_c": grad_check(lambda: fdn_terms()[2], fdn_params, eps, max_per_tensor, seed),
        "L_b": grad_check(lambda: fdn_terms()[3], fdn_params, eps, max_per_tensor, seed),
        "L_FDN": grad_check(lambda: fdn_terms()[0], fdn_params, eps, max_per_tensor, seed),
    }

    prn = build_prn(mcfg).double().train()
    F_ba = torch.as_tensor(rng.standard_normal((n_frames, mcfg.feature_dim)))
    y_f = rng.uniform(0, 1, n_frames)
    p = 0.02
    first = int(runs[0])
    length = int(runs[1] - runs[0])
    gt = [ForgerySegment(first * p, length * p)]
    props = [ProposalInterval(first * p, length * p, 0.9),
             ProposalInterval((first + 1) * p, max(1, length - 1) * p, 0.7),
             ProposalInterval(0.0, 1 * p, 0.6)]
    typed = match_and_type(props, gt)
    types = [t.type for t in typed]
    idx = np.arange(len(typed))
    regions = prn.regions(F_ba, props, p, y_f)

    def prn_terms():
        _, conf, offsets = prn(regions)
        L_v = verification_loss(conf, types, indices=idx)
        L_reg = regression_loss(offsets, [t.offset_labels for t in typed], [t.tiou for t in typed])
        return prn_loss(L_v, L_reg), L_v, L_reg

    prn_params = list(prn.parameters())
    report["L_v"] = grad_check(lambda: prn_terms()[1], prn_params, eps, max_per_tensor, seed)
    report["L_reg"] = grad_check(lambda: prn_terms()[2], prn_params, eps, max_per_tensor, seed)
    report["L_PRN"] = grad_check(lambda: prn_terms()[0], prn_params, eps, max_per_tensor, seed)
    return report
