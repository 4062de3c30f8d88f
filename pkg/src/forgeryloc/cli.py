"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config
from .corpus import (CorpusError, InfeasibleConfigError, generate_corpus, load_corpus,
                     rasterize_labels, read_wav, write_corpus)
from .frontend import FeatureError, extract_features, load_external_features
from .metrics import AP_REPORT_THRESHOLDS, AR_REPORT_N, MetricError, pfd_report, tfl_report
from .pipeline import (Checkpoint, CheckpointError, TrainingDivergedError, clip_features,
                       fdn_from_checkpoint, in_dim_for, infer, prepare_clips, prn_from_checkpoint,
                       standard_grad_checks, train_fdn, train_prn)

logger = logging.getLogger("forgeryloc")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


def _manifest_path(out: Path) -> Path:
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


def _config(args) -> Config:
    return load_config(args.config)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_checkpoint(path, flag: str) -> Checkpoint:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).exists():
        raise UsageError(f"{flag}: checkpoint not found: {path}")
    return Checkpoint.load(path)


def _read_predictions(path) -> dict[str, dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"predictions not found: {path}")
    preds = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{lineno}: invalid JSON") from exc
            preds[row["id"]] = row
    return preds


def _join(preds: dict, manifest) -> list:
    ids = {r.id for r in manifest.clips}
    missing = sorted(ids - set(preds))
    extra = sorted(set(preds) - ids)
    if missing or extra:
        msg = []
        if missing:
            msg.append(f"missing predictions for: {', '.join(missing)}")
        if extra:
            msg.append(f"predictions for unknown clips: {', '.join(extra)}")
        raise UsageError("; ".join(msg))
    return [(r, preds[r.id]) for r in manifest.clips]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    cc = cfg.corpus
    if args.seed is not None:
        cc = dataclasses.replace(cc, seed=args.seed)
    if args.n_clips is not None:
        cc = dataclasses.replace(cc, n_clips=args.n_clips)
    out = Path(args.out)
    clips = generate_corpus(cc)
    manifest = write_corpus(clips, out, cc.seed, cc)
    total = sum(r.duration_s for r in manifest.clips)
    print(f"wrote {len(manifest.clips)} clips, {total:.2f} s total, to {out}")
    RunManifest("gen", args.config, dataclasses.asdict(cc), {}, {"corpus": str(out)},
                cc.seed).write(_manifest_path(out))
    return 0


def cmd_train_fdn(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.train_fdn.seed = args.seed
    manifest = load_corpus(args.corpus)
    clips = prepare_clips(manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.stem + ".log.jsonl")
    model, history = train_fdn(clips, cfg, log_path=log_path)
    Checkpoint("fdn", dict(model.state_dict()), cfg.to_dict(), in_dim_for(cfg), history).save(out)
    if history:
        print(f"fdn: {len(history)} epochs, final L_total {history[-1]['L_total']:.6f}")
    RunManifest("train-fdn", args.config, cfg.to_dict(), {"corpus": str(args.corpus)},
                {"checkpoint": str(out), "log": str(log_path)},
                cfg.train_fdn.seed).write(_manifest_path(out))
    return 0


def cmd_train_prn(args) -> int:
    fdn_ckpt = _load_checkpoint(args.fdn_ckpt, "--fdn-ckpt")
    cfg = _config(args)
    if args.seed is not None:
        cfg.train_prn.seed = args.seed
    fdn_cfg = fdn_ckpt.config_obj()
    # features and FDN dimensions come from the FDN run; PRN keys from this config
    prn_keys = {k: getattr(cfg.model, k) for k in
                ("prn_dim", "prn_hidden", "prn_context_ratio", "prn_context_min")}
    cfg.frontend = fdn_cfg.frontend
    cfg.model = dataclasses.replace(fdn_cfg.model, **prn_keys)
    fdn = fdn_from_checkpoint(fdn_ckpt)
    manifest = load_corpus(args.corpus)
    clips = prepare_clips(manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.stem + ".log.jsonl")
    model, history = train_prn(clips, fdn, cfg, log_path=log_path)
    Checkpoint("prn", dict(model.state_dict()), cfg.to_dict(), fdn_ckpt.in_dim, history).save(out)
    if history:
        h = history[-1]
        print(f"prn: {len(history)} epochs, final L_total {h['L_total']:.6f}, "
              f"verify_acc {h['verify_acc']:.3f}")
    RunManifest("train-prn", args.config, cfg.to_dict(),
                {"corpus": str(args.corpus), "fdn_ckpt": str(args.fdn_ckpt)},
                {"checkpoint": str(out), "log": str(log_path)},
                cfg.train_prn.seed).write(_manifest_path(out))
    return 0


def _infer_inputs(path: Path, fdn_cfg: Config, in_dim: int):
    """Yield (id, features, duration_s) for a corpus dir, a WAV or a feature file."""
    fc = fdn_cfg.frontend
    if path.is_dir():
        manifest = load_corpus(path)
        for r in manifest.clips:
            yield r.id, clip_features(manifest, r, fdn_cfg), r.duration_s
    elif path.suffix.lower() == ".wav":
        clip = read_wav(path, path.stem)
        if clip.sample_rate != fc.sample_rate:
            raise UsageError(f"{path}: sample rate {clip.sample_rate} Hz, model expects "
                             f"{fc.sample_rate} Hz")
        yield clip.id, extract_features(clip.samples, fc, clip.sample_rate).data, clip.duration_s
    elif path.suffix.lower() == ".tfrf":
        feats = load_external_features(path, in_dim).data
        yield path.stem, feats, feats.shape[0] * fc.hop_s
    else:
        raise UsageError(f"cannot infer on {path}: expected a corpus directory, .wav or .tfrf")


def cmd_infer(args) -> int:
    fdn_ckpt = _load_checkpoint(args.fdn_ckpt, "--fdn-ckpt")
    prn_ckpt = _load_checkpoint(args.prn_ckpt, "--prn-ckpt")
    source = args.input or args.corpus
    if source is None:
        raise UsageError("give --corpus DIR or --input (WAV, .tfrf or corpus dir)")
    source = Path(source)
    if not source.exists():
        raise UsageError(f"input not found: {source}")
    fdn_cfg = fdn_ckpt.config_obj()
    cfg = _config(args) if args.config else prn_ckpt.config_obj()
    fdn = fdn_from_checkpoint(fdn_ckpt)
    prn = prn_from_checkpoint(prn_ckpt)
    period = fdn_cfg.frontend.hop_s
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w") as fh:
        for clip_id, feats, duration in _infer_inputs(source, fdn_cfg, fdn_ckpt.in_dim):
            if feats.shape[1] != fdn_ckpt.in_dim:
                raise UsageError(f"{clip_id}: feature width {feats.shape[1]}, model expects "
                                 f"{fdn_ckpt.in_dim}")
            res = infer(feats, fdn, prn, cfg, duration, period)
            row = {
                "id": clip_id,
                "frame_scores": res.frame_scores.tolist(),
                "boundary_scores": res.boundary_scores.tolist(),
                "coarse_proposals": [p.to_json() for p in res.coarse],
                "proposals": [p.to_json() for p in res.proposals],
            }
            fh.write(json.dumps(row) + "\n")
            n += 1
    print(f"wrote predictions for {n} clips to {out}")
    RunManifest("infer", args.config, cfg.to_dict(),
                {"input": str(source), "fdn_ckpt": str(args.fdn_ckpt),
                 "prn_ckpt": str(args.prn_ckpt)},
                {"predictions": str(out)}, None).write(_manifest_path(out))
    return 0


def cmd_eval_pfd(args) -> int:
    manifest = load_corpus(args.corpus, check_audio=False)
    pairs = _join(_read_predictions(args.predictions), manifest)
    period = manifest.config.get("frame_period_s", 0.02)
    scores, labels = [], []
    for r, p in pairs:
        y = rasterize_labels(r.segments, r.duration_s, period).y_fake
        s = np.asarray(p["frame_scores"], dtype=np.float64)
        if abs(len(s) - len(y)) > 1:
            raise UsageError(f"{r.id}: {len(s)} frame scores for {len(y)} labelled frames")
        t = min(len(s), len(y))
        scores.append(s[:t])
        labels.append(y[:t])
    report = pfd_report(np.concatenate(scores), np.concatenate(labels), args.threshold)
    out = Path(args.out)
    _write_json(out, report.to_json())
    print(f"EER {100 * report.eer:.2f}%  AUC {report.auc:.4f}  "
          f"P {report.precision:.4f}  R {report.recall:.4f}  F1 {report.f1:.4f}")
    RunManifest("eval-pfd", args.config, {"threshold": args.threshold},
                {"predictions": str(args.predictions), "corpus": str(args.corpus)},
                {"report": str(out)}).write(_manifest_path(out))
    return 0


def cmd_eval_tfl(args) -> int:
    manifest = load_corpus(args.corpus, check_audio=False)
    pairs = _join(_read_predictions(args.predictions), manifest)
    key = "coarse_proposals" if args.coarse else "proposals"
    props = {r.id: [(q["start_s"], q["dur_s"], q["score"]) for q in p.get(key, [])]
             for r, p in pairs}
    gts = {r.id: list(r.segments) for r, _ in pairs}
    report = tfl_report(props, gts)
    out = Path(args.out)
    _write_json(out, report.to_json())
    ap = "  ".join(f"AP@{t:g} {100 * report.ap_at[t]:.2f}" for t in AP_REPORT_THRESHOLDS)
    ar = "  ".join(f"AR@{n} {100 * report.ar_at_n[n]:.2f}" for n in AR_REPORT_N)
    print(f"{ap}  mAP {100 * report.map_score:.2f}")
    print(ar)
    RunManifest("eval-tfl", args.config, {"proposals": key},
                {"predictions": str(args.predictions), "corpus": str(args.corpus)},
                {"report": str(out)}).write(_manifest_path(out))
    return 0


def cmd_grad_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = standard_grad_checks(seed, max_per_tensor=None if args.full else 4)
    worst = max(report.values())
    for name, err in report.items():
        print(f"{name:6s} max rel err {err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        _write_json(out, {"seed": seed, "tol": args.tol, "max_rel_err": report})
        RunManifest("grad-check", None, {"tol": args.tol, "full": args.full}, {},
                    {"report": str(out)}, seed).write(_manifest_path(out))
    return 0 if worst < args.tol else 1


def cmd_plot(args) -> int:
    from .plotting import plot_clip

    preds = _read_predictions(args.predictions)
    gts, period = {}, 0.02
    if args.corpus:
        manifest = load_corpus(args.corpus, check_audio=False)
        gts = {r.id: [s.to_json() for s in r.segments] for r in manifest.clips}
        period = manifest.config.get("frame_period_s", 0.02)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for clip_id, p in preds.items():
        try:
            plot_clip(out / f"{clip_id}.png", clip_id, p["frame_scores"], gts.get(clip_id, []),
                      p.get("coarse_proposals", []), p.get("proposals", []),
                      p.get("boundary_scores"), period)
            written += 1
        except (KeyError, ValueError, TypeError) as exc:
            logger.warning("skipping %s: %s", clip_id, exc)
    print(f"wrote {written} figures to {out}")
    RunManifest("plot", None, {}, {"predictions": str(args.predictions)},
                {"figures": str(out)}).write(_manifest_path(out))
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, help="override the stage seed")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="forgeryloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n-clips", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-fdn", parents=[common], help="train the frame detector")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_fdn)

    p = sub.add_parser("train-prn", parents=[common], help="train the refinement network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fdn-ckpt")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_prn)

    p = sub.add_parser("infer", parents=[common], help="score clips and emit proposals")
    p.add_argument("--fdn-ckpt")
    p.add_argument("--prn-ckpt")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--input", help="corpus directory, .wav or .tfrf feature file")
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-pfd", parents=[common], help="frame-level detection metrics")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_eval_pfd)

    p = sub.add_parser("eval-tfl", parents=[common], help="temporal localization metrics")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--coarse", action="store_true", help="score the coarse proposals instead")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_eval_tfl)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--full", action="store_true", help="check every scalar parameter")
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("plot", parents=[common], help="per-clip timeline figures")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InfeasibleConfigError, FeatureError, CorpusError,
            CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
