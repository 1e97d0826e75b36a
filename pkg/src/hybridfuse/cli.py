"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or
missing input files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_io, dsp
from .evaluation import (
    aggregate_gates,
    collect_traces,
    compute_eer,
    format_eer,
    score_manifest,
    write_gate_trace,
    write_scores,
)
from .features import KINDS, SpectralConfig, extract
from .fusion import STRATEGIES, uses_streams
from .gradcheck import TOLERANCE
from .model import ModelConfig, gradcheck_strategy
from .synth import clip_for_entry, generate_corpus
from .training import (
    TrainConfig,
    Trainer,
    holdout_split,
    load_dataset,
    load_model,
    save_model,
    write_metrics,
)

log = logging.getLogger("hybridfuse")

OUT_DIR_ENV = "HYBRIDFUSE_OUT_DIR"


class UsageError(Exception):
    pass


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _snapshot(out_dir: Path, name: str, args: argparse.Namespace, **extra):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["version"] = __version__
    (out_dir / f"{name}_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(args, sub: str) -> Path:
    return Path(args.out_dir) / sub


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = SpectralConfig(args.feature)
    if args.wav:
        wav = data_io.read_wav(_require_file(args.wav))
        fm = extract(dsp.canonicalize_length(wav), cfg, str(args.wav))
        out = Path(args.out) if args.out else _out_dir(args, "features") / f"{Path(args.wav).stem}.{args.feature}.sff"
        out.parent.mkdir(parents=True, exist_ok=True)
        data_io.write_features(out, fm.data, args.feature)
        _snapshot(out.parent, "extract", args)
        print(f"{out}: {fm.shape[0]}x{fm.shape[1]} {args.feature}")
        return 0

    manifest = data_io.read_manifest(_require_file(args.manifest))
    out_dir = Path(args.out) if args.out else _out_dir(args, "features")
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in manifest:
        if not e.source.startswith("synth:") and not manifest.resolve(e.source).is_file():
            raise UsageError(f"input file not found: {manifest.resolve(e.source)}")
        wav = dsp.canonicalize_length(clip_for_entry(e, manifest, dsp.DEFAULT_NUM_SAMPLES, dsp.DEFAULT_SAMPLE_RATE))
        fm = extract(wav, cfg, e.utt_id)
        data_io.write_features(out_dir / f"{e.utt_id}.{args.feature}.sff", fm.data, args.feature)
        print(f"{e.utt_id}: {fm.shape[0]}x{fm.shape[1]} {args.feature}")
    _snapshot(out_dir, "extract", args)
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out) if args.out else _out_dir(args, "corpus")
    train_m, eval_m = generate_corpus(out, args.n_train, args.n_eval, args.seed)
    _snapshot(out, "synth-data", args)
    print(f"{out}: {len(train_m)} train / {len(eval_m)} eval clips")
    return 0


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        decoupled_weight_decay=not args.coupled_weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        step_size=args.step_size,
        gamma=args.gamma,
        seed=seed,
    )


def cmd_train(args) -> int:
    manifest = data_io.read_manifest(_require_file(args.manifest))
    if len(manifest.labels()) < 2:
        raise ValueError(f"{args.manifest}: training manifest needs both bona fide and spoof entries")
    use_sf, use_ssl = uses_streams(args.strategy)
    log.info("loading %d training utterances (%s)", len(manifest), args.feature)
    data = load_dataset(manifest, args.feature, use_sf, use_ssl)
    if args.eval_manifest:
        eval_m = data_io.read_manifest(_require_file(args.eval_manifest))
        held = load_dataset(eval_m, args.feature, use_sf, use_ssl)
        train_ds = data
    else:
        train_ds, held = holdout_split(data, args.holdout, args.seed)

    out = Path(args.out) if args.out else _out_dir(args, f"train-{args.strategy}-{args.feature}")
    seeds = args.seeds or [args.seed]
    results = []
    for seed in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg = _train_config(args, seed)
        if args.resume:
            trainer = Trainer.load(_require_file(args.resume), cfg)
        else:
            model_cfg = ModelConfig(
                args.strategy,
                feature=args.feature,
                d_sf=train_ds.sf.shape[-1] if use_sf else 60,
                d_ssl=train_ds.ssl.shape[-1] if use_ssl else 1024,
                sf_T=train_ds.sf.shape[1] if use_sf else 402,
                ssl_T=train_ds.ssl.shape[1] if use_ssl else 201,
                shared_qkv=not args.unshared_qkv,
            )
            trainer = Trainer.create(model_cfg, cfg, train_ds)
        trainer.fit(train_ds, held)
        save_model(run_dir / "model.ckpt", trainer.best_model(), {"train": cfg.to_dict()})
        trainer.save(run_dir / "trainer.ckpt")
        write_metrics(run_dir / "metrics.csv", trainer.history)
        _snapshot(run_dir, "train", args, train_config=cfg.to_dict(), model_config=trainer.model.config.to_dict())
        best = trainer.best_eer if trainer.history else float("nan")
        results.append(best)
        print(f"seed {seed}: best held-out {format_eer(best)}  ({run_dir})")
    if len(seeds) > 1:
        print(f"mean over {len(seeds)} seeds: {format_eer(float(np.mean(results)))}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(_require_file(args.checkpoint))
    manifest = data_io.read_manifest(_require_file(args.manifest))
    cfg = model.config
    use_sf, use_ssl = model.uses
    ds = load_dataset(manifest, cfg.feature, use_sf, use_ssl)
    if use_ssl and ds.ssl is not None and ds.ssl.shape[1:] != (cfg.ssl_T, cfg.d_ssl):
        raise ValueError(
            f"SSL features are {ds.ssl.shape[1]}x{ds.ssl.shape[2]} but the checkpoint expects {cfg.ssl_T}x{cfg.d_ssl}"
        )
    if use_sf and ds.sf is not None and ds.sf.shape[1:] != (cfg.sf_T, cfg.d_sf):
        raise ValueError(
            f"{cfg.feature} features are {ds.sf.shape[1]}x{ds.sf.shape[2]} but the checkpoint expects {cfg.sf_T}x{cfg.d_sf}"
        )
    scores, traces = score_manifest(model, ds)
    out = Path(args.scores_out) if args.scores_out else _out_dir(args, "eval") / "scores.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, scores)
    if traces and args.traces_dir:
        root = Path(args.traces_dir)
        for utt, tag, trace in zip(ds.ids, ds.tags, traces):
            d = root / cfg.feature / tag
            d.mkdir(parents=True, exist_ok=True)
            write_gate_trace(d / f"{utt}.csv", trace)
    _snapshot(out.parent, "eval", args, model_config=cfg.to_dict())
    if len(manifest.labels()) == 2:
        eer, thr = compute_eer(scores)
        print(f"{format_eer(eer)} (threshold {thr:.6g}, {len(scores)} utterances)")
    else:
        print(f"scored {len(scores)} utterances (single class, no EER)")
    return 0


def cmd_analyze_gates(args) -> int:
    root = Path(args.traces)
    if not root.is_dir():
        raise UsageError(f"trace directory not found: {root}")
    traces = collect_traces(root)
    if not traces:
        raise ValueError(f"no gate traces under {root} (expected <feature>/<dataset>/<utt>.csv)")
    report = aggregate_gates(traces, per_utterance=args.per_utterance)
    out = Path(args.out) if args.out else _out_dir(args, "gates") / "gate_report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    _snapshot(out.parent, "analyze-gates", args)
    for r in report.rows:
        print(f"{r.feature:6s} {r.dataset:12s} w_sf={r.w_sf:.4f} w_ssl={r.w_ssl:.4f} ({r.n_utterances} utts)")
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradcheck_strategy(args.strategy, seeds=args.n_seeds, shared_qkv=not args.unshared_qkv)
    ok = worst < TOLERANCE
    print(f"{args.strategy}: max relative error {worst:.3e} over {args.n_seeds} seeds ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_global_flags(p: argparse.ArgumentParser, defaults: bool):
    def d(value):
        return value if defaults else argparse.SUPPRESS

    p.add_argument("--seed", type=int, default=d(42))
    p.add_argument("--out-dir", default=d(os.environ.get(OUT_DIR_ENV, "runs")), help=f"default ${OUT_DIR_ENV} or ./runs")
    p.add_argument("--log-level", default=d("INFO"), choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridfuse", description=__doc__.splitlines()[0])
    _add_global_flags(p, defaults=True)
    p.add_argument("--version", action="version", version=__version__)
    # global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, defaults=False)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    s = sub.add_parser("extract", help="spectral features from a WAV file or a manifest")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav")
    src.add_argument("--manifest")
    s.add_argument("--feature", choices=KINDS, default="mfcc")
    s.add_argument("--out", help="output file (--wav) or directory (--manifest)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("synth-data", help="generate the synthetic desk-scale corpus")
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-eval", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train one fusion configuration")
    s.add_argument("--manifest", required=True)
    s.add_argument("--eval-manifest")
    s.add_argument("--holdout", type=float, default=0.2, help="held-out fraction without --eval-manifest")
    s.add_argument("--strategy", choices=STRATEGIES, required=True)
    s.add_argument("--feature", choices=KINDS, default="mfcc")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--coupled-weight-decay", action="store_true")
    s.add_argument("--step-size", type=int, default=10)
    s.add_argument("--gamma", type=float, default=0.5)
    s.add_argument("--seeds", type=int, nargs="+", help="train once per seed and report the mean")
    s.add_argument("--unshared-qkv", action="store_true", help="separate Q/K/V per direction (mutual)")
    s.add_argument("--resume", help="trainer checkpoint to continue from")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a manifest and report EER")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--scores-out")
    s.add_argument("--traces-dir", help="write gate traces as <dir>/<feature>/<dataset>/<utt>.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze-gates", help="aggregate gate traces per feature and dataset")
    s.add_argument("--traces", required=True)
    s.add_argument("--out")
    s.add_argument("--per-utterance", action="store_true", help="average utterance means, not frames")
    s.set_defaults(func=cmd_analyze_gates)

    s = sub.add_parser("gradcheck", help="finite-difference check of one strategy")
    s.add_argument("--strategy", choices=STRATEGIES, required=True)
    s.add_argument("--n-seeds", type=int, default=10)
    s.add_argument("--unshared-qkv", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hybridfuse {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"hybridfuse {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
