"""Command-line front door: synth, train, eval, gradcheck, bench, attn-dump.

Exit codes: 0 success, 1 check failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import complexity as cx
from . import numerics as nm
from . import synthdata
from .config import STREAM_INIT, STREAM_SHUFFLE, RunConfig, seed_rng
from .featurize import MEL_BINS, fbank_frame_count
from .gradchecks import FAULTS, format_table, run_suite
from .model import FeaturizedSample, TriModalModel, evaluate, featurize_sample, training_step
from .numerics import AdamState, ShapeError, Tape, ValidationError
from .pooling import VARIANTS
from .storage import ensure_dir, read_checkpoint, write_checkpoint, write_pgm
from .synthdata import SynthSpec, attention_mass_on_planted, generate, load_dataset, write_dataset

TRAIN_DTYPE = np.float32


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        return _fail(f"dataset spec not found: {spec_path}")
    try:
        payload = json.loads(spec_path.read_text())
        spec = SynthSpec.from_json(payload)
        splits = generate(spec)
        manifest = write_dataset(splits, spec, args.out)
    except (ValidationError, json.JSONDecodeError, TypeError) as exc:
        return _fail(str(exc))
    sizes = {split: len(samples) for split, samples in splits.items()}
    print(f"wrote {sum(sizes.values())} samples {sizes} to {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train / eval helpers
# ---------------------------------------------------------------------------


def _lengths_from_spec(spec: SynthSpec) -> tuple[int, int, int]:
    q = spec.images * spec.height * spec.width // (spec.patch * spec.patch)
    frames = fbank_frame_count(spec.n_samples_audio, spec.sample_rate)
    return q, frames // 2, spec.text_len


def _check_config_against_dataset(cfg: RunConfig, spec: SynthSpec) -> None:
    f = cfg.features
    if f.patch_size != spec.patch:
        raise ValidationError(f"config patch_size {f.patch_size} != dataset patch {spec.patch}")
    if f.channels != spec.channels:
        raise ValidationError(f"config channels {f.channels} != dataset channels {spec.channels}")
    if f.mel_bins != MEL_BINS:
        raise ValidationError(f"config mel_bins {f.mel_bins} != filterbank size {MEL_BINS}")
    if f.text_vocab != spec.vocab:
        raise ValidationError(f"config text_vocab {f.text_vocab} != dataset vocab {spec.vocab}")
    q, m, n_text = _lengths_from_spec(spec)
    if q > f.max_visual_tokens or m > f.max_acoustic_tokens or n_text > f.max_text_tokens:
        raise ValidationError(
            f"dataset token counts (Q={q}, M={m}, N_text={n_text}) exceed config maxima "
            f"({f.max_visual_tokens}, {f.max_acoustic_tokens}, {f.max_text_tokens})")


def _featurize_split(samples, spec: SynthSpec) -> list[FeaturizedSample]:
    return [
        featurize_sample(s.images, spec.patch, s.waveform, s.sample_rate,
                         s.text_ids, s.label, mel_bins=MEL_BINS,
                         planted=s.planted, sample_id=s.sample_id)
        for s in samples
    ]


def _build_model(cfg: RunConfig, spec: SynthSpec) -> TriModalModel:
    return TriModalModel.build(
        cfg.model_config_for(spec.classes), cfg.geometry(),
        seed_rng(cfg.seed, STREAM_INIT), dtype=TRAIN_DTYPE,
    )


def _load_run(args) -> tuple[RunConfig, SynthSpec, dict]:
    cfg = RunConfig.load(args.config)
    spec, splits = load_dataset(args.data)
    _check_config_against_dataset(cfg, spec)
    return cfg, spec, splits


def train_model(cfg: RunConfig, spec: SynthSpec, splits: dict,
                log_rows: list | None = None) -> TriModalModel:
    """Train on the train split; appends per-epoch log rows when given."""
    model = _build_model(cfg, spec)
    train = _featurize_split(splits["train"], spec)
    valid = _featurize_split(splits.get("valid", []), spec)
    opt = AdamState.init(model.params())
    opt_cfg = cfg.optimizer
    for epoch in range(opt_cfg.epochs):
        order = seed_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(train))
        losses, pool_flops = [], 0
        for start in range(0, len(train), opt_cfg.batch_size):
            batch = [train[i] for i in order[start : start + opt_cfg.batch_size]]
            result = training_step(batch, model, opt, lr=opt_cfg.lr,
                                   betas=(opt_cfg.beta1, opt_cfg.beta2), dtype=TRAIN_DTYPE)
            losses.append(result.loss)
            pool_flops += result.pool_flops
        if log_rows is not None:
            if valid:
                rep = evaluate(model, valid, cfg.threshold, dtype=TRAIN_DTYPE)
                acc, f1 = rep.average.accuracy, rep.average.f1
            else:
                acc = f1 = float("nan")
            log_rows.append([epoch, f"{float(np.mean(losses)):.6f}",
                             f"{acc:.6f}", f"{f1:.6f}", pool_flops])
    return model


def cmd_train(args) -> int:
    try:
        cfg, spec, splits = _load_run(args)
    except (ValidationError, ShapeError) as exc:
        return _fail(str(exc))
    out = ensure_dir(args.out)
    log_rows: list = []
    model = train_model(cfg, spec, splits, log_rows)
    _write_csv(out / "train_log.csv",
               [["epoch", "mean_loss", "valid_accuracy", "valid_f1", "pool_flops"]] + log_rows)
    write_checkpoint(out / "model.ckpt", model.named_params())
    (out / "run_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    final = log_rows[-1][1] if log_rows else "n/a"
    print(f"trained {cfg.variant} for {cfg.optimizer.epochs} epochs, final mean loss {final}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    try:
        cfg, spec, splits = _load_run(args)
        if args.split not in splits:
            return _fail(f"split {args.split!r} not in dataset ({sorted(splits)})")
        model = _build_model(cfg, spec)
        model.load_state(read_checkpoint(args.checkpoint))
    except (ValidationError, ShapeError, FileNotFoundError) as exc:
        return _fail(str(exc))
    samples = _featurize_split(splits[args.split], spec)
    report = evaluate(model, samples, cfg.threshold, dtype=TRAIN_DTYPE)
    rows = report.csv_rows()
    _write_csv(args.out, rows)
    avg = report.average
    print(f"{args.split}: accuracy {avg.accuracy:.4f}, weighted accuracy "
          f"{avg.weighted_accuracy:.4f}, f1 {avg.f1:.4f} ({len(samples)} samples)")
    print(f"metrics: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    try:
        checks = run_suite(fault=args.inject_fault, tolerance=args.tolerance)
    except ValidationError as exc:
        return _fail(str(exc))
    print(format_table(checks))
    if all(report.passed for _, report in checks):
        print(f"all {len(checks)} checks passed at tolerance {args.tolerance}")
        return 0
    for name, report in checks:
        for entry in report.entries:
            for idx, analytic, numeric, rel in entry.failures[:5]:
                print(f"FAIL {name}/{entry.name}{list(idx)}: "
                      f"analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})",
                      file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad {what} list {text!r}") from exc
    if not values:
        raise ValidationError(f"empty {what} list")
    return values


def cmd_bench(args) -> int:
    try:
        ks = _parse_int_list(args.k, "K")
        if args.paper_scale:
            cfg, lengths = cx.PAPER_SCALE, cx.DEFAULT_LENGTHS
        else:
            cfg, lengths = cx.DESK_SCALE, cx.DEFAULT_LENGTHS
        if args.lengths:
            q, m, n_text = _parse_int_list(args.lengths, "lengths")
            lengths = cx.Lengths(q=q, m=m, n_text=n_text)
        variants = ["no_attention", "full"] if args.variant == "both" else [args.variant]
    except ValidationError as exc:
        return _fail(str(exc))

    rows = [["variant", "K", "Q", "M", "flops_total", "time_mean_s", "time_std_s",
             "peak_bytes", "ratio"]]
    baseline: dict[int, float] = {}
    for variant in variants:
        for k_tokens in ks:
            flops = cx.flops_model(variant, lengths, k_tokens, cfg, args.classes).total
            time_mean = time_std = peak = ""
            if args.mode == "time":
                report = cx.bench_time(variant, lengths, k_tokens, cfg,
                                       runs=args.runs, n_classes=args.classes, seed=args.seed)
                time_mean, time_std = f"{report.mean_s:.6f}", f"{report.std_s:.6f}"
                peak = report.peak_bytes
                metric = report.mean_s
            elif args.mode == "memory":
                peak = cx.bench_memory(variant, lengths, k_tokens, cfg,
                                       n_classes=args.classes, seed=args.seed)
                metric = float(peak)
            else:
                metric = float(flops)
            if variant == "no_attention":
                baseline[k_tokens] = metric
            ratio = baseline.get(k_tokens, metric) / metric if metric else ""
            rows.append([variant, k_tokens, lengths.q, lengths.m, flops,
                         time_mean, time_std, peak,
                         f"{ratio:.4f}" if ratio != "" else ""])
    if args.out:
        _write_csv(args.out, rows)
        print(f"bench ({args.mode}): {args.out}")
    else:
        csv.writer(sys.stdout).writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# attn-dump
# ---------------------------------------------------------------------------


def cmd_attn_dump(args) -> int:
    try:
        cfg, spec, splits = _load_run(args)
        model = _build_model(cfg, spec)
        model.load_state(read_checkpoint(args.checkpoint))
    except (ValidationError, ShapeError, FileNotFoundError) as exc:
        return _fail(str(exc))
    sample = next((s for split in splits.values() for s in split if s.sample_id == args.sample), None)
    if sample is None:
        return _fail(f"sample {args.sample!r} not found in dataset")
    feats = _featurize_split([sample], spec)[0]
    with Tape(TRAIN_DTYPE):
        state, _ = model.forward_sample(feats)
    out = ensure_dir(args.out)
    summary = [["pass", "planted_mass", "uniform_baseline"]]
    for amap in state.maps:
        rows = [["pass", "row", "col", "weight"]]
        for r in range(amap.weights.shape[0]):
            for c in range(amap.weights.shape[1]):
                rows.append([amap.pass_tag, r, c, f"{amap.weights[r, c]:.8f}"])
        _write_csv(out / f"{args.sample}_{amap.pass_tag}.csv", rows)
        write_pgm(out / f"{args.sample}_{amap.pass_tag}.pgm", amap.weights)
        planted = feats.planted[amap.modality]
        mass = attention_mass_on_planted(amap, planted)
        baseline = len(planted) / amap.weights.shape[1]
        summary.append([amap.pass_tag, f"{mass:.6f}", f"{baseline:.6f}"])
        print(f"{amap.pass_tag}: planted mass {mass:.4f} (uniform baseline {baseline:.4f})")
    _write_csv(out / f"{args.sample}_summary.csv", summary)
    print(f"wrote {len(state.maps)} attention maps to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trimodal",
        description="Tri-modal transformer with two-pass token pooling: data, training, and complexity benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a JSON spec")
    p.add_argument("--spec", required=True, help="dataset spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all ops and the tiny model")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", choices=list(FAULTS), default=None,
                   help="swap in a known-bad backward to exercise the harness")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="analytic FLOPs, wall-clock, and peak-memory benchmarks")
    p.add_argument("--mode", choices=["flops", "time", "memory"], default="flops")
    p.add_argument("--k", default="32,64,128,256", help="comma-separated pooled token counts")
    p.add_argument("--variant", choices=["both", *VARIANTS], default="both")
    p.add_argument("--lengths", default=None, help="Q,M,N_text token counts (default 576,512,300)")
    p.add_argument("--paper-scale", action="store_true",
                   help="width-768, 12-layer configuration (analytic modes)")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("attn-dump", help="dump attention maps (CSV + PGM) for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True, help="sample id, e.g. test_00000")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
