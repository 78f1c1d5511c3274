"""
scalepress command line
calibrate -> design -> scan/plan -> generate -> report, plus ablate / sweep / project
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from accounting import BYTES_PER_ELEM, make_report, project_schedule, run_ablation
from artifact_io import load_json_artifact, save_json_artifact
from attn_calibration import SWEEP_THRESHOLDS, design_pattern, read_dump, record_dump, threshold_sweep, write_dump
from errors import EXIT_CODES, ConfigError, InputError, ScaleRangeError, UsageError, describe_exit_codes, exit_code_for
from generation import CompressionOptions, RunRecord, generate, sample_labels
from quantization import SUPPORTED_BITS, PrecisionPlan, plan_precision
from sensitivity import bitwidth_sweep, sensitivity_scan
from sparse_attention import attn_flops
from var_model import LAYER_TYPES, MODEL_PRESETS, ModelConfig, SamplerConfig, build_model
from window_pattern import DEFAULT_SINK_PARTS, WindowPattern, pattern_summary

logger = logging.getLogger('scalepress')

LOG_LEVEL_ENV = 'SCALEPRESS_LOG_LEVEL'
FP_QKV = 16


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes"""

    def error(self, message):
        raise UsageError(message)


def _say(args, message: str):
    if not args.quiet:
        print(message)


def _load_model(path):
    config = ModelConfig.from_dict(load_json_artifact(path, 'model'))
    return build_model(config)


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def _threshold(value: str) -> float:
    number = float(value)
    if not 0 < number <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {number}")
    return number


def _target(args) -> dict:
    return {'W': args.wbits, 'A': args.abits, 'QKV': None if args.qkv == FP_QKV else args.qkv}


def _check_protect(count: int):
    if not 0 <= count <= len(LAYER_TYPES):
        raise ScaleRangeError(f"--protect must be in 0..{len(LAYER_TYPES)}, got {count}")


# ========== COMMANDS ==========

def cmd_init(args) -> int:
    overrides = {'seed': args.seed, 'class_count': args.classes, 'outlier_factor': args.outlier_factor}
    config = ModelConfig.from_preset(args.preset, **overrides)
    save_json_artifact(args.out, 'model', config.to_dict())
    _say(args, f"✓ Model config {args.out} ({args.preset}, {config.schedule.num_scales} scales, "
               f"fingerprint {config.fingerprint()[:8]})")
    return EXIT_CODES['ok']


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    labels = sample_labels(model.config, args.labels, args.seed)
    _say(args, f"⟳ Recording attention maps for {len(labels)} labels...")
    dump = record_dump(model, labels, SamplerConfig(cfg_scale=args.cfg), progress=not args.quiet)
    size = write_dump(dump, args.out)
    _say(args, f"✓ Dump {args.out}: {dump.sample_count} samples, {size} bytes")
    return EXIT_CODES['ok']


def cmd_design(args) -> int:
    dump = read_dump(args.dump)
    schedule = None
    if args.model:
        schedule = ModelConfig.from_dict(load_json_artifact(args.model, 'model')).schedule
    pattern = design_pattern(dump, args.r0, args.sink_parts, schedule)
    pattern.save(args.out)

    saving = attn_flops(pattern, dump.schedule, dump.depth, dump.heads, head_dim=1)['saving']
    summary = pattern_summary(pattern)
    _say(args, f"✓ Pattern {args.out}: {summary['full_entries']}/{summary['entries']} entries FULL")
    _say(args, f"  predicted attention FLOPs saving: {saving:.2%}")
    return EXIT_CODES['ok']


def cmd_scan(args) -> int:
    _check_protect(args.protect)
    model = _load_model(args.model)
    labels = sample_labels(model.config, args.labels, args.seed)
    target = _target(args)
    _say(args, f"⟳ Scanning {len(LAYER_TYPES)} layer types at W{args.wbits}A{args.abits}...")
    scores = sensitivity_scan(model, labels, target, SamplerConfig(cfg_scale=args.cfg), progress=not args.quiet)
    plan = plan_precision(scores, target, args.protect, model_fingerprint=model.config.fingerprint())
    plan.save(args.out)

    for layer_type in sorted(scores, key=lambda t: -scores[t]):
        marker = "FP" if layer_type in plan.protected else "  "
        _say(args, f"  {marker} {layer_type:<14} {scores[layer_type]:.6f}")
    _say(args, f"✓ Plan {args.out}: {plan.bitwidth_label()}")
    return EXIT_CODES['ok']


def cmd_plan(args) -> int:
    _check_protect(args.protect)
    source = PrecisionPlan.load(args.scores)
    if not source.scores:
        raise ConfigError(f"{args.scores} carries no sensitivity scores")
    plan = plan_precision(source.scores, _target(args), args.protect,
                          model_fingerprint=source.model_fingerprint,
                          calibration_fingerprint=source.calibration_fingerprint)
    plan.save(args.out)
    _say(args, f"✓ Plan {args.out}: {plan.bitwidth_label()}, protected {plan.protected or 'nothing'}")
    return EXIT_CODES['ok']


def cmd_generate(args) -> int:
    model = _load_model(args.model)
    pattern = WindowPattern.load(args.pattern) if args.pattern else None
    plan = PrecisionPlan.load(args.plan) if args.plan else None
    if pattern is not None:
        pattern.check_model(model.config.schedule, model.config.depth, model.config.heads)
    if plan is not None:
        plan.check_model(model)

    reference = None
    if args.reference:
        base = RunRecord.load(args.reference)
        if base.config.fingerprint() != model.config.fingerprint():
            raise InputError(f"{args.reference} was produced by a different model")
        if base.label != args.label:
            raise InputError(f"{args.reference} holds label {base.label}, not {args.label}")
        reference = base.token_maps

    sampler = SamplerConfig(cfg_scale=args.cfg)
    opts = CompressionOptions(pattern=pattern, asc=args.asc, plan=plan)
    maps, stats = generate(model, args.label, sampler, opts, reference=reference)
    record = RunRecord(model.config, args.label, sampler, opts.describe(), maps, stats, plan,
                       teacher_forced=reference is not None)
    record.save(args.out)
    _say(args, f"✓ Run {args.out}: attention {stats.attn_flops} FLOPs, linear {stats.linear_flops} FLOPs")
    return EXIT_CODES['ok']


def cmd_report(args) -> int:
    report = make_report(RunRecord.load(args.baseline), RunRecord.load(args.compressed))
    report.save(args.out)
    _say(args, f"✓ Report {args.out}: attention FLOPs saving {report.attention_saving:.2%}, "
               f"logits error {report.logits_error:.6f}")
    return EXIT_CODES['ok']


def cmd_ablate(args) -> int:
    _check_protect(args.protect)
    model = _load_model(args.model)
    labels = sample_labels(model.config, args.labels, args.seed)
    calib = sample_labels(model.config, args.calib, args.seed + 1)
    rows = run_ablation(model, labels, calib, args.r0, _target(args), args.protect, args.sink_parts,
                        SamplerConfig(cfg_scale=args.cfg), progress=not args.quiet)
    save_json_artifact(args.out, 'ablation', {
        'config': model.config.to_dict(),
        'labels': labels,
        'calibration_labels': calib,
        'r0': args.r0,
        'rows': rows,
    })
    for row in rows:
        error = "n/a" if row['logits_rel_l2'] is None else f"{row['logits_rel_l2']:.6f}"
        _say(args, f"  {row['name']:<20} {row['bitwidth']:<10} attn saving {row['attention_flops_saving']:.2%}  "
                   f"error {error}")
    _say(args, f"✓ Ablation {args.out}")
    return EXIT_CODES['ok']


def cmd_sweep(args) -> int:
    payload = {}
    if args.dump:
        dump = read_dump(args.dump)
        payload['thresholds'] = threshold_sweep(dump, args.thresholds or SWEEP_THRESHOLDS, args.sink_parts)
        for row in payload['thresholds']:
            _say(args, f"  R0={row['r0']:<5} MDWA {row['mdwa_saving']:.2%}  +ASC {row['mdwa_asc_saving']:.2%}")
    if args.model:
        model = _load_model(args.model)
        labels = sample_labels(model.config, args.labels, args.seed)
        payload['bitwidths'] = bitwidth_sweep(model, labels, protect_count=args.protect,
                                              sampler=SamplerConfig(cfg_scale=args.cfg), progress=not args.quiet)
        for row in payload['bitwidths']:
            _say(args, f"  {row['bitwidth']:<10} {row['uniform_error']:.6f}   "
                       f"{row['mp_bitwidth']:<12} {row['mp_error']:.6f}")
    if not payload:
        raise UsageError("sweep needs --dump and/or --model")
    save_json_artifact(args.out, 'sweep', payload)
    _say(args, f"✓ Sweep {args.out}")
    return EXIT_CODES['ok']


def cmd_project(args) -> int:
    projection = project_schedule(args.sides, args.depth, args.heads, args.dim, args.vocab,
                                  mdwa_saving=args.mdwa_saving, asc=args.asc,
                                  bytes_per_elem=BYTES_PER_ELEM[args.dtype])
    if args.out:
        save_json_artifact(args.out, 'projection', projection)
    _say(args, f"✓ Projection ({projection['total_tokens']} tokens): attention share "
               f"{projection['attention_share']:.1%}, attention maps {projection['attention_map_gib']:.2f} GiB")
    return EXIT_CODES['ok']


# ========== PARSER ==========

def _add_bits(parser):
    parser.add_argument('--wbits', type=int, choices=SUPPORTED_BITS, default=4)
    parser.add_argument('--abits', type=int, choices=SUPPORTED_BITS, default=8)
    parser.add_argument('--qkv', type=int, choices=(8, FP_QKV), default=8, help=f"{FP_QKV} keeps Q/K/V in FP")
    parser.add_argument('--protect', type=int, default=1, help="layer types kept in FP (0..7)")


def build_parser() -> ArgumentParser:
    epilog = "exit codes: " + ", ".join(f"{code}={name}" for code, name in describe_exit_codes().items())
    parser = ArgumentParser(prog='scalepress', description="Compression toolchain for multi-scale "
                            "autoregressive transformers", epilog=epilog)
    parser.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    parser.add_argument('--quiet', action='store_true', help="no progress bars or status lines")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('init', help="write a model config")
    p.add_argument('--preset', choices=sorted(MODEL_PRESETS), default='desk')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--classes', type=_positive, default=10)
    p.add_argument('--outlier-factor', type=float, default=0.0, help="plant ffn.fc2 outliers of this magnitude")
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser('calibrate', help="record attention maps")
    p.add_argument('--model', required=True)
    p.add_argument('--labels', type=_positive, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cfg', type=float, default=4.0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser('design', help="fit a window pattern")
    p.add_argument('--dump', required=True)
    p.add_argument('--r0', type=_threshold, default=0.95)
    p.add_argument('--sink-parts', type=int, default=DEFAULT_SINK_PARTS)
    p.add_argument('--model', help="reject dumps recorded for another schedule")
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser('scan', help="layer sensitivity scan + precision plan")
    p.add_argument('--model', required=True)
    p.add_argument('--labels', type=_positive, default=10)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cfg', type=float, default=4.0)
    _add_bits(p)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser('plan', help="re-plan from the scores of an existing plan")
    p.add_argument('--scores', required=True)
    _add_bits(p)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser('generate', help="run the pipeline for one label")
    p.add_argument('--model', required=True)
    p.add_argument('--label', type=int, required=True)
    p.add_argument('--cfg', type=float, default=4.0)
    p.add_argument('--pattern')
    p.add_argument('--asc', action='store_true')
    p.add_argument('--plan')
    p.add_argument('--reference', help="baseline run.json to teacher-force on")
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('report', help="compare a compressed run with its baseline")
    p.add_argument('--baseline', required=True)
    p.add_argument('--compressed', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('ablate', help="technique matrix on one model")
    p.add_argument('--model', required=True)
    p.add_argument('--labels', type=_positive, default=10)
    p.add_argument('--calib', type=_positive, default=8)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cfg', type=float, default=4.0)
    p.add_argument('--r0', type=_threshold, default=0.95)
    p.add_argument('--sink-parts', type=int, default=DEFAULT_SINK_PARTS)
    _add_bits(p)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('sweep', help="threshold and/or bit-width sweeps")
    p.add_argument('--dump')
    p.add_argument('--thresholds', type=_threshold, nargs='+')
    p.add_argument('--sink-parts', type=int, default=DEFAULT_SINK_PARTS)
    p.add_argument('--model')
    p.add_argument('--labels', type=_positive, default=4)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cfg', type=float, default=4.0)
    p.add_argument('--protect', type=int, default=1)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('project', help="estimate cost of a hypothetical schedule")
    p.add_argument('--sides', type=_positive, nargs='+', required=True)
    p.add_argument('--depth', type=_positive, default=16)
    p.add_argument('--heads', type=_positive, default=16)
    p.add_argument('--dim', type=_positive, default=1024)
    p.add_argument('--vocab', type=_positive, default=4096)
    p.add_argument('--mdwa-saving', type=float, default=0.0)
    p.add_argument('--asc', action='store_true')
    p.add_argument('--dtype', choices=sorted(BYTES_PER_ELEM), default='f16')
    p.add_argument('--out')
    p.set_defaults(func=cmd_project)

    return parser


def _configure_logging(verbose: bool):
    level = logging.DEBUG if verbose else os.getenv(LOG_LEVEL_ENV, 'WARNING').upper()
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"⚠️  {e}", file=sys.stderr)
        return EXIT_CODES['usage']

    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        print(f"⚠️  {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            logger.exception("command %s failed", args.command)
        return code


if __name__ == '__main__':
    sys.exit(main())
