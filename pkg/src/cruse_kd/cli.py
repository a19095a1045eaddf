"""Command-line entry point: ``cruse-kd <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric or contract failure. ``CRUSE_KD_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, data
from .config import RunConfig, apply_override, parse_config
from .errors import ConfigurationError, ContractError, DataError, UndefinedMetricError
from .model import count_mops_per_frame, count_params, load_checkpoint
from .train import run_schedule

log = logging.getLogger("cruse_kd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    return apply_override(cfg, *args.set) if args.set else cfg


def _header(cfg: RunConfig, command: str, seed: int) -> str:
    lines = [f"# cruse-kd {command} seed={seed}"]
    lines += ["# " + line if line else "#" for line in cfg.to_toml().splitlines()]
    return "\n".join(lines) + "\n"


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def cmd_synth(args, cfg: RunConfig) -> int:
    d = cfg.data
    out = Path(args.out or d.corpus_dir)
    data.synth_corpus(out, d.n_speech, d.n_noise, d.synth_seconds, d.seed)
    print(f"wrote {d.n_speech} speech and {d.n_noise} noise clips under {out}")
    return EXIT_OK


def cmd_mix(args, cfg: RunConfig) -> int:
    d = cfg.data
    data.build_manifest(d.speech_dir, d.noise_dir, d.count, (d.snr_low, d.snr_high), d.seed, d.manifest)
    data.build_manifest(d.speech_dir, d.noise_dir, d.eval_count, (d.snr_low, d.snr_high), d.seed + 1, d.eval_manifest)
    print(f"wrote {d.count} training mixtures to {d.manifest}")
    print(f"wrote {d.eval_count} evaluation mixtures to {d.eval_manifest}")
    return EXIT_OK


def _train(cfg: RunConfig, command: str, schedule, model_cfg, teacher, out_dir: Path) -> Path:
    manifest = data.read_manifest(cfg.data.manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(_header(cfg, command, schedule.seed))
        result = run_schedule(schedule, model_cfg, manifest, teacher=teacher, out_dir=out_dir, log_file=fh)
    ckpt = out_dir / "student.ckpt"
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    print(f"final checkpoint {ckpt} sha256={digest}")
    print(f"log {log_path} ({len(result.records)} steps)")
    return ckpt


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    from .config import PhaseSection

    _seed_everything(cfg.schedule.seed)
    schedule = cfg.schedule_for([PhaseSection(cfg.schedule.teacher_epochs, 0.0, "tf")])
    schedule = type(schedule)(**{**schedule.__dict__, "model_seed": cfg.teacher.seed})
    out_dir = Path(args.out_dir or Path(cfg.schedule.out_dir) / "teacher")
    ckpt = _train(cfg, "train-teacher", schedule, cfg.teacher.model_config(), None, out_dir)
    if cfg.teacher.checkpoint:
        target = Path(cfg.teacher.checkpoint)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(ckpt.read_bytes())
        print(f"teacher checkpoint copied to {target}")
    return EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    _seed_everything(cfg.schedule.seed)
    schedule = cfg.schedule_for()
    teacher = None
    if schedule.needs_teacher:
        if not cfg.teacher.checkpoint:
            raise ConfigurationError("[model.teacher].checkpoint is required for phases with gamma > 0")
        teacher = load_checkpoint(cfg.teacher.checkpoint)
    out_dir = Path(args.out_dir or cfg.schedule.out_dir)
    _train(cfg, "distill", schedule, cfg.student.model_config(), teacher, out_dir)
    return EXIT_OK


def _eval_manifest(args, cfg: RunConfig):
    specs = data.read_manifest(args.manifest or cfg.data.eval_manifest)
    if cfg.eval.max_clips:
        specs = specs[: cfg.eval.max_clips]
    return specs


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    specs = _eval_manifest(args, cfg)
    snrs = args.fixed_snr if args.fixed_snr else (cfg.eval.fixed_snr or [None])
    parts = [_header(cfg, "eval", cfg.data.seed)]
    parts.append("# metrics: sdr = plain SDR, si_sdr = scale-invariant SDR; deltas are over the unprocessed mixture\n")
    for snr in snrs:
        parts.append(f"# fixed_snr={'manifest' if snr is None else snr}\n")
        parts.append(analysis.format_eval(analysis.evaluate(model, specs, snr)))
    _write("".join(parts), args.out or cfg.eval.output or None)
    return EXIT_OK


def cmd_cka(args, cfg: RunConfig) -> int:
    model_a = load_checkpoint(args.model_a)
    model_b = load_checkpoint(args.model_b)
    specs = _eval_manifest(args, cfg)
    report = analysis.cka_block_matrix(model_a, model_b, analysis.clip_features(specs, n_mels=model_a.cfg.n_mels))
    _write(_header(cfg, "cka", cfg.data.seed) + report.to_tsv(), args.out)
    return EXIT_OK


def cmd_count(args, cfg: RunConfig) -> int:
    print(_header(cfg, "count", 0), end="")
    rows = []
    for name in ("teacher", "student"):
        mc = getattr(cfg, name).model_config()
        rows.append((name, count_params(mc), count_mops_per_frame(mc)))
    print("model\tparams\tmops_per_frame")
    for name, params, mops in rows:
        print(f"{name}\t{params}\t{mops:.4f}")
    print(f"# student/teacher params {rows[1][1] / rows[0][1]:.2%}  ops {rows[1][2] / rows[0][2]:.2%}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cruse-kd", description=__doc__.splitlines()[0])
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic speech/noise corpus")
    p.add_argument("--out")
    add("mix", cmd_mix, "build training and evaluation manifests")
    p = add("train-teacher", cmd_train_teacher, "train the teacher with the supervised loss")
    p.add_argument("--out-dir")
    p = add("distill", cmd_distill, "train the student with the configured phases")
    p.add_argument("--out-dir")
    p = add("eval", cmd_eval, "SDR / SI-SDR of a checkpoint on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest")
    p.add_argument("--fixed-snr", type=float, action="append", help="remix every pairing at this SNR (repeatable)")
    p.add_argument("--out")
    p = add("cka", cmd_cka, "block-wise CKA between two checkpoints")
    p.add_argument("--model-a", required=True, help="rows of the matrix (e.g. student)")
    p.add_argument("--model-b", required=True, help="columns of the matrix (e.g. teacher)")
    p.add_argument("--manifest")
    p.add_argument("--out")
    add("count", cmd_count, "parameter and MOps/frame accounting")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CRUSE_KD_LOG", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_defaults:
            sys.stdout.write(RunConfig().to_toml())
            return EXIT_OK
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, UndefinedMetricError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
