"""Command-line entry point.

    hazemeta [--config FILE] [--workdir DIR] <command> [options] [--section.key=value ...]

Commands: synth-data, train, eval, ablate, dehaze, gradcheck.
Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from hazemeta import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("hazemeta")


def _resolve(workdir: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _echo_and_save(cfg, out_dir: Path) -> None:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    print("# resolved config")
    print(text, end="")
    cfg.dump(out_dir / "resolved_config.yaml")


def cmd_synth_data(cfg, args, workdir):
    from hazemeta.datagen import GenConfig, synthesize_split

    out = _resolve(workdir, args.out)
    _echo_and_save(cfg, out)
    specs = {d.id: d for d in cfg.data.domain_specs()}
    gen = GenConfig(height=cfg.data.synth_size, width=cfg.data.synth_size)
    n = cfg.data.synth_n_per_domain
    train = synthesize_split(out, [specs[i] for i in cfg.train.train_domains], n, "train", gen, cfg.train.seed)
    test = synthesize_split(out, [specs[i] for i in cfg.data.heldout_domains], n, "test", gen, cfg.train.seed)
    print(f"wrote {train} and {test}")
    return EXIT_OK


def cmd_train(cfg, args, workdir):
    from hazemeta.report import plot_metrics
    from hazemeta.trainer import fit

    out = _resolve(workdir, args.out)
    _echo_and_save(cfg, out)
    resume = _resolve(workdir, args.resume) if args.resume else None
    ckpt = fit(cfg.train, cfg.data.domain_specs(), out, resume=resume)
    plot_metrics(out / "metrics.jsonl", out / "loss_curves")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _eval_domains(cfg):
    specs = cfg.data.domain_specs()
    if cfg.eval.domains is None:
        return specs
    by_id = {d.id: d for d in specs}
    try:
        return [by_id[i] for i in cfg.eval.domains]
    except KeyError as exc:
        raise ConfigError(f"eval.domains: unknown domain id {exc}") from exc


def cmd_eval(cfg, args, workdir):
    from hazemeta.evaluate import _write_csv, evaluate_checkpoint
    from hazemeta.report import plot_eval

    out = _resolve(workdir, args.out)
    _echo_and_save(cfg, out)
    e = cfg.eval
    report = evaluate_checkpoint(_resolve(workdir, args.checkpoint), _eval_domains(cfg), e.n_images, e.seed,
                                 e.context_k, e.image_size, e.dark_channel_patch)
    report.save(out / "report.json")
    rows = [{"domain": k, **v} for k, v in report.domains.items()]
    _write_csv(out / "report.csv", rows, list(rows[0]))
    plot_eval(report.to_dict(), out / "eval")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_ablate(cfg, args, workdir):
    from hazemeta.evaluate import ABLATION_VARIANTS, run_ablation

    out = _resolve(workdir, args.out)
    _echo_and_save(cfg, out)
    base = cfg.train
    if cfg.ablation.max_steps is not None:
        base = replace(base, max_steps=cfg.ablation.max_steps)
    variants = [v for v in ABLATION_VARIANTS if v.name in cfg.ablation.variants]
    e = cfg.eval
    res = run_ablation(base, variants, cfg.data.domain_specs(), cfg.data.heldout_domains, cfg.ablation.seeds,
                       out, e.n_images, e.context_k, e.image_size, e.seed)
    print(res.summary_path.read_text(), end="")
    return EXIT_OK


def cmd_dehaze(cfg, args, workdir):
    from hazemeta.datagen import ingest_image_folder, load_image, save_image
    from hazemeta.trainer import infer

    src = _resolve(workdir, args.input)
    try:
        hazy = load_image(src)
    except Exception as exc:
        raise DataError(f"cannot read {src}: {exc}") from exc
    context = []
    if args.context:
        context = ingest_image_folder(_resolve(workdir, args.context), paired=False)
    out = infer(_resolve(workdir, args.checkpoint), hazy, context)
    dst = _resolve(workdir, args.output)
    save_image(out, dst)
    print(f"wrote {dst} (context images: {len(context)})")
    return EXIT_OK


def cmd_gradcheck(cfg, args, workdir):
    from hazemeta.gradcheck import suite

    results = suite(args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  rel_err={r.rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hazemeta", description="Meta-learned dehazing toolkit", allow_abbrev=False)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render synthetic hazy/clear PNG pairs and manifests")
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="episodic meta-training")
    s.add_argument("--out", default="run")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on synthetic domains")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare the ablation variants")
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dehaze", help="dehaze one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--context", help="folder of unlabeled hazy images from the same domain")
    s.set_defaults(func=cmd_dehaze)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    bad = [r for r in rest if not (r.startswith("--") and "." in r.split("=", 1)[0])]
    if bad:
        parser.print_usage(sys.stderr)
        print(f"hazemeta: error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return EXIT_CONFIG
    workdir = Path(args.workdir)
    try:
        from hazemeta.config import parse_config

        config_path = _resolve(workdir, args.config) if args.config else None
        cfg = parse_config(config_path, rest)
        return args.func(cfg, args, workdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
