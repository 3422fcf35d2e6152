"""Command line entry point: ``sdpolicy {gen-data,train,eval,profile,stats}``.

Exit codes: 0 success, 2 configuration error, 3 file/format error,
4 numeric failure (non-finite loss or values).
"""

from __future__ import annotations

import argparse
import logging
import sys


from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config, schema_help
from .energy import EnergyConstants, profile_network, report_to_csv, report_to_text, summary_to_csv
from .tensor import NonFiniteError
from .toyenv import DatasetFormatError, generate_dataset, read_dataset, write_metrics_csv
from .train import (
    NumericError,
    build_model,
    channel_stats,
    eval_checkpoint,
    loss_svg,
    read_metrics,
    sample_inputs,
    stats_to_csv,
    train,
    write_text,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("sdpolicy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdpolicy",
        description="Spiking diffusion policy toolkit.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=schema_help(),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, epilog=schema_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    add("gen-data", "roll out the scripted expert and write an SDPD dataset")

    p = add("train", "train the spiking denoiser")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--chart", help="write an SVG loss chart here after training")

    p = add("eval", "closed-loop evaluation of one or more checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files; the best one is reported")
    p.add_argument("--out", help="metrics CSV path (default: stdout)")
    p.add_argument("--episodes", type=int, help="override eval.n_episodes")
    p.add_argument("--seed", type=int, help="override eval.seed")
    p.add_argument("--strict", action="store_true",
                   help="require the checkpoint config digest to match --config/--set")

    p = add("profile", "energy estimate from measured firing rates")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="per-layer CSV path (default: text table on stdout)")
    p.add_argument("--summary", help="summary CSV path")

    p = add("stats", "per-channel firing rate, firing potential and threshold")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def _emit(text: str, path: str | None) -> None:
    if path:
        write_text(path, text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args, cfg) -> int:
    d = cfg["data"]
    ds = generate_dataset(d["n_traj"], d["seed"], d["path"])
    lengths = [len(t.actions) for t in ds.trajectories]
    print(f"wrote {len(lengths)} trajectories ({sum(lengths)} steps) to {d['path']}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    result = train(cfg, resume=args.resume)
    print(f"trained to epoch {result.checkpoint.epoch}; metrics in {result.metrics_path}")
    if args.chart:
        write_text(args.chart, loss_svg(read_metrics(result.metrics_path)))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    episodes = args.episodes or cfg["eval"]["n_episodes"]
    seed = cfg["eval"]["seed"] if args.seed is None else args.seed
    best = None
    for path in args.checkpoints:
        ck_epoch = load_checkpoint(path).epoch
        m = eval_checkpoint(path, episodes, seed, cfg, _data_override(cfg), strict=args.strict)
        log.info("%s: success %.3f", path, m["success_rate"])
        if best is None or (m["success_rate"], -ck_epoch) > (best[0]["success_rate"], -best[1]):
            best = (m, ck_epoch, path)
    metrics, _, path = best
    if len(args.checkpoints) > 1:
        print(f"best checkpoint: {path}", file=sys.stderr)
    if args.out:
        write_metrics_csv(metrics, args.out)
    else:
        from .toyenv import METRICS_COLUMNS

        print(",".join(METRICS_COLUMNS))
        print(",".join(str(metrics[c]) for c in METRICS_COLUMNS))
    return EXIT_OK


def _data_override(cfg) -> str | None:
    """Dataset named on the command line; None means the checkpoint's own."""
    return cfg["data"]["path"] if "data.path" in cfg.explicit else None


def _checkpoint_inputs(args, cfg, n: int):
    ck = load_checkpoint(args.checkpoint)
    net = build_model(ck.config, ck.params)
    ds = read_dataset(_data_override(cfg) or ck.config["data"]["path"])
    return ck, net, sample_inputs(ck.config, ds, n, cfg["stats"]["seed"])


def cmd_profile(args, cfg) -> int:
    e = cfg["energy"]
    _, net, (x, t, obs) = _checkpoint_inputs(args, cfg, e["batch"])
    report = profile_network(net, x, t, obs, EnergyConstants(e["e_ac"], e["e_mac"]), e["reference_reduction"])
    if args.out:
        write_text(args.out, report_to_csv(report))
    else:
        sys.stdout.write(report_to_text(report))
    if args.summary:
        write_text(args.summary, summary_to_csv(report))
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    _, net, (x, t, obs) = _checkpoint_inputs(args, cfg, cfg["stats"]["n_samples"])
    _emit(stats_to_csv(channel_stats(net, x, t, obs)), args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        for notice in cfg.validate():
            print(f"notice: {notice}", file=sys.stderr)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # digest mismatch and similar contract violations on inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
