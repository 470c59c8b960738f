"""Command-line entry point.

Subcommands: ``datagen`` (write a toy dataset), ``run`` (flic / local /
theory experiment), ``theory`` (shortcut for the regression harness),
``eval`` (score a checkpoint on a dataset), ``onboard`` (fit a new
client against a trained checkpoint).

Exit codes: 0 success, 2 configuration error, 3 runtime divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, build_config, parse_config
from .federation import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a flat JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--workers", type=int, help="bound on concurrent client workers")
    parser.add_argument(
        "--mode", choices=["flic", "local", "theory"], help="override the run mode"
    )


def _load_config(args: argparse.Namespace, forced_mode: str | None = None):
    if args.config is not None:
        cfg = parse_config(args.config)
    else:
        cfg = build_config({})
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    mode = forced_mode or getattr(args, "mode", None)
    if mode is not None:
        overrides["mode"] = mode
    if overrides:
        from dataclasses import asdict

        doc = asdict(cfg)
        doc.update(overrides)
        cfg = build_config(doc, apply_env=False)
    return cfg


def _cmd_datagen(args) -> int:
    from .experiment import write_dataset

    cfg = _load_config(args)
    return write_dataset(cfg, args.out or cfg.out_dir)


def _cmd_run(args, forced_mode: str | None = None) -> int:
    from .experiment import run_command

    cfg = _load_config(args, forced_mode=forced_mode)
    return run_command(cfg)


def _cmd_eval(args) -> int:
    import numpy as np

    from .datagen import load_clients
    from .federation import ClientState, evaluate
    from .nets import AdamState
    from .reporting import load_checkpoint

    state, models = load_checkpoint(args.checkpoint)
    datasets, _ = load_clients(args.data)
    by_id = {ds.client_id: ds for ds in datasets}
    clients = []
    for cid in sorted(models):
        if cid not in by_id:
            raise ConfigError(f"checkpoint client {cid} missing from dataset")
        phi, head, classes, weight = models[cid]
        clients.append(
            ClientState(
                client_id=cid,
                data=by_id[cid],
                classes=np.asarray(classes),
                phi=phi,
                head=head,
                phi_opt=AdamState.for_params(phi.params(), 0.0),
                head_opt=AdamState.for_params(head.params(), 0.0),
                weight=weight,
            )
        )
    accs, mean_acc = evaluate(clients, state)
    for cid in sorted(accs):
        print(f"client {cid}: accuracy {accs[cid]:.4f}")
    print(f"mean_accuracy {mean_acc:.4f}")
    return EXIT_OK


def _cmd_onboard(args) -> int:
    from .datagen import load_clients
    from .federation import client_accuracy, onboard_new_client
    from .reporting import load_checkpoint

    cfg = _load_config(args)
    state, _ = load_checkpoint(args.checkpoint)
    datasets, _ = load_clients(args.data)
    by_id = {ds.client_id: ds for ds in datasets}
    if args.client_id not in by_id:
        raise ConfigError(f"client {args.client_id} not present in dataset")
    rounds = args.rounds if args.rounds is not None else cfg.onboard_rounds
    client = onboard_new_client(
        by_id[args.client_id],
        state,
        cfg.round_config(),
        hidden_dim=cfg.hidden_dim,
        rounds=rounds,
    )
    acc = client_accuracy(client, state.alpha)
    print(f"onboarded client {args.client_id}: accuracy {acc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flic",
        description="Personalized federated learning over heterogeneous feature spaces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a toy multi-client dataset")
    _add_common(p)

    p = sub.add_parser("run", help="run a federated / local / theory experiment")
    _add_common(p)

    p = sub.add_parser("theory", help="run the linear-regression recovery harness")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("onboard", help="fit a new client against a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--rounds", type=int, help="local rounds for the new client")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "datagen":
            return _cmd_datagen(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "theory":
            return _cmd_run(args, forced_mode="theory")
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "onboard":
            return _cmd_onboard(args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
