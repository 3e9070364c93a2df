"""Command-line entry point: ``etherkit {verify,sweep,perturb,ablate,train}``."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from typing import Sequence

from . import harness as H
from .checkpoint import load_checkpoint, model_tensors, save_checkpoint, write_atomic  # noqa: F401  (re-exported)
from .config import ExperimentConfig, load_config
from .errors import CheckpointFormatError, ConfigurationError
from .verify import FAULTS, run_suites

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3

SWEEP_HEADER = ["method", "n", "lr", "epoch", "loss", "transform_distance", "weights_distance", "delta_he", "diverged"]
PERTURB_HEADER = ["method", "strength", "deviation"]
ABLATE_HEADER = ["method", "n", "two_sided", "params", "ops_mul", "ops_add", "final_loss"]
LORA_NOTE = "# note: lora transform_distance is the additive |dW|_F, not comparable with multiplicative distances"
PERTURB_METHODS = ("ether", "ether_plus", "oft", "naive")

# flag -> config key
FLAG_KEYS = {"seed": "seed", "out": "out", "method": "method", "lr": "lr", "blocks": "n", "rank": "r",
             "two_sided": "two_sided", "epochs": "epochs", "threads": "threads"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="etherkit", description="Reflection-based finetuning adapters and experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("verify", "run the invariant suites"),
                            ("sweep", "learning-rate sweep, one CSV row per method, lr and epoch"),
                            ("perturb", "output deviation under random transformations of given strength"),
                            ("ablate", "block-count and sidedness ablations"),
                            ("train", "finetune one adapter and optionally save a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="flat key = value file")
        p.add_argument("--seed", metavar="U64")
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--method", metavar="NAME")
        p.add_argument("--lr", metavar="REAL")
        p.add_argument("--blocks", metavar="N")
        p.add_argument("--rank", metavar="R")
        p.add_argument("--two-sided", metavar="BOOL")
        p.add_argument("--epochs", metavar="N")
        p.add_argument("--threads", metavar="N")
        if name == "verify":
            p.add_argument("--inject-fault", action="append", default=[], choices=FAULTS,
                           help="deliberately break the implementation to exercise the suites")
        if name == "train":
            p.add_argument("--checkpoint", metavar="PATH", help="write adapter and base tensors here")
    return parser


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "NA"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def render_csv(echo: Sequence[str], header: Sequence[str], rows, notes: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in (*echo, *notes):
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def _epoch_rows(runs):
    for run in runs:
        for rec in run.epochs:
            yield (rec.method, rec.n, rec.lr, rec.epoch, rec.loss, rec.transform_distance, rec.weights_distance,
                   rec.delta_he, rec.diverged)


def cmd_verify(cfg: ExperimentConfig, faults: Sequence[str] = (), stream=None) -> int:
    stream = stream or sys.stdout
    results = run_suites(seed=cfg.seed, faults=faults)
    suites: dict[str, list] = {}
    for r in results:
        suites.setdefault(r.suite, []).append(r)
        print(f"  [{'pass' if r.ok else 'FAIL'}] {r.suite}/{r.name}: {r.detail}", file=stream)
    for suite, rs in suites.items():
        failed = [r.name for r in rs if not r.ok]
        status = "pass" if not failed else "FAIL (" + ", ".join(failed) + ")"
        print(f"suite {suite}: {len(rs) - len(failed)}/{len(rs)} {status}", file=stream)
    failed = [f"{r.suite}/{r.name}" for r in results if not r.ok]
    if failed:
        print("verification failed: " + ", ".join(failed), file=stream)
        return EXIT_VERIFY
    print(f"verification passed: {len(results)} checks in {len(suites)} suites", file=stream)
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> str:
    result = H.lr_sweep(cfg.methods, cfg.lr_grid, cfg.task(), cfg.epochs, [cfg.seed], unit_lr=cfg.unit_lr,
                        n=cfg.n, r=cfg.r, two_sided=cfg.two_sided, threads=cfg.threads, **cfg.train_kwargs())
    notes = [LORA_NOTE] if "lora" in cfg.methods else []
    return render_csv(cfg.echo("sweep"), SWEEP_HEADER, _epoch_rows(result.runs), notes)


def cmd_perturb(cfg: ExperimentConfig) -> str:
    task = cfg.task()
    model = H.make_pretrained(task)
    probes = H.make_task_data(task).probes
    rows, notes = [], []
    for method in cfg.methods:
        if method not in PERTURB_METHODS:
            notes.append(f"# note: {method} has no multiplicative transformation and is skipped")
            continue
        for strength, dev in H.perturbation_sweep(model, method, cfg.strengths, probes, cfg.seed, cfg.n):
            rows.append((method, strength, dev))
    return render_csv(cfg.echo("perturb"), PERTURB_HEADER, rows, notes)


def cmd_ablate(cfg: ExperimentConfig) -> str:
    task, kw = cfg.task(), cfg.train_kwargs()
    rows = H.ablate_blocks(cfg.method, cfg.n_grid, task, lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, r=cfg.r,
                           two_sided=cfg.two_sided, threads=cfg.threads, **kw)
    rows += H.ablate_sidedness(task, lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, n=cfg.n,
                               threads=cfg.threads, **kw)
    table = [(r.method, r.n, r.two_sided, r.params, r.ops_mul, r.ops_add, r.final_loss) for r in rows]
    return render_csv(cfg.echo("ablate"), ABLATE_HEADER, table)


def cmd_train(cfg: ExperimentConfig):
    task = cfg.task()
    model = H.make_pretrained(task)
    config = H.AdapterConfig(cfg.method, n=cfg.n, r=cfg.r, two_sided=cfg.two_sided)
    run = H.finetune(model, config, task, cfg.lr, cfg.epochs, cfg.seed, keep_model=True, **cfg.train_kwargs())
    notes = [LORA_NOTE] if cfg.method == "lora" else []
    return run, render_csv(cfg.echo("train"), SWEEP_HEADER, _epoch_rows([run]), notes)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS and v is not None}
        if args.command == "train" and args.checkpoint is not None:
            overrides["checkpoint"] = args.checkpoint
        if args.method is not None and args.command in ("sweep", "perturb"):
            overrides["methods"] = args.method
        cfg = load_config(args.config, overrides)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        if args.command == "verify":
            return cmd_verify(cfg, args.inject_fault)
        out = cfg.out or f"{args.command}.csv"
        if args.command == "sweep":
            _write(out, cmd_sweep(cfg))
        elif args.command == "perturb":
            _write(out, cmd_perturb(cfg))
        elif args.command == "ablate":
            _write(out, cmd_ablate(cfg))
        else:
            run, text = cmd_train(cfg)
            _write(out, text)
            if cfg.checkpoint:
                save_checkpoint(cfg.checkpoint, model_tensors(run.model))
            print(f"{cfg.method}: base loss {run.base_loss:.6g}, final loss {run.final_loss:.6g}")
        print(f"wrote {out}")
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
