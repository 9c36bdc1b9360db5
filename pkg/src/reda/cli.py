"""Command-line entry point: prepare, train, evaluate, export, synth.

Every subcommand accepts the full config-key set as flags plus an optional
`--config FILE`; flags override file values, and REDA_THREADS overrides the
threads key last. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, export_params_tsv
from .config import (
    FIELDS, ConfigError, RunConfig, load_config_file, parse_cli_value,
    render_value, validate,
)
from .data import (
    DataError, filter_dataset, leave_one_out_split, load_interactions,
    load_split, save_dataset_stats, save_split, SPLIT_FILES,
)
from .evaluation import (
    evaluate, export_embeddings, format_report, generate_synthetic,
    robustness_sweep, write_report, write_sweep,
)
from .training import train


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", metavar="FILE",
                        help="config file with 'key = value' lines")
    for f in FIELDS:
        hlp = f.help
        if f.choices:
            hlp += " [" + "|".join(f.choices) + "]"
        hlp += f" (default: {render_value(f.kind, f.default) or '(empty)'})"
        parent.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                            metavar="V", help=hlp)
    ap = argparse.ArgumentParser(
        prog="reda",
        description="Relation-embedding recommender: prepare data, train, "
                    "evaluate, and export embeddings.",
    )
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, desc in (
        ("prepare", "ingest raw interactions, filter, and write a leave-one-out split"),
        ("train", "train a model on a prepared split"),
        ("evaluate", "rank held-out items and report HR/nDCG"),
        ("export", "write relation and user embedding TSVs"),
        ("synth", "generate a planted-genre synthetic interaction file"),
    ):
        sub.add_parser(name, parents=[parent], help=desc, description=desc)
    return ap


def merge_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict = {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        overrides.update(load_config_file(args.config))
    for f in FIELDS:
        raw = getattr(args, f.name, None)
        if raw is not None:
            overrides[f.name] = parse_cli_value(f.name, raw)
    cfg = RunConfig(**overrides)
    env_threads = os.environ.get("REDA_THREADS")
    if env_threads:
        try:
            cfg.threads = int(env_threads)
        except ValueError:
            raise UsageError(f"REDA_THREADS must be an integer, got {env_threads!r}")
    problems = validate(cfg)
    if problems:
        raise UsageError("\n".join(problems))
    return cfg


def _require_file(path: str, what: str) -> None:
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")


def _require_split_dir(cfg: RunConfig) -> None:
    if not cfg.split_dir:
        raise UsageError("split_dir is required")
    for name in SPLIT_FILES:
        p = os.path.join(cfg.split_dir, name)
        if not os.path.exists(p):
            raise UsageError(f"split file not found: {p}")


def cmd_prepare(cfg: RunConfig) -> int:
    _require_file(cfg.input, "input")
    chash = cfg.config_hash()
    result = load_interactions(cfg.input, cfg.schema())
    for fail in result.errors:
        print(f"{cfg.input}:{fail.line_no}: {fail.reason}", file=sys.stderr)
    ds = filter_dataset(result.records, cfg.positive_threshold, cfg.min_actions)
    split = leave_one_out_split(ds, cfg.n_neg, cfg.seed, holdout=cfg.holdout)
    os.makedirs(cfg.out, exist_ok=True)
    save_split(split, cfg.out, config_hash=chash)
    save_dataset_stats(ds, os.path.join(cfg.out, "dataset_stats.tsv"), config_hash=chash)
    print(f"parsed {len(result.records)} records ({len(result.errors)} malformed lines)")
    print(f"dataset: {ds.num_users} users, {ds.num_items} items, "
          f"{ds.num_actions} actions, density {100 * ds.density():.4f}%")
    print(f"split written to {cfg.out} (config_hash={chash})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require_split_dir(cfg)
    chash = cfg.config_hash()
    split = load_split(cfg.split_dir)
    hp = cfg.hyper_params()
    tcfg = cfg.train_config()

    params = adam = None
    start_epoch = 0
    if cfg.resume:
        _require_file(cfg.resume, "resume checkpoint")
        ck = load_checkpoint(cfg.resume)
        if ck.adam is None:
            raise DataError(f"{cfg.resume}: no optimizer state; cannot resume")
        if ck.params.num_items != split.train.num_items:
            raise DataError(
                f"checkpoint has {ck.params.num_items} items, split has "
                f"{split.train.num_items}"
            )
        params, adam, start_epoch = ck.params, ck.adam, ck.epoch
        print(f"resuming from {cfg.resume} at epoch {start_epoch}")

    os.makedirs(cfg.out, exist_ok=True)
    final_path = os.path.join(cfg.out, "model.ckpt")

    def on_epoch(epoch, params_, adam_, loss):
        print(f"epoch {epoch}\tloss {loss:.6f}")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(cfg.out, f"model_epoch{epoch + 1}.ckpt")
            save_checkpoint(path, params_, config_hash=chash, adam=adam_,
                            epoch=epoch + 1)

    validate_fn = None
    if cfg.early_stop_patience > 0:
        ecfg = cfg.eval_config()

        def validate_fn(params_):
            rep = evaluate(params_, split, ecfg)
            return rep.hr[ecfg.topn[0]]

    result = train(split, hp, tcfg, params=params, adam=adam,
                   start_epoch=start_epoch, epoch_callback=on_epoch,
                   validate_fn=validate_fn)
    save_checkpoint(final_path, result.params, config_hash=chash,
                    adam=result.adam, epoch=result.epochs_run)
    loss_path = os.path.join(cfg.out, "loss.tsv")
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash}\n")
        fh.write("epoch\tmean_loss\twall_clock_seconds\n")
        for epoch, loss, secs in result.history:
            fh.write(f"{epoch}\t{loss!r}\t{secs!r}\n")
    if result.skipped_batches:
        print(f"skipped {result.skipped_batches} non-finite batches", file=sys.stderr)
    print(f"checkpoint written to {final_path} "
          f"({result.epochs_run} epochs, backend={kernels.active_backend_name()})")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    _require_file(cfg.checkpoint, "checkpoint")
    _require_split_dir(cfg)
    chash = cfg.config_hash()
    ck = load_checkpoint(cfg.checkpoint)
    split = load_split(cfg.split_dir)
    if ck.params.num_items != split.train.num_items:
        raise DataError(
            f"checkpoint item table {ck.params.num_items} x {ck.params.k} x "
            f"{ck.params.dim} does not match split with {split.train.num_items} items"
        )
    ecfg = cfg.eval_config()
    report = evaluate(ck.params, split, ecfg)
    os.makedirs(cfg.out, exist_ok=True)
    write_report(report, os.path.join(cfg.out, "report.tsv"), config_hash=chash)
    print(format_report(report))
    if cfg.ratios:
        rows = robustness_sweep(ck.params, split, ecfg, cfg.ratios)
        write_sweep(rows, os.path.join(cfg.out, "sweep.tsv"), config_hash=chash)
        for ratio, rep in rows:
            cells = "  ".join(
                f"HR@{n}={rep.hr[n]:.4f} nDCG@{n}={rep.ndcg[n]:.4f}" for n in rep.topn
            )
            print(f"ratio {ratio:.2f}: {cells}")
    return 0


def _read_pairs_file(path: str) -> list[tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split(",")
            if len(parts) < 2:
                raise DataError(f"{path}: pair line needs two ids, got {line!r}")
            pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs


def _read_users_file(path: str) -> list[str]:
    users = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                users.append(line)
    return users


def cmd_export(cfg: RunConfig) -> int:
    _require_file(cfg.checkpoint, "checkpoint")
    _require_split_dir(cfg)
    chash = cfg.config_hash()
    ck = load_checkpoint(cfg.checkpoint)
    split = load_split(cfg.split_dir)
    pairs = _read_pairs_file(cfg.pairs_file) if cfg.pairs_file else []
    users = _read_users_file(cfg.users_file) if cfg.users_file else []
    skipped = export_embeddings(ck.params, pairs, users, split, cfg.out,
                                config_hash=chash)
    if skipped["pairs"] or skipped["users"]:
        print(f"skipped unknown ids: {skipped['pairs']} pairs, "
              f"{skipped['users']} users", file=sys.stderr)
    if cfg.dump_params:
        export_params_tsv(ck.params, cfg.out, config_hash=chash)
    print(f"embeddings written to {cfg.out} "
          f"({len(pairs) - skipped['pairs']} pairs, {len(users) - skipped['users']} users)")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    chash = cfg.config_hash()
    ds = generate_synthetic(cfg.synthetic_spec())
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "interactions.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash}\n")
        for u in range(ds.num_users):
            for it in ds.positives[u]:
                fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[int(it)]}\n")
    print(f"synthetic dataset: {ds.num_users} users, {ds.num_items} items, "
          f"{ds.num_actions} actions -> {path}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = merge_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
