"""Flat run configuration: defaults, `key = value` files, canonical form.

One namespace covers every pipeline stage so a single file (plus the seed)
reproduces a whole experiment. Parsing is strict: unknown keys and bad
values are collected and reported together. The canonical rendering is
byte-stable and hashed into every output artifact header.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .data import ColumnSchema
from .evaluation import EvalConfig, SyntheticSpec
from .model import HyperParams
from .training import TrainConfig


class ConfigError(Exception):
    """Carries one message per problem, newline-joined."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(x) for x in s.split(",")) if s else ()


def _parse_floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(x) for x in s.split(",")) if s else ()


_PARSERS = {
    "int": lambda s: int(s.strip()),
    "float": lambda s: float(s.strip()),
    "str": lambda s: s.strip(),
    "bool": _parse_bool,
    "ints": _parse_ints,
    "floats": _parse_floats,
}


def render_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats"):
        return ",".join(repr(v) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    default: object
    help: str
    choices: tuple[str, ...] | None = None


FIELDS: tuple[Field, ...] = (
    # data preparation
    Field("input", "str", "", "raw interaction file for `prepare`"),
    Field("delimiter", "str", "auto", "input field separator", ("auto", "tab", "comma")),
    Field("columns", "str", "user,item,rating",
          "input column order; subset of user,item,rating,timestamp"),
    Field("positive_threshold", "float", 3.0,
          "keep interactions with rating strictly above this; unrated rows always kept"),
    Field("min_actions", "int", 6, "drop users with fewer positives than this"),
    Field("holdout", "str", "random", "held-out item choice per user", ("random", "last")),
    Field("n_neg", "int", 100, "evaluation negatives sampled per user"),
    Field("strict_negative_pairs", "bool", False,
          "require both items of a sampled negative pair to be non-interacted"),
    # model dimensions
    Field("dim", "int", 128, "embedding dimensionality"),
    Field("aspects", "int", 2, "embedding vectors per item"),
    Field("mem_slices", "int", 20, "rows in the memory key/value matrices"),
    Field("hidden_size", "int", 10, "hidden width of the weight-attention MLP"),
    # training
    Field("batch_size", "int", 2000, "triplets per training batch"),
    Field("learning_rate", "float", 0.001, "Adam learning rate"),
    Field("epochs", "int", 30, "training epochs (total target when resuming)"),
    Field("adam_beta1", "float", 0.9, "Adam first-moment decay"),
    Field("adam_beta2", "float", 0.999, "Adam second-moment decay"),
    Field("adam_eps", "float", 1e-8, "Adam denominator epsilon"),
    Field("weight_decay", "float", 0.0, "optional L2 coefficient (0 disables)"),
    Field("ablation", "str", "full", "model variant to train", ("full", "npil", "nmal")),
    Field("checkpoint_every", "int", 0, "epochs between checkpoints (0 = final only)"),
    Field("resume", "str", "", "checkpoint to continue training from"),
    Field("early_stop_patience", "int", 0,
          "stop after this many epochs without HR improvement (0 = off)"),
    # evaluation
    Field("topn", "ints", (10,), "ranking cutoffs, comma separated"),
    Field("relation_ratio", "float", 1.0, "fraction of history relations used at scoring"),
    Field("ratio_scope", "str", "both",
          "apply the ratio to user-embedding pairs, score terms, or both",
          ("both", "pairs", "terms")),
    Field("ratios", "floats", (), "sweep ratios for `evaluate` (empty = no sweep)"),
    Field("bucket_edges", "ints", (10, 20, 30), "history-size bucket edges for reports"),
    Field("user_embedding_mean", "bool", False,
          "average instead of sum when aggregating user relations"),
    # synthetic data
    Field("synth_users", "int", 200, "synthetic: number of users"),
    Field("synth_items", "int", 500, "synthetic: number of items"),
    Field("synth_genres", "int", 10, "synthetic: number of item genres"),
    Field("synth_items_per_user", "int", 12, "synthetic: positives drawn per user"),
    Field("synth_affinity", "float", 0.9,
          "synthetic: probability a draw comes from the preferred genre"),
    # io / misc
    Field("seed", "int", 42, "master seed; every stage derives a named substream"),
    Field("threads", "int", 0, "evaluation worker threads (0 = all cores); "
                               "REDA_THREADS overrides"),
    Field("out", "str", "reda_out", "output directory"),
    Field("split_dir", "str", "", "directory holding a prepared split"),
    Field("checkpoint", "str", "", "model checkpoint to evaluate or export"),
    Field("pairs_file", "str", "", "raw item-pair list (two columns) for `export`"),
    Field("users_file", "str", "", "raw user-id list (one per line) for `export`"),
    Field("dump_params", "bool", False, "also write every parameter tensor as TSV"),
)

FIELD_MAP = {f.name: f for f in FIELDS}

# File locations and worker counts do not change computed results, so they
# stay out of the experiment hash: two runs with the same hash must produce
# byte-identical artifacts wherever they are written.
HASH_EXCLUDED = frozenset({
    "input", "out", "split_dir", "checkpoint", "resume",
    "pairs_file", "users_file", "threads",
})


class RunConfig:
    """Merged configuration with attribute access per registry field."""

    def __init__(self, **overrides):
        unknown = set(overrides) - set(FIELD_MAP)
        if unknown:
            raise ConfigError("\n".join(f"unknown config key: {k}" for k in sorted(unknown)))
        for f in FIELDS:
            setattr(self, f.name, overrides.get(f.name, f.default))

    def __eq__(self, other):
        return isinstance(other, RunConfig) and all(
            getattr(self, f.name) == getattr(other, f.name) for f in FIELDS
        )

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in FIELDS}

    def canonical(self) -> str:
        lines = [
            f"{f.name} = {render_value(f.kind, getattr(self, f.name))}"
            for f in sorted(FIELDS, key=lambda f: f.name)
        ]
        return "\n".join(lines) + "\n"

    def canonical_experiment(self) -> str:
        """Canonical form without IO paths or worker counts; what the
        config hash covers and what reports echo, so artifacts written to
        different locations stay byte-identical."""
        lines = [
            f"{f.name} = {render_value(f.kind, getattr(self, f.name))}"
            for f in sorted(FIELDS, key=lambda f: f.name)
            if f.name not in HASH_EXCLUDED
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(
            self.canonical_experiment().encode("utf-8")).hexdigest()[:12]

    # --- projections into the module-level configs ---

    def schema(self) -> ColumnSchema:
        delim = {"auto": None, "tab": "\t", "comma": ","}[self.delimiter]
        return ColumnSchema.parse(self.columns, delimiter=delim)

    def hyper_params(self) -> HyperParams:
        return HyperParams(dim=self.dim, aspects=self.aspects,
                           mem_slices=self.mem_slices, hidden=self.hidden_size,
                           n_neg=self.n_neg, relation_ratio=self.relation_ratio)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            epochs=self.epochs, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            weight_decay=self.weight_decay, seed=self.seed,
            ablation=self.ablation, strict_negatives=self.strict_negative_pairs,
            early_stop_patience=self.early_stop_patience,
        )

    def eval_config(self, stream: str = "eval") -> EvalConfig:
        return EvalConfig(
            topn=tuple(self.topn), ratio=self.relation_ratio,
            ratio_scope=self.ratio_scope, seed=self.seed, stream=stream,
            bucket_edges=tuple(self.bucket_edges), threads=self.threads,
            user_mean=self.user_embedding_mean,
            config_echo=self.canonical_experiment(),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_users=self.synth_users, n_items=self.synth_items,
            n_genres=self.synth_genres, items_per_user=self.synth_items_per_user,
            affinity=self.synth_affinity, seed=self.seed,
        )


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; '#' lines and blanks are skipped.

    Raises ConfigError listing every bad line and unknown key at once.
    """
    overrides: dict = {}
    problems: list[str] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"{source}:{line_no}: expected 'key = value', got {raw!r}")
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        field = FIELD_MAP.get(key)
        if field is None:
            problems.append(f"{source}:{line_no}: unknown config key {key!r}")
            continue
        try:
            overrides[key] = _PARSERS[field.kind](val)
        except ValueError as exc:
            problems.append(f"{source}:{line_no}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError("\n".join(problems))
    return overrides


def load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def parse_cli_value(key: str, raw: str) -> object:
    field = FIELD_MAP.get(key)
    if field is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[field.kind](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from exc


def validate(cfg: RunConfig) -> list[str]:
    """Collect every constraint violation; empty list means valid."""
    errs: list[str] = []

    def check(cond, msg):
        if not cond:
            errs.append(msg)

    for f in FIELDS:
        if f.choices is not None:
            val = getattr(cfg, f.name)
            check(val in f.choices, f"{f.name} must be one of {', '.join(f.choices)}; got {val!r}")
    check(cfg.dim >= 1, "dim must be >= 1")
    check(cfg.aspects >= 1, "aspects must be >= 1")
    check(cfg.mem_slices >= 1, "mem_slices must be >= 1")
    check(cfg.hidden_size >= 1, "hidden_size must be >= 1")
    check(cfg.batch_size >= 1, "batch_size must be >= 1")
    check(cfg.learning_rate >= 0, "learning_rate must be >= 0")
    check(cfg.epochs >= 0, "epochs must be >= 0")
    check(0 < cfg.adam_beta1 < 1, "adam_beta1 must be in (0, 1)")
    check(0 < cfg.adam_beta2 < 1, "adam_beta2 must be in (0, 1)")
    check(cfg.adam_eps > 0, "adam_eps must be > 0")
    check(cfg.weight_decay >= 0, "weight_decay must be >= 0")
    check(cfg.min_actions >= 1, "min_actions must be >= 1")
    check(cfg.n_neg >= 1, "n_neg must be >= 1")
    check(cfg.checkpoint_every >= 0, "checkpoint_every must be >= 0")
    check(cfg.early_stop_patience >= 0, "early_stop_patience must be >= 0")
    check(0 < cfg.relation_ratio <= 1, "relation_ratio must be in (0, 1]")
    check(all(0 < r <= 1 for r in cfg.ratios), "every sweep ratio must be in (0, 1]")
    check(len(cfg.topn) > 0 and all(n >= 1 for n in cfg.topn), "topn needs cutoffs >= 1")
    check(
        len(cfg.bucket_edges) > 0 and list(cfg.bucket_edges) == sorted(set(cfg.bucket_edges)),
        "bucket_edges must be non-empty and strictly increasing",
    )
    check(cfg.seed >= 0, "seed must be >= 0")
    check(cfg.threads >= 0, "threads must be >= 0")
    check(cfg.synth_users >= 1, "synth_users must be >= 1")
    check(cfg.synth_items >= 1, "synth_items must be >= 1")
    check(cfg.synth_genres >= 1, "synth_genres must be >= 1")
    check(cfg.synth_items_per_user >= 1, "synth_items_per_user must be >= 1")
    check(0.5 < cfg.synth_affinity <= 1.0, "synth_affinity must be in (0.5, 1]")
    try:
        cfg.schema()
    except ValueError as exc:
        errs.append(f"columns: {exc}")
    return errs
