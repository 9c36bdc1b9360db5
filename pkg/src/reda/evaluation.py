"""Leave-one-out ranking evaluation, sweeps, synthetic data, and exports.

Every user's held-out item is ranked against that user's fixed negatives by
the relation-based score; HR@N / nDCG@N aggregate the resulting ranks, with
per-sparsity-bucket breakdowns. A planted-genre synthetic generator provides
a desk-scale dataset whose structure a working model must recover.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Dataset, LooSplit
from .model import HyperParams, ModelParams, history_pairs, softmax, subsample_indices
from .rng import substream


def hit_rate(rank: int, n: int) -> int:
    """1 iff the held-out item landed in the top n (cutoff inclusive)."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1 if rank <= n else 0


def ndcg_at(rank: int, n: int) -> float:
    """Single-relevant-item nDCG: 1/log2(rank+1) inside the cutoff, else 0."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0


def random_ranker_hr(n: int, n_neg: int) -> float:
    """Expected HR@n when the held-out rank is uniform over n_neg+1 slots."""
    return min(n, n_neg + 1) / (n_neg + 1)


@dataclass
class EvalConfig:
    topn: tuple[int, ...] = (10,)
    ratio: float = 1.0
    ratio_scope: str = "both"      # both | pairs | terms
    seed: int = 42
    stream: str = "eval"
    bucket_edges: tuple[int, ...] = (10, 20, 30)
    threads: int = 1
    user_mean: bool = False
    config_echo: str = ""

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError("ratio must be in (0, 1]")
        if self.ratio_scope not in ("both", "pairs", "terms"):
            raise ValueError("ratio_scope must be both, pairs, or terms")
        if any(n < 1 for n in self.topn):
            raise ValueError("topn cutoffs must be >= 1")
        if list(self.bucket_edges) != sorted(set(self.bucket_edges)):
            raise ValueError("bucket_edges must be strictly increasing")


def order_candidates(cands, scores) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending candidate id."""
    cands = np.asarray(cands, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((cands, -scores))


@dataclass
class GroupRow:
    """Metrics for one train-history-size bucket [lo, hi)."""

    lo: int
    hi: int | None          # None = unbounded top bucket
    users: int
    hits: dict = field(default_factory=dict)    # N -> int
    hr: dict = field(default_factory=dict)      # N -> float | None
    ndcg: dict = field(default_factory=dict)    # N -> float | None

    def label(self) -> str:
        return f"<{self.hi}" if self.lo == 0 else (
            f">={self.lo}" if self.hi is None else f"{self.lo}-{self.hi - 1}")


@dataclass
class EvalReport:
    hr: dict                 # N -> float
    ndcg: dict               # N -> float
    hits: dict               # N -> int (exact, for consistency identities)
    per_user: list           # (user, rank, train_size)
    groups: list             # GroupRow
    degenerate_users: int
    n_neg: int
    topn: tuple[int, ...]
    config_echo: str = ""


def _user_rank(params, split, cfg: EvalConfig, u: int, backend=None,
               score_fn=None) -> tuple[int, int]:
    """Rank of user u's held-out item among its candidates; returns (rank, train size).

    Per user the random stream (seed, stream, u) is consumed in a fixed
    order: the pair subsample for the user embedding first, the score-term
    subsample second. At ratio 1 no randomness is consumed at all.
    """
    hist = split.train.positives[u]
    n_hist = len(hist)
    if n_hist == 0:
        return split.n_neg + 1, 0

    rng = None
    if cfg.ratio < 1.0:
        rng = substream(cfg.seed, cfg.stream, u)

    pairs = history_pairs(hist)
    if pairs:
        pair_ratio = cfg.ratio if cfg.ratio_scope in ("both", "pairs") else 1.0
        kept_pairs = subsample_indices(len(pairs), pair_ratio, rng)
        pi = np.asarray([pairs[int(x)][0] for x in kept_pairs], dtype=np.int64)
        pj = np.asarray([pairs[int(x)][1] for x in kept_pairs], dtype=np.int64)
        z = kernels.relation_embeddings(params, pi, pj, backend=backend).sum(axis=0)
        if cfg.user_mean and len(kept_pairs):
            z = z / len(kept_pairs)
    else:
        z = np.zeros(params.dim)

    term_ratio = cfg.ratio if cfg.ratio_scope in ("both", "terms") else 1.0
    kept_terms = subsample_indices(n_hist, term_ratio, rng)
    terms = hist[kept_terms]

    cands = np.concatenate([[split.test[u]], split.negatives[u]]).astype(np.int64)
    if score_fn is not None:
        scores = np.asarray(score_fn(params, u, z, hist, terms, cands), dtype=np.float64)
    else:
        n_c, n_t = len(cands), len(terms)
        ii = np.repeat(cands, n_t)
        jj = np.tile(terms, n_c)
        R = kernels.relation_embeddings(params, ii, jj, backend=backend)
        scores = (R.reshape(n_c, n_t, -1) @ z).sum(axis=1) / n_hist

    order = order_candidates(cands, scores)
    rank = int(np.nonzero(order == 0)[0][0]) + 1
    return rank, n_hist


def aggregate_ranks(per_user, topn, n_neg, degenerate_users=0,
                    bucket_edges=(10, 20, 30), config_echo="") -> EvalReport:
    """Build an EvalReport from (user, rank, train_size) rows."""
    topn = tuple(sorted(topn))
    n_users = len(per_user)
    hits = {n: sum(hit_rate(r, n) for _, r, _ in per_user) for n in topn}
    hr = {n: hits[n] / n_users if n_users else 0.0 for n in topn}
    ndcg = {
        n: (sum(ndcg_at(r, n) for _, r, _ in per_user) / n_users) if n_users else 0.0
        for n in topn
    }
    report = EvalReport(hr=hr, ndcg=ndcg, hits=hits, per_user=list(per_user),
                        groups=[], degenerate_users=degenerate_users,
                        n_neg=n_neg, topn=topn, config_echo=config_echo)
    report.groups = sparsity_report(report, bucket_edges)
    return report


def evaluate(params: ModelParams, split: LooSplit, cfg: EvalConfig,
             backend=None, score_fn=None) -> EvalReport:
    """Rank every user's held-out item; pure in (params, split, cfg).

    Users with an empty train history cannot be scored; they are assigned
    the worst rank (n_neg + 1) and counted in ``degenerate_users``.
    ``score_fn(params, u, z, hist, terms, cands) -> scores`` replaces the
    model scorer (used by tests to inject oracles); candidate 0 is always
    the held-out item.
    """
    n_users = split.train.num_users
    results: list[tuple[int, int] | None] = [None] * n_users

    def work(u):
        results[u] = _user_rank(params, split, cfg, u, backend=backend,
                                score_fn=score_fn)

    workers = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    if workers > 1 and n_users >= 32:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(n_users)))
    else:
        for u in range(n_users):
            work(u)

    per_user = [(u, results[u][0], results[u][1]) for u in range(n_users)]
    degenerate = sum(1 for _, _, sz in per_user if sz == 0)
    return aggregate_ranks(per_user, cfg.topn, split.n_neg,
                           degenerate_users=degenerate,
                           bucket_edges=cfg.bucket_edges,
                           config_echo=cfg.config_echo)


def sparsity_report(report: EvalReport, bucket_edges) -> list[GroupRow]:
    """Bucket per-user ranks by train-history size; empty buckets keep nulls."""
    edges = sorted(set(int(e) for e in bucket_edges))
    bounds = [(0, edges[0])] + [
        (edges[i], edges[i + 1]) for i in range(len(edges) - 1)
    ] + [(edges[-1], None)]
    rows = []
    for lo, hi in bounds:
        members = [
            (u, r, sz) for u, r, sz in report.per_user
            if sz >= lo and (hi is None or sz < hi)
        ]
        row = GroupRow(lo=lo, hi=hi, users=len(members))
        for n in report.topn:
            if members:
                row.hits[n] = sum(hit_rate(r, n) for _, r, _ in members)
                row.hr[n] = row.hits[n] / len(members)
                row.ndcg[n] = sum(ndcg_at(r, n) for _, r, _ in members) / len(members)
            else:
                row.hits[n] = 0
                row.hr[n] = None
                row.ndcg[n] = None
        rows.append(row)
    return rows


def robustness_sweep(params: ModelParams, split: LooSplit, cfg: EvalConfig,
                     ratios, backend=None) -> list[tuple[float, EvalReport]]:
    """Evaluate once per history-retention ratio with a fixed subsample stream.

    The ratio-1.0 row consumes no randomness, so it matches a plain
    evaluate() run exactly.
    """
    rows = []
    for ratio in ratios:
        sub = EvalConfig(
            topn=cfg.topn, ratio=float(ratio), ratio_scope=cfg.ratio_scope,
            seed=cfg.seed, stream="robustness", bucket_edges=cfg.bucket_edges,
            threads=cfg.threads, user_mean=cfg.user_mean,
            config_echo=cfg.config_echo,
        )
        rows.append((float(ratio), evaluate(params, split, sub, backend=backend)))
    return rows


def ablation_run(split: LooSplit, hp: HyperParams, train_cfg, eval_cfg: EvalConfig,
                 variants=("full", "npil", "nmal"), backend=None):
    """Train and evaluate each model variant on the same data and seed."""
    from dataclasses import replace

    from .training import train

    rows = []
    for variant in variants:
        tcfg = replace(train_cfg, ablation=variant)
        result = train(split, hp, tcfg, backend=backend)
        report = evaluate(result.params, split, eval_cfg, backend=backend)
        rows.append((variant, result, report))
    return rows


@dataclass
class SyntheticSpec:
    """Planted-preference generator: users favor one item genre with prob p."""

    n_users: int = 200
    n_items: int = 500
    n_genres: int = 10
    items_per_user: int = 12
    affinity: float = 0.9
    seed: int = 7

    def __post_init__(self):
        if not (0.5 < self.affinity <= 1.0):
            raise ValueError("affinity must be in (0.5, 1]")
        if self.n_items % self.n_genres != 0:
            raise ValueError("n_items must be divisible by n_genres")
        if self.items_per_user > self.n_items // self.n_genres:
            raise ValueError("items_per_user exceeds genre size")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw per-user positives concentrated on the user's preferred genre.

    Items are split into contiguous genre blocks; user u prefers genre
    u mod n_genres and draws each positive from it with probability
    ``affinity``, otherwise uniformly from the other genres. Duplicates are
    rejected until ``items_per_user`` distinct items are collected.
    """
    rng = substream(spec.seed, "synth")
    genre_size = spec.n_items // spec.n_genres
    positives = []
    for u in range(spec.n_users):
        genre = u % spec.n_genres
        lo = genre * genre_size
        chosen: list[int] = []
        seen = set()
        while len(chosen) < spec.items_per_user:
            if rng.random() < spec.affinity:
                cand = lo + int(rng.integers(genre_size))
            else:
                off = int(rng.integers(spec.n_items - genre_size))
                cand = off if off < lo else off + genre_size
            if cand not in seen:
                seen.add(cand)
                chosen.append(cand)
        positives.append(np.asarray(chosen, dtype=np.int64))
    user_ids = [f"u{u}" for u in range(spec.n_users)]
    item_ids = [f"i{i}" for i in range(spec.n_items)]
    return Dataset(
        num_users=spec.n_users,
        num_items=spec.n_items,
        positives=positives,
        user_ids=user_ids,
        item_ids=item_ids,
        user_index={x: ix for ix, x in enumerate(user_ids)},
        item_index={x: ix for ix, x in enumerate(item_ids)},
    )


def item_genre(spec: SyntheticSpec, item: int) -> int:
    return item // (spec.n_items // spec.n_genres)


def export_embeddings(
    params: ModelParams,
    pairs,                      # iterable of (raw_item, raw_item)
    users,                      # iterable of raw user ids
    split: LooSplit,
    out_dir: str,
    config_hash: str = "",
    backend=None,
) -> dict:
    """Write relations.tsv (pair relation vectors) and users.tsv (softmaxed
    user aggregates). Unknown raw ids are skipped and counted, not fatal.
    """
    os.makedirs(out_dir, exist_ok=True)
    ds = split.train
    d = params.dim
    skipped = {"pairs": 0, "users": 0}

    rel_path = os.path.join(out_dir, "relations.tsv")
    with open(rel_path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("item_i\titem_j\t" + "\t".join(f"r{c}" for c in range(d)) + "\n")
        resolved = []
        for raw_i, raw_j in pairs:
            if raw_i not in ds.item_index or raw_j not in ds.item_index:
                skipped["pairs"] += 1
                continue
            resolved.append((raw_i, raw_j, ds.item_index[raw_i], ds.item_index[raw_j]))
        if resolved:
            ii = np.asarray([t[2] for t in resolved], dtype=np.int64)
            jj = np.asarray([t[3] for t in resolved], dtype=np.int64)
            R = kernels.relation_embeddings(params, ii, jj, backend=backend)
            for (raw_i, raw_j, _, _), vec in zip(resolved, R):
                cells = "\t".join(f"{x:.12g}" for x in vec)
                fh.write(f"{raw_i}\t{raw_j}\t{cells}\n")

    users_path = os.path.join(out_dir, "users.tsv")
    with open(users_path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("user\t" + "\t".join(f"z{c}" for c in range(d)) + "\n")
        for raw_u in users:
            if raw_u not in ds.user_index:
                skipped["users"] += 1
                continue
            u = ds.user_index[raw_u]
            pairs_u = history_pairs(ds.positives[u])
            if pairs_u:
                pi = np.asarray([p[0] for p in pairs_u], dtype=np.int64)
                pj = np.asarray([p[1] for p in pairs_u], dtype=np.int64)
                z = kernels.relation_embeddings(params, pi, pj, backend=backend).sum(axis=0)
            else:
                z = np.zeros(d)
            probs = softmax(z)
            cells = "\t".join(f"{x:.12g}" for x in probs)
            fh.write(f"{raw_u}\t{cells}\n")
    return skipped


# --- report serialization ----------------------------------------------------

def write_report(report: EvalReport, path: str, config_hash: str = "") -> None:
    """Machine-readable multi-section TSV; comment lines carry metadata."""
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(f"# n_neg={report.n_neg}\n")
        fh.write(f"# degenerate_users={report.degenerate_users}\n")
        for line in report.config_echo.splitlines():
            fh.write(f"# cfg {line}\n")
        fh.write("# section=summary\n")
        fh.write("n\thits\thr\tndcg\n")
        for n in report.topn:
            fh.write(f"{n}\t{report.hits[n]}\t{report.hr[n]!r}\t{report.ndcg[n]!r}\n")
        fh.write("# section=per_user\n")
        fh.write("user\trank\ttrain_size\n")
        for u, r, sz in report.per_user:
            fh.write(f"{u}\t{r}\t{sz}\n")
        fh.write("# section=groups\n")
        fh.write("bucket\tlo\thi\tusers\tn\thits\thr\tndcg\n")
        for row in report.groups:
            hi = "" if row.hi is None else row.hi
            for n in report.topn:
                hr = "" if row.hr[n] is None else repr(row.hr[n])
                nd = "" if row.ndcg[n] is None else repr(row.ndcg[n])
                fh.write(f"{row.label()}\t{row.lo}\t{hi}\t{row.users}\t{n}\t{row.hits[n]}\t{hr}\t{nd}\n")


def parse_report(path: str) -> dict:
    """Read back a report TSV into {meta, summary, per_user, groups}."""
    meta: dict[str, str] = {}
    sections: dict[str, list[list[str]]] = {"summary": [], "per_user": [], "groups": []}
    current = None
    header_seen = False
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# section="):
                current = line.split("=", 1)[1]
                header_seen = False
                continue
            if line.startswith("# cfg "):
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, val = line[1:].split("=", 1)
                    meta[key.strip()] = val.strip()
                continue
            if current is None:
                continue
            if not header_seen:
                header_seen = True
                continue
            sections[current].append(line.split("\t"))
    summary = {
        int(r[0]): {"hits": int(r[1]), "hr": float(r[2]), "ndcg": float(r[3])}
        for r in sections["summary"]
    }
    per_user = [(int(r[0]), int(r[1]), int(r[2])) for r in sections["per_user"]]
    return {"meta": meta, "summary": summary, "per_user": per_user,
            "groups": sections["groups"]}


def write_sweep(rows, path: str, config_hash: str = "") -> None:
    """Ratio-sweep table: one line per (ratio, cutoff)."""
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("ratio\tn\thr\tndcg\n")
        for ratio, report in rows:
            for n in report.topn:
                fh.write(f"{ratio!r}\t{n}\t{report.hr[n]!r}\t{report.ndcg[n]!r}\n")


def write_ablation_table(rows, path: str, config_hash: str = "") -> None:
    """Side-by-side ablation table: one line per (variant, cutoff)."""
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("variant\tn\thr\tndcg\n")
        for variant, _, report in rows:
            for n in report.topn:
                fh.write(f"{variant}\t{n}\t{report.hr[n]!r}\t{report.ndcg[n]!r}\n")


def format_report(report: EvalReport) -> str:
    """Human-readable summary block for stdout."""
    lines = []
    for n in report.topn:
        lines.append(f"HR@{n} = {report.hr[n]:.4f}   nDCG@{n} = {report.ndcg[n]:.4f}")
    lines.append(f"users={len(report.per_user)}  negatives/user={report.n_neg}  "
                 f"degenerate={report.degenerate_users}")
    lines.append("history bucket   users" + "".join(
        f"   HR@{n}    nDCG@{n}" for n in report.topn))
    for row in report.groups:
        cells = ""
        for n in report.topn:
            hr = "   --  " if row.hr[n] is None else f" {row.hr[n]:.4f}"
            nd = "   --  " if row.ndcg[n] is None else f"  {row.ndcg[n]:.4f}"
            cells += hr + nd
        lines.append(f"{row.label():>14}   {row.users:>5}" + cells)
    return "\n".join(lines)
