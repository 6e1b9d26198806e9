"""Exact top-k retrieval, query routing, ranking metrics and experiment harnesses."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from smar import encoders as enc
from smar import kernels
from smar import numerics as nx
from smar.data import Corpus, QueryRecord, Vocab, build_vocab, chunks, corpus_texts, tokenize
from smar.objectives import LossWeights
from smar.training import Checkpoint, TrainConfig, finetune, pretrain, tensorize_for

logger = logging.getLogger(__name__)

MODES = ("text", "image", "multimodal")
SPLITS = ("overall", "fashion", "not-fashion")
ENCODE_CHUNK = 256


class RetrievalError(ValueError):
    pass


# ---------------------------------------------------------------------- index


@dataclass
class EmbeddingIndex:
    item_ids: list[str]
    embeddings: np.ndarray
    mode: str

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if self.mode not in MODES:
            raise RetrievalError(f"unknown index mode {self.mode!r}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.item_ids):
            raise RetrievalError(f"{len(self.item_ids)} ids vs embeddings {self.embeddings.shape}")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise RetrievalError("duplicate item ids in index")
        # row order is id order so that the kernels' column tie-break is the id tie-break
        order = sorted(range(len(self.item_ids)), key=self.item_ids.__getitem__)
        if order != list(range(len(order))):
            self.item_ids = [self.item_ids[j] for j in order]
            self.embeddings = self.embeddings[order]
        norms = np.linalg.norm(self.embeddings, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise RetrievalError("index rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.item_ids)


def build_index(items, model: Checkpoint, mode: str, corpus: Corpus | None = None) -> EmbeddingIndex:
    """Encode every item in ``mode``; rows are ordered by ``item_id``."""
    if mode not in MODES:
        raise RetrievalError(f"unknown index mode {mode!r}")
    cfg = model.config
    corpus = corpus or Corpus(list(items), [], [])
    tc = tensorize_for(cfg, corpus, model.vocab, queries=[])
    out = []
    with nx.no_grad():
        for sl in chunks(len(tc.item_ids), ENCODE_CHUNK):
            try:
                res = enc.item_towers(
                    tc.item_tokens[sl], tc.item_token_mask[sl], tc.item_feats[sl], tc.item_feat_mask[sl],
                    model.params, cfg, want=(mode,),
                )
            except ValueError as exc:
                raise RetrievalError(f"encoding items {tc.item_ids[sl][0]}..{tc.item_ids[sl][-1]} failed: {exc}") from exc
            out.append(getattr(res, mode).data)
    return EmbeddingIndex(tc.item_ids, np.concatenate(out), mode)


def encode_queries(queries: list[QueryRecord], model: Checkpoint) -> tuple[np.ndarray, np.ndarray]:
    """Unit query embeddings and the pre-normalization pooled vectors."""
    cfg = model.config
    lq = cfg.query.max_seq_len - 1
    toks = [tokenize(q.text, model.vocab, lq) for q in queries]
    L = max((len(t.ids) for t in toks), default=1)
    ids = np.zeros((len(toks), L), dtype=np.int64)
    mask = np.zeros((len(toks), L), dtype=bool)
    for r, t in enumerate(toks):
        ids[r, : len(t.ids)] = t.ids
        mask[r, : len(t.ids)] = True
    emb, pooled = [], []
    with nx.no_grad():
        for sl in chunks(len(toks), ENCODE_CHUNK):
            out = enc.query_tower(ids[sl], mask[sl], model.params, cfg)
            emb.append(out.embedding.data)
            pooled.append(out.pooled.data)
    k = cfg.model_dim
    if not emb:
        return np.zeros((0, k)), np.zeros((0, k))
    return np.concatenate(emb), np.concatenate(pooled)


# ----------------------------------------------------------------------- topk


def inner_products(q_emb: np.ndarray, emb: np.ndarray, block: int = 32) -> np.ndarray:
    """``q_emb @ emb.T`` with the same summation order for every entry.

    BLAS may sum two identical item rows in different orders depending on where
    they fall in its tiling, which turns exact ties into 1-ulp differences and
    defeats the id tie-break. An elementwise product reduced over the contiguous
    last axis does not have that problem.
    """
    out = np.empty((q_emb.shape[0], emb.shape[0]))
    for sl in chunks(q_emb.shape[0], block):
        np.sum(q_emb[sl, None, :] * emb[None], axis=-1, out=out[sl])
    return out


def topk_batch(index: EmbeddingIndex, q_emb: np.ndarray, k: int, threads: int = 1):
    """Row indices and scores of the top-``k`` items for each query row."""
    if len(index) == 0:
        raise RetrievalError("cannot search an empty index")
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q_emb = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    idx, val = [], []
    for sl in chunks(q_emb.shape[0], 1024):
        scores = inner_products(q_emb[sl], index.embeddings)
        i, v = kernels.topk_rows(scores, k, threads=threads)
        idx.append(i)
        val.append(v)
    return np.concatenate(idx), np.concatenate(val)


def topk(index: EmbeddingIndex, q_emb, k: int) -> list[tuple[str, float]]:
    """Exact inner-product top-k; ties go to the smaller item id."""
    i, v = topk_batch(index, np.asarray(q_emb)[None], k)
    return [(index.item_ids[j], float(s)) for j, s in zip(i[0], v[0])]


# -------------------------------------------------------------------- routing


def route_probabilities(pooled: np.ndarray, model: Checkpoint) -> np.ndarray:
    from smar.objectives import predict_fashion

    with nx.no_grad():
        return predict_fashion(pooled, model.params["header.w"], model.params["header.b"]).data


def route(query: QueryRecord, model: Checkpoint, threshold: float | None = None) -> str:
    """``"multimodal"`` when the header's fashion probability reaches the threshold."""
    _, pooled = encode_queries([query], model)
    thr = model.config.route_threshold if threshold is None else threshold
    return "multimodal" if route_probabilities(pooled, model)[0] >= thr else "text"


# -------------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    ks: list[int]
    per_query: dict[str, dict[int, tuple[float, float, float]]]
    modes: dict[str, str] = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def mean(self, k: int) -> dict[str, float]:
        vals = list(self.per_query.values())
        if not vals:
            return {"recall": 0.0, "precision": 0.0, "f1": 0.0}
        n = len(vals)
        return {
            "recall": math.fsum(v[k][0] for v in vals) / n,
            "precision": math.fsum(v[k][1] for v in vals) / n,
            "f1": math.fsum(v[k][2] for v in vals) / n,
        }

    @property
    def summary(self) -> dict[int, dict[str, float]]:
        return {k: self.mean(k) for k in self.ks}

    def subset(self, query_ids) -> MetricsReport:
        keep = set(query_ids)
        return MetricsReport(
            self.ks,
            {q: v for q, v in self.per_query.items() if q in keep},
            {q: m for q, m in self.modes.items() if q in keep},
        )

    def rows(self, **labels) -> list[dict]:
        return [{**labels, "k": k, **self.mean(k)} for k in self.ks]


def prf(hits: int, n_relevant: int, k: int) -> tuple[float, float, float]:
    # 2PR/(P+R) reduces to 2h/(n+k); one division keeps it correctly rounded
    return hits / n_relevant, hits / k, 2 * hits / (n_relevant + k)


def metrics_from_ranked(ranked: np.ndarray, item_ids: list[str], query_ids: list[str], qrels, ks) -> MetricsReport:
    """Per-query R@k / P@k / F1@k from ranked row indices into ``item_ids``."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise RetrievalError("ks must be positive")
    row = {iid: i for i, iid in enumerate(item_ids)}
    indptr, indices = [0], []
    for qid in query_ids:
        if qid not in qrels:
            raise RetrievalError(f"query {qid} has no qrels")
        rel = sorted({row[i] for i in qrels[qid] if i in row})
        if not qrels[qid]:
            raise RetrievalError(f"query {qid} has an empty relevant set")
        indices += rel
        indptr.append(len(indices))
    depth = max(ks)
    padded = np.full((len(query_ids), depth), -1, dtype=np.int64)
    padded[:, : ranked.shape[1]] = ranked[:, :depth]
    hits = kernels.prefix_hits(padded, np.array(indptr), np.array(indices, dtype=np.int64))
    per_query = {}
    for r, qid in enumerate(query_ids):
        n_rel = len(set(qrels[qid]))
        per_query[qid] = {k: prf(int(hits[r, k - 1]), n_rel, k) for k in ks}
    return MetricsReport(ks, per_query)


# ------------------------------------------------------------------- variants


@dataclass(frozen=True)
class Variant:
    name: str
    weights: LossWeights
    fusion_mode: str = "cross"
    finetune_mode: str = "adaptive"
    index: str = "routed"  # or a fixed index mode


VARIANTS = {
    "dpsr": Variant("dpsr", LossWeights(1, 0, 0), finetune_mode="text", index="text"),
    "dpsr-i": Variant("dpsr-i", LossWeights(0, 1, 0), finetune_mode="image", index="image"),
    "smar-ni": Variant("smar-ni", LossWeights(1, 0, 1)),
    "smar-nt": Variant("smar-nt", LossWeights(0, 1, 1)),
    "smar-nm": Variant("smar-nm", LossWeights(1, 1, 0)),
    "smar-nc": Variant("smar-nc", LossWeights(1, 1, 1), fusion_mode="concat"),
    "smar": Variant("smar", LossWeights(1, 1, 1)),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise RetrievalError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


def evaluate(model: Checkpoint, items, eval_queries: list[QueryRecord], qrels, ks=(1, 10, 50),
             variant: str | Variant = "smar", threads: int = 1, indexes: dict | None = None,
             run_file: str | Path | None = None) -> MetricsReport:
    """Retrieve for every eval query through the variant's index or routing and score it."""
    v = get_variant(variant) if isinstance(variant, str) else variant
    missing = [q.query_id for q in eval_queries if q.query_id not in qrels]
    if missing:
        raise RetrievalError(f"{len(missing)} eval queries lack qrels, e.g. {missing[0]}")
    q_emb, pooled = encode_queries(eval_queries, model)
    if v.index == "routed":
        p = route_probabilities(pooled, model)
        modes = np.where(p >= model.config.route_threshold, "multimodal", "text")
    else:
        modes = np.full(len(eval_queries), v.index, dtype=object)
    indexes = {} if indexes is None else indexes
    depth = max(ks)
    ranked = np.full((len(eval_queries), depth), -1, dtype=np.int64)
    scores = np.zeros((len(eval_queries), depth))
    item_ids = None
    for mode in MODES:
        rows = np.flatnonzero(modes == mode)
        if rows.size == 0:
            continue
        if mode not in indexes:
            indexes[mode] = build_index(items, model, mode)
        index = indexes[mode]
        item_ids = index.item_ids
        i, s = topk_batch(index, q_emb[rows], depth, threads)
        ranked[rows, : i.shape[1]] = i
        scores[rows, : s.shape[1]] = s
    qids = [q.query_id for q in eval_queries]
    report = metrics_from_ranked(ranked, item_ids, qids, qrels, ks)
    report.modes = dict(zip(qids, (str(m) for m in modes)))
    if run_file is not None:
        write_run_file(run_file, qids, report.modes, ranked, scores, item_ids)
    return report


def write_run_file(path, qids, modes, ranked, scores, item_ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r, qid in enumerate(qids):
            keep = ranked[r] >= 0
            fh.write(json.dumps({
                "query_id": qid, "mode": modes[qid],
                "item_ids": [item_ids[j] for j in ranked[r][keep]],
                "scores": [float(s) for s in scores[r][keep]],
            }) + "\n")


def split_query_ids(corpus: Corpus, query_ids) -> dict[str, list[str]]:
    labels = corpus.query_fashion_labels()
    qids = list(query_ids)
    return {
        "overall": qids,
        "fashion": [q for q in qids if labels.get(q) == 1],
        "not-fashion": [q for q in qids if labels.get(q) == 0],
    }


METRICS_HEADER = ["variant", "split", "seed", "k", "recall", "precision", "f1"]


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentSettings:
    """Model and schedule shared by every run of an ablation or sweep."""

    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig.desk(epochs=10))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig.desk(epochs=10))
    model_kw: dict = field(default_factory=dict)
    ks: tuple[int, ...] = (1, 10, 50)
    threads: int = 1


@dataclass
class RunResult:
    variant: str
    seed: int
    weights: LossWeights
    pretrained: Checkpoint
    finetuned: Checkpoint
    report: MetricsReport
    splits: dict[str, MetricsReport]


class RunCache:
    """Memoizes trained runs by everything that determines them."""

    def __init__(self):
        self.runs: dict[tuple, RunResult] = {}

    def key(self, v: Variant, seed: int) -> tuple:
        return (v.weights, v.fusion_mode, v.finetune_mode, v.index, seed)


def run_variant(corpus: Corpus, variant: str | Variant, seed: int, settings: ExperimentSettings,
                cache: RunCache | None = None, vocab: Vocab | None = None) -> RunResult:
    """Pre-train, fine-tune and evaluate one variant for one seed."""
    v = get_variant(variant) if isinstance(variant, str) else variant
    if cache is not None and cache.key(v, seed) in cache.runs:
        hit = cache.runs[cache.key(v, seed)]
        return replace(hit, variant=v.name)
    vocab = vocab or build_vocab(corpus_texts(corpus))
    d_img = corpus.items[0].image_features.features.shape[1]
    cfg = enc.ModelConfig.desk(len(vocab), d_img, **{"fusion_mode": v.fusion_mode, **settings.model_kw})
    pre_cfg = replace(settings.pretrain, seed=seed, weights=v.weights)
    ft_cfg = replace(settings.finetune, seed=seed, finetune_mode=v.finetune_mode)
    pre = pretrain(pre_cfg, corpus, model_config=cfg, vocab=vocab)
    ft = finetune(ft_cfg, corpus, pre)
    queries = corpus.eval_queries()
    report = evaluate(ft, corpus.items, queries, corpus.qrels, settings.ks, v, settings.threads)
    splits = {name: report.subset(ids) for name, ids in split_query_ids(corpus, report.per_query).items()}
    result = RunResult(v.name, seed, v.weights, pre, ft, report, splits)
    if cache is not None:
        cache.runs[cache.key(v, seed)] = result
    return result


@dataclass
class AblationResult:
    runs: list[RunResult]
    ks: tuple[int, ...]

    def long_rows(self) -> list[dict]:
        rows = []
        for run in self.runs:
            for split in SPLITS:
                rows += run.splits[split].rows(variant=run.variant, split=split, seed=run.seed)
        return rows

    def table(self, k: int = 50) -> list[dict]:
        """One row per variant, seed-averaged R/P/F1 at ``k`` for each split."""
        out = []
        for name in dict.fromkeys(r.variant for r in self.runs):
            runs = [r for r in self.runs if r.variant == name]
            row = {"variant": name}
            for split in SPLITS:
                means = [r.splits[split].mean(k) for r in runs]
                for short, key in (("R", "recall"), ("P", "precision"), ("F1", "f1")):
                    row[f"{split}_{short}@{k}"] = math.fsum(m[key] for m in means) / len(means)
            out.append(row)
        return out

    def table_csv(self, k: int = 50) -> str:
        rows = self.table(k)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(x) if isinstance(x, float) else x) for c, x in r.items()})
        return buf.getvalue()


def ablation_run(corpus: Corpus, variants, seeds, settings: ExperimentSettings | None = None,
                 cache: RunCache | None = None) -> AblationResult:
    settings = settings or ExperimentSettings()
    chosen = [get_variant(v) for v in variants]
    cache = cache if cache is not None else RunCache()
    vocab = build_vocab(corpus_texts(corpus))
    runs = []
    for v in chosen:
        for seed in seeds:
            logger.info("ablation: variant=%s seed=%s", v.name, seed)
            runs.append(run_variant(corpus, v, seed, settings, cache, vocab))
    return AblationResult(runs, tuple(settings.ks))


SWEEP_PARAMS = ("alpha", "beta", "gamma")


def weight_sweep(corpus: Corpus, param: str, values, seeds, settings: ExperimentSettings | None = None,
                 cache: RunCache | None = None) -> list[dict]:
    """Vary one loss weight with the other two pinned at 1; one row per
    (param, value, seed, split) with R/P/F1 columns for every k."""
    if param not in SWEEP_PARAMS:
        raise RetrievalError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    values = [float(x) for x in values]
    if not values or min(values) <= 0:
        raise RetrievalError("sweep values must be non-empty and positive")
    settings = settings or ExperimentSettings()
    cache = cache if cache is not None else RunCache()
    vocab = build_vocab(corpus_texts(corpus))
    base = get_variant("smar")
    rows = []
    for value in values:
        w = LossWeights(**{p: (value if p == param else 1.0) for p in SWEEP_PARAMS})
        v = replace(base, weights=w)
        for seed in seeds:
            run = run_variant(corpus, v, seed, settings, cache, vocab)
            for split in SPLITS:
                row = {"param": param, "value": value, "seed": seed, "split": split}
                for k in settings.ks:
                    m = run.splits[split].mean(k)
                    row[f"R@{k}"], row[f"P@{k}"], row[f"F1@{k}"] = m["recall"], m["precision"], m["f1"]
                rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(x) if isinstance(x, float) else x) for c, x in r.items()})
    return buf.getvalue()
