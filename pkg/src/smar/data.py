"""Corpus records, tokenization, synthetic enrichment and batching."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
RESERVED = ("<pad>", "<unk>")


class DataError(ValueError):
    pass


class EmptyQueryError(DataError):
    pass


class CorpusSpecError(DataError):
    pass


class BatchingError(DataError):
    pass


# --------------------------------------------------------------------- records


@dataclass
class ImageFeatureSeq:
    features: np.ndarray  # [n_regions, d_img]
    mask: np.ndarray | None = None
    missing: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"image features must be [n_regions>=1, d], got {self.features.shape}")
        if self.mask is None:
            self.mask = np.ones(self.features.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @classmethod
    def placeholder(cls, d_img: int) -> ImageFeatureSeq:
        return cls(np.zeros((1, d_img)), missing=True)


@dataclass
class ItemRecord:
    item_id: str
    title: str
    category: str
    brand: str
    fashion: bool
    image_features: ImageFeatureSeq

    @property
    def text(self) -> str:
        """Text fed to the item text tower."""
        return f"{self.title} {self.category}"

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id, "title": self.title, "category": self.category,
            "brand": self.brand, "fashion": self.fashion,
            "image_features": self.image_features.features.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> ItemRecord:
        return cls(d["item_id"], d["title"], d["category"], d["brand"], bool(d["fashion"]),
                   ImageFeatureSeq(np.asarray(d["image_features"], dtype=np.float64)))


@dataclass
class QueryRecord:
    query_id: str
    text: str
    synthetic: bool = False


@dataclass
class ClickPair:
    query_id: str
    item_id: str
    split: str = "train"


@dataclass
class Corpus:
    items: list[ItemRecord]
    queries: list[QueryRecord]
    pairs: list[ClickPair]
    qrels: dict[str, list[str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._items = {it.item_id: it for it in self.items}
        self._queries = {q.query_id: q for q in self.queries}

    def item(self, item_id: str) -> ItemRecord:
        return self._items[item_id]

    def query(self, query_id: str) -> QueryRecord:
        return self._queries[query_id]

    def validate(self) -> None:
        problems = []
        if len(self._items) != len(self.items):
            problems.append("duplicate item_id")
        if len(self._queries) != len(self.queries):
            problems.append("duplicate query_id")
        seen = set()
        for p in self.pairs:
            if p.query_id not in self._queries:
                problems.append(f"pair references unknown query {p.query_id}")
            if p.item_id not in self._items:
                problems.append(f"pair references unknown item {p.item_id}")
            if p.split not in ("train", "eval"):
                problems.append(f"pair has bad split {p.split!r}")
            if (p.query_id, p.item_id) in seen:
                problems.append(f"duplicate pair ({p.query_id}, {p.item_id})")
            seen.add((p.query_id, p.item_id))
        for qid, rel in self.qrels.items():
            if qid not in self._queries:
                problems.append(f"qrels references unknown query {qid}")
            if not rel:
                problems.append(f"qrels for {qid} is empty")
            problems += [f"qrels for {qid} references unknown item {i}" for i in rel if i not in self._items]
        if problems:
            raise DataError("; ".join(problems[:20]) + (" ..." if len(problems) > 20 else ""))

    def train_pairs(self, synthetic: bool | None = None) -> list[ClickPair]:
        """Training pairs; ``synthetic`` filters on the query flag when given."""
        out = [p for p in self.pairs if p.split == "train"]
        if synthetic is not None:
            out = [p for p in out if self._queries[p.query_id].synthetic == synthetic]
        return out

    def eval_queries(self) -> list[QueryRecord]:
        return [self._queries[q] for q in sorted(self.qrels)]

    def query_fashion_labels(self) -> dict[str, int]:
        """Per-query label: majority fashion flag over the query's positive items."""
        pos: dict[str, list[bool]] = {}
        for p in self.pairs:
            pos.setdefault(p.query_id, []).append(self._items[p.item_id].fashion)
        for qid, rel in self.qrels.items():
            pos[qid] = [self._items[i].fashion for i in rel]
        return {qid: int(np.mean(flags) >= 0.5) for qid, flags in pos.items()}

    # ---- JSONL interchange

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "items.jsonl", (it.to_json() for it in self.items))
        _write_jsonl(out / "queries.jsonl", (asdict(q) for q in self.queries))
        _write_jsonl(out / "pairs.jsonl", (asdict(p) for p in self.pairs))
        _write_jsonl(out / "qrels.jsonl", ({"query_id": q, "relevant_item_ids": r} for q, r in self.qrels.items()))
        if self.meta:
            (out / "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, in_dir: str | Path) -> Corpus:
        d = Path(in_dir)
        missing = [n for n in ("items.jsonl", "queries.jsonl", "pairs.jsonl", "qrels.jsonl") if not (d / n).exists()]
        if missing:
            raise DataError(f"corpus directory {d} lacks {', '.join(missing)}")
        items = [ItemRecord.from_json(r) for r in _read_jsonl(d / "items.jsonl")]
        queries = [QueryRecord(r["query_id"], r["text"], bool(r["synthetic"])) for r in _read_jsonl(d / "queries.jsonl")]
        pairs = [ClickPair(r["query_id"], r["item_id"], r["split"]) for r in _read_jsonl(d / "pairs.jsonl")]
        qrels = {r["query_id"]: list(r["relevant_item_ids"]) for r in _read_jsonl(d / "qrels.jsonl")}
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8")) if (d / "meta.json").exists() else {}
        corpus = cls(items, queries, pairs, qrels, meta)
        corpus.validate()
        return corpus


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc


class DatasetAdapter:
    """Mapping layer from an external click-log dataset onto :class:`Corpus`.

    Subclass and implement the four generators to ingest a dataset whose
    schema differs from the native JSONL files; :meth:`load` assembles and
    validates the corpus.
    """

    def items(self):
        raise NotImplementedError

    def queries(self):
        raise NotImplementedError

    def pairs(self):
        raise NotImplementedError

    def qrels(self) -> dict[str, list[str]]:
        raise NotImplementedError

    def load(self) -> Corpus:
        corpus = Corpus(list(self.items()), list(self.queries()), list(self.pairs()), dict(self.qrels()))
        corpus.validate()
        return corpus


# ------------------------------------------------------------------ vocabulary


def split_tokens(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    tokens: list[str]  # position == id; ids 0/1 are PAD/UNK

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts, min_freq: int = 1) -> Vocab:
    """Tokens seen at least ``min_freq`` times, ordered by frequency then text."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(tok for text in texts for tok in split_tokens(text))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def corpus_texts(corpus: Corpus):
    for it in corpus.items:
        yield it.text
    for q in corpus.queries:
        yield q.text


@dataclass
class TokenizedInput:
    ids: np.ndarray
    mask: np.ndarray


def tokenize(text: str, vocab: Vocab, max_len: int, pad: bool = False) -> TokenizedInput:
    """Lowercase whitespace tokens, keeping the first ``max_len``.

    With ``pad=True`` the result is right-padded with PAD to ``max_len``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = split_tokens(text)[:max_len]
    if not toks:
        raise EmptyQueryError(f"text {text!r} is empty after tokenization")
    ids = [vocab.id(t) for t in toks]
    mask = [True] * len(ids)
    if pad:
        ids += [PAD] * (max_len - len(ids))
        mask += [False] * (max_len - len(mask))
    return TokenizedInput(np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool))


# ------------------------------------------------------ synthetic enrichment


def gen_synthetic_queries(items: list[ItemRecord], factor: float, seed: int, n_true: int | None = None):
    """Sample title-subset queries, each paired with its source item.

    Subsets are contiguous or order-preserving non-contiguous with equal
    probability, of uniform length in ``1..len(title)-1``. About
    ``factor * n_true`` pairs are produced (``n_true`` defaults to the item
    count). Returns ``(queries, pairs)``.
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    n_true = len(items) if n_true is None else n_true
    target = int(round(factor * n_true))
    usable = [it for it in items if len(split_tokens(it.title)) >= 2]
    skipped = len(items) - len(usable)
    if skipped:
        logger.info("skipped %d single-token titles for synthetic queries", skipped)
    rng = np.random.default_rng(seed)
    queries: dict[str, QueryRecord] = {}
    pairs: list[ClickPair] = []
    seen = set()
    attempts = 0
    while usable and len(pairs) < target and attempts < 20 * target + 100:
        attempts += 1
        it = usable[int(rng.integers(len(usable)))]
        toks = split_tokens(it.title)
        n = int(rng.integers(1, len(toks)))
        if rng.random() < 0.5:
            start = int(rng.integers(0, len(toks) - n + 1))
            sub = toks[start:start + n]
        else:
            pick = np.sort(rng.choice(len(toks), size=n, replace=False))
            sub = [toks[i] for i in pick]
        text = " ".join(sub)
        q = queries.get(text)
        if q is None:
            q = queries[text] = QueryRecord(f"syn{len(queries):07d}", text, synthetic=True)
        if (q.query_id, it.item_id) in seen:
            continue
        seen.add((q.query_id, it.item_id))
        pairs.append(ClickPair(q.query_id, it.item_id, "train"))
    return list(queries.values()), pairs


# ------------------------------------------------------------- desk corpus


@dataclass
class DeskCorpusSpec:
    """Knobs of the synthetic modality-gap corpus.

    Every item carries a latent color that appears only in its image
    features. Color-dependent queries name a color and a fashion noun, so
    text alone cannot resolve them.
    """

    n_items: int = 2000
    n_queries: int = 500
    n_train_queries: int = 1200
    clicks_per_query: int = 2
    color_fraction: float = 0.5
    synthetic_factor: float = 5.0
    fashion_nouns: tuple[str, ...] = ("dress", "shirt", "skirt", "jacket", "sneakers", "handbag", "scarf", "coat")
    other_nouns: tuple[str, ...] = ("novel", "vitamins", "laptop", "kettle", "lamp", "notebook", "charger", "blender")
    brands: tuple[str, ...] = ("acme", "zenith", "orbit", "nova", "vertex", "lumen", "apex", "kestrel")
    materials: tuple[str, ...] = ("cotton", "leather", "steel", "wool", "bamboo", "linen")
    styles: tuple[str, ...] = ("classic", "premium", "new", "basic")
    colors: tuple[str, ...] = ("red", "blue", "green", "black", "white", "yellow", "pink", "purple")
    n_regions: int = 3
    extra_dims: int = 8
    color_signal: float = 1.0
    noun_signal: float = 0.35
    noise: float = 0.3

    @property
    def nouns(self) -> tuple[str, ...]:
        return self.fashion_nouns + self.other_nouns

    @property
    def d_img(self) -> int:
        return len(self.colors) + len(self.nouns) + self.extra_dims

    def validate(self) -> None:
        problems = []
        if self.n_items < 1 or self.n_queries < 1:
            problems.append("n_items and n_queries must be positive")
        if not 0.0 <= self.color_fraction <= 1.0:
            problems.append("color_fraction must lie in [0, 1]")
        if self.color_fraction > 0 and (not self.fashion_nouns or not self.colors):
            problems.append("color-dependent queries requested but no colored fashion items can exist")
        if not self.other_nouns and not self.fashion_nouns:
            problems.append("no nouns")
        if self.n_regions < 1:
            problems.append("n_regions must be >= 1")
        vocab_words = set(self.nouns) | set(self.brands) | set(self.materials) | set(self.styles)
        if vocab_words & set(self.colors):
            problems.append("color words must not appear in item text vocabularies")
        if problems:
            raise CorpusSpecError("; ".join(problems))


CATEGORY_BY_NOUN = {
    "dress": "apparel", "shirt": "apparel", "skirt": "apparel", "jacket": "apparel", "coat": "apparel",
    "sneakers": "shoes", "handbag": "bags", "scarf": "accessories",
    "novel": "books", "notebook": "office", "vitamins": "health", "laptop": "electronics",
    "charger": "electronics", "kettle": "kitchen", "blender": "kitchen", "lamp": "home",
}


def _image_features(spec: DeskCorpusSpec, color: int, noun: int, rng: np.random.Generator) -> np.ndarray:
    nc = len(spec.colors)
    signal = np.zeros(spec.d_img)
    signal[color] = spec.color_signal
    signal[nc + noun] = spec.noun_signal
    return signal[None, :] + spec.noise * rng.standard_normal((spec.n_regions, spec.d_img))


def gen_desk_corpus(spec: DeskCorpusSpec, seed: int) -> Corpus:
    """Generate items, train/eval queries, click pairs and exact-match qrels."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n_f = len(spec.fashion_nouns)
    items, attrs = [], {}
    for i in range(spec.n_items):
        noun = int(rng.integers(len(spec.nouns)))
        a = {
            "noun": spec.nouns[noun],
            "brand": spec.brands[int(rng.integers(len(spec.brands)))],
            "material": spec.materials[int(rng.integers(len(spec.materials)))],
            "style": spec.styles[int(rng.integers(len(spec.styles)))],
            "color": spec.colors[int(rng.integers(len(spec.colors)))],
        }
        item_id = f"item{i:06d}"
        title = f"{a['brand']} {a['style']} {a['material']} {a['noun']}"
        feats = _image_features(spec, spec.colors.index(a["color"]), noun, rng)
        items.append(ItemRecord(item_id, title, CATEGORY_BY_NOUN.get(a["noun"], "general"), a["brand"],
                                noun < n_f, ImageFeatureSeq(feats)))
        attrs[item_id] = a

    # candidate queries: attribute dicts with non-empty exact-match relevance
    index: dict[tuple, list[str]] = {}
    keysets = {
        "color": [("color", "noun"), ("color", "brand", "noun"), ("color", "material", "noun")],
        "plain": [("brand", "noun"), ("material", "noun"), ("brand", "material", "noun")],
    }
    for item_id, a in attrs.items():
        for kind, kss in keysets.items():
            if kind == "color" and a["noun"] not in spec.fashion_nouns:
                continue
            for ks in kss:
                index.setdefault(tuple((k, a[k]) for k in ks), []).append(item_id)
    order = ("color", "brand", "material", "noun")
    text_of = {key: " ".join(dict(key)[k] for k in order if k in dict(key)) for key in index}
    color_keys = sorted(k for k in index if dict(k).get("color"))
    plain_keys = sorted(k for k in index if not dict(k).get("color"))
    if spec.color_fraction > 0 and not color_keys:
        raise CorpusSpecError("color-dependent queries requested but the corpus has no colored fashion items")

    def draw(pool, n, taken):
        free = [k for k in pool if k not in taken]
        if n <= len(free):
            return [free[i] for i in rng.choice(len(free), size=n, replace=False)]
        if not pool:
            return []
        logger.info("query pool exhausted; drawing %d queries with repetition", n - len(free))
        return free + [pool[i] for i in rng.integers(len(pool), size=n - len(free))]

    n_color = int(round(spec.color_fraction * spec.n_queries))
    eval_keys = draw(color_keys, n_color, set()) + draw(plain_keys, spec.n_queries - n_color, set())
    taken = set(eval_keys)
    n_color_tr = int(round(spec.color_fraction * spec.n_train_queries))
    train_keys = draw(color_keys, n_color_tr, taken) + draw(plain_keys, spec.n_train_queries - n_color_tr, taken)

    queries, pairs, qrels = [], [], {}
    for j, key in enumerate(eval_keys):
        qid = f"eval{j:05d}"
        rel = sorted(index[key])
        queries.append(QueryRecord(qid, text_of[key]))
        qrels[qid] = rel
        pairs.append(ClickPair(qid, rel[int(rng.integers(len(rel)))], "eval"))
    for j, key in enumerate(train_keys):
        qid = f"train{j:05d}"
        rel = sorted(index[key])
        queries.append(QueryRecord(qid, text_of[key]))
        n = min(spec.clicks_per_query, len(rel))
        for i in sorted(rng.choice(len(rel), size=n, replace=False)):
            pairs.append(ClickPair(qid, rel[i], "train"))

    meta = {
        "generator": "desk",
        "seed": seed,
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
        "control": spec.color_fraction == 0,
        "color_words": list(spec.colors),
        "attributes": attrs,
    }
    corpus = Corpus(items, queries, pairs, qrels, meta)
    if spec.synthetic_factor > 0:
        true_pairs = [p for p in pairs if p.split == "train"]
        sq, sp = gen_synthetic_queries(items, spec.synthetic_factor, seed + 1, n_true=len(true_pairs))
        corpus = Corpus(items, queries + sq, pairs + sp, qrels, meta)
    corpus.validate()
    return corpus


def color_dependent(query: QueryRecord, corpus: Corpus) -> bool:
    colors = set(corpus.meta.get("color_words", ()))
    return any(t in colors for t in split_tokens(query.text))


# -------------------------------------------------------------------- batches


def make_batches(pairs: list[ClickPair], B: int, seed: int, epoch: int, max_short: int = 16) -> list[list[ClickPair]]:
    """Shuffle by ``(seed, epoch)`` and pack batches with distinct item ids.

    A pair whose item already sits in the current batch is deferred to a
    later one, so every pair is emitted exactly once. Raises when more than
    ``max_short`` non-final batches come out short.
    """
    if B < 1:
        raise ValueError("batch size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    queue = [pairs[i] for i in rng.permutation(len(pairs))]
    batches: list[list[ClickPair]] = []
    short = 0
    while queue:
        batch, seen, rest = [], set(), []
        for p in queue:
            if len(batch) < B and p.item_id not in seen:
                batch.append(p)
                seen.add(p.item_id)
            else:
                rest.append(p)
        queue = rest
        if queue and len(batch) < B:
            short += 1
            if short > max_short:
                raise BatchingError(f"too few distinct items to fill batches of {B}")
        batches.append(batch)
    return batches


# ---------------------------------------------------------- tensorized corpus


@dataclass
class TensorizedCorpus:
    """Padded id/feature arrays for fast batched encoding.

    Items are ordered by ``item_id``; ``item_row`` and ``query_row`` map ids to
    rows.
    """

    vocab: Vocab
    item_ids: list[str]
    item_tokens: np.ndarray
    item_token_mask: np.ndarray
    item_feats: np.ndarray
    item_feat_mask: np.ndarray
    query_ids: list[str]
    query_tokens: np.ndarray
    query_token_mask: np.ndarray

    def __post_init__(self):
        self.item_row = {iid: i for i, iid in enumerate(self.item_ids)}
        self.query_row = {qid: i for i, qid in enumerate(self.query_ids)}


def tensorize(corpus: Corpus, vocab: Vocab, max_query_len: int, max_text_len: int, queries=None) -> TensorizedCorpus:
    items = sorted(corpus.items, key=lambda it: it.item_id)
    qs = corpus.queries if queries is None else queries
    qt = [tokenize(q.text, vocab, max_query_len) for q in qs]
    it_tok = [tokenize(it.text, vocab, max_text_len) for it in items]
    Lq = max((len(t.ids) for t in qt), default=1)
    Lt = max(len(t.ids) for t in it_tok)

    def pad(toks, L):
        ids = np.full((len(toks), L), PAD, dtype=np.int64)
        mask = np.zeros((len(toks), L), dtype=bool)
        for r, t in enumerate(toks):
            ids[r, : len(t.ids)] = t.ids
            mask[r, : len(t.ids)] = True
        return ids, mask

    q_ids, q_mask = pad(qt, Lq)
    t_ids, t_mask = pad(it_tok, Lt)
    R = max(it.image_features.features.shape[0] for it in items)
    d = items[0].image_features.features.shape[1]
    feats = np.zeros((len(items), R, d))
    fmask = np.zeros((len(items), R), dtype=bool)
    for r, it in enumerate(items):
        f = it.image_features
        if f.features.shape[1] != d:
            raise DataError(f"item {it.item_id} has image dim {f.features.shape[1]}, expected {d}")
        feats[r, : len(f.features)] = f.features
        fmask[r, : len(f.features)] = f.mask
    return TensorizedCorpus(vocab, [it.item_id for it in items], t_ids, t_mask, feats, fmask,
                            [q.query_id for q in qs], q_ids, q_mask)


def chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))

