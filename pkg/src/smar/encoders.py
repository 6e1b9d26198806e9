"""Query, item-text, item-image and item-multimodal towers.

All forward functions accept batched inputs (leading batch axis) and return
:class:`~smar.numerics.Tensor` values so they can run under a tape. Single
examples are handled by the ``encode_*`` wrappers, which add and strip the
batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from smar import numerics as nx
from smar.numerics import DimensionError, Tensor

TOWERS = ("query", "text", "image", "fusion")


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class TowerConfig:
    heads: int = 4
    layers: int = 1
    model_dim: int = 64
    ff_dim: int = 256
    max_seq_len: int = 16
    vocab_size: int | None = None
    image_feat_dim: int | None = None

    def __post_init__(self):
        for name in ("heads", "model_dim", "ff_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must leave room for CLS plus one token")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of all four towers plus the prediction header.

    ``fusion_mode`` is ``"cross"`` (text queries attend to image keys/values)
    or ``"concat"`` (self-attention over the joined text and image sequences).
    """

    vocab_size: int
    model_dim: int = 64
    image_feat_dim: int = 16
    query: TowerConfig = field(default_factory=lambda: TowerConfig(layers=4))
    text: TowerConfig = field(default_factory=TowerConfig)
    image: TowerConfig = field(default_factory=TowerConfig)
    fusion: TowerConfig = field(default_factory=TowerConfig)
    fusion_mode: str = "cross"
    share_token_embeddings: bool = False
    temperature: float = 1.0
    route_threshold: float = 0.5
    init_std: float = 0.02

    def __post_init__(self):
        for tower in TOWERS:
            cfg = getattr(self, tower)
            if cfg.model_dim != self.model_dim:
                object.__setattr__(self, tower, replace(cfg, model_dim=self.model_dim))
        if self.fusion_mode not in ("cross", "concat"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def desk(cls, vocab_size: int, image_feat_dim: int, model_dim: int = 64, heads: int = 4, **kw) -> ModelConfig:
        kw.setdefault("temperature", 0.1)
        ff = 4 * model_dim
        tc = lambda layers: TowerConfig(heads=heads, layers=layers, model_dim=model_dim, ff_dim=ff)  # noqa: E731
        return cls(
            vocab_size=vocab_size, model_dim=model_dim, image_feat_dim=image_feat_dim,
            query=tc(4), text=tc(1), image=tc(1), fusion=tc(1), **kw,
        )

    @classmethod
    def paper(cls, vocab_size: int, image_feat_dim: int, **kw) -> ModelConfig:
        kw.setdefault("temperature", 1.0)
        return cls.desk(vocab_size, image_feat_dim, model_dim=768, heads=12, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        for tower in TOWERS:
            if isinstance(d.get(tower), dict):
                d[tower] = TowerConfig(**d[tower])
        return cls(**d)


# ------------------------------------------------------------------ parameters


def _block_shapes(prefix: str, k: int, ff: int, cross: bool) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}.ln1.g": (k,), f"{prefix}.ln1.b": (k,)}
    if cross:
        shapes.update({f"{prefix}.ln_kv.g": (k,), f"{prefix}.ln_kv.b": (k,)})
    for w in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.w{w}"] = (k, k)
        shapes[f"{prefix}.attn.b{w}"] = (k,)
    shapes.update({
        f"{prefix}.ln2.g": (k,), f"{prefix}.ln2.b": (k,),
        f"{prefix}.ff.w1": (k, ff), f"{prefix}.ff.b1": (ff,),
        f"{prefix}.ff.w2": (ff, k), f"{prefix}.ff.b2": (k,),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Closed set of parameter names and shapes implied by ``cfg``."""
    k = cfg.model_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for tower in ("query", "text"):
        tc = getattr(cfg, tower)
        if tower == "query" or not cfg.share_token_embeddings:
            shapes[f"{tower}.tok_emb"] = (cfg.vocab_size, k)
        shapes[f"{tower}.pos_emb"] = (tc.max_seq_len, k)
        shapes[f"{tower}.cls"] = (k,)
        for j in range(tc.layers):
            shapes.update(_block_shapes(f"{tower}.layers.{j}", k, tc.ff_dim, cross=False))
    shapes["image.proj.w"] = (cfg.image_feat_dim, k)
    shapes["image.proj.b"] = (k,)
    shapes["image.pos_emb"] = (cfg.image.max_seq_len, k)
    shapes["image.cls"] = (k,)
    for j in range(cfg.image.layers):
        shapes.update(_block_shapes(f"image.layers.{j}", k, cfg.image.ff_dim, cross=False))
    for j in range(cfg.fusion.layers):
        shapes.update(_block_shapes(f"fusion.layers.{j}", k, cfg.fusion.ff_dim, cross=True))
    shapes["header.w"] = (k,)
    shapes["header.b"] = (1,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Truncated-normal weights (std ``cfg.init_std``), zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b") or name == "header.w":
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape, cfg.init_std)
    return params


def check_params(cfg: ModelConfig, params) -> None:
    expected = param_shapes(cfg)
    problems = [f"missing {n}" for n in expected if n not in params]
    problems += [f"unexpected {n}" for n in params if n not in expected]
    problems += [
        f"{n}: shape {tuple(np.shape(params[n]))} != {s}"
        for n, s in expected.items()
        if n in params and tuple(np.shape(params[n])) != s
    ]
    if problems:
        raise DimensionError("parameter set does not match config: " + "; ".join(problems))


def leaves(params, names=None) -> dict[str, Tensor]:
    """Wrap raw arrays as grad-enabled tensors (``names`` restricts which)."""
    out = {}
    for n, v in params.items():
        out[n] = v if isinstance(v, Tensor) else Tensor(v, grad_enabled=names is None or n in names, name=n)
    return out


def _p(params, name) -> Tensor:
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v, name=name)


# --------------------------------------------------------------------- layers


def _promote(ids, mask):
    ids = np.asarray(ids)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        mask = None if mask is None else np.asarray(mask)[None]
    return ids, mask, single


def embed_tokens(ids, mask, params, tower: str = "query"):
    """Prepend the tower's CLS vector and add positional embeddings.

    Returns ``(x, ext_mask)`` with ``x`` of shape ``[B, 1+L, k]`` (or
    ``[1+L, k]`` for a single example) and the mask extended by an always-on
    CLS entry.
    """
    ids, mask, single = _promote(ids, mask)
    mask = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not np.all(mask.sum(axis=-1) >= 1):
        raise ValueError("token input has no unmasked tokens")
    table_name = f"{tower}.tok_emb" if f"{tower}.tok_emb" in params else "query.tok_emb"
    table = _p(params, table_name)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabError(f"token id out of vocabulary range [0, {table.shape[0]})")
    pos = _p(params, f"{tower}.pos_emb")
    B, L = ids.shape
    if L + 1 > pos.shape[0]:
        raise DimensionError(f"sequence length {L} exceeds max_seq_len-1 = {pos.shape[0] - 1}")
    tok = nx.take_rows(table, ids)
    cls = nx.broadcast_to(nx.reshape(_p(params, f"{tower}.cls"), (1, 1, -1)), (B, 1, table.shape[1]))
    x = nx.concat([cls, tok], axis=1) + pos[: L + 1]
    ext = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    if single:
        return x[0], ext[0]
    return x, ext


def attention(xq: Tensor, xkv: Tensor, key_mask, params, prefix: str, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention, batched ``[B, L, k]``."""
    B, Lq, k = xq.shape
    Lk = xkv.shape[1]
    if xkv.shape[2] != k:
        raise DimensionError(f"attention width mismatch: {xq.shape} vs {xkv.shape}")
    dh = k // heads

    def proj(x, w, L):
        y = x @ _p(params, f"{prefix}.attn.w{w}") + _p(params, f"{prefix}.attn.b{w}")
        return nx.transpose(nx.reshape(y, (B, L, heads, dh)), (0, 2, 1, 3))

    q, kk, v = proj(xq, "q", Lq), proj(xkv, "k", Lk), proj(xkv, "v", Lk)
    scores = (q @ kk.T) * (1.0 / np.sqrt(dh))
    weights = nx.softmax(scores, axis=-1, mask=np.asarray(key_mask, dtype=bool)[:, None, None, :])
    ctx = nx.reshape(nx.transpose(weights @ v, (0, 2, 1, 3)), (B, Lq, k))
    out = ctx @ _p(params, f"{prefix}.attn.wo") + _p(params, f"{prefix}.attn.bo")
    return (out, weights) if return_weights else out


def _feed_forward(x, params, prefix):
    h = nx.gelu(x @ _p(params, f"{prefix}.ff.w1") + _p(params, f"{prefix}.ff.b1"))
    return h @ _p(params, f"{prefix}.ff.w2") + _p(params, f"{prefix}.ff.b2")


def _ln(x, params, name):
    return nx.layer_norm(x, _p(params, f"{name}.g"), _p(params, f"{name}.b"))


def encoder_block(x, mask, params, prefix, heads):
    """Pre-LN self-attention block."""
    h = _ln(x, params, f"{prefix}.ln1")
    x = x + attention(h, h, mask, params, prefix, heads)
    return x + _feed_forward(_ln(x, params, f"{prefix}.ln2"), params, prefix)


def encoder_forward(x, mask, params, tower: str, heads: int, layers: int):
    """Stack of ``layers`` pre-LN blocks under ``{tower}.layers.{j}``."""
    x = nx.as_tensor(x)
    single = x.ndim == 2
    if single:
        x, mask = x[None], np.asarray(mask)[None]
    for j in range(layers):
        x = encoder_block(x, mask, params, f"{tower}.layers.{j}", heads)
    return x[0] if single else x


def cross_block(h_text, h_image, image_mask, params, prefix, heads, return_weights=False):
    q = _ln(h_text, params, f"{prefix}.ln1")
    kv = _ln(h_image, params, f"{prefix}.ln_kv")
    att = attention(q, kv, image_mask, params, prefix, heads, return_weights=return_weights)
    if return_weights:
        att, w = att
    x = h_text + att
    x = x + _feed_forward(_ln(x, params, f"{prefix}.ln2"), params, prefix)
    return (x, w) if return_weights else x


def cross_encoder_forward(h_text, h_image, text_mask, image_mask, params, heads: int, layers: int, mode: str = "cross"):
    """Fuse text and image sequences; output keeps the text length.

    ``mode="cross"`` draws attention queries from the text sequence and
    keys/values from the image sequence. ``mode="concat"`` runs
    self-attention over ``[text; image]`` and keeps the text rows.
    """
    h_text, h_image = nx.as_tensor(h_text), nx.as_tensor(h_image)
    single = h_text.ndim == 2
    if single:
        h_text, h_image = h_text[None], h_image[None]
        text_mask, image_mask = np.asarray(text_mask)[None], np.asarray(image_mask)[None]
    if h_text.shape[-1] != h_image.shape[-1]:
        raise DimensionError(f"fusion width mismatch: {h_text.shape} vs {h_image.shape}")
    if mode == "cross":
        x = h_text
        for j in range(layers):
            x = cross_block(x, h_image, image_mask, params, f"fusion.layers.{j}", heads)
    elif mode == "concat":
        Lt = h_text.shape[1]
        x = nx.concat([h_text, h_image], axis=1)
        joint = np.concatenate([np.asarray(text_mask, bool), np.asarray(image_mask, bool)], axis=1)
        for j in range(layers):
            x = encoder_block(x, joint, params, f"fusion.layers.{j}", heads)
        x = x[:, :Lt]
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return x[0] if single else x


def cls_pool(h):
    """Row 0 of the last-but-one axis (the CLS position)."""
    h = nx.as_tensor(h)
    if h.ndim < 2 or h.shape[-2] < 1:
        raise DimensionError(f"cls_pool needs at least one row, got {h.shape}")
    return h[..., 0, :]


# ---------------------------------------------------------------------- towers


@dataclass
class QueryOutput:
    embedding: Tensor  # Q(q), unit rows
    pooled: Tensor  # h^q before normalization


@dataclass
class ItemOutput:
    text: Tensor | None = None  # S^t
    image: Tensor | None = None  # S^i
    multimodal: Tensor | None = None  # S^m
    text_seq: Tensor | None = None  # H^t
    image_seq: Tensor | None = None  # H^i


def query_tower(ids, mask, params, cfg: ModelConfig) -> QueryOutput:
    x, ext = embed_tokens(ids, mask, params, "query")
    H = encoder_forward(x, ext, params, "query", cfg.query.heads, cfg.query.layers)
    h = cls_pool(H)
    return QueryOutput(nx.l2_normalize(h), h)


def text_tower(ids, mask, params, cfg: ModelConfig):
    x, ext = embed_tokens(ids, mask, params, "text")
    H = encoder_forward(x, ext, params, "text", cfg.text.heads, cfg.text.layers)
    return H, ext


def image_tower(feats, mask, params, cfg: ModelConfig):
    """Project region features, prepend CLS, add positions, encode."""
    feats = nx.as_tensor(feats)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
        mask = None if mask is None else np.asarray(mask)[None]
    B, R, d = feats.shape
    if d != cfg.image_feat_dim:
        raise DimensionError(f"image feature dim {d} != configured {cfg.image_feat_dim}")
    if R < 1 or R + 1 > cfg.image.max_seq_len:
        raise DimensionError(f"{R} image regions do not fit max_seq_len {cfg.image.max_seq_len}")
    mask = np.ones((B, R), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = cfg.model_dim
    proj = feats @ _p(params, "image.proj.w") + _p(params, "image.proj.b")
    cls = nx.broadcast_to(nx.reshape(_p(params, "image.cls"), (1, 1, -1)), (B, 1, k))
    x = nx.concat([cls, proj], axis=1) + _p(params, "image.pos_emb")[: R + 1]
    ext = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    H = encoder_forward(x, ext, params, "image", cfg.image.heads, cfg.image.layers)
    if single:
        return H[0], ext[0]
    return H, ext


def item_towers(text_ids, text_mask, feats, feat_mask, params, cfg: ModelConfig, want=("text", "image", "multimodal")) -> ItemOutput:
    """Run the requested item towers, computing H^t and H^i at most once."""
    want = set(want)
    out = ItemOutput()
    if want & {"text", "multimodal"}:
        Ht, tmask = text_tower(text_ids, text_mask, params, cfg)
        out.text_seq = Ht
        if "text" in want:
            out.text = nx.l2_normalize(cls_pool(Ht))
    if want & {"image", "multimodal"}:
        Hi, imask = image_tower(feats, feat_mask, params, cfg)
        out.image_seq = Hi
        if "image" in want:
            out.image = nx.l2_normalize(cls_pool(Hi))
    if "multimodal" in want:
        Hm = cross_encoder_forward(
            out.text_seq, out.image_seq, tmask, imask, params, cfg.fusion.heads, cfg.fusion.layers, cfg.fusion_mode
        )
        out.multimodal = nx.l2_normalize(cls_pool(Hm))
    return out


def encode_query(ids, params, cfg: ModelConfig, mask=None) -> np.ndarray:
    with nx.no_grad():
        return query_tower(ids, mask, params, cfg).embedding.data


def encode_item_text(ids, params, cfg: ModelConfig, mask=None):
    """Return ``(S^t, H^t)`` for one item or a batch."""
    with nx.no_grad():
        H, _ = text_tower(ids, mask, params, cfg)
        return nx.l2_normalize(cls_pool(H)).data, H.data


def encode_item_image(feats, params, cfg: ModelConfig, mask=None):
    """Return ``(S^i, H^i)`` for one item or a batch."""
    with nx.no_grad():
        H, _ = image_tower(feats, mask, params, cfg)
        return nx.l2_normalize(cls_pool(H)).data, H.data


def encode_item_multimodal(ids, feats, params, cfg: ModelConfig, text_mask=None, feat_mask=None) -> np.ndarray:
    with nx.no_grad():
        return item_towers(ids, text_mask, feats, feat_mask, params, cfg, want=("multimodal",)).multimodal.data
