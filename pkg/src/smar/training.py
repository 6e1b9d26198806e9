"""AdamW, the pre-training and fine-tuning loops, and checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from smar import encoders as enc
from smar import numerics as nx
from smar import objectives as obj
from smar.data import Corpus, DataError, TensorizedCorpus, Vocab, build_vocab, corpus_texts, make_batches, tensorize
from smar.encoders import ModelConfig
from smar.objectives import LossWeights, ScoredBatch

logger = logging.getLogger(__name__)

STAGES = ("pretrained", "finetuned")
FINETUNE_MODES = ("adaptive", "text", "image")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


# ----------------------------------------------------------------------- AdamW


@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState):
    """One AdamW update of the parameters named in ``grads``.

    Weight decay multiplies the parameter by ``1 - lr * weight_decay``
    directly instead of entering the moment estimates. Returns new
    ``(params, state)``; inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient for parameter {name}")
        if np.shape(g) != np.shape(params[name]):
            raise nx.DimensionError(f"gradient shape {np.shape(g)} != parameter {name} {np.shape(params[name])}")
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    decay = 1.0 - state.lr * state.weight_decay
    for name, g in grads.items():
        m_n = state.beta1 * m.get(name, 0.0) + (1.0 - state.beta1) * g
        v_n = state.beta2 * v.get(name, 0.0) + (1.0 - state.beta2) * (g * g)
        m[name], v[name] = m_n, v_n
        update = state.lr * (m_n / bc1) / (np.sqrt(v_n / bc2) + state.eps)
        new_params[name] = params[name] * decay - update
    return new_params, replace(state, step=t, m=m, v=v)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads
    scale = max_norm / total
    return {n: g * scale for n, g in grads.items()}


# ------------------------------------------------------------------ checkpoint


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocab
    stage: str
    step: int = 0
    history: list[dict] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        enc.check_params(self.config, self.params)


MAGIC = b"SMARCKPT"
FORMAT_VERSION = 1


def _f32_round(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Round to the float32 values a checkpoint stores."""
    return {n: np.asarray(v, dtype="<f4").astype(np.float64) for n, v in params.items()}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    entries, chunks, offset = [], [], 0
    for n in names:
        arr = np.ascontiguousarray(ckpt.params[n], dtype="<f4")
        entries.append({"name": n, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "vocab_sha256": ckpt.vocab.digest(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "payload_bytes": offset,
        "params": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Single self-describing file: magic, manifest length, JSON manifest,
    then little-endian float32 parameter payload in manifest order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def _config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _config_diff(va, vb, f"{prefix}{key}.")
        elif va != vb:
            out.append(f"{prefix}{key}: checkpoint {va!r} != expected {vb!r}")
    return out


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    (n_head,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + n_head > len(blob):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[start:start + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    payload = blob[start + n_head:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if expected is not None and cfg != expected:
        diffs = _config_diff(cfg.to_dict(), expected.to_dict())
        raise CheckpointError(f"{path}: config mismatch: " + "; ".join(diffs))
    vocab = Vocab(manifest["vocab"])
    if vocab.digest() != manifest["vocab_sha256"]:
        raise CorruptCheckpointError(f"{path}: vocabulary hash mismatch")
    params = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise CorruptCheckpointError(f"{path}: parameter {e['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    try:
        return Checkpoint(cfg, params, vocab, manifest["stage"], manifest["step"])
    except nx.DimensionError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


# ----------------------------------------------------------------- train loops


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    max_loss: float = 1e4
    use_synthetic: bool = True
    finetune_mode: str = "adaptive"
    hard_gate: bool = False
    header_lr: float | None = None
    header_weight_decay: float | None = None
    header_epochs: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        # the header is a linear probe on a drifting representation; it needs
        # a faster, undecayed optimizer and a short refit once the towers stop
        kw.setdefault("header_lr", 3e-2)
        kw.setdefault("header_weight_decay", 0.0)
        kw.setdefault("header_epochs", 100)
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> TrainConfig:
        kw.setdefault("lr", 5e-5)
        kw.setdefault("batch_size", 128)
        return cls(**kw)

    def optimizer(self, lr: float | None = None, weight_decay: float | None = None) -> OptimState:
        return OptimState(lr=self.lr if lr is None else lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay if weight_decay is None else weight_decay)


def towers_for_weights(w: LossWeights) -> tuple[str, ...]:
    return tuple(t for t, wt in (("text", w.alpha), ("image", w.beta), ("multimodal", w.gamma)) if wt > 0)


def active_param_names(cfg: ModelConfig, towers) -> list[str]:
    """Parameters the main optimizer updates when ``towers`` are trained."""
    towers = set(towers)
    prefixes = ["query."]
    if towers & {"text", "multimodal"}:
        prefixes.append("text.")
    if towers & {"image", "multimodal"}:
        prefixes.append("image.")
    if "multimodal" in towers:
        prefixes.append("fusion.")
    return [n for n in sorted(enc.param_shapes(cfg)) if n.startswith(tuple(prefixes))]


def _lengths(cfg: ModelConfig) -> tuple[int, int]:
    return cfg.query.max_seq_len - 1, cfg.text.max_seq_len - 1


def tensorize_for(cfg: ModelConfig, corpus: Corpus, vocab: Vocab, queries=None) -> TensorizedCorpus:
    lq, lt = _lengths(cfg)
    return tensorize(corpus, vocab, lq, lt, queries=queries)


def forward_batch(params, cfg: ModelConfig, tc: TensorizedCorpus, q_rows, i_rows, towers):
    q = enc.query_tower(tc.query_tokens[q_rows], tc.query_token_mask[q_rows], params, cfg)
    items = enc.item_towers(
        tc.item_tokens[i_rows], tc.item_token_mask[i_rows], tc.item_feats[i_rows], tc.item_feat_mask[i_rows],
        params, cfg, want=towers,
    )
    return q, items


class _Logger:
    def __init__(self, path: str | None, history: list[dict]):
        self.fh = open(path, "w", encoding="utf-8") if path else None
        self.history = history

    def __call__(self, record: dict) -> None:
        self.history.append(record)
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _rows(tc: TensorizedCorpus, batch):
    q_rows = np.array([tc.query_row[p.query_id] for p in batch])
    i_rows = np.array([tc.item_row[p.item_id] for p in batch])
    return q_rows, i_rows


def _guard(loss: float, cfg: TrainConfig, ckpt_fn, step: int) -> None:
    if not np.isfinite(loss) or loss > cfg.max_loss:
        raise TrainingDiverged(f"loss {loss} at step {step} exceeds guard {cfg.max_loss}", ckpt_fn())


def pretrain(
    config: TrainConfig,
    corpus: Corpus,
    model_config: ModelConfig | None = None,
    vocab: Vocab | None = None,
    **model_kw,
) -> Checkpoint:
    """Three-task contrastive pre-training over true and synthetic pairs.

    Towers whose loss weight is zero are neither run nor updated.
    """
    vocab = vocab or build_vocab(corpus_texts(corpus))
    d_img = corpus.items[0].image_features.features.shape[1]
    cfg = model_config or ModelConfig.desk(len(vocab), d_img, **model_kw)
    if cfg.vocab_size != len(vocab):
        raise CheckpointError(f"vocab_size {cfg.vocab_size} != vocabulary of {len(vocab)} tokens")
    pairs = corpus.train_pairs(None if config.use_synthetic else False)
    if not pairs:
        raise DataError("no training pairs")
    used = {p.query_id for p in pairs}
    tc = tensorize_for(cfg, corpus, vocab, [q for q in corpus.queries if q.query_id in used])
    params = enc.init_params(cfg, config.seed)
    towers = towers_for_weights(config.weights)
    names = active_param_names(cfg, towers)
    state = config.optimizer()
    history: list[dict] = []
    log = _Logger(config.log_path, history)
    step = 0
    try:
        for epoch in range(config.epochs):
            for batch in make_batches(pairs, config.batch_size, config.seed, epoch):
                q_rows, i_rows = _rows(tc, batch)
                leaves = enc.leaves(params, set(names))
                with nx.Tape() as tape:
                    q, items = forward_batch(leaves, cfg, tc, q_rows, i_rows, towers)
                    sb = ScoredBatch(q.embedding, items.text, items.image, items.multimodal)
                    total, parts = obj.pretrain_loss(sb, config.weights, cfg.temperature)
                _guard(total.item(), config, lambda: Checkpoint(cfg, _f32_round(params), vocab, "pretrained", step), step)
                g = nx.backward(tape, total, [leaves[n] for n in names])
                grads = clip_by_global_norm({n: g[leaves[n]] for n in names}, config.clip_norm)
                params, state = adamw_step(params, grads, state)
                step += 1
                log({
                    "step": step, "epoch": epoch, "L_total": total.item(),
                    **{k: v.item() for k, v in parts.items()}, "header_acc": None, "lr": state.lr,
                })
    except nx.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value at step {step}: {exc}",
                               Checkpoint(cfg, _f32_round(params), vocab, "pretrained", step)) from exc
    finally:
        log.close()
    return Checkpoint(cfg, _f32_round(params), vocab, "pretrained", step, history=history)


def _header_probs(h_q: np.ndarray, params) -> np.ndarray:
    with nx.no_grad():
        return obj.predict_fashion(h_q, params["header.w"], params["header.b"]).data


def _refit_header(config: TrainConfig, cfg: ModelConfig, params, h_state, tc: TensorizedCorpus, labels, log, step):
    """Header-only epochs over the final, frozen query representations."""
    if config.header_epochs <= 0:
        return params, h_state
    with nx.no_grad():
        h_all = enc.query_tower(tc.query_tokens, tc.query_token_mask, params, cfg).pooled.data
    y_all = np.array([labels[q] for q in tc.query_ids], dtype=np.float64)
    rng = np.random.default_rng([config.seed, 7])
    for epoch in range(config.header_epochs):
        order = rng.permutation(len(y_all))
        for s in range(0, len(order), config.batch_size):
            rows = order[s:s + config.batch_size]
            h_leaves = {n: nx.Tensor(params[n], grad_enabled=True, name=n) for n in ("header.w", "header.b")}
            with nx.Tape() as tape:
                h_loss = obj.header_logit_loss(h_all[rows], h_leaves["header.w"], h_leaves["header.b"], y_all[rows])
            hg = nx.backward(tape, h_loss, h_leaves.values())
            params, h_state = adamw_step(params, {n: hg[t] for n, t in h_leaves.items()}, h_state)
        probs = _header_probs(h_all, params)
        log({"step": step, "epoch": config.epochs + epoch, "phase": "header", "L_header": h_loss.item(),
             "header_acc": float(np.mean((probs >= cfg.route_threshold) == (y_all > 0.5))), "lr": h_state.lr})
    return params, h_state


def finetune(config: TrainConfig, corpus: Corpus, init: Checkpoint) -> Checkpoint:
    """Click-pair fine-tuning with the adaptive text/multimodal loss.

    The towers and the prediction header have separate AdamW states. The
    header sees detached pooled query vectors, and the main loss sees
    detached header probabilities.
    """
    if init.stage != "pretrained":
        raise CheckpointError(f"fine-tuning needs a pretrained checkpoint, got stage {init.stage!r}")
    cfg, vocab = init.config, init.vocab
    pairs = corpus.train_pairs(synthetic=False)
    if not pairs:
        raise DataError("no click pairs for fine-tuning")
    labels = corpus.query_fashion_labels()
    missing = sorted({p.query_id for p in pairs if p.query_id not in labels})
    if missing:
        raise DataError(f"missing fashion labels for {len(missing)} queries, e.g. {missing[0]}")
    used = {p.query_id for p in pairs}
    tc = tensorize_for(cfg, corpus, vocab, [q for q in corpus.queries if q.query_id in used])
    mode = config.finetune_mode
    towers = {"adaptive": ("text", "multimodal"), "text": ("text",), "image": ("image",)}[mode]
    names = active_param_names(cfg, towers)
    header_names = ["header.b", "header.w"]
    params = {n: v.copy() for n, v in init.params.items()}
    state = config.optimizer()
    h_state = config.optimizer(config.header_lr, config.header_weight_decay)
    history: list[dict] = []
    log = _Logger(config.log_path, history)
    step = 0
    try:
        for epoch in range(config.epochs):
            for batch in make_batches(pairs, config.batch_size, config.seed, epoch):
                q_rows, i_rows = _rows(tc, batch)
                y = np.array([labels[p.query_id] for p in batch], dtype=np.float64)
                leaves = enc.leaves(params, set(names))
                with nx.Tape() as tape:
                    q, items = forward_batch(leaves, cfg, tc, q_rows, i_rows, towers)
                    h_q = q.pooled.data
                    probs = _header_probs(h_q, params)
                    sb = ScoredBatch(q.embedding, items.text, items.image, items.multimodal)
                    if mode == "adaptive":
                        p_vec = (probs >= cfg.route_threshold).astype(np.float64) if config.hard_gate else probs
                        loss = obj.finetune_loss(sb, p_vec, cfg.temperature)
                    elif mode == "text":
                        loss = obj.finetune_loss(sb, np.zeros(len(batch)), cfg.temperature)
                    else:
                        loss = obj.in_batch_ce(sb.query, sb.image, cfg.temperature)
                _guard(loss.item(), config, lambda: Checkpoint(cfg, _f32_round(params), vocab, "finetuned", step), step)
                g = nx.backward(tape, loss, [leaves[n] for n in names])
                grads = clip_by_global_norm({n: g[leaves[n]] for n in names}, config.clip_norm)
                params, state = adamw_step(params, grads, state)

                h_leaves = {n: nx.Tensor(params[n], grad_enabled=True, name=n) for n in header_names}
                with nx.Tape() as h_tape:
                    h_loss = obj.header_logit_loss(h_q, h_leaves["header.w"], h_leaves["header.b"], y)
                hg = nx.backward(h_tape, h_loss, h_leaves.values())
                params, h_state = adamw_step(params, {n: hg[h_leaves[n]] for n in header_names}, h_state)

                step += 1
                log({
                    "step": step, "epoch": epoch, "L_total": loss.item(), "L_prime": loss.item(),
                    "L_header": h_loss.item(),
                    "header_acc": float(np.mean((probs >= cfg.route_threshold) == (y > 0.5))), "lr": state.lr,
                })
        params, h_state = _refit_header(config, cfg, params, h_state, tc, labels, log, step)
    except nx.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value at step {step}: {exc}",
                               Checkpoint(cfg, _f32_round(params), vocab, "finetuned", init.step + step)) from exc
    finally:
        log.close()
    return Checkpoint(cfg, _f32_round(params), vocab, "finetuned", init.step + step, history=history)
