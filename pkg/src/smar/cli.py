"""Command-line entry point: ``smar <command> [flags]``.

Commands: gen-data, pretrain, finetune, eval, ablate, sweep. Settings come
from an optional JSON ``--config`` file; explicit flags override it.

Exit codes: 0 ok, 1 usage or config error, 2 data/checkpoint error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from smar import __version__
from smar.data import Corpus, DataError, DeskCorpusSpec, build_vocab, corpus_texts, gen_desk_corpus
from smar.encoders import ModelConfig
from smar.objectives import LossWeights
from smar.retrieval import (
    VARIANTS, ExperimentSettings, RetrievalError, ablation_run, evaluate, get_variant,
    metrics_csv, split_query_ids, sweep_csv, weight_sweep,
)
from smar.training import (
    CheckpointError, TrainConfig, TrainingDiverged, finetune, load_checkpoint, pretrain, save_checkpoint,
)

logger = logging.getLogger("smar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    corpus: str | None = None
    ckpt: str | None = None
    out: str | None = None
    preset: str = "desk"
    variant: str = "smar"
    model_dim: int | None = None
    heads: int | None = None
    temperature: float | None = None
    threshold: float = 0.5
    lr: float | None = None
    batch_size: int | None = None
    epochs: int = 10
    finetune_epochs: int = 10
    seed: int = 0
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    use_synthetic: bool = True
    mode: str | None = None
    hard_gate: bool = False
    k: str = "1,10,50"
    threads: int = 1

    def validate(self, need_corpus=False, need_ckpt=False) -> None:
        problems = []
        if self.preset not in ("desk", "paper"):
            problems.append(f"preset must be desk or paper, got {self.preset!r}")
        if self.variant not in VARIANTS:
            problems.append(f"unknown variant {self.variant!r}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if v is not None and v < 0:
                problems.append(f"{name} must be non-negative")
        w = self.weights()
        if w is None:
            problems.append("alpha + beta + gamma must be positive")
        if self.temperature is not None and self.temperature <= 0:
            problems.append("temperature must be positive")
        if not 0 < self.threshold < 1:
            problems.append("threshold must lie in (0, 1)")
        if self.epochs < 0 or self.finetune_epochs < 0:
            problems.append("epoch counts must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append("batch_size must be positive")
        if self.lr is not None and self.lr <= 0:
            problems.append("lr must be positive")
        if self.threads < 1:
            problems.append("threads must be >= 1")
        try:
            ks = self.ks()
            if not ks or min(ks) < 1:
                problems.append("k values must be positive")
        except ValueError:
            problems.append(f"k must be a comma-separated list of integers, got {self.k!r}")
        if need_corpus and (not self.corpus or not Path(self.corpus).is_dir()):
            problems.append(f"corpus directory {self.corpus!r} does not exist")
        if need_ckpt and (not self.ckpt or not Path(self.ckpt).exists()):
            problems.append(f"checkpoint {self.ckpt!r} does not exist")
        if problems:
            raise UsageError("invalid configuration: " + "; ".join(problems))

    def ks(self) -> list[int]:
        return [int(x) for x in str(self.k).split(",") if x.strip()]

    def weights(self) -> LossWeights | None:
        base = get_variant(self.variant).weights if self.variant in VARIANTS else LossWeights()
        vals = {n: (getattr(self, n) if getattr(self, n) is not None else getattr(base, n)) for n in ("alpha", "beta", "gamma")}
        try:
            return LossWeights(**vals)
        except ValueError:
            return None

    def train_config(self, epochs: int, **kw) -> TrainConfig:
        make = TrainConfig.paper if self.preset == "paper" else TrainConfig.desk
        opts = {"epochs": epochs, "seed": self.seed, "use_synthetic": self.use_synthetic, "hard_gate": self.hard_gate}
        if self.lr is not None:
            opts["lr"] = self.lr
        if self.batch_size is not None:
            opts["batch_size"] = self.batch_size
        opts.update(kw)
        return make(**opts)

    def model_kw(self) -> dict:
        kw = {"route_threshold": self.threshold}
        if self.temperature is not None:
            kw["temperature"] = self.temperature
        if self.preset == "paper":
            kw.update(model_dim=768, heads=12, temperature=kw.get("temperature", 1.0))
        if self.model_dim is not None:
            kw["model_dim"] = self.model_dim
        if self.heads is not None:
            kw["heads"] = self.heads
        return kw

    def settings(self) -> ExperimentSettings:
        return ExperimentSettings(
            pretrain=self.train_config(self.epochs),
            finetune=self.train_config(self.finetune_epochs),
            model_kw=self.model_kw(),
            ks=tuple(self.ks()),
            threads=self.threads,
        )


def load_run_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


# ------------------------------------------------------------------- helpers


def _prepare_out(out: str | None, force: bool, names: list[str]) -> Path:
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    clash = [n for n in names if (path / n).exists()]
    if clash and not force:
        raise UsageError(f"{path} already holds {', '.join(clash)}; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_ckpt(path: str, prefer: str) -> Path:
    p = Path(path)
    if p.is_dir():
        for name in (f"{prefer}.ckpt", "finetuned.ckpt", "pretrained.ckpt"):
            if (p / name).exists():
                return p / name
        raise DataError(f"no checkpoint file in {p}")
    if not p.exists() and p.with_suffix(".ckpt").exists():
        return p.with_suffix(".ckpt")
    return p


def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    spec = DeskCorpusSpec(
        n_items=args.items, n_queries=args.queries, n_train_queries=args.train_queries,
        color_fraction=args.color_fraction, synthetic_factor=args.synthetic_factor,
    )
    out = _prepare_out(args.out, args.force, ["items.jsonl", "queries.jsonl", "pairs.jsonl", "qrels.jsonl"])
    corpus = gen_desk_corpus(spec, args.seed)
    corpus.save(out)
    n_syn = sum(q.synthetic for q in corpus.queries)
    summary = {
        "items": len(corpus.items), "queries": len(corpus.queries), "synthetic_queries": n_syn,
        "pairs": len(corpus.pairs), "eval_queries": len(corpus.qrels),
        "control": spec.color_fraction == 0, "out": str(out),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    rc = load_run_config(args)
    rc.validate(need_corpus=True)
    out = _prepare_out(rc.out, args.force, ["pretrained.ckpt", "pretrain_log.jsonl"])
    args.out = str(out)  # so a divergence can drop last_good.ckpt next to it
    corpus = Corpus.load(rc.corpus)
    v = get_variant(rc.variant)
    cfg = rc.train_config(rc.epochs, weights=rc.weights(), log_path=str(out / "pretrain_log.jsonl"))
    vocab = build_vocab(corpus_texts(corpus))
    d_img = corpus.items[0].image_features.features.shape[1]
    model_cfg = ModelConfig.desk(len(vocab), d_img, fusion_mode=v.fusion_mode, **rc.model_kw())
    ckpt = pretrain(cfg, corpus, model_config=model_cfg, vocab=vocab)
    save_checkpoint(ckpt, out / "pretrained.ckpt")
    print(json.dumps({"checkpoint": str(out / "pretrained.ckpt"), "steps": ckpt.step}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = load_run_config(args)
    rc.validate(need_corpus=True, need_ckpt=True)
    out = _prepare_out(rc.out, args.force, ["finetuned.ckpt", "finetune_log.jsonl"])
    args.out = str(out)  # so a divergence can drop last_good.ckpt next to it
    corpus = Corpus.load(rc.corpus)
    init = load_checkpoint(_resolve_ckpt(rc.ckpt, "pretrained"))
    mode = rc.mode or get_variant(rc.variant).finetune_mode
    cfg = rc.train_config(rc.finetune_epochs, finetune_mode=mode, log_path=str(out / "finetune_log.jsonl"))
    ckpt = finetune(cfg, corpus, init)
    save_checkpoint(ckpt, out / "finetuned.ckpt")
    print(json.dumps({"checkpoint": str(out / "finetuned.ckpt"), "steps": ckpt.step}))
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = load_run_config(args)
    rc.validate(need_corpus=True, need_ckpt=True)
    corpus = Corpus.load(rc.corpus)
    model = load_checkpoint(_resolve_ckpt(rc.ckpt, "finetuned"))
    out = _prepare_out(rc.out, args.force, ["metrics.csv", "run.jsonl"]) if rc.out else None
    report = evaluate(model, corpus.items, corpus.eval_queries(), corpus.qrels, rc.ks(), rc.variant,
                      rc.threads, run_file=(out / "run.jsonl") if out else None)
    rows = []
    for split, ids in split_query_ids(corpus, report.per_query).items():
        rows += report.subset(ids).rows(variant=rc.variant, split=split, seed=rc.seed)
    text = metrics_csv(rows)
    if out:
        (out / "metrics.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = load_run_config(args)
    rc.validate(need_corpus=True)
    out = _prepare_out(rc.out, args.force, ["ablation.csv", "metrics.csv"])
    corpus = Corpus.load(rc.corpus)
    res = ablation_run(corpus, args.variants, args.seeds, rc.settings())
    k = max(rc.ks())
    (out / "ablation.csv").write_text(res.table_csv(k), encoding="utf-8")
    (out / "metrics.csv").write_text(metrics_csv(res.long_rows()), encoding="utf-8")
    print(res.table_csv(k), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = load_run_config(args)
    rc.validate(need_corpus=True)
    out = _prepare_out(rc.out, args.force, ["sweep.csv"])
    corpus = Corpus.load(rc.corpus)
    rows = weight_sweep(corpus, args.param, args.values, args.seeds, rc.settings())
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    print(json.dumps({"rows": len(rows), "out": str(out / "sweep.csv")}))
    return EXIT_OK


# -------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, corpus=True, ckpt=False, training=True):
    p.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if corpus:
        p.add_argument("--corpus", help="corpus directory holding the JSONL files")
    if ckpt:
        p.add_argument("--ckpt", help="checkpoint file or directory containing one")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="scorer threads (default 1)")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="model variant (default smar)")
    p.add_argument("--preset", choices=("desk", "paper"), help="hyperparameter preset (default desk)")
    p.add_argument("--k", help="comma-separated cutoffs (default 1,10,50)")
    if training:
        p.add_argument("--alpha", type=float, help="text alignment loss weight")
        p.add_argument("--beta", type=float, help="image alignment loss weight")
        p.add_argument("--gamma", type=float, help="multimodal alignment loss weight")
        p.add_argument("--lr", type=float, help="learning rate (desk 5e-4, paper 5e-5)")
        p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (desk 32, paper 128)")
        p.add_argument("--epochs", type=int, help="pre-training epochs (default 10)")
        p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, help="fine-tuning epochs (default 10)")
        p.add_argument("--temperature", type=float, help="softmax temperature (desk 0.1, paper 1.0)")
        p.add_argument("--threshold", type=float, help="routing probability threshold (default 0.5)")
        p.add_argument("--model-dim", dest="model_dim", type=int, help="embedding width")
        p.add_argument("--heads", type=int, help="attention heads per tower")
        p.add_argument("--no-synthetic", dest="use_synthetic", action="store_const", const=False,
                       help="pre-train on true pairs only")
        p.add_argument("--mode", choices=("adaptive", "text", "image"), help="fine-tuning objective")
        p.add_argument("--hard-gate", dest="hard_gate", action="store_const", const=True,
                       help="threshold header probabilities during fine-tuning")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic desk corpus")
    g.add_argument("--items", type=int, default=2000, help="number of items")
    g.add_argument("--queries", type=int, default=500, help="number of eval queries")
    g.add_argument("--train-queries", type=int, default=1200, help="number of click-log training queries")
    g.add_argument("--color-fraction", type=float, default=0.5, help="share of color-dependent queries")
    g.add_argument("--synthetic-factor", type=float, default=5.0, help="synthetic pairs per true training pair")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="multi-task pre-training")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="adaptive fine-tuning from a pretrained checkpoint")
    _common(f, ckpt=True)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the corpus qrels")
    _common(e, ckpt=True, training=False)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate several variants")
    _common(a)
    a.add_argument("--variants", type=_csv_list(str), default=list(VARIANTS), help="comma-separated variants")
    a.add_argument("--seeds", type=_csv_list(int), default=[0], help="comma-separated seeds")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="sweep one loss weight with the others at 1")
    _common(s)
    s.add_argument("--param", choices=("alpha", "beta", "gamma"), required=True, help="weight to vary")
    s.add_argument("--values", type=_csv_list(float), required=True, help="comma-separated values")
    s.add_argument("--seeds", type=_csv_list(int), default=[0], help="comma-separated seeds")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"smar {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        if exc.last_good is not None and getattr(args, "out", None):
            save_checkpoint(exc.last_good, Path(args.out) / "last_good.ckpt")
        print(f"smar {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, RetrievalError, OSError, ValueError) as exc:
        print(f"smar {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
