"""Command-line entry point for reproducible runs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
Config files are flat ``key = value`` lines; explicit flags win over file
values, and the effective config is echoed as ``# key = value`` header
lines into every output artifact.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace

import click
import numpy as np

from . import corpus as corpus_mod
from . import evaluation, kb, model
from .errors import CelinkError, ConfigError, DataError, NumericError
from .features import FeatureConfig
from .model import ModelConfig, ModelParams, TrainConfig

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    """Paths, hyperparameters, and ablation switches for one run."""

    embeddings: str = ""
    dictionary: str = ""
    corpus: str = ""
    checkpoint: str = ""
    n_candidates: int = 10
    window: int = 3
    context_window: int = 20
    hidden_dim: int = 64
    layers: int = 3
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    patience: int = 3
    seed: int = 7
    dev_fraction: float = 0.1
    finetune_embeddings: bool = False
    workers: int = 1
    local: bool = False
    noatt: bool = False
    noemb: bool = False
    prior_only: bool = False

    def validate(self) -> None:
        if self.n_candidates < 1:
            raise ConfigError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.window < 0:
            raise ConfigError(f"window must be >= 0, got {self.window}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            slots=self.n_candidates,
            window=self.window,
            context_window=self.context_window,
            local=self.local,
            noatt=self.noatt,
            noemb=self.noemb,
        )

    def echo_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def load_config_file(path) -> dict:
    """Parse flat ``key = value`` lines into RunConfig field types."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            t = types[key]
            try:
                if t == "bool":
                    out[key] = _BOOL_VALUES[value.lower()]
                elif t == "int":
                    out[key] = int(value)
                elif t == "float":
                    out[key] = float(value)
                else:
                    out[key] = value
            except (KeyError, ValueError):
                raise ConfigError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def build_run_config(config_path, **flags) -> RunConfig:
    values = load_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _fail(exc: CelinkError) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, ConfigError):
        sys.exit(EXIT_CONFIG)
    if isinstance(exc, DataError):
        sys.exit(EXIT_DATA)
    if isinstance(exc, NumericError):
        sys.exit(EXIT_NUMERIC)
    sys.exit(1)


def run_guarded(fn):
    try:
        fn()
    except CelinkError as exc:
        _fail(exc)


_CONFIG_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="Flat key = value config file."),
    click.option("--embeddings", default=None),
    click.option("--dictionary", default=None),
    click.option("--corpus", "corpus", default=None),
    click.option("--checkpoint", default=None),
    click.option("--n-candidates", "n_candidates", type=int, default=None),
    click.option("--window", type=int, default=None),
    click.option("--context-window", "context_window", type=int, default=None),
    click.option("--hidden-dim", "hidden_dim", type=int, default=None),
    click.option("--layers", type=int, default=None),
    click.option("--learning-rate", "learning_rate", type=float, default=None),
    click.option("--momentum", type=float, default=None),
    click.option("--batch-size", "batch_size", type=int, default=None),
    click.option("--epochs", type=int, default=None),
    click.option("--patience", type=int, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--dev-fraction", "dev_fraction", type=float, default=None),
    click.option("--finetune-embeddings", "finetune_embeddings", is_flag=True, default=None),
    click.option("--workers", type=int, default=None),
    click.option("--local", is_flag=True, default=None),
    click.option("--noatt", is_flag=True, default=None),
    click.option("--noemb", is_flag=True, default=None),
    click.option("--prior-only", "prior_only", is_flag=True, default=None),
]


def with_config_options(fn):
    for option in reversed(_CONFIG_OPTIONS):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Collective entity linker: train, link, evaluate, benchmark."""


@main.command("build-dict")
@click.argument("sources", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def cmd_build_dict(sources, out):
    """Merge prior dictionaries, keeping the max prior per pair."""

    def run():
        merged = kb.merge_priors([kb.load_dictionary(p) for p in sources])
        kb.save_dictionary(merged, out)
        click.echo(f"wrote {len(merged)} entries to {out}")

    run_guarded(run)


@main.command("gen-synth")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--topics", type=int, default=8)
@click.option("--entities", type=int, default=200)
@click.option("--dim", type=int, default=32)
@click.option("--train-docs", type=int, default=500)
@click.option("--test-docs", type=int, default=100)
@click.option("--mentions-per-doc", type=int, default=6)
@click.option("--distractor-prob", type=float, default=0.5)
@click.option("--distractor-margin", type=float, default=0.2)
@click.option("--filler-context-prob", type=float, default=0.5)
@click.option("--seed", type=int, default=7)
def cmd_gen_synth(out_dir, topics, entities, dim, train_docs, test_docs,
                  mentions_per_doc, distractor_prob, distractor_margin,
                  filler_context_prob, seed):
    """Generate a topic-clustered KB plus train/test corpora."""

    def run():
        import os

        os.makedirs(out_dir, exist_ok=True)
        kb_cfg = kb.SyntheticKbConfig(
            topics=topics, entities=entities, dim=dim,
            distractor_margin=distractor_margin, seed=seed,
        )
        store, dictionary = kb.build_synthetic_kb(kb_cfg)
        kb.save_embeddings(store, os.path.join(out_dir, "embeddings.txt"))
        kb.save_dictionary(dictionary, os.path.join(out_dir, "dictionary.txt"))
        for name, count, offset in (("train", train_docs, 0), ("test", test_docs, 1)):
            corpus_cfg = corpus_mod.SyntheticCorpusConfig(
                documents=count,
                mentions_per_doc=mentions_per_doc,
                distractor_prob=distractor_prob,
                filler_context_prob=filler_context_prob,
                seed=seed + offset,
                id_prefix=f"{name}-",
            )
            docs = corpus_mod.generate_synthetic_corpus(store, dictionary, corpus_cfg)
            corpus_mod.save_corpus(docs, os.path.join(out_dir, f"{name}.txt"))
        click.echo(f"wrote KB and corpora to {out_dir}")

    run_guarded(run)


def _load_world(cfg: RunConfig):
    if not cfg.embeddings or not cfg.dictionary:
        raise ConfigError("embeddings and dictionary paths are required")
    store = kb.load_embeddings(cfg.embeddings)
    dictionary = kb.load_dictionary(cfg.dictionary)
    return store, dictionary


def _model_config(cfg: RunConfig, dim: int) -> ModelConfig:
    return ModelConfig(
        feature_dim=cfg.feature_config().feature_dim(dim),
        hidden_dim=cfg.hidden_dim,
        layers=cfg.layers,
        slots=cfg.n_candidates,
        window=cfg.window,
        dim=dim,
        local=cfg.local,
        noatt=cfg.noatt,
        noemb=cfg.noemb,
        seed=cfg.seed,
    )


@main.command("train")
@with_config_options
@click.option("--out-checkpoint", required=True, type=click.Path())
@click.option("--out-history", default=None, type=click.Path())
def cmd_train(config_path, out_checkpoint, out_history, **flags):
    """Train on a corpus and write a checkpoint plus loss history CSV."""

    def run():
        cfg = build_run_config(config_path, **flags)
        if not cfg.corpus:
            raise ConfigError("corpus path is required")
        store, dictionary = _load_world(cfg)
        documents = corpus_mod.load_corpus(cfg.corpus)
        params = ModelParams(_model_config(cfg, store.dim))
        train_cfg = TrainConfig(
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            patience=cfg.patience,
            seed=cfg.seed,
            dev_fraction=cfg.dev_fraction,
            finetune_embeddings=cfg.finetune_embeddings,
            workers=cfg.workers,
        )
        history = model.train(documents, dictionary, store, params,
                              cfg.feature_config(), train_cfg)
        model.save_checkpoint(params, out_checkpoint,
                              extra_config=dict(line.split(" = ", 1) for line in cfg.echo_lines()))
        if out_history:
            with open(out_history, "w", encoding="utf-8") as fh:
                model.history_csv(history, fh, header_lines=cfg.echo_lines())
        dev = [row.dev_loss for row in history if row.dev_loss is not None]
        if dev:
            click.echo(f"first dev loss {dev[0]:.6f}, last dev loss {dev[-1]:.6f}")
        click.echo(f"wrote checkpoint to {out_checkpoint}")

    run_guarded(run)


@main.command("link")
@with_config_options
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dump-frames", "dump_frames", default=None, type=click.Path())
def cmd_link(config_path, out_path, dump_frames, **flags):
    """Write per-mention links as TSV: doc, index, surface, entity, probability."""

    def run():
        cfg = build_run_config(config_path, **flags)
        if not cfg.corpus:
            raise ConfigError("corpus path is required")
        store, dictionary = _load_world(cfg)
        documents = corpus_mod.load_corpus(cfg.corpus)
        if cfg.prior_only:
            results = evaluation.baseline_prior(documents, dictionary, cfg.n_candidates)
        else:
            if not cfg.checkpoint:
                raise ConfigError("checkpoint path is required unless --prior-only")
            params = model.load_checkpoint(cfg.checkpoint)
            results = model.link(documents, dictionary, store, params,
                                 cfg.feature_config(), workers=cfg.workers)
        if dump_frames:
            from .features import build_document_frames, dump_frame

            with open(dump_frames, "w", encoding="utf-8") as fh:
                for doc in documents:
                    for frame in build_document_frames(doc, dictionary, store,
                                                       cfg.feature_config()):
                        dump_frame(frame, doc.doc_id, fh)
        with open(out_path, "w", encoding="utf-8") as fh:
            for line in cfg.echo_lines():
                fh.write(f"# {line}\n")
            for result in results:
                for link in result.links:
                    if link.entity_id is None:
                        fh.write(f"{result.doc_id}\t{link.mention_index}\t{link.surface}\t-\t0\n")
                    else:
                        prob = float(link.probabilities.max())
                        fh.write(
                            f"{result.doc_id}\t{link.mention_index}\t{link.surface}"
                            f"\t{link.entity_id}\t{prob!r}\n"
                        )
        click.echo(f"wrote links to {out_path}")

    run_guarded(run)


def load_predictions(path) -> dict[str, dict[int, str | None]]:
    """Read a link TSV back into {doc_id: {mention_index: entity or None}}."""
    out: dict[str, dict[int, str | None]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError("expected 5 tab-separated fields", path=path, line=lineno)
            doc_id, idx_s, _surface, entity, _prob = parts
            try:
                idx = int(idx_s)
            except ValueError:
                raise DataError(f"bad mention index {idx_s!r}", path=path, line=lineno) from None
            out.setdefault(doc_id, {})[idx] = None if entity == "-" else entity
    return out


@main.command("eval")
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--gold-corpus", "gold_corpus", required=True, type=click.Path(exists=True))
@click.option("--out-csv", "out_csv", default=None, type=click.Path())
def cmd_eval(predictions, gold_corpus, out_csv):
    """Score a predictions TSV against the gold corpus."""

    def run():
        documents = corpus_mod.load_corpus(gold_corpus)
        preds = load_predictions(predictions)
        results = []
        for doc in documents:
            by_index = preds.get(doc.doc_id, {})
            links = []
            for i, mention in enumerate(doc.mentions):
                entity = by_index.get(i)
                links.append(
                    model.MentionLink(
                        mention_index=i,
                        surface=mention.surface,
                        entity_id=entity,
                        probabilities=np.array([]),
                        entity_ids=[],
                        gold_match=None if mention.gold is None else entity == mention.gold,
                    )
                )
            results.append(model.DocumentResult(doc.doc_id, links))
        report = evaluation.score(results, documents)
        click.echo(report.table())
        if out_csv:
            with open(out_csv, "w", encoding="utf-8") as fh:
                report.csv(fh, header_lines=[f"predictions = {predictions}",
                                             f"gold_corpus = {gold_corpus}"])

    run_guarded(run)


@main.command("bench")
@click.option("--k-values", default="8,16,32,64,128", show_default=True)
@click.option("--n-candidates", "n_candidates", type=int, default=10)
@click.option("--window", type=int, default=3)
@click.option("--layers", type=int, default=3)
@click.option("--hidden-dim", "hidden_dim", type=int, default=64)
@click.option("--trials", type=int, default=3)
@click.option("--seed", type=int, default=7)
@click.option("--out", "out_path", default=None, type=click.Path())
def cmd_bench(k_values, n_candidates, window, layers, hidden_dim, trials, seed, out_path):
    """Time sliding-window vs full-graph forward passes across document sizes."""

    def run():
        try:
            ks = tuple(int(x) for x in k_values.split(","))
        except ValueError:
            raise ConfigError(f"bad k values {k_values!r}") from None
        result = evaluation.bench_complexity(
            k_values=ks, slots=n_candidates, window=window, layers=layers,
            hidden_dim=hidden_dim, trials=trials, seed=seed,
        )
        click.echo("k\tsubgcn_ms\tfullgraph_ms")
        for k, a, b in result.rows:
            click.echo(f"{k}\t{a:.3f}\t{b:.3f}")
        click.echo(
            f"log-log slopes: subgraph {result.slope_subgraph:.3f}, "
            f"full graph {result.slope_fullgraph:.3f}"
        )
        if out_path:
            with open(out_path, "w", encoding="utf-8") as fh:
                result.csv(fh, header_lines=[
                    f"k_values = {k_values}", f"n_candidates = {n_candidates}",
                    f"window = {window}", f"layers = {layers}",
                    f"hidden_dim = {hidden_dim}", f"trials = {trials}", f"seed = {seed}",
                ])

    run_guarded(run)


@main.command("check-grad")
@click.option("--seed", type=int, default=7)
@click.option("--tolerance", type=float, default=1e-4)
def cmd_check_grad(seed, tolerance):
    """Finite-difference check of the full loss on a small built-in fixture."""

    def run():
        from .fixtures import gradient_fixture

        frames, params = gradient_fixture(seed=seed)

        def loss_fn():
            _, losses = model.forward(frames, params)
            total = losses[0][1]
            for _, term in losses[1:]:
                total = model.nm.add(total, term)
            return total

        err = model.nm.check_gradients(loss_fn, params.all(), epsilon=1e-5)
        click.echo(f"max relative gradient error: {err:.3e}")
        if not err < tolerance:
            raise NumericError(f"gradient error {err:.3e} exceeds tolerance {tolerance}")

    run_guarded(run)


if __name__ == "__main__":
    main()
