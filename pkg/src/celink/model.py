"""The collective linking network and its training loop.

Per document: every mention's candidate frame is encoded by a shared MLP,
then refined by T graph-convolution layers over the sliding-window
subgraph. All mentions advance one layer together (Jacobi-style), each
candidate row mixing the stacked hidden rows of its window neighbors with
its own state, weighted by the normalized adjacency row. A linear decoder
scores each candidate and a masked softmax yields per-mention
probabilities; training minimizes cross-entropy of the gold slots.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import Document
from .errors import ConfigError, DataError, NumericError
from .features import CandidateFrame, FeatureConfig, build_document_frames
from .kb import EmbeddingStore, MentionDictionary
from .numerics import Param, Var

__all__ = [
    "ModelConfig",
    "ModelParams",
    "MentionLink",
    "DocumentResult",
    "encode",
    "subgcn_layer",
    "decode",
    "forward",
    "TrainConfig",
    "train",
    "link",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Network shape; feature settings ride along for checkpointing."""

    feature_dim: int
    hidden_dim: int = 64
    layers: int = 3
    slots: int = 10
    window: int = 3
    dim: int = 0
    local: bool = False
    noatt: bool = False
    noemb: bool = False
    seed: int = 7

    def widths(self) -> list[int]:
        # encoder output plus one width per conv layer; constant by design
        return [self.hidden_dim] * (self.layers + 1)


class ModelParams:
    """Encoder, per-layer conv weights, and decoder, all trainable."""

    def __init__(self, cfg: ModelConfig):
        if cfg.layers < 1:
            raise ConfigError(f"need at least one conv layer, got {cfg.layers}")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths()

        def glorot(name, fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return Param(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

        self.encoder_w = glorot("encoder_w", cfg.feature_dim, widths[0])
        self.encoder_b = Param("encoder_b", np.zeros(widths[0]))
        self.conv_w = [
            glorot(f"conv_w{t}", widths[t], widths[t + 1]) for t in range(cfg.layers)
        ]
        self.decoder_w = glorot("decoder_w", widths[-1], 1)

    def all(self) -> list[Param]:
        return [self.encoder_w, self.encoder_b, *self.conv_w, self.decoder_w]

    def copy_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.all()]

    def load_values(self, values) -> None:
        for p, v in zip(self.all(), values):
            if p.value.shape != v.shape:
                raise DataError(f"checkpoint shape {v.shape} != {p.value.shape} for {p.name}")
            p.value = v.copy()


@dataclass
class MentionLink:
    mention_index: int
    surface: str
    entity_id: str | None                  # None when unlinkable
    probabilities: np.ndarray              # over valid slots only
    entity_ids: list[str] = field(default_factory=list)
    gold_match: bool | None = None


@dataclass
class DocumentResult:
    doc_id: str
    links: list[MentionLink]


def encode(frame: CandidateFrame, params: ModelParams, feats: Var | None = None) -> Var:
    """ReLU(f W + b) per candidate row; masked rows forced to zero."""
    f = feats if feats is not None else Var(frame.feats)
    h = nm.relu(nm.add_bias(nm.matmul(f, params.encoder_w), params.encoder_b))
    return nm.row_scale(h, frame.cand_mask.astype(np.float64))


def subgcn_layer(
    frames: list[CandidateFrame],
    hidden: list[Var],
    weight: Param,
    slots: int,
) -> list[Var]:
    """One synchronized convolution step across all mentions of a document.

    Every mention's new state is computed from the layer-t states only, so
    the result does not depend on mention iteration order.
    """
    width = weight.value.shape[0]
    nxt: list[Var] = []
    for frame, h in zip(frames, hidden):
        blocks = [None if p is None else hidden[p] for p in frame.neighbor_positions]
        stacked = nm.stack_rows(blocks, slots, width)
        mixed = nm.matmul(Var(frame.adjacency[:, :-1]), stacked)
        own = nm.row_scale(h, frame.adjacency[:, -1])
        nxt.append(nm.relu(nm.matmul(nm.add(mixed, own), weight)))
    return nxt


def decode(h: Var, params: ModelParams) -> Var:
    """Scalar score per candidate row, as a length-n vector."""
    scores = nm.matmul(h, params.decoder_w)
    return Var(scores.value[:, 0], (scores,), lambda g: (g[:, None],))


def forward(
    frames: list[CandidateFrame],
    params: ModelParams,
    feat_vars: dict[int, Var] | None = None,
) -> tuple[list[np.ndarray | None], list[tuple[int, Var]]]:
    """Probabilities per mention plus (mention, loss) pairs for gold slots.

    Mentions with no valid candidate get None probabilities; mentions whose
    gold is absent from the slots produce no loss term. ``feat_vars`` maps
    ``id(frame)`` to a tracked feature Var when embeddings are fine-tuned.
    """
    cfg = params.cfg
    hidden = [
        encode(f, params, feat_vars.get(id(f)) if feat_vars else None) for f in frames
    ]
    for weight in params.conv_w:
        hidden = subgcn_layer(frames, hidden, weight, cfg.slots)

    probs: list[np.ndarray | None] = []
    losses: list[tuple[int, Var]] = []
    for i, (frame, h) in enumerate(zip(frames, hidden)):
        if not frame.cand_mask.any():
            probs.append(None)
            continue
        scores = decode(h, params)
        if frame.gold_slot >= 0:
            p, loss = nm.softmax_xent(scores, frame.gold_slot, frame.cand_mask)
            losses.append((i, loss))
        else:
            p = nm.masked_softmax(scores.value, frame.cand_mask)
        probs.append(p)
    return probs, losses


def link_frames(doc: Document, frames: list[CandidateFrame], params: ModelParams) -> DocumentResult:
    probs, _ = forward(frames, params)
    links = []
    for i, (mention, frame, p) in enumerate(zip(doc.mentions, frames, probs)):
        if p is None:
            links.append(
                MentionLink(i, mention.surface, None, np.array([]), [],
                            None if mention.gold is None else False)
            )
            continue
        valid = frame.valid_count
        best = int(np.argmax(p[:valid]))  # argmax takes the lowest tied slot
        chosen = frame.entity_ids[best]
        links.append(
            MentionLink(
                mention_index=i,
                surface=mention.surface,
                entity_id=chosen,
                probabilities=p[:valid].copy(),
                entity_ids=list(frame.entity_ids),
                gold_match=None if mention.gold is None else chosen == mention.gold,
            )
        )
    return DocumentResult(doc.doc_id, links)


def link(
    documents: list[Document],
    dictionary: MentionDictionary,
    store: EmbeddingStore,
    params: ModelParams,
    feature_cfg: FeatureConfig,
    workers: int = 1,
) -> list[DocumentResult]:
    """Assign each mention its argmax candidate under the trained model."""

    def run(doc: Document) -> DocumentResult:
        frames = build_document_frames(doc, dictionary, store, feature_cfg)
        return link_frames(doc, frames, params)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, documents))
    return [run(doc) for doc in documents]


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    patience: int = 3
    seed: int = 7
    dev_fraction: float = 0.1
    finetune_embeddings: bool = False
    workers: int = 1

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.dev_fraction < 1.0):
            raise ConfigError(f"dev fraction must be in [0, 1), got {self.dev_fraction}")


@dataclass
class HistoryRow:
    epoch: int
    batch: int
    loss: float
    dev_loss: float | None = None


def _apply_embedding_grads(
    doc: Document,
    frames: list[CandidateFrame],
    grads: dict,
    feat_vars: dict[int, Var],
    store: EmbeddingStore,
    feature_cfg: FeatureConfig,
    lr: float,
) -> None:
    """Push feature-block gradients into the store's working copies.

    The entity block maps one-to-one onto the candidate's entity vector.
    The context block is distributed over the attended words with the
    attention weights treated as constants.
    """
    from .features import attention_weights, context_window_words, known_words

    dim = store.dim
    for frame in frames:
        fvar = feat_vars.get(id(frame))
        g = grads.get(fvar) if fvar is not None else None
        if g is None:
            continue
        ctx = known_words(
            context_window_words(doc, frame.mention_index, feature_cfg.context_window), store
        )
        for j, eid in enumerate(frame.entity_ids):
            g_ctx = g[j, 10 : 10 + dim]
            g_ent = g[j, 10 + dim : 10 + 2 * dim]
            store.entities[eid] -= lr * g_ent
            if ctx and g_ctx.any():
                if feature_cfg.noatt:
                    weights = np.full(len(ctx), 1.0 / len(ctx))
                else:
                    weights = attention_weights(ctx, eid, store)
                for w, alpha in zip(ctx, weights):
                    store.words[w] -= lr * alpha * g_ctx


def train(
    documents: list[Document],
    dictionary: MentionDictionary,
    store: EmbeddingStore,
    params: ModelParams,
    feature_cfg: FeatureConfig,
    cfg: TrainConfig,
) -> list[HistoryRow]:
    """Mini-batch SGD over mention losses with dev-split early stopping.

    Batches are document-granular groups holding at least ``batch_size``
    gold mentions. Returns the loss history; ``params`` is updated in place
    and ends at the best dev-loss snapshot. Deterministic for a fixed
    config and seed regardless of worker count.
    """
    cfg.validate()
    if not documents:
        raise ConfigError("training corpus is empty")

    work_store = store.copy() if cfg.finetune_embeddings else store
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(documents))
    n_dev = int(round(cfg.dev_fraction * len(documents)))
    dev_docs = [documents[i] for i in order[:n_dev]]
    train_docs = [documents[i] for i in order[n_dev:]]
    if not train_docs:
        raise ConfigError("dev fraction leaves no training documents")

    def frames_for(docs):
        return [build_document_frames(d, dictionary, work_store, feature_cfg) for d in docs]

    train_frames = frames_for(train_docs)
    dev_frames = frames_for(dev_docs)

    optimizer = nm.SgdMomentum(params.all(), cfg.learning_rate, cfg.momentum)
    history: list[HistoryRow] = []
    best_dev = np.inf
    best_values = params.copy_values()
    bad_evals = 0

    def forward_doc(di: int):
        frames = train_frames[di]
        feat_vars: dict[int, Var] = {}
        if cfg.finetune_embeddings:
            feat_vars = {id(f): Var(f.feats, track=True) for f in frames}
        _, losses = forward(frames, params, feat_vars or None)
        return [loss for _, loss in losses], feat_vars

    def dev_loss() -> float | None:
        frames_list = frames_for(dev_docs) if cfg.finetune_embeddings else dev_frames
        total, count = 0.0, 0
        for frames in frames_list:
            _, losses = forward(frames, params)
            for _, loss in losses:
                total += float(loss.value)
                count += 1
        return total / count if count else None

    gold_counts = [
        sum(1 for f in frames if f.gold_slot >= 0) for frames in train_frames
    ]

    stop = False
    for epoch in range(cfg.epochs):
        doc_order = rng.permutation(len(train_docs))

        # document groups holding at least batch_size gold mentions each
        groups: list[list[int]] = []
        current: list[int] = []
        count = 0
        for di in doc_order:
            current.append(int(di))
            count += gold_counts[di]
            if count >= cfg.batch_size:
                groups.append(current)
                current, count = [], 0
        if current:
            groups.append(current)

        for batch_index, group in enumerate(groups):
            try:
                if cfg.workers > 1:
                    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                        results = list(pool.map(forward_doc, group))
                else:
                    results = [forward_doc(di) for di in group]
                batch_losses = [loss for losses, _ in results for loss in losses]
                if not batch_losses:
                    continue
                total = batch_losses[0]
                for term in batch_losses[1:]:
                    total = nm.add(total, term)
                mean = nm.scale(total, 1.0 / len(batch_losses))
                grads = nm.backward(mean)
                optimizer.step(grads)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch} batch {batch_index}: {exc}"
                ) from exc
            if cfg.finetune_embeddings:
                for di, (_, feat_vars) in zip(group, results):
                    _apply_embedding_grads(
                        train_docs[di], train_frames[di], grads, feat_vars,
                        work_store, feature_cfg, cfg.learning_rate,
                    )
                for di in group:
                    train_frames[di] = build_document_frames(
                        train_docs[di], dictionary, work_store, feature_cfg
                    )
            history.append(HistoryRow(epoch, batch_index, float(mean.value)))

        dl = dev_loss()
        if history:
            history[-1].dev_loss = dl
        if dl is not None:
            if dl < best_dev:
                best_dev = dl
                best_values = params.copy_values()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    stop = True
        if stop:
            break

    if np.isfinite(best_dev):
        params.load_values(best_values)
    return history


def history_csv(history: list[HistoryRow], fh, header_lines=()) -> None:
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write("epoch,batch,loss,dev_loss\n")
    for row in history:
        dev = "" if row.dev_loss is None else repr(row.dev_loss)
        fh.write(f"{row.epoch},{row.batch},{row.loss!r},{dev}\n")


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra_config: dict | None = None) -> None:
    """Version byte, JSON header, then raw float64 row-major matrices."""
    cfg = params.cfg
    header = {
        "feature_dim": cfg.feature_dim,
        "widths": cfg.widths(),
        "layers": cfg.layers,
        "slots": cfg.slots,
        "window": cfg.window,
        "dim": cfg.dim,
        "local": cfg.local,
        "noatt": cfg.noatt,
        "noemb": cfg.noemb,
        "seed": cfg.seed,
        "config": {k: str(v) for k, v in (extra_config or {}).items()},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params.all():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or raw[0] != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version in {path}")
    (hlen,) = struct.unpack_from("<I", raw, 1)
    header = json.loads(raw[5 : 5 + hlen].decode("utf-8"))
    cfg = ModelConfig(
        feature_dim=header["feature_dim"],
        hidden_dim=header["widths"][0],
        layers=header["layers"],
        slots=header["slots"],
        window=header["window"],
        dim=header["dim"],
        local=header["local"],
        noatt=header["noatt"],
        noemb=header["noemb"],
        seed=header["seed"],
    )
    params = ModelParams(cfg)
    offset = 5 + hlen
    values = []
    for p in params.all():
        n = p.value.size
        vec = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        values.append(vec.reshape(p.value.shape).astype(np.float64))
    if offset != len(raw):
        raise DataError(f"trailing bytes in checkpoint {path}")
    params.load_values(values)
    return params
