"""Micro/macro scoring, the prior-only baseline, and the scaling benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .candidates import generate
from .corpus import Document
from .errors import ConfigError, DataError
from .kb import MentionDictionary
from .model import DocumentResult, MentionLink, ModelConfig, ModelParams, forward
from .features import CandidateFrame
from .numerics import Var

__all__ = [
    "EvalReport",
    "score",
    "baseline_prior",
    "BenchResult",
    "bench_complexity",
]


@dataclass
class DocScore:
    doc_id: str
    gold: int
    linked: int
    correct: int

    @property
    def precision(self) -> float:
        return self.correct / self.linked if self.linked else 0.0

    @property
    def recall(self) -> float:
        return self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class EvalReport:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    mentions: int
    linkable: int
    correct: int
    unlinkable: int
    per_document: list[DocScore] = field(default_factory=list)

    def table(self) -> str:
        rows = [
            ("micro", self.micro_precision, self.micro_recall, self.micro_f1),
            ("macro", self.macro_precision, self.macro_recall, self.macro_f1),
        ]
        lines = [f"{'level':<8}{'P':>8}{'R':>8}{'F1':>8}"]
        for name, p, r, f in rows:
            lines.append(f"{name:<8}{p:>8.4f}{r:>8.4f}{f:>8.4f}")
        lines.append(
            f"mentions={self.mentions} linkable={self.linkable} "
            f"correct={self.correct} unlinkable={self.unlinkable}"
        )
        return "\n".join(lines)

    def csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("level,precision,recall,f1\n")
        fh.write(f"micro,{self.micro_precision!r},{self.micro_recall!r},{self.micro_f1!r}\n")
        fh.write(f"macro,{self.macro_precision!r},{self.macro_recall!r},{self.macro_f1!r}\n")


def score(results: list[DocumentResult], documents: list[Document]) -> EvalReport:
    """Mention-level (micro) and document-averaged (macro) P/R/F1.

    Precision counts mentions where a link was produced; recall counts all
    gold mentions. Documents without any gold mention are excluded from
    the macro averages.
    """
    by_id = {doc.doc_id: doc for doc in documents}
    per_doc: list[DocScore] = []
    mentions = linkable = correct = unlinkable = 0
    for result in results:
        doc = by_id.get(result.doc_id)
        if doc is None:
            raise DataError(f"predictions reference unknown document {result.doc_id!r}")
        gold_count = doc_linked = doc_correct = 0
        for link in result.links:
            mentions += 1
            gold = doc.mentions[link.mention_index].gold
            if gold is None:
                continue
            gold_count += 1
            if link.entity_id is None:
                unlinkable += 1
                continue
            doc_linked += 1
            if link.entity_id == gold:
                doc_correct += 1
        if gold_count:
            per_doc.append(DocScore(result.doc_id, gold_count, doc_linked, doc_correct))
        linkable += doc_linked
        correct += doc_correct

    total_gold = sum(d.gold for d in per_doc)
    if total_gold == 0:
        raise DataError("no gold mentions anywhere; nothing to score")
    micro_p = correct / linkable if linkable else 0.0
    micro_r = correct / total_gold
    micro_f = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r > 0 else 0.0
    macro_p = float(np.mean([d.precision for d in per_doc]))
    macro_r = float(np.mean([d.recall for d in per_doc]))
    macro_f = float(np.mean([d.f1 for d in per_doc]))
    return EvalReport(
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f,
        mentions=mentions,
        linkable=linkable,
        correct=correct,
        unlinkable=unlinkable,
        per_document=per_doc,
    )


def baseline_prior(
    documents: list[Document],
    dictionary: MentionDictionary,
    slots: int = 10,
) -> list[DocumentResult]:
    """Link every mention to its highest-prior candidate."""
    results = []
    for doc in documents:
        links = []
        for i, mention in enumerate(doc.mentions):
            cand = generate(mention.surface, dictionary, slots, mention_index=i)
            if not cand.entries:
                links.append(
                    MentionLink(i, mention.surface, None, np.array([]), [],
                                None if mention.gold is None else False)
                )
                continue
            chosen = cand.entries[0][0]
            priors = np.array([p for _, p in cand.entries])
            links.append(
                MentionLink(
                    mention_index=i,
                    surface=mention.surface,
                    entity_id=chosen,
                    probabilities=priors / priors.sum(),
                    entity_ids=cand.entity_ids,
                    gold_match=None if mention.gold is None else chosen == mention.gold,
                )
            )
        results.append(DocumentResult(doc.doc_id, links))
    return results


# --- complexity benchmark -------------------------------------------------------

@dataclass
class BenchResult:
    rows: list[tuple[int, float, float]]   # (mentions, subgraph ms, full-graph ms)
    slope_subgraph: float
    slope_fullgraph: float

    def csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("k,subgcn_ms,fullgraph_ms\n")
        for k, a, b in self.rows:
            fh.write(f"{k},{a!r},{b!r}\n")


def _random_frames(
    rng: np.random.Generator, k: int, slots: int, window: int, feature_dim: int
) -> list[CandidateFrame]:
    """Synthetic all-valid frames with the right shapes for timing."""
    frames = []
    cols = 2 * window * slots
    for i in range(k):
        positions = [
            i + off if 0 <= i + off < k else None
            for off in list(range(-window, 0)) + list(range(1, window + 1))
        ]
        adjacency = np.zeros((slots, cols + 1))
        adjacency[:, -1] = 1.0
        for p, pos in enumerate(positions):
            if pos is not None:
                adjacency[:, p * slots : (p + 1) * slots] = rng.random((slots, slots))
        frames.append(
            CandidateFrame(
                mention_index=i,
                entity_ids=[f"E{i}_{j}" for j in range(slots)],
                feats=rng.random((slots, feature_dim)),
                adjacency=nm.row_normalize(adjacency),
                cand_mask=np.ones(slots, dtype=bool),
                neighbor_slot_mask=np.array(
                    [pos is not None for pos in positions for _ in range(slots)]
                ),
                neighbor_positions=positions,
                gold_slot=-1,
            )
        )
    return frames


def _fullgraph_forward(
    feats: np.ndarray, adjacency: np.ndarray, params: ModelParams
) -> np.ndarray:
    """GCN over the flat graph of all k*n candidates, same weights."""
    h = nm.relu(nm.add_bias(nm.matmul(Var(feats), params.encoder_w), params.encoder_b))
    for weight in params.conv_w:
        h = nm.relu(nm.matmul(nm.matmul(Var(adjacency), h), weight))
    return nm.matmul(h, params.decoder_w).value


def bench_complexity(
    k_values=(8, 16, 32, 64, 128),
    slots: int = 10,
    window: int = 3,
    layers: int = 3,
    hidden_dim: int = 64,
    feature_dim: int = 32,
    trials: int = 3,
    seed: int = 7,
) -> BenchResult:
    """Forward-pass wall time vs document length for both inference modes.

    The sliding-window model touches 2*window neighbors per mention (time
    linear in k); the full-graph variant couples all k*slots candidates
    (quadratic). Reports median-of-trials after one warm-up, plus fitted
    log-log slopes.
    """
    if trials < 3:
        raise ConfigError(f"need at least 3 trials, got {trials}")
    for k in k_values:
        if k < 2 * window + 1:
            raise ConfigError(f"k={k} smaller than the window span {2 * window + 1}")

    rng = np.random.default_rng(seed)
    params = ModelParams(
        ModelConfig(
            feature_dim=feature_dim, hidden_dim=hidden_dim, layers=layers,
            slots=slots, window=window, seed=seed,
        )
    )

    rows = []
    for k in k_values:
        frames = _random_frames(rng, k, slots, window, feature_dim)
        flat_feats = np.concatenate([f.feats for f in frames], axis=0)
        full_adj = rng.random((k * slots, k * slots))
        # no edges among candidates of one mention; keep the self-loop
        for i in range(k):
            block = slice(i * slots, (i + 1) * slots)
            full_adj[block, block] = np.eye(slots)
        full_adj = nm.row_normalize(full_adj)

        sub_times = []
        full_times = []
        for trial in range(trials + 1):
            t0 = time.perf_counter()
            forward(frames, params)
            t1 = time.perf_counter()
            _fullgraph_forward(flat_feats, full_adj, params)
            t2 = time.perf_counter()
            if trial == 0:
                continue  # warm-up
            sub_times.append((t1 - t0) * 1e3)
            full_times.append((t2 - t1) * 1e3)
        rows.append((k, float(np.median(sub_times)), float(np.median(full_times))))

    ks = np.log2([r[0] for r in rows])
    slope_sub = float(np.polyfit(ks, np.log2([r[1] for r in rows]), 1)[0])
    slope_full = float(np.polyfit(ks, np.log2([r[2] for r in rows]), 1)[0])
    return BenchResult(rows, slope_sub, slope_full)
