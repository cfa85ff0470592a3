"""Scratch experiment driver (not part of the package)."""
import sys
import time
import numpy as np
from celink import kb, corpus, evaluation, model
from celink.features import FeatureConfig
from celink.model import ModelConfig, ModelParams, TrainConfig


def masks(docs, dictionary):
    dist = []
    for doc in docs:
        for m in doc.mentions:
            dist.append(dictionary.lookup(m.surface)[0][0] != m.gold)
    return np.array(dist)


def slices(results, dmask):
    flags = np.array([bool(l.gold_match) for r in results for l in r.links])
    return flags.mean(), flags[dmask].mean()


def experiment(seed, distractor, filler, extras, epochs, lr, pair, variants):
    store, dictionary = kb.build_synthetic_kb(
        kb.SyntheticKbConfig(seed=seed, pair_topics=pair, extra_candidates=extras))
    mk = lambda n, s, pre: corpus.generate_synthetic_corpus(store, dictionary, corpus.SyntheticCorpusConfig(
        documents=n, mentions_per_doc=6, distractor_prob=distractor,
        filler_context_prob=filler, seed=s, id_prefix=pre))
    train_docs = mk(500, seed, "tr")
    test_docs = mk(100, seed + 1000, "te")
    dmask = masks(test_docs, dictionary)

    out = {"prior": slices(evaluation.baseline_prior(test_docs, dictionary), dmask)}
    for name, flags in variants:
        t0 = time.perf_counter()
        fc = FeatureConfig(slots=10, window=3, context_window=20, **flags)
        mc = ModelConfig(feature_dim=fc.feature_dim(store.dim), hidden_dim=64, layers=3,
                         slots=10, window=3, dim=store.dim, seed=seed, **flags)
        params = ModelParams(mc)
        tc = TrainConfig(learning_rate=lr, momentum=0.9, batch_size=16, epochs=epochs,
                         patience=4, seed=seed, dev_fraction=0.1)
        hist = model.train(train_docs, dictionary, store, params, fc, tc)
        out[name] = slices(model.link(test_docs, dictionary, store, params, fc), dmask)
        out[name + "_t"] = (time.perf_counter() - t0, hist[-1].epoch + 1)
    return out


if __name__ == "__main__":
    mode = sys.argv[1] if len(sys.argv) > 1 else "soft"
    extras = int(sys.argv[2]) if len(sys.argv) > 2 else 3
    pair = (sys.argv[3] if len(sys.argv) > 3 else "pair") == "pair"
    epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 25
    if mode == "soft":
        variants = [("local", {"local": True}), ("full", {})]
        distractor = 0.5
    else:
        variants = [("full", {}), ("noatt", {"noatt": True}),
                    ("noemb", {"noemb": True}), ("local", {"local": True})]
        distractor = 0.8
    for seed in (7, 13, 42):
        t0 = time.perf_counter()
        r = experiment(seed, distractor, filler=0.65, extras=extras,
                       epochs=epochs, lr=float(sys.argv[5]) if len(sys.argv) > 5 else 0.02, pair=pair, variants=variants)
        line = f"seed={seed} ({time.perf_counter()-t0:.0f}s) "
        for k in ("prior", *[v[0] for v in variants]):
            o, d = r[k]
            line += f"{k}={o:.3f}/{d:.3f} "
        if mode == "soft":
            line += f"| m1={r['local'][0]-r['prior'][0]:+.3f} m2={r['full'][1]-r['local'][1]:+.3f}"
        else:
            line += (f"| full-noatt={r['full'][0]-r['noatt'][0]:+.3f} "
                     f"full-noemb={r['full'][0]-r['noemb'][0]:+.3f} "
                     f"full-local={r['full'][0]-r['local'][0]:+.3f}")
        print(line, flush=True)
