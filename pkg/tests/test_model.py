"""Network behavior: layer contracts, oracle equivalence, training."""

import numpy as np
import pytest

from celink import numerics as nm
from celink.errors import NumericError
from celink.features import CandidateFrame, FeatureConfig, build_document_frames
from celink.fixtures import gradient_fixture, tiny_dictionary, tiny_document, tiny_store
from celink.model import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    decode,
    encode,
    forward,
    link,
    link_frames,
    load_checkpoint,
    save_checkpoint,
    subgcn_layer,
    train,
)
from celink.numerics import Var

from conftest import make_random_frames


def straight_line_forward(frames, params):
    """Oracle: explicit stacking of every expanded hidden matrix, no tape."""
    hidden = []
    for f in frames:
        h = np.maximum(0.0, f.feats @ params.encoder_w.value + params.encoder_b.value)
        hidden.append(h * f.cand_mask[:, None])
    slots = params.cfg.slots
    width = params.cfg.hidden_dim
    for weight in params.conv_w:
        new_hidden = []
        for f, h in zip(frames, hidden):
            rows = np.zeros((slots, weight.value.shape[1]))
            for j in range(slots):
                expanded = np.zeros((2 * params.cfg.window * slots + 1, width))
                for p, pos in enumerate(f.neighbor_positions):
                    if pos is not None:
                        expanded[p * slots : (p + 1) * slots] = hidden[pos]
                expanded[-1] = h[j]
                rows[j] = np.maximum(0.0, (f.adjacency[j] @ expanded) @ weight.value)
            new_hidden.append(rows)
        hidden = new_hidden
    probs = []
    for f, h in zip(frames, hidden):
        scores = (h @ params.decoder_w.value)[:, 0]
        z = np.where(f.cand_mask, scores, -np.inf)
        z = z - z[f.cand_mask].max()
        e = np.where(f.cand_mask, np.exp(z), 0.0)
        probs.append(e / e.sum())
    return probs


def nonnegative_params(cfg, scale=0.2):
    params = ModelParams(cfg)
    for p in params.all():
        p.value = np.abs(p.value)
    params.encoder_b.value = np.full_like(params.encoder_b.value, 0.01)
    params.decoder_w.value = np.full_like(params.decoder_w.value, scale)
    return params


class TestEncode:
    def test_zero_features_zero_bias(self):
        frames, params = gradient_fixture()
        frame = frames[0]
        frame.feats = np.zeros_like(frame.feats)
        params.encoder_b.value = np.zeros_like(params.encoder_b.value)
        assert not encode(frame, params).value.any()

    def test_identity_weights_pass_nonnegative_features_through(self):
        rng = np.random.default_rng(0)
        frames = make_random_frames(rng, 1, 2, 0, 6, all_valid=True)
        frame = frames[0]
        frame.feats = np.abs(frame.feats)
        cfg = ModelConfig(feature_dim=6, hidden_dim=6, layers=1, slots=2, window=0, seed=1)
        params = ModelParams(cfg)
        params.encoder_w.value = np.eye(6)
        params.encoder_b.value = np.zeros(6)
        assert np.array_equal(encode(frame, params).value, frame.feats)

    def test_matches_affine_relu_oracle(self):
        frames, params = gradient_fixture()
        got = encode(frames[0], params).value
        expected = np.maximum(
            0.0, frames[0].feats @ params.encoder_w.value + params.encoder_b.value
        ) * frames[0].cand_mask[:, None]
        assert np.abs(got - expected).max() < 1e-12

    def test_masked_rows_forced_to_zero(self):
        rng = np.random.default_rng(1)
        frames = make_random_frames(rng, 1, 3, 0, 5)
        cfg = ModelConfig(feature_dim=5, hidden_dim=4, layers=1, slots=3, window=0, seed=1)
        params = ModelParams(cfg)
        params.encoder_b.value = np.ones(4)  # bias would light padding rows up
        h = encode(frames[0], params).value
        assert not h[~frames[0].cand_mask].any()


class TestSubgcnLayer:
    def test_zero_window_equals_dense_layer(self):
        rng = np.random.default_rng(2)
        frames = make_random_frames(rng, 3, 2, 0, 7, all_valid=True)
        cfg = ModelConfig(feature_dim=7, hidden_dim=5, layers=2, slots=2, window=0, seed=3)
        params = ModelParams(cfg)
        hidden = [encode(f, params) for f in frames]
        out = subgcn_layer(frames, hidden, params.conv_w[0], cfg.slots)
        for h, o in zip(hidden, out):
            dense = np.maximum(0.0, h.value @ params.conv_w[0].value)
            assert np.abs(o.value - dense).max() < 1e-12

    def test_two_mass_average(self):
        # one neighbor slot with relatedness 1 plus self-connection 1:
        # the normalized row averages the two hidden rows before the matmul
        slots, window, width = 1, 1, 4
        adj = nm.row_normalize(np.array([[0.0, 1.0, 1.0]]))
        f0 = CandidateFrame(0, ["A"], np.ones((1, 3)), adj,
                            np.ones(1, dtype=bool), np.array([False, True]),
                            [None, 1], -1)
        f1 = CandidateFrame(1, ["B"], np.ones((1, 3)),
                            nm.row_normalize(np.array([[1.0, 0.0, 1.0]])),
                            np.ones(1, dtype=bool), np.array([True, False]),
                            [0, None], -1)
        cfg = ModelConfig(feature_dim=3, hidden_dim=width, layers=1, slots=slots,
                          window=window, seed=5)
        params = ModelParams(cfg)
        h0 = Var(np.array([[1.0, 2.0, 3.0, 4.0]]))
        h1 = Var(np.array([[5.0, 6.0, 7.0, 8.0]]))
        out = subgcn_layer([f0, f1], [h0, h1], params.conv_w[0], slots)
        expected = np.maximum(0.0, ((h0.value + h1.value) / 2.0) @ params.conv_w[0].value)
        assert np.abs(out[0].value - expected).max() < 1e-12

    def test_matches_explicit_stacking_oracle(self, store, dictionary):
        doc = tiny_document(3)
        feature_cfg = FeatureConfig(slots=2, window=1, context_window=20)
        frames = build_document_frames(doc, dictionary, store, feature_cfg)
        cfg = ModelConfig(feature_dim=feature_cfg.feature_dim(store.dim), hidden_dim=6,
                          layers=2, slots=2, window=1, dim=store.dim, seed=11)
        params = ModelParams(cfg)
        probs, _ = forward(frames, params)
        expected = straight_line_forward(frames, params)
        for got, want in zip(probs, expected):
            assert np.abs(got - want).max() < 1e-10


class TestDecode:
    def test_zero_decoder_gives_uniform(self):
        frames, params = gradient_fixture()
        params.decoder_w.value = np.zeros_like(params.decoder_w.value)
        probs, _ = forward(frames, params)
        for p in probs:
            assert np.allclose(p, 0.5)

    def test_single_valid_candidate_gets_probability_one(self):
        rng = np.random.default_rng(4)
        frames = make_random_frames(rng, 1, 3, 0, 5)
        frames[0].cand_mask = np.array([True, False, False])
        frames[0].gold_slot = 0
        cfg = ModelConfig(feature_dim=5, hidden_dim=4, layers=1, slots=3, window=0, seed=2)
        probs, losses = forward(frames, ModelParams(cfg))
        assert probs[0][0] == 1.0
        assert float(losses[0][1].value) == 0.0

    def test_matches_dot_product_oracle(self):
        frames, params = gradient_fixture()
        hidden = [encode(f, params) for f in frames]
        for weight in params.conv_w:
            hidden = subgcn_layer(frames, hidden, weight, params.cfg.slots)
        scores = decode(hidden[0], params)
        expected = hidden[0].value @ params.decoder_w.value
        assert np.abs(scores.value - expected[:, 0]).max() < 1e-12


class TestForward:
    def test_empty_document(self):
        frames, params = gradient_fixture()
        probs, losses = forward([], params)
        assert probs == [] and losses == []

    def test_probabilities_normalized_and_masked(self):
        rng = np.random.default_rng(6)
        frames = make_random_frames(rng, 4, 3, 1, 8)
        cfg = ModelConfig(feature_dim=8, hidden_dim=6, layers=2, slots=3, window=1, seed=3)
        probs, _ = forward(frames, ModelParams(cfg))
        for f, p in zip(frames, probs):
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p[~f.cand_mask] == 0.0).all()

    def test_single_mention_full_equals_local(self, store, dictionary):
        doc = tiny_document(1)
        full_frames = build_document_frames(
            doc, dictionary, store, FeatureConfig(slots=2, window=3, context_window=20)
        )
        local_frames = build_document_frames(
            doc, dictionary, store,
            FeatureConfig(slots=2, window=3, context_window=20, local=True),
        )
        cfg = ModelConfig(feature_dim=full_frames[0].feats.shape[1], hidden_dim=6,
                          layers=2, slots=2, window=3, dim=store.dim, seed=4)
        params = ModelParams(cfg)
        p_full, _ = forward(full_frames, params)
        p_local, _ = forward(local_frames, params)
        assert np.array_equal(p_full[0], p_local[0])

    def test_local_degeneration_matches_mlp(self, store, dictionary):
        doc = tiny_document(3)
        feature_cfg = FeatureConfig(slots=2, window=0, context_window=20)
        frames = build_document_frames(doc, dictionary, store, feature_cfg)
        cfg = ModelConfig(feature_dim=feature_cfg.feature_dim(store.dim), hidden_dim=6,
                          layers=3, slots=2, window=0, dim=store.dim, seed=9)
        params = ModelParams(cfg)
        probs, _ = forward(frames, params)
        for f, p in zip(frames, probs):
            h = np.maximum(0.0, f.feats @ params.encoder_w.value + params.encoder_b.value)
            h *= f.cand_mask[:, None]
            for weight in params.conv_w:
                h = np.maximum(0.0, h @ weight.value)
            scores = (h @ params.decoder_w.value)[:, 0]
            z = scores - scores.max()
            e = np.exp(z)
            assert np.abs(p - e / e.sum()).max() < 1e-12

    def test_coherence_lifts_tied_candidate_above_half(self):
        frames = coherence_fixture(relatedness=1.0)
        cfg = ModelConfig(feature_dim=4, hidden_dim=5, layers=2, slots=2, window=1, seed=8)
        params = nonnegative_params(cfg)
        probs, _ = forward(frames, params)
        assert probs[1][0] > 0.5

    def test_monotone_in_neighbor_relatedness(self):
        cfg = ModelConfig(feature_dim=4, hidden_dim=5, layers=1, slots=2, window=1, seed=8)
        params = nonnegative_params(cfg)
        last = -1.0
        for rel in (0.0, 0.2, 0.5, 0.9, 1.0):
            probs, _ = forward(coherence_fixture(relatedness=rel), params)
            assert probs[1][0] >= last
            last = probs[1][0]

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(12)
        frames = make_random_frames(rng, 4, 3, 1, 8, all_valid=True)
        cfg = ModelConfig(feature_dim=8, hidden_dim=6, layers=2, slots=3, window=1, seed=5)
        params = ModelParams(cfg)
        base, _ = forward(frames, params)
        perms = [rng.permutation(3) for _ in frames]
        permuted = permute_frames(frames, perms)
        shuffled, _ = forward(permuted, params)
        for p, perm, q in zip(base, perms, shuffled):
            assert np.abs(q - p[perm]).max() < 1e-12


def coherence_fixture(relatedness: float):
    """Middle mention tied 50/50; only candidate 0 relates to the neighbors.

    Neighbors have a single dominant candidate with big nonnegative
    features, so with nonnegative parameters their hidden mass flows into
    the coherent candidate.
    """
    slots, window, d0 = 2, 1, 4
    strong = np.array([[4.0, 4.0, 4.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
    tied = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]])

    def frame(i, feats, adjacency, positions, mask_slots):
        return CandidateFrame(
            mention_index=i,
            entity_ids=["a", "b"],
            feats=feats,
            adjacency=nm.row_normalize(adjacency),
            cand_mask=np.ones(slots, dtype=bool),
            neighbor_slot_mask=np.array(mask_slots),
            neighbor_positions=positions,
            gold_slot=0,
        )

    cols = 2 * window * slots  # 4 neighbor columns + self
    side_adj = np.zeros((slots, cols + 1))
    side_adj[:, -1] = 1.0
    left = frame(0, strong, side_adj.copy(), [None, 1], [False, False, True, True])
    right = frame(2, strong, side_adj.copy(), [1, None], [True, True, False, False])

    mid_adj = np.zeros((slots, cols + 1))
    mid_adj[:, -1] = 1.0
    mid_adj[0, 0] = relatedness   # candidate 0 -> left neighbor's candidate 0
    mid_adj[0, 2] = relatedness   # candidate 0 -> right neighbor's candidate 0
    mid = frame(1, tied, mid_adj, [0, 2], [True, True, True, True])
    return [left, mid, right]


def permute_frames(frames, perms):
    slots = frames[0].cand_mask.shape[0]
    out = []
    for f, perm in zip(frames, perms):
        adj = f.adjacency[perm].copy()
        slot_mask = f.neighbor_slot_mask.copy()
        for p, pos in enumerate(f.neighbor_positions):
            if pos is None:
                continue
            block = slice(p * slots, (p + 1) * slots)
            adj[:, block] = adj[:, block][:, perms[pos]]
            slot_mask[block] = slot_mask[block][perms[pos]]
        out.append(
            CandidateFrame(
                mention_index=f.mention_index,
                entity_ids=[f.entity_ids[j] for j in perm],
                feats=f.feats[perm],
                adjacency=adj,
                cand_mask=f.cand_mask[perm],
                neighbor_slot_mask=slot_mask,
                neighbor_positions=f.neighbor_positions,
                gold_slot=int(np.flatnonzero(perm == f.gold_slot)[0]),
            )
        )
    return out


class TestGradients:
    def test_full_composite_matches_finite_differences(self):
        frames, params = gradient_fixture()

        def loss_fn():
            _, losses = forward(frames, params)
            total = losses[0][1]
            for _, term in losses[1:]:
                total = nm.add(total, term)
            return total

        assert nm.check_gradients(loss_fn, params.all(), epsilon=1e-5) < 1e-4


class TestLink:
    def test_tie_break_lowest_slot(self):
        rng = np.random.default_rng(7)
        frames = make_random_frames(rng, 1, 3, 0, 5, all_valid=True)
        cfg = ModelConfig(feature_dim=5, hidden_dim=4, layers=1, slots=3, window=0, seed=2)
        params = ModelParams(cfg)
        params.decoder_w.value = np.zeros_like(params.decoder_w.value)
        doc = tiny_document(1)
        frames[0].entity_ids = ["E_x", "E_y", "E_z"]
        result = link_frames(doc, frames[:1], params)
        assert result.links[0].entity_id == "E_x"

    def test_single_candidate(self, store, dictionary):
        from celink.corpus import Document, Mention

        doc = Document("d", ["bat", "eng"], [Mention(1, 2, "eng", "E_team")])
        d = tiny_dictionary()
        d.entries["eng"] = [("E_team", 1.0)]
        cfg = FeatureConfig(slots=2, window=1, context_window=20)
        params = ModelParams(ModelConfig(feature_dim=cfg.feature_dim(store.dim), hidden_dim=4,
                                         layers=1, slots=2, window=1, dim=store.dim, seed=1))
        results = link([doc], d, store, params, cfg)
        assert results[0].links[0].entity_id == "E_team"
        assert results[0].links[0].probabilities.tolist() == [1.0]

    def test_empty_candidates_marked_unlinkable(self, store, dictionary):
        from celink.corpus import Document, Mention

        doc = Document("d", ["bat", "zzz"], [Mention(1, 2, "zzz", "E_team")])
        cfg = FeatureConfig(slots=2, window=1, context_window=20)
        params = ModelParams(ModelConfig(feature_dim=cfg.feature_dim(store.dim), hidden_dim=4,
                                         layers=1, slots=2, window=1, dim=store.dim, seed=1))
        results = link([doc], dictionary, store, params, cfg)
        assert results[0].links[0].entity_id is None
        assert results[0].links[0].gold_match is False

    def test_workers_match_serial(self, store, dictionary):
        docs = [tiny_document(3) for _ in range(4)]
        for i, d in enumerate(docs):
            d.doc_id = f"t{i}"
        cfg = FeatureConfig(slots=2, window=1, context_window=20)
        params = ModelParams(ModelConfig(feature_dim=cfg.feature_dim(store.dim), hidden_dim=4,
                                         layers=1, slots=2, window=1, dim=store.dim, seed=1))
        serial = link(docs, dictionary, store, params, cfg, workers=1)
        threaded = link(docs, dictionary, store, params, cfg, workers=3)
        for a, b in zip(serial, threaded):
            assert a.doc_id == b.doc_id
            for la, lb in zip(a.links, b.links):
                assert la.entity_id == lb.entity_id
                assert np.array_equal(la.probabilities, lb.probabilities)


def tiny_corpus(n_docs=6):
    docs = []
    for i in range(n_docs):
        d = tiny_document(3)
        d.doc_id = f"doc{i}"
        docs.append(d)
    return docs


class TestTrain:
    def test_loss_decreases_after_one_epoch(self, store, dictionary):
        frames, params = gradient_fixture()

        def total_loss():
            _, losses = forward(frames, params)
            return sum(float(l.value) for _, l in losses)

        before = total_loss()
        docs = [tiny_document(2)]
        cfg = TrainConfig(learning_rate=0.05, momentum=0.0, batch_size=16,
                          epochs=1, dev_fraction=0.0, seed=1)
        train(docs, dictionary, store, params, FeatureConfig(slots=2, window=1, context_window=20), cfg)
        assert total_loss() < before

    def test_zero_learning_rate_is_inert(self, store, dictionary):
        frames, params = gradient_fixture()
        initial = params.copy_values()
        docs = tiny_corpus(4)
        cfg = TrainConfig(learning_rate=0.0, momentum=0.9, batch_size=4,
                          epochs=2, dev_fraction=0.0, seed=1)
        history = train(docs, dictionary, store, params,
                        FeatureConfig(slots=2, window=1, context_window=20), cfg)
        for p, v in zip(params.all(), initial):
            assert np.array_equal(p.value, v)
        assert len({row.loss for row in history}) == 1

    def test_same_seed_gives_identical_history(self, store, dictionary):
        feature_cfg = FeatureConfig(slots=2, window=1, context_window=20)
        model_cfg = ModelConfig(feature_dim=feature_cfg.feature_dim(store.dim), hidden_dim=6,
                                layers=2, slots=2, window=1, dim=store.dim, seed=3)
        histories = []
        for _ in range(2):
            params = ModelParams(model_cfg)
            cfg = TrainConfig(learning_rate=0.02, momentum=0.9, batch_size=4,
                              epochs=3, dev_fraction=0.25, seed=3)
            histories.append(train(tiny_corpus(8), dictionary, store, params, feature_cfg, cfg))
        a, b = histories
        assert [(r.epoch, r.batch, r.loss, r.dev_loss) for r in a] == [
            (r.epoch, r.batch, r.loss, r.dev_loss) for r in b
        ]

    def test_zero_epochs_keeps_initialization(self, store, dictionary):
        frames, params = gradient_fixture()
        initial = params.copy_values()
        cfg = TrainConfig(epochs=0, dev_fraction=0.0, seed=1)
        history = train(tiny_corpus(2), dictionary, store, params,
                        FeatureConfig(slots=2, window=1, context_window=20), cfg)
        assert history == []
        for p, v in zip(params.all(), initial):
            assert np.array_equal(p.value, v)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_loss_aborts_with_coordinates(self, store, dictionary):
        frames, params = gradient_fixture()
        for p in params.all():
            p.value[:] = 1e200  # matmul of two such factors overflows
        cfg = TrainConfig(epochs=1, dev_fraction=0.0, seed=1)
        with pytest.raises(NumericError, match="epoch 0 batch 0"):
            train(tiny_corpus(2), dictionary, store, params,
                  FeatureConfig(slots=2, window=1, context_window=20), cfg)

    def test_finetuning_diverges_from_frozen_run(self, store, dictionary):
        feature_cfg = FeatureConfig(slots=2, window=1, context_window=20)
        model_cfg = ModelConfig(feature_dim=feature_cfg.feature_dim(store.dim), hidden_dim=6,
                                layers=1, slots=2, window=1, dim=store.dim, seed=3)
        before = {k: v.copy() for k, v in store.words.items()}
        histories = {}
        for finetune in (False, True):
            params = ModelParams(model_cfg)
            cfg = TrainConfig(learning_rate=0.5, momentum=0.0, batch_size=4, epochs=3,
                              dev_fraction=0.0, seed=3, finetune_embeddings=finetune)
            histories[finetune] = train(tiny_corpus(4), dictionary, store, params,
                                        feature_cfg, cfg)
        # original store untouched; the tuned copy altered later batches
        assert all(np.array_equal(store.words[k], v) for k, v in before.items())
        assert histories[False][0].loss == histories[True][0].loss
        assert [r.loss for r in histories[False]] != [r.loss for r in histories[True]]

    def test_workers_match_serial_history(self, store, dictionary):
        feature_cfg = FeatureConfig(slots=2, window=1, context_window=20)
        model_cfg = ModelConfig(feature_dim=feature_cfg.feature_dim(store.dim), hidden_dim=6,
                                layers=1, slots=2, window=1, dim=store.dim, seed=3)
        histories = []
        for workers in (1, 3):
            params = ModelParams(model_cfg)
            cfg = TrainConfig(learning_rate=0.02, momentum=0.9, batch_size=4, epochs=2,
                              dev_fraction=0.0, seed=3, workers=workers)
            histories.append(train(tiny_corpus(6), dictionary, store, params, feature_cfg, cfg))
        assert [r.loss for r in histories[0]] == [r.loss for r in histories[1]]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        _, params = gradient_fixture(seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path, extra_config={"seed": 5})
        loaded = load_checkpoint(path)
        assert loaded.cfg == params.cfg
        for a, b in zip(params.all(), loaded.all()):
            assert np.array_equal(a.value, b.value)

    def test_save_is_deterministic(self, tmp_path):
        _, p1 = gradient_fixture(seed=5)
        _, p2 = gradient_fixture(seed=5)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, a)
        save_checkpoint(p2, b)
        assert a.read_bytes() == b.read_bytes()

    def test_version_byte_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x99junk")
        with pytest.raises(Exception, match="version"):
            load_checkpoint(path)
