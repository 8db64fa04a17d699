"""Tokenizer, transformer encoder, and the four matcher architectures."""
import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from answer_retrieval import tensor as T
from answer_retrieval.encoders import (
    BiEncoder,
    CdvModel,
    CheckpointError,
    CrossEncoder,
    EncoderConfig,
    PolyEncoder,
    TransformerEncoder,
    Vocab,
    bi_score,
    build_model,
    build_query_text,
    cdv_scores,
    cross_score,
    load_checkpoint,
    pad_batch,
    pool_cls,
    poly_score,
    poly_scores,
    save_checkpoint,
    split_words,
    tokenize,
    token_overlap_flags,
    tokenize_pair,
)
from answer_retrieval.tensor import Tensor, check_gradients, no_grad

from gradcases import ARCH_VARIANTS, architecture_case


class TestVocab:
    def test_special_ids(self, word_vocab):
        assert [word_vocab.lookup(t) for t in ("[PAD]", "[CLS]", "[SEP]", "[UNK]")] == [0, 1, 2, 3]

    def test_markers_follow_the_base_table(self, word_vocab):
        assert word_vocab.query_id == word_vocab.size
        assert word_vocab.passage_id == word_vocab.size + 1
        assert word_vocab.decode([word_vocab.query_id, word_vocab.passage_id]) == ["[QUERY]", "[PASSAGE]"]

    def test_corpus_words_cannot_shadow_specials(self):
        vocab = Vocab(["[CLS]", "asthma", "[QUERY]"])
        assert vocab.lookup("[CLS]") == 1 and vocab.lookup("asthma") == 4
        assert vocab.size == 5

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocab(["a", "a"])

    def test_build_orders_by_frequency(self):
        vocab = Vocab.build(["b a b", "c b a"])
        assert vocab.to_list() == ["b", "a", "c"]

    def test_min_frequency(self):
        assert Vocab.build(["b a b", "c b a"], min_freq=2).to_list() == ["b", "a"]


class TestTokenize:
    def test_empty_text_is_cls_only(self, word_vocab):
        seq = tokenize("", word_vocab, 16)
        assert seq.ids == (word_vocab.cls_id,) and not seq.truncated

    def test_lowercase_and_punctuation_split(self, word_vocab):
        seq = tokenize("Nausea, vomiting", word_vocab, 16)
        assert word_vocab.decode(seq.ids) == ["[CLS]", "nausea", "[UNK]", "vomiting"]
        assert split_words("Nausea, vomiting") == ["nausea", ",", "vomiting"]

    def test_unknown_words_map_to_unk(self, word_vocab):
        assert tokenize("zebra", word_vocab, 16).ids == (word_vocab.cls_id, word_vocab.unk_id)

    def test_truncation_is_reported(self, word_vocab):
        seq = tokenize(" ".join(["heart"] * 500), word_vocab, 128)
        assert len(seq) == 128 and seq.truncated and seq.n_truncated == 500 - 127
        assert seq.ids[0] == word_vocab.cls_id

    def test_anonymized_span_is_one_token(self):
        assert split_words("Seen by [**Name 123**] today") == ["seen", "by", "[**name**]", "today"]

    @given(st.lists(st.sampled_from(["heart", "failure", "x", ",", "."]), max_size=60), st.integers(4, 40))
    def test_length_bound_and_cls_prefix(self, words, max_len):
        vocab = Vocab(["heart", "failure", ",", "."])
        seq = tokenize(" ".join(words), vocab, max_len)
        assert 1 <= len(seq) <= max_len and seq.ids[0] == vocab.cls_id
        assert len(seq) + seq.n_truncated == len(words) + 1

    def test_pair_truncates_passage_first(self, word_vocab):
        seq = tokenize_pair("heart failure", " ".join(["mother"] * 40), word_vocab, 10)
        names = word_vocab.decode(seq.ids)
        assert names[:4] == ["[CLS]", "heart", "failure", "[SEP]"]
        assert len(seq) == 10 and seq.n_truncated == 40 - 6

    def test_pad_batch(self, word_vocab):
        ids, mask = pad_batch([tokenize("heart", word_vocab, 8), tokenize("", word_vocab, 8)])
        assert ids.shape == mask.shape == (2, 2)
        assert ids[1, 1] == word_vocab.pad_id and not mask[1, 1]


class TestQueryText:
    def test_marked(self):
        assert (build_query_text("cardiomyopathy", "family history", marked=True)
                == "[QUERY] cardiomyopathy [SEP] family history")

    def test_unmarked(self):
        assert build_query_text("cardiomyopathy", "family history") == "cardiomyopathy [SEP] family history"

    @pytest.mark.parametrize("entity,aspect", [("", "family history"), ("asthma", " "), ("asthma", "")])
    def test_empty_fields_rejected(self, entity, aspect):
        with pytest.raises(ValueError):
            build_query_text(entity, aspect)

    def test_round_trips_through_tokenizer(self, word_vocab):
        names = word_vocab.decode(tokenize(build_query_text("heart failure", "family history"), word_vocab, 32).ids)
        sep = names.index("[SEP]")
        assert " ".join(names[1:sep]) == "heart failure"
        assert " ".join(names[sep + 1:]) == "family history"


class TestEncoder:
    @pytest.fixture
    def encoder(self, word_vocab, small_config):
        cfg = EncoderConfig(**{**small_config.to_dict(), "vocab_size": word_vocab.size})
        return TransformerEncoder(cfg, np.random.default_rng(0))

    def test_single_cls_token_is_finite(self, encoder):
        h = encoder(np.array([[1]]), np.array([[True]]))
        assert h.shape == (1, 1, 8) and np.all(np.isfinite(h.data))

    def test_pad_extension_leaves_real_positions_unchanged(self, encoder, word_vocab):
        seq = tokenize("mother had heart failure", word_vocab, 24)
        short = encoder(*pad_batch([seq])).data
        long = encoder(*pad_batch([seq], length=12)).data
        np.testing.assert_allclose(long[0, :len(seq)], short[0], rtol=0, atol=1e-12)

    def test_pad_contents_are_ignored(self, encoder, word_vocab):
        ids, mask = pad_batch([tokenize("heart failure", word_vocab, 24)], length=8)
        other = ids.copy()
        other[0, 3:] = np.random.default_rng(1).integers(0, word_vocab.size, size=5)
        np.testing.assert_allclose(encoder(other, mask).data[0, :3], encoder(ids, mask).data[0, :3],
                                   rtol=0, atol=1e-12)

    def test_config_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=10, n_heads=3).validate()

    def test_pool_cls_is_row_zero(self, rng):
        h = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
        np.testing.assert_array_equal(pool_cls(h).data, h.data[:, 0])
        one = Tensor(rng.standard_normal((1, 4)))
        np.testing.assert_array_equal(pool_cls(one).data, one.data[0])

    def test_pool_cls_gradient_only_reaches_row_zero(self, rng):
        h = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        w = rng.standard_normal((2, 3))
        T.sum_(pool_cls(h) * w).backward()
        assert np.all(h.grad[:, 1:] == 0)
        np.testing.assert_array_equal(h.grad[:, 0], w)
        check_gradients(lambda: T.sum_(pool_cls(h) * w), [h])


class TestTokenOverlap:
    def test_flags_words_present_in_both_segments(self, word_vocab):
        seq = tokenize_pair("heart failure [SEP] family history", "mother had heart failure history", word_vocab, 32)
        ids = np.array([seq.ids])
        segments = (np.arange(ids.shape[1]) >= 7)[None, :].astype(np.int64)
        flags = token_overlap_flags(ids, segments, word_vocab)[0]
        words = ["[CLS]", "heart", "failure", "[SEP]", "family", "history", "[SEP]",
                 "mother", "had", "heart", "failure", "history"]
        expected = [0, 1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 1]
        assert [word_vocab.itos[i] for i in seq.ids] == words
        assert flags.tolist() == expected

    @given(st.lists(st.integers(0, 9), min_size=2, max_size=14), st.integers(1, 13), st.integers(0, 3))
    def test_matches_pairwise_oracle(self, tokens, cut, pad):
        """A position is flagged iff it holds a word id that also appears in the other segment."""
        vocab = Vocab(["a", "b", "c", "d", "e", "f"])
        cut = min(cut, len(tokens) - 1)
        ids = np.array([tokens + [vocab.pad_id] * pad])
        segments = (np.arange(ids.shape[1]) >= cut)[None, :].astype(np.int64)
        flags = token_overlap_flags(ids, segments, vocab)[0]
        specials = {vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.unk_id}
        row = ids[0].tolist()
        for i, t in enumerate(row):
            others = [row[j] for j in range(len(row)) if segments[0, j] != segments[0, i]]
            assert flags[i] == int(t not in specials and t in others)


class TestBiScore:
    def test_orthogonal(self):
        assert float(bi_score(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 0.0

    def test_hand_value(self):
        assert float(bi_score(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data) == 11.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            bi_score(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_equals_matmul(self, rng):
        q, p = rng.standard_normal(6), rng.standard_normal(6)
        expected = (q[None, :] @ p[:, None])[0, 0]
        assert float(bi_score(Tensor(q), Tensor(p)).data) == pytest.approx(expected, rel=1e-14)


def poly_oracle(q, P, W):
    """Scalar loops: y = softmax(P q), c = P^T y, s = relu(W c) . q."""
    n, d = P.shape
    logits = [sum(P[i, k] * q[k] for k in range(d)) for i in range(n)]
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    y = [e / sum(exps) for e in exps]
    c = [sum(P[i, k] * y[i] for i in range(n)) for k in range(d)]
    h = [max(0.0, sum(W[j, k] * c[k] for k in range(d))) for j in range(d)]
    return sum(h[j] * q[j] for j in range(d))


class TestPolyScore:
    def test_single_token_identity_weights(self):
        q = np.array([1.0, 0.0])
        s = poly_score(Tensor(q), Tensor([q]), Tensor(np.eye(2)))
        assert float(s.data) == 1.0

    def test_zero_query_scores_zero(self, rng):
        s = poly_score(Tensor(np.zeros(4)), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((4, 4))))
        assert float(s.data) == 0.0

    def test_needs_a_token(self):
        with pytest.raises(ValueError):
            poly_score(Tensor(np.ones(2)), Tensor(np.zeros((0, 2))), Tensor(np.eye(2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        q, P, W = rng.standard_normal(d), rng.standard_normal((n, d)), rng.standard_normal((d, d))
        got = float(poly_score(Tensor(q), Tensor(P), Tensor(W)).data)
        assert got == pytest.approx(poly_oracle(q, P, W), rel=1e-12, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 3.0), min_size=1, max_size=6), st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=6))
    def test_reduces_to_dot_product(self, p, q):
        """One token, identity weights, non-negative attended vector: the score is p . q."""
        d = min(len(p), len(q))
        p, q = np.array(p[:d]), np.array(q[:d])
        s = float(poly_score(Tensor(q), Tensor(p[None, :]), Tensor(np.eye(d))).data)
        assert s == pytest.approx(float(bi_score(Tensor(q), Tensor(p)).data), rel=1e-12, abs=1e-12)

    def test_batched_form_ignores_padding(self, rng):
        q = rng.standard_normal((2, 3))
        tokens = rng.standard_normal((2, 4, 3))
        mask = np.array([[True, True, False, False], [True, True, True, True]])
        W = rng.standard_normal((3, 3))
        grid = poly_scores(Tensor(q), Tensor(tokens), mask, Tensor(W)).data
        for i in range(2):
            for j in range(2):
                n = int(mask[j].sum())
                assert grid[i, j] == pytest.approx(poly_oracle(q[i], tokens[j, :n], W), rel=1e-12, abs=1e-12)


class TestCdvScore:
    def test_identical_predictions_score_one(self, rng):
        qe, qa = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        s = cdv_scores(Tensor(qe[None] * 2.0), Tensor(qa[None] * 0.5), np.ones((1, 1), bool), Tensor(qe), Tensor(qa))
        assert float(s.data[0, 0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_predictions_score_zero(self):
        e, a = np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])
        s = cdv_scores(Tensor(e), Tensor(a), np.ones((1, 1), bool), Tensor([[0.0, 1.0]]), Tensor([[1.0, 0.0]]))
        assert float(s.data[0, 0]) == 0.0

    def test_multi_sentence_is_mean_of_sentences(self, rng):
        S, d = 3, 5
        ent, asp = rng.standard_normal((1, S, d)), rng.standard_normal((1, S, d))
        qe, qa = rng.standard_normal((1, d)), rng.standard_normal((1, d))
        cos = lambda u, v: float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        per = [0.5 * (cos(ent[0, s], qe[0]) + cos(asp[0, s], qa[0])) for s in range(S)]
        got = float(cdv_scores(Tensor(ent), Tensor(asp), np.ones((1, S), bool), Tensor(qe), Tensor(qa)).data[0, 0])
        assert got == pytest.approx(np.mean(per), rel=1e-13)

    def test_padded_sentences_are_ignored(self, rng):
        ent, asp = rng.standard_normal((1, 4, 3)), rng.standard_normal((1, 4, 3))
        qe, qa = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
        mask = np.array([[True, True, False, False]])
        full = cdv_scores(Tensor(ent), Tensor(asp), mask, Tensor(qe), Tensor(qa)).data
        cut = cdv_scores(Tensor(ent[:, :2]), Tensor(asp[:, :2]), np.ones((1, 2), bool), Tensor(qe), Tensor(qa)).data
        np.testing.assert_allclose(full, cut, rtol=1e-14)


PASSAGES = ["Mother had cardiomyopathy.", "Nausea and vomiting. Heart failure noted.", "Mother had heart failure."]
QUERIES = [("cardiomyopathy", "family history"), ("nausea", "history")]


class TestMatchers:
    @pytest.mark.parametrize("arch", ["bi", "bi-shared", "poly", "cross", "cdv"])
    def test_score_is_deterministic_and_matches_grid(self, arch, word_vocab, small_config):
        a = build_model(arch, word_vocab, small_config)
        b = build_model(arch, word_vocab, small_config)
        with no_grad():
            grid = a.score_matrix(QUERIES, PASSAGES).data
        assert grid.shape == (2, 3) and np.all(np.isfinite(grid))
        np.testing.assert_array_equal(a.score(QUERIES[0], PASSAGES), b.score(QUERIES[0], PASSAGES))
        np.testing.assert_allclose(a.score(QUERIES[1], PASSAGES, batch_size=2), grid[1], rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("arch", ["bi", "poly", "cross", "cdv"])
    def test_scores_do_not_depend_on_batch_padding(self, arch, word_vocab, small_config):
        """A passage scored alone equals the same passage scored next to longer ones."""
        model = build_model(arch, word_vocab, small_config)
        alone = model.score(QUERIES[0], PASSAGES[:1])
        together = model.score(QUERIES[0], PASSAGES)[:1]
        np.testing.assert_allclose(alone, together, rtol=1e-10, atol=1e-12)

    def test_cross_is_order_sensitive(self, word_vocab, small_config):
        """Swapping query and passage text is not required to give the same score."""
        model = CrossEncoder(word_vocab, small_config)
        a = cross_score("heart failure [SEP] family history", "mother had cardiomyopathy", model)
        b = cross_score("mother had cardiomyopathy", "heart failure [SEP] family history", model)
        assert a != b

    def test_cross_segment_rows_split_query_from_passage(self, word_vocab, small_config):
        """Row 0 covers [CLS] query [SEP]; row 1 only the passage tokens."""
        model = CrossEncoder(word_vocab, small_config)
        query = "heart failure [SEP] family history"
        with_passage = cross_score(query, "mother had cardiomyopathy", model)
        without = cross_score(query, "", model)
        model.segment_emb.data[1] += np.linspace(-1.0, 1.0, model.config.d_model)
        assert cross_score(query, "", model) == without
        assert cross_score(query, "mother had cardiomyopathy", model) != with_passage
        model.segment_emb.data[0] += np.linspace(-1.0, 1.0, model.config.d_model)
        assert cross_score(query, "", model) != without

    def test_cross_overlong_query_stays_in_query_segment(self, word_vocab):
        cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=1, ffn_dim=12, max_len=6, seed=5)
        model = CrossEncoder(word_vocab, cfg)
        query = "heart failure [SEP] family history mother had"
        before = cross_score(query, "nausea", model)
        model.segment_emb.data[1] += np.linspace(-1.0, 1.0, model.config.d_model)
        assert cross_score(query, "nausea", model) == before

    def test_cross_overlap_row_only_touches_shared_words(self, word_vocab, small_config):
        """The overlap embedding changes a score only when a word occurs on both sides."""
        model = CrossEncoder(word_vocab, small_config)
        query = "cardiomyopathy [SEP] family history"
        disjoint = cross_score(query, "mother had nausea", model)
        shared = cross_score(query, "mother had cardiomyopathy", model)
        model.overlap_emb.data[1] += np.linspace(-1.0, 1.0, model.config.d_model)
        assert cross_score(query, "mother had nausea", model) == disjoint
        assert cross_score(query, "mother had cardiomyopathy", model) != shared

    def test_cdv_phase_validation(self, word_vocab, small_config):
        with pytest.raises(ValueError):
            CdvModel(word_vocab, small_config, phase="warm")

    def test_cdv_frozen_phase_discards_encoder_gradients(self, word_vocab, small_config):
        model = CdvModel(word_vocab, small_config, phase="frozen")
        T.sum_(model.score_matrix(QUERIES, PASSAGES)).backward()
        enc_grads = [p.grad for n, p in model.named_parameters() if n.startswith("sentence_encoder.") and
                     "tok_emb" not in n]
        assert all(g is None or not np.any(g) for g in enc_grads)
        assert np.any(model.entity_head.weight.grad)

    def test_unknown_architecture(self, word_vocab, small_config):
        with pytest.raises(ValueError, match="unknown architecture"):
            build_model("colbert", word_vocab, small_config)

    def test_poly_identity_attention_at_init(self, word_vocab, small_config):
        np.testing.assert_array_equal(PolyEncoder(word_vocab, small_config).w_attn.data, np.eye(8))


class TestParameterCount:
    @pytest.mark.parametrize("d_model,n_layers", [(8, 1), (16, 2), (64, 2)])
    def test_shared_bi_encoder_is_half_plus_markers(self, word_vocab, d_model, n_layers):
        cfg = EncoderConfig(d_model=d_model, n_heads=2, n_layers=n_layers, ffn_dim=2 * d_model, max_len=32)
        unshared = BiEncoder(word_vocab, cfg).num_parameters()
        shared = BiEncoder(word_vocab, cfg, shared=True).num_parameters()
        assert 2 * (shared - 2 * d_model) == unshared

    def test_marker_rows_are_the_only_extra(self, word_vocab, small_config):
        model = BiEncoder(word_vocab, small_config, shared=True)
        names = {n for n, _ in model.named_parameters() if not n.startswith("encoder.")}
        assert names == {"marker_emb"}


@pytest.mark.parametrize("variant", ARCH_VARIANTS)
def test_architecture_gradients_match_finite_differences(variant):
    """End-to-end score gradient w.r.t. every trainable tensor, d_model=8, one layer."""
    rng = np.random.default_rng(zlib.crc32(variant.encode()))
    fn, params, _ = architecture_case(variant, rng)
    check_gradients(fn, params, eps=1e-5, rtol=1e-4, atol=1e-8)


class TestCheckpoint:
    @pytest.mark.parametrize("arch,kwargs", [("bi", {}), ("bi-shared", {}), ("poly", {"shared": True}),
                                             ("cross", {}), ("cdv", {"phase": "finetune"})])
    def test_round_trip_preserves_scores(self, tmp_path, word_vocab, small_config, arch, kwargs):
        model = build_model(arch, word_vocab, small_config, **kwargs)
        path = tmp_path / "m.npz"
        fp = save_checkpoint(model, path, extra={"epoch": 3})
        back, meta = load_checkpoint(path)
        assert back.fingerprint() == fp and meta["extra"] == {"epoch": 3}
        assert type(back) is type(model) and back.arch == model.arch
        np.testing.assert_array_equal(back.score(QUERIES[0], PASSAGES), model.score(QUERIES[0], PASSAGES))

    def test_corrupted_weights_detected(self, tmp_path, word_vocab, small_config):
        model = BiEncoder(word_vocab, small_config)
        path = tmp_path / "m.npz"
        save_checkpoint(model, path)
        with np.load(path) as z:
            arrays = {k: z[k] for k in z.files}
        key = next(k for k in arrays if k.startswith("param/"))
        arrays[key] = arrays[key] + 1.0
        np.savez(path, **arrays)
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path)

    def test_non_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, a=np.zeros(2))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_fingerprint_tracks_weights(self, word_vocab, small_config):
        model = BiEncoder(word_vocab, small_config)
        before = model.fingerprint()
        model.query_encoder.pos_emb.data[0, 0] += 1e-9
        assert model.fingerprint() != before
