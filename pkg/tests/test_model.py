"""Encoder model: embeddings, forward/backward, training invariants,
checkpoints.

The heavyweight gradient and co-timestamp checks live in the acceptance
suite; here the same properties are exercised at toy scale so failures
localize quickly.
"""

import numpy as np
import pytest

from losformer.model import (
    CheckpointError,
    ModelConfig,
    SequenceTransformer,
    SinusoidTable,
    batch_loss,
    collate,
    load_checkpoint,
    save_checkpoint,
    small_config,
    stable_sigmoid,
    vocab_hash,
)
from losformer.numerics import finite_diff_check
from losformer.tokenizer import TokenizedSequence, Vocabulary


def make_seq(token_ids, position_ids=None, **kw):
    token_ids = list(token_ids)
    if not token_ids or token_ids[0] != 1:
        token_ids = [1] + token_ids
    if position_ids is None:
        position_ids = list(range(len(token_ids)))
    fields = dict(admission_id="A000001", age_bucket=4, sex_id=0,
                  label_binary=1, label_category=2, label_real=5.0)
    fields.update(kw)
    return TokenizedSequence(token_ids=token_ids, position_ids=list(position_ids), **fields)


def tiny_config(**overrides):
    base = dict(vocab_size=24, task="binary", n_layers=2, hidden_dim=16,
                intermediate_dim=16, n_heads=2, dropout_p=0.0,
                attention_dropout_p=0.0, batch_size=4, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=10, hidden_dim=10, n_heads=4)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, dropout_p=1.0)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, attention_dropout_p=-0.1)

    def test_unknown_task(self):
        with pytest.raises(ValueError, match="task"):
            ModelConfig(vocab_size=10, task="ordinal")

    def test_output_widths(self):
        assert ModelConfig(vocab_size=10, task="binary").n_outputs == 1
        assert ModelConfig(vocab_size=10, task="category").n_outputs == 3
        assert ModelConfig(vocab_size=10, task="real").n_outputs == 1

    def test_defaults_match_training_recipe(self):
        cfg = ModelConfig(vocab_size=100)
        assert (cfg.n_layers, cfg.hidden_dim, cfg.intermediate_dim, cfg.n_heads) == (6, 288, 288, 8)
        assert (cfg.dropout_p, cfg.attention_dropout_p) == (0.10, 0.10)
        assert (cfg.weight_decay, cfg.lr, cfg.patience) == (0.003, 1e-5, 10)

    def test_small_profile_overridable(self):
        cfg = small_config(50, "real", max_epochs=4)
        assert cfg.n_layers == 2 and cfg.hidden_dim == 64 and cfg.max_epochs == 4


class TestSinusoidTable:
    def test_row_zero(self):
        table = SinusoidTable(8).rows(1)
        np.testing.assert_array_equal(table[0, 0::2], np.zeros(4))   # sin 0
        np.testing.assert_array_equal(table[0, 1::2], np.ones(4))    # cos 0

    def test_matches_direct_formula(self):
        dim = 8
        rows = SinusoidTable(dim).rows(5)
        for p in range(5):
            for i in range(dim // 2):
                angle = p / 10000 ** (2 * i / dim)
                assert abs(rows[p, 2 * i] - np.sin(angle)) < 1e-12
                assert abs(rows[p, 2 * i + 1] - np.cos(angle)) < 1e-12

    def test_grows_on_demand_and_is_stable(self):
        t = SinusoidTable(4)
        small = t.rows(3).copy()
        big = t.rows(300)
        assert big.shape == (300, 4)
        np.testing.assert_array_equal(big[:3], small)

    def test_lookup_beyond_max_len(self):
        # truncation keeps original position ids, which may exceed max_len
        t = SinusoidTable(6)
        out = t.lookup(np.array([[0, 500]]))
        assert out.shape == (1, 2, 6)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            SinusoidTable(7)


class TestCollate:
    def test_pads_to_longest(self):
        batch = collate([make_seq([4, 5]), make_seq([4, 5, 6, 7, 8])])
        assert batch.token_ids.shape == (2, 6)
        np.testing.assert_array_equal(batch.token_ids[0], [1, 4, 5, 0, 0, 0])

    def test_mask_zero_on_real_tokens(self):
        batch = collate([make_seq([4, 5]), make_seq([4, 5, 6])])
        bias = batch.attn_bias
        assert bias.shape == (2, 1, 1, 4)
        np.testing.assert_array_equal(bias[1, 0, 0], np.zeros(4))
        np.testing.assert_array_equal(bias[0, 0, 0], [0.0, 0.0, 0.0, -1e9])

    def test_labels_collected(self):
        batch = collate([make_seq([4], label_binary=0, label_category=1, label_real=2.5)])
        assert batch.labels_binary[0] == 0
        assert batch.labels_category[0] == 1
        assert batch.labels_real[0] == 2.5


class TestLoss:
    def test_binary_logit_zero_is_ln2(self):
        batch = collate([make_seq([4], label_binary=1)])
        loss, dlogits = batch_loss(np.zeros((1, 1)), batch, "binary")
        assert abs(loss - np.log(2)) < 1e-12
        assert abs(dlogits[0, 0] + 0.5) < 1e-12   # (sigmoid(0) - 1) / 1

    def test_category_uniform_is_ln3(self):
        batch = collate([make_seq([4], label_category=0)])
        loss, _ = batch_loss(np.zeros((1, 3)), batch, "category")
        assert abs(loss - np.log(3)) < 1e-12

    def test_real_squared_error(self):
        batch = collate([make_seq([4], label_real=3.0)])
        loss, dlogits = batch_loss(np.array([[5.0]]), batch, "real")
        assert abs(loss - 4.0) < 1e-12
        assert abs(dlogits[0, 0] - 4.0) < 1e-12   # 2 * (5 - 3) / 1

    def test_batch_mean(self):
        batch = collate([make_seq([4], label_real=0.0), make_seq([5], label_real=2.0)])
        loss, _ = batch_loss(np.array([[0.0], [0.0]]), batch, "real")
        assert abs(loss - 2.0) < 1e-12            # (0 + 4) / 2


class TestEmbedding:
    def test_zeroed_tables_leave_position_rows(self):
        m = SequenceTransformer(tiny_config())
        m.tok_emb.value[...] = 0.0
        m.age_emb.value[...] = 0.0
        m.sex_emb.value[...] = 0.0
        seq = make_seq([4, 5, 6])
        x = m.embed_batch(collate([seq]))
        np.testing.assert_array_equal(x[0], m.positions.rows(4))

    def test_co_timestamped_rows_differ_by_token_embedding(self):
        m = SequenceTransformer(tiny_config())
        seq = make_seq([4, 5, 6], position_ids=[0, 1, 2, 2])
        x = m.embed_batch(collate([seq]))[0]
        expected = m.tok_emb.value[5] - m.tok_emb.value[6]
        # equal up to rounding of the shared position/age/sex additions
        np.testing.assert_allclose(x[2] - x[3], expected, atol=1e-14)

    def test_out_of_range_token_rejected(self):
        m = SequenceTransformer(tiny_config(vocab_size=6))
        with pytest.raises(ValueError, match="embedding table"):
            m.embed_batch(collate([make_seq([4, 9])]))

    def test_age_and_sex_added_at_every_position(self):
        m = SequenceTransformer(tiny_config())
        a = collate([make_seq([4, 5], age_bucket=3, sex_id=0)])
        b = collate([make_seq([4, 5], age_bucket=7, sex_id=0)])
        delta = m.embed_batch(b) - m.embed_batch(a)
        expected = m.age_emb.value[7] - m.age_emb.value[3]
        for row in delta[0]:
            np.testing.assert_allclose(row, expected, atol=1e-15)


class TestForward:
    def test_logit_shapes_per_task(self):
        for task, width in (("binary", 1), ("category", 3), ("real", 1)):
            m = SequenceTransformer(tiny_config(task=task))
            logits, _ = m.forward_batch(collate([make_seq([4, 5])]), train=False)
            assert logits.shape == (1, width)

    def test_eval_mode_bitwise_deterministic(self):
        m = SequenceTransformer(tiny_config())
        batch = collate([make_seq([4, 5, 6])])
        a, _ = m.forward_batch(batch, train=False)
        b, _ = m.forward_batch(batch, train=False)
        np.testing.assert_array_equal(a, b)

    def test_fresh_category_model_near_uniform(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            m = SequenceTransformer(tiny_config(task="category", seed=seed))
            ids = [int(v) for v in rng.integers(4, 24, size=12)]
            probs = m.predict([make_seq(ids)])
            assert probs.shape == (1, 3)
            assert np.all(probs > 0.2) and np.all(probs < 0.45)

    def test_train_mode_with_dropout_requires_rng(self):
        m = SequenceTransformer(tiny_config(dropout_p=0.1))
        with pytest.raises(ValueError, match="rng"):
            m.forward_batch(collate([make_seq([4])]), train=True)

    def test_padding_neutrality(self):
        m = SequenceTransformer(tiny_config())
        short = make_seq([4, 5, 6, 7])
        long = make_seq([4, 5, 6, 7, 8, 9, 10, 11, 12, 13])
        alone, _ = m.forward_batch(collate([short]), train=False)
        padded, _ = m.forward_batch(collate([short, long]), train=False)
        assert np.max(np.abs(alone[0] - padded[0])) < 1e-9

    def test_co_timestamp_permutation_invariance(self):
        m = SequenceTransformer(tiny_config())
        original = make_seq([4, 5, 6, 7], position_ids=[0, 1, 2, 2, 3])
        swapped = make_seq([4, 6, 5, 7], position_ids=[0, 1, 2, 2, 3])
        a, _ = m.forward_batch(collate([original]), train=False)
        b, _ = m.forward_batch(collate([swapped]), train=False)
        rel = np.abs(a - b).max() / max(np.abs(a).max(), 1e-12)
        assert rel < 1e-6

    def test_non_co_timestamped_swap_changes_output(self):
        m = SequenceTransformer(tiny_config())
        original = make_seq([4, 5, 6, 7], position_ids=[0, 1, 2, 3, 4])
        swapped = make_seq([4, 6, 5, 7], position_ids=[0, 1, 2, 3, 4])
        a, _ = m.forward_batch(collate([original]), train=False)
        b, _ = m.forward_batch(collate([swapped]), train=False)
        assert np.abs(a - b).max() > 1e-8


class TestBackward:
    def grads_for(self, model, batch):
        model.zero_grads()
        logits, cache = model.forward_batch(batch, train=False, need_cache=True)
        loss, dlogits = batch_loss(logits, batch, model.cfg.task)
        model.backward_batch(batch, cache, dlogits)
        return {p.name: p.grad.copy() for p in model.parameters()}

    @pytest.mark.parametrize("task", ["binary", "category", "real"])
    def test_gradients_match_finite_differences(self, task):
        m = SequenceTransformer(tiny_config(task=task, seed=3))
        batch = collate([make_seq([4, 5, 6]), make_seq([7, 8, 9, 10, 11])])
        m.zero_grads()
        logits, cache = m.forward_batch(batch, train=False, need_cache=True)
        _, dlogits = batch_loss(logits, batch, task)
        m.backward_batch(batch, cache, dlogits)

        def loss_fn():
            lg, _ = m.forward_batch(batch, train=False)
            return batch_loss(lg, batch, task)[0]

        # h=1e-3: the q/k gradients at init are ~1e-8, so the default step
        # leaves the difference quotient noise-dominated (error scales 1/h);
        # truncation stays below 1e-6 here
        err = finite_diff_check(loss_fn, m.parameters(), n_samples=40, h=1e-3,
                                rng=np.random.default_rng(11))
        assert err < 1e-4

    def test_duplicated_sample_leaves_mean_gradients(self):
        m = SequenceTransformer(tiny_config())
        one = collate([make_seq([4, 5, 6])])
        two = collate([make_seq([4, 5, 6]), make_seq([4, 5, 6])])
        g1, g2 = self.grads_for(m, one), self.grads_for(m, two)
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], atol=1e-12)

    def test_history_only_sequence_finite(self):
        m = SequenceTransformer(tiny_config())
        grads = self.grads_for(m, collate([make_seq([4])]))
        for g in grads.values():
            assert np.isfinite(g).all()

    def test_pad_token_embedding_untouched(self):
        m = SequenceTransformer(tiny_config())
        batch = collate([make_seq([4, 5]), make_seq([4, 5, 6, 7, 8, 9])])
        grads = self.grads_for(m, batch)
        np.testing.assert_array_equal(grads["tok_emb"][0], np.zeros(16))

    def test_position_table_not_trainable(self):
        m = SequenceTransformer(tiny_config())
        names = [p.name for p in m.parameters()]
        assert not any("pos" in n for n in names)
        batch = collate([make_seq([4, 5, 6])])
        before = m.positions.rows(4).copy()
        from losformer.numerics import adam_step
        m.zero_grads()
        m.train_step_loss(batch, rng=np.random.default_rng(0))
        adam_step(m.parameters(), lr=0.1)
        np.testing.assert_array_equal(m.positions.rows(4), before)


class TestPredict:
    def test_binary_probabilities_in_unit_interval(self):
        m = SequenceTransformer(tiny_config())
        scores = m.predict([make_seq([4, 5]), make_seq([6, 7, 8])])
        assert scores.shape == (2,)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_category_rows_sum_to_one(self):
        m = SequenceTransformer(tiny_config(task="category"))
        probs = m.predict([make_seq([4, 5]), make_seq([6])])
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(2), atol=1e-12)

    def test_repeated_calls_identical(self):
        m = SequenceTransformer(tiny_config(task="real"))
        seqs = [make_seq([4, 5, 6])]
        np.testing.assert_array_equal(m.predict(seqs), m.predict(seqs))

    def test_batching_does_not_change_scores(self):
        m = SequenceTransformer(tiny_config(batch_size=2))
        seqs = [make_seq([4, 5]), make_seq([6, 7, 8]), make_seq([9])]
        merged = m.predict(seqs)
        single = np.concatenate([m.predict([s]) for s in seqs])
        np.testing.assert_allclose(merged, single, atol=1e-9)

    def test_stable_sigmoid_extremes(self):
        out = stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)


class TestCheckpoint:
    def roundtrip(self, tmp_path, cfg=None):
        m = SequenceTransformer(cfg or tiny_config(seed=5))
        stem = str(tmp_path / "model")
        save_checkpoint(m, stem, vocab_sha256="a" * 64)
        return m, stem

    def test_round_trip_predictions_bitwise(self, tmp_path):
        m, stem = self.roundtrip(tmp_path)
        loaded = load_checkpoint(stem, vocab_sha256="a" * 64)
        seqs = [make_seq([4, 5, 6]), make_seq([7, 8])]
        np.testing.assert_array_equal(m.predict(seqs), loaded.predict(seqs))

    def test_config_round_trip(self, tmp_path):
        cfg = tiny_config(task="category", seed=9)
        _, stem = self.roundtrip(tmp_path, cfg)
        assert load_checkpoint(stem, vocab_sha256="a" * 64).cfg == cfg

    def test_vocab_mismatch_refused(self, tmp_path):
        _, stem = self.roundtrip(tmp_path)
        with pytest.raises(CheckpointError, match="vocabulary"):
            load_checkpoint(stem, vocab_sha256="b" * 64)

    def test_truncated_blob_rejected(self, tmp_path):
        _, stem = self.roundtrip(tmp_path)
        blob = stem + ".tensors.bin"
        with open(blob, "rb") as fh:
            data = fh.read()
        with open(blob, "wb") as fh:
            fh.write(data[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(stem, vocab_sha256="a" * 64)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(str(tmp_path / "nothing"), vocab_sha256="a" * 64)

    def test_foreign_manifest_rejected(self, tmp_path):
        stem = str(tmp_path / "bogus")
        with open(stem + ".manifest.json", "w") as fh:
            fh.write('{"format": "something-else"}')
        with pytest.raises(CheckpointError):
            load_checkpoint(stem, vocab_sha256="a" * 64)

    def test_vocab_hash_matches_file_bytes(self, tmp_path):
        import hashlib
        vocab = Vocabulary(["alpha", "beta"])
        path = tmp_path / "vocab.txt"
        vocab.save(str(path))
        assert vocab_hash(vocab) == hashlib.sha256(path.read_bytes()).hexdigest()
