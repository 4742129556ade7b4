import numpy as np
import pytest

from rsamask.errors import (
    DataError,
    DegenerateDataError,
    DivergenceError,
    ShapeError,
    ValidationError,
)
from rsamask.training import (
    AdamState,
    TrainConfig,
    adam_step,
    build_corpus,
    compute_noise,
    evaluate_loss,
    finalize_weights,
    pair_loss,
    reliability_weight,
    sample_meg_slice,
    split_corpus,
    train,
)
from rsamask.types import Mask, MaskResolution, PairIndex, StageSpec
from rsamask.similarity import predicted_rdm

from conftest import make_features, make_stack, symmetric_noise


def _simple_stack(rng, ids, subjects=3, tag="fmri-evc", scale=0.1, base=0.5):
    n = len(ids)
    mats = np.stack(
        [
            (base + symmetric_noise(rng, n, scale)).astype(np.float32)
            * (1.0 - np.eye(n, dtype=np.float32))
            for _ in range(subjects)
        ]
    )
    # re-zero diagonals exactly (base offset touched them)
    for m in mats:
        np.fill_diagonal(m, 0.0)
    return make_stack(ids, tag, [mats])


class TestComputeNoise:
    def test_zero_spread(self, rng):
        m = symmetric_noise(rng, 4, 0.3).astype(np.float32)
        stack = make_stack(list("abcd"), "fmri-evc", [np.stack([m, m, m])])
        assert compute_noise(stack, PairIndex(0, 1)) == 0.0

    def test_two_subject_half_range(self):
        a = np.zeros((3, 3), dtype=np.float32)
        b = np.zeros((3, 3), dtype=np.float32)
        b[0, 1] = b[1, 0] = 2.0
        stack = make_stack(list("abc"), "fmri-evc", [np.stack([a, b])])
        assert compute_noise(stack, PairIndex(0, 1)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_textbook_oracle(self, rng):
        vals = rng.normal(0.6, 0.2, 15)
        mats = np.zeros((15, 4, 4), dtype=np.float32)
        mats[:, 1, 2] = vals
        mats[:, 2, 1] = vals
        stack = make_stack(list("abcd"), "fmri-evc", [mats])
        stored = mats[:, 1, 2].astype(np.float64)
        mean = stored.sum() / 15
        expected = np.sqrt(((stored - mean) ** 2).sum() / 15)
        assert compute_noise(stack, PairIndex(1, 2)) == pytest.approx(expected, abs=1e-12)
        expected_sample = np.sqrt(((stored - mean) ** 2).sum() / 14)
        assert compute_noise(stack, PairIndex(1, 2), sample_std=True) == pytest.approx(
            expected_sample, abs=1e-12
        )

    def test_single_subject_errors(self, rng):
        m = symmetric_noise(rng, 3, 0.3).astype(np.float32)
        stack = make_stack(list("abc"), "fmri-evc", [m[None]])
        with pytest.raises(DegenerateDataError):
            compute_noise(stack, PairIndex(0, 1))


class TestReliabilityWeight:
    def test_exact_substitutions(self):
        assert reliability_weight(0.0, 1.0, 0.25, 1.0) == pytest.approx(4.0, abs=1e-12)
        assert reliability_weight(0.75, 1.0, 0.25, 1.0) == pytest.approx(1.0, abs=1e-12)
        assert reliability_weight(0.2, 0.2, 0.25, 1.0) == pytest.approx(4.0, abs=1e-12)

    def test_monotone_decreasing_in_noise(self):
        grid = np.linspace(0.0, 5.0, 100)
        weights = [reliability_weight(float(n), 1.3, 0.25, 1.0) for n in grid]
        assert all(b < a for a, b in zip(weights, weights[1:]))

    def test_degenerate(self):
        with pytest.raises(DegenerateDataError):
            reliability_weight(0.0, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            reliability_weight(-0.1, 1.0)


class TestPairLoss:
    def test_exact_match(self):
        assert pair_loss(0.5, [0.5, 0.5], 3.0) == 0.0

    def test_l1_case(self):
        assert pair_loss(0.5, [0.4, 0.6], 2.0, "l1") == pytest.approx(0.2, abs=1e-12)

    def test_mse_case(self):
        assert pair_loss(0.5, [0.4, 0.6], 2.0, "mse") == pytest.approx(0.02, abs=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            pair_loss(0.5, [0.5], 1.0, "huber")


class TestSampleMegSlice:
    def _meg_stack(self, rng, timestamps):
        m = symmetric_noise(rng, 3, 0.2).astype(np.float32)
        mats = np.stack([m, m])
        return make_stack(list("abc"), "meg-early", [mats] * len(timestamps), timestamps)

    def test_single_slice(self, rng):
        stack = self._meg_stack(rng, [0.25])
        r = np.random.default_rng(0)
        assert all(sample_meg_slice(stack, r) == 0 for _ in range(20))

    def test_sigma_zero_limit_hits_midpoint(self, rng):
        stack = self._meg_stack(rng, [0.0, 1.0, 2.0, 3.0, 4.0])
        r = np.random.default_rng(0)
        draws = {sample_meg_slice(stack, r, sigma=1e-12) for _ in range(50)}
        assert draws == {2}

    def test_untimestamped_stack_rejected(self, rng):
        m = symmetric_noise(rng, 3, 0.2).astype(np.float32)
        stack = make_stack(list("abc"), "fmri-evc", [np.stack([m, m])])
        with pytest.raises(ValidationError):
            sample_meg_slice(stack, np.random.default_rng(0))

    def test_distribution_is_midpoint_peaked(self, rng):
        stack = self._meg_stack(rng, [float(t) for t in range(11)])
        r = np.random.default_rng(7)
        draws = np.array([sample_meg_slice(stack, r) for _ in range(20_000)])
        counts = np.bincount(draws, minlength=11)
        assert counts.argmax() == 5
        assert np.all(np.diff(counts[:6]) >= 0)
        assert np.all(np.diff(counts[5:]) <= 0)


def _corpus(rng, n_images=8, subjects=3, shapes=((3, 2), (2, 2)), tag="fmri-evc"):
    fs = make_features(rng, n_images, list(shapes))
    stack = _simple_stack(rng, fs.image_ids, subjects=subjects, tag=tag)
    return fs, stack


class TestCorpusAndSplit:
    def test_join_by_ids_uses_stack_order(self, rng):
        fs = make_features(rng, 6, [(2, 2)])
        ids = ["img004", "img001", "img003"]
        stack = _simple_stack(rng, ids)
        corpus = build_corpus([fs], [stack])
        view = corpus.datasets[0].features
        assert view.image_ids == ids
        assert np.array_equal(view.data[0][0], fs.data[0][4])

    def test_unjoinable_ids(self, rng):
        fs = make_features(rng, 4, [(2, 2)])
        stack = _simple_stack(rng, ["nope1", "nope2", "nope3"])
        with pytest.raises(DataError):
            build_corpus([fs], [stack])

    def test_stage_layout_mismatch(self, rng):
        a = make_features(rng, 4, [(2, 2)])
        b = make_features(rng, 4, [(3, 2)], prefix="oth")
        stack = _simple_stack(rng, a.image_ids)
        with pytest.raises(ShapeError):
            build_corpus([a, b], [stack])

    def test_split_sizes(self, rng):
        fs, stack = _corpus(rng, n_images=15)  # 105 pairs
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.10, seed=4)
        assert corpus.val_rows.shape[0] == round(0.10 * 105)
        assert corpus.train_rows.shape[0] + corpus.val_rows.shape[0] == 105
        assert not set(corpus.train_rows) & set(corpus.val_rows)

    def test_split_deterministic(self, rng):
        fs, stack = _corpus(rng, n_images=12)
        a = build_corpus([fs], [stack])
        b = build_corpus([fs], [stack])
        split_corpus(a, 0.1, seed=9)
        split_corpus(b, 0.1, seed=9)
        assert np.array_equal(a.is_val, b.is_val)

    def test_split_arithmetic_92_plus_118(self):
        # pair bookkeeping only; no features needed
        from rsamask.types import pair_count

        total = pair_count(92) + pair_count(118)
        assert total == 11089
        assert int(round(0.10 * total)) == 1109

    def test_too_few_pairs(self, rng):
        fs, stack = _corpus(rng, n_images=3)  # 3 pairs
        corpus = build_corpus([fs], [stack])
        with pytest.raises(DegenerateDataError):
            split_corpus(corpus, 0.1, seed=0)


class TestWeights:
    def test_weights_off_are_exactly_one(self, rng):
        fs, stack = _corpus(rng)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.2, seed=0)
        finalize_weights(corpus, TrainConfig(use_reliability_weights=False))
        assert np.all(corpus.datasets[0].weights == 1.0)

    def test_n_bar_is_mean_train_noise(self, rng):
        fs, stack = _corpus(rng, n_images=10)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.2, seed=1)
        config = TrainConfig(use_reliability_weights=True)
        finalize_weights(corpus, config)
        ds = corpus.datasets[0]
        rows = (corpus.dataset_of == 0) & ~corpus.is_val
        expected = np.mean(
            [
                compute_noise(stack, PairIndex(int(ds.pair_i[p]), int(ds.pair_j[p])))
                for p in corpus.pair_pos[rows]
            ]
        )
        assert ds.n_bar[0] == pytest.approx(expected, abs=1e-9)

    def test_weights_match_formula(self, rng):
        fs, stack = _corpus(rng, n_images=9)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.2, seed=1)
        config = TrainConfig()
        finalize_weights(corpus, config)
        ds = corpus.datasets[0]
        for p in [0, 5, 17]:
            n = compute_noise(stack, PairIndex(int(ds.pair_i[p]), int(ds.pair_j[p])))
            expected = reliability_weight(
                n, float(ds.n_bar[0]), config.weight_alpha, config.weight_beta
            )
            assert ds.weights[0, p] == pytest.approx(expected, rel=1e-9)

    def test_single_subject_needs_weights_off(self, rng):
        fs = make_features(rng, 6, [(2, 2)])
        stack = _simple_stack(rng, fs.image_ids, subjects=1)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.2, seed=0)
        with pytest.raises(DegenerateDataError):
            finalize_weights(corpus, TrainConfig(use_reliability_weights=True))


class TestAdam:
    def _mask(self):
        stages = [StageSpec("layer0", 3, 1)]
        return Mask.identity(stages, MaskResolution.PER_CHANNEL)

    def test_zero_gradient_keeps_mask(self):
        mask = self._mask()
        state = AdamState.zeros_like(mask)
        adam_step(mask, [np.zeros(3)], state, TrainConfig())
        assert np.all(mask.coefficients[0] == 1.0)
        assert state.step == 1

    def test_first_step_magnitude_is_learning_rate(self):
        mask = self._mask()
        state = AdamState.zeros_like(mask)
        g = np.array([0.3, -2.0, 1e-3])
        config = TrainConfig(learning_rate=0.01)
        adam_step(mask, [g], state, config)
        delta = mask.coefficients[0].astype(np.float64) - 1.0
        # bias-corrected first step: |delta| = lr * |g| / (|g| + eps') ~ lr
        assert np.allclose(np.abs(delta), 0.01, rtol=1e-4)
        assert np.all(np.sign(delta) == -np.sign(g))

    def test_three_step_trace_matches_transcription(self):
        # frozen before the build from a literal transcription of Adam on
        # f(t) = (t - 3)^2 / 2 starting at 0 with lr 0.01
        expected = [0.009999999966666666, 0.01999911569248735, 0.029996755953637294]
        stages = [StageSpec("layer0", 1, 1)]
        mask = Mask(MaskResolution.PER_STAGE, stages, [np.zeros(1, dtype=np.float32)])
        state = AdamState.zeros_like(mask)
        config = TrainConfig(learning_rate=0.01)
        seen = []
        for _ in range(3):
            g = np.array([float(mask.coefficients[0][0]) - 3.0])
            adam_step(mask, [g], state, config)
            seen.append(float(mask.coefficients[0][0]))
        assert seen == pytest.approx(expected, rel=1e-6)

    def test_shape_mismatch(self):
        mask = self._mask()
        state = AdamState.zeros_like(mask)
        with pytest.raises(ShapeError):
            adam_step(mask, [np.zeros(2)], state, TrainConfig())


class TestTrain:
    def test_zero_epochs_returns_identity(self, rng):
        fs, stack = _corpus(rng)
        config = TrainConfig(epochs=0, seed=3, use_reliability_weights=False)
        result = train([fs], [stack], config)
        for c in result.best.mask.coefficients:
            assert np.all(c == np.float32(1.0))
        assert result.best.step_count == 0

    def test_noop_fixed_point(self, rng):
        fs = make_features(rng, 12, [(4, 3), (2, 2)])
        identity = Mask.identity(fs.stages, MaskResolution.PER_CHANNEL)
        target = predicted_rdm(fs, identity).astype(np.float32)
        stack = make_stack(fs.image_ids, "fmri-it", [target[None]])
        config = TrainConfig(epochs=10, seed=5, use_reliability_weights=False)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, config.val_fraction, config.seed)
        finalize_weights(corpus, config)
        initial = evaluate_loss(corpus, identity, config, np.arange(corpus.n_rows))
        assert initial <= 1e-6
        result = train([fs], [stack], config)
        drift = max(np.abs(c - 1.0).max() for c in result.final.mask.coefficients)
        assert drift <= 1e-3

    def test_bit_reproducible(self, rng):
        fs, stack = _corpus(rng, n_images=10)
        config = TrainConfig(epochs=3, seed=11)
        a = train([fs], [stack], config)
        b = train([fs], [stack], config)
        for ca, cb in zip(a.final.mask.coefficients, b.final.mask.coefficients):
            assert np.array_equal(ca.view(np.uint32), cb.view(np.uint32))
        assert a.best_val_loss == b.best_val_loss

    def test_epoch_loss_invariant_to_batching(self, rng):
        fs, stack = _corpus(rng, n_images=10)
        config = TrainConfig(use_reliability_weights=False, seed=2)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.1, seed=2)
        finalize_weights(corpus, config)
        mask = Mask.identity(fs.stages, MaskResolution.PER_CHANNEL)
        rows = corpus.train_rows
        full = evaluate_loss(corpus, mask, config, rows) * rows.shape[0]
        for batch_size in (1, 7, 16, rows.shape[0]):
            total = 0.0
            for start in range(0, rows.shape[0], batch_size):
                chunk = rows[start : start + batch_size]
                total += evaluate_loss(corpus, mask, config, chunk) * chunk.shape[0]
            assert total == pytest.approx(full, rel=1e-6)

    def test_pair_losses_match_reference_op(self, rng):
        # batched machinery agrees with the scalar pair_loss reference
        from rsamask.encoder import pair_dissimilarity

        fs, stack = _corpus(rng, n_images=7)
        config = TrainConfig(use_reliability_weights=True, seed=0)
        corpus = build_corpus([fs], [stack])
        split_corpus(corpus, 0.2, seed=0)
        finalize_weights(corpus, config)
        mask = Mask.identity(fs.stages, MaskResolution.PER_CHANNEL)
        ds = corpus.datasets[0]
        rows = np.arange(corpus.n_rows)
        got = evaluate_loss(corpus, mask, config, rows) * rows.shape[0]
        expected = 0.0
        for p in range(ds.n_pairs):
            pred = pair_dissimilarity(fs.subset_by_ids(stack.image_ids), mask,
                                      PairIndex(int(ds.pair_i[p]), int(ds.pair_j[p])))
            expected += pair_loss(pred, ds.targets[0, :, p], float(ds.weights[0, p]))
        assert got == pytest.approx(expected, rel=1e-6)

    def test_validation_rows_never_reach_gradients(self, rng):
        fs, stack = _corpus(rng, n_images=10)
        config = TrainConfig(epochs=2, seed=6, use_reliability_weights=False)
        seen = []
        result = train([fs], [stack], config,
                       batch_hook=lambda epoch, step, rows: seen.extend(rows.tolist()))
        val = set(result.corpus.val_rows.tolist())
        assert seen, "hook never fired"
        assert not val & set(seen)
        train_rows = set(result.corpus.train_rows.tolist())
        assert set(seen) <= train_rows

    def test_divergence_guard(self, rng):
        fs, stack = _corpus(rng, n_images=10)
        config = TrainConfig(epochs=3, learning_rate=1e39, seed=1,
                             use_reliability_weights=False)
        with np.errstate(all="ignore"):
            with pytest.raises(DivergenceError):
                train([fs], [stack], config)

    def test_meg_training_runs_and_is_deterministic(self, rng):
        fs = make_features(rng, 9, [(3, 2)])
        n = 9
        mats = [
            np.stack([
                (0.5 + symmetric_noise(rng, n, 0.1)).astype(np.float32)
                * (1 - np.eye(n, dtype=np.float32))
                for _ in range(2)
            ])
            for _ in range(4)
        ]
        for group in mats:
            for m in group:
                np.fill_diagonal(m, 0.0)
        stack = make_stack(fs.image_ids, "meg-early", mats, [0.1, 0.2, 0.3, 0.4])
        config = TrainConfig(epochs=2, seed=8, meg_gaussian_sampling=True)
        a = train([fs], [stack], config)
        b = train([fs], [stack], config)
        for ca, cb in zip(a.final.mask.coefficients, b.final.mask.coefficients):
            assert np.array_equal(ca, cb)

    def test_multi_dataset_concatenation(self, rng):
        fs92 = make_features(rng, 8, [(2, 2)], prefix="a")
        fs118 = make_features(rng, 9, [(2, 2)], prefix="b")
        stack_a = _simple_stack(rng, fs92.image_ids, tag="fmri-evc")
        stack_b = _simple_stack(rng, fs118.image_ids, tag="fmri-it")
        config = TrainConfig(epochs=2, seed=4)
        result = train([fs92, fs118], [stack_a, stack_b], config)
        assert result.corpus.n_rows == 28 + 36
        assert len(result.history) == 2
