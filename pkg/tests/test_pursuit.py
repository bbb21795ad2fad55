"""Sequential pursuit: input encoding, training, and the inference engine."""

import numpy as np
import pytest

from uaip import data, pursuit
from uaip.errors import ConfigError, DataError


def square_wave_answers(n, m, k, reliability, seed):
    spec = data.JointSpec(
        n_classes=k, n_queries=m,
        class_prior=np.full(k, 1.0 / k),
        truth_table=np.where(np.arange(m)[None, :] < np.arange(1, k + 1)[:, None], 1, -1),
        reliability=np.full(m, reliability),
    )
    ds = data.synth_generate(spec, n, seed=seed)
    return pursuit.PursuitData(answers=ds.answers, labels=ds.labels,
                               n_classes=k, ids=ds.ids)


def quick_config(**kw):
    base = dict(epochs=25, lr=3e-3, batch_size=16, hidden=(32,), seed=0)
    base.update(kw)
    return pursuit.PursuitTrainConfig(**base)


def trained_model(n=160, m=4, k=2, reliability=0.95, seed=0, **cfg):
    train = square_wave_answers(n, m, k, reliability, seed)
    return pursuit.train_pursuit(train, config=quick_config(**cfg)), train


class TestEncodeInput:
    def test_worked_example(self):
        hist = pursuit.History(h=np.array([0.0, 0.0, 1.0]), order=[2])
        clf_in, q_in = pursuit.encode_input(hist, np.array([0, 1, 0]))
        np.testing.assert_array_equal(clf_in, [0.0, 0.0, 1.0])
        # Availability: q0 unasked+unmasked, q1 masked, q2 asked.
        np.testing.assert_array_equal(q_in, [0.0, 0.0, 1.0, 1.0, 0.0, 0.0])

    def test_empty_history(self):
        hist = pursuit.History.empty(3)
        clf_in, q_in = pursuit.encode_input(hist, np.zeros(3))
        np.testing.assert_array_equal(clf_in, np.zeros(3))
        np.testing.assert_array_equal(q_in, [0, 0, 0, 1, 1, 1])

    def test_everything_masked(self):
        hist = pursuit.History.empty(2)
        _, q_in = pursuit.encode_input(hist, np.ones(2))
        np.testing.assert_array_equal(q_in, [0, 0, 0, 0])

    def test_copy_not_view(self):
        hist = pursuit.History(h=np.array([1.0, 0.0]))
        clf_in, _ = pursuit.encode_input(hist, np.zeros(2))
        clf_in[0] = -1.0
        assert hist.h[0] == 1.0

    def test_mask_shape_checked(self):
        with pytest.raises(ConfigError):
            pursuit.encode_input(pursuit.History.empty(3), np.zeros(2))


class TestPursuitData:
    def test_validation(self):
        with pytest.raises(DataError):
            pursuit.PursuitData(np.zeros((2, 3), dtype=np.int8),
                                np.zeros(2, dtype=np.int64), 2)
        with pytest.raises(DataError):
            pursuit.PursuitData(np.ones((2, 3), dtype=np.int8),
                                np.array([0, 5]), 2)
        with pytest.raises(DataError):
            pursuit.PursuitData(np.ones((2, 3), dtype=np.int8),
                                np.zeros(2, dtype=np.int64), 2,
                                masks=np.full((2, 3), 2))

    def test_batch_size_resolution(self):
        cfg = pursuit.PursuitTrainConfig()
        assert cfg.resolve_batch(512) == 16
        assert cfg.resolve_batch(513) == 64
        assert pursuit.PursuitTrainConfig(batch_size=7).resolve_batch(10_000) == 7

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            pursuit.PursuitTrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            pursuit.PursuitTrainConfig(st_mode="greedy")
        with pytest.raises(ConfigError):
            pursuit.PursuitTrainConfig(tau_start=0.0)


class TestRandomHistories:
    def test_respects_availability(self):
        rng = np.random.default_rng(0)
        avail = rng.random((200, 6)) > 0.3
        asked = pursuit._random_histories(rng, avail)
        assert not (asked & ~avail).any()

    def test_sizes_cover_full_range(self):
        rng = np.random.default_rng(1)
        avail = np.ones((3000, 4), dtype=bool)
        asked = pursuit._random_histories(rng, avail)
        sizes = asked.sum(axis=1)
        # t ~ Uniform{0..4}: all five sizes appear, each near 1/5.
        counts = np.bincount(sizes, minlength=5)
        assert (counts > 0).all()
        assert abs(counts[0] / 3000 - 0.2) < 0.05
        assert abs(counts[4] / 3000 - 0.2) < 0.05

    def test_uniform_over_subsets(self):
        # For fixed size t the subset should be uniform: each query equally
        # likely to be included.
        rng = np.random.default_rng(2)
        avail = np.ones((6000, 3), dtype=bool)
        asked = pursuit._random_histories(rng, avail)
        two = asked[asked.sum(axis=1) == 2]
        freq = two.mean(axis=0)
        np.testing.assert_allclose(freq, 2 / 3, atol=0.03)

    def test_no_availability_gives_empty(self):
        rng = np.random.default_rng(3)
        asked = pursuit._random_histories(rng, np.zeros((5, 4), dtype=bool))
        assert not asked.any()


class TestTraining:
    def test_loss_decreases(self):
        model, _ = trained_model()
        curve = model.train_meta["train_curve"]
        assert curve[-1] < curve[0]

    def test_deterministic(self):
        a, _ = trained_model()
        b, _ = trained_model()
        for la, lb in zip(a.querier + a.classifier, b.querier + b.classifier):
            assert (la.weight.value == lb.weight.value).all()
            assert (la.bias.value == lb.bias.value).all()
        assert a.train_meta["train_curve"] == b.train_meta["train_curve"]

    def test_seed_changes_model(self):
        a, _ = trained_model(seed=0)
        b, _ = trained_model(**{"seed": 0})  # same data seed, new config seed
        c_train = square_wave_answers(160, 4, 2, 0.95, 0)
        c = pursuit.train_pursuit(c_train, config=quick_config(seed=1))
        assert (a.querier[0].weight.value == b.querier[0].weight.value).all()
        assert not (a.querier[0].weight.value == c.querier[0].weight.value).all()

    def test_absent_and_zero_masks_bit_identical(self):
        """Training with no masks and with explicit all-zero masks must share
        one code path: identical parameters, bit for bit."""
        train_a = square_wave_answers(120, 4, 2, 0.9, seed=3)
        train_b = pursuit.PursuitData(
            answers=train_a.answers.copy(), labels=train_a.labels.copy(),
            n_classes=2, masks=np.zeros_like(train_a.answers), ids=train_a.ids)
        cfg = quick_config(epochs=12)
        a = pursuit.train_pursuit(train_a, config=cfg)
        b = pursuit.train_pursuit(train_b, config=cfg)
        for la, lb in zip(a.querier + a.classifier, b.querier + b.classifier):
            assert (la.weight.value == lb.weight.value).all()
            assert (la.bias.value == lb.bias.value).all()
        assert a.train_meta["train_curve"] == b.train_meta["train_curve"]

    def test_validation_curve_recorded(self):
        train = square_wave_answers(100, 4, 2, 0.9, seed=4)
        val = square_wave_answers(40, 4, 2, 0.9, seed=5)
        model = pursuit.train_pursuit(train, val, config=quick_config(epochs=6))
        assert len(model.train_meta["val_curve"]) == 6
        assert model.train_meta["final_val_loss"] is not None

    def test_val_shape_mismatch(self):
        train = square_wave_answers(40, 4, 2, 0.9, seed=6)
        val = square_wave_answers(20, 5, 2, 0.9, seed=6)
        with pytest.raises(DataError):
            pursuit.train_pursuit(train, val, config=quick_config(epochs=1))

    def test_single_epoch_runs(self):
        train = square_wave_answers(30, 3, 2, 1.0, seed=7)
        model = pursuit.train_pursuit(train, config=quick_config(epochs=1))
        assert len(model.train_meta["train_curve"]) == 1

    def test_sample_mode_trains(self):
        train = square_wave_answers(60, 3, 2, 0.95, seed=8)
        model = pursuit.train_pursuit(
            train, config=quick_config(epochs=8, st_mode="sample"))
        assert len(model.train_meta["train_curve"]) == 8

    def test_finetune_phase_runs_and_pins_tau(self):
        train = square_wave_answers(60, 3, 2, 0.95, seed=9)
        model = pursuit.train_pursuit(
            train, config=quick_config(epochs=5, sequential_finetune_epochs=3))
        assert len(model.train_meta["train_curve"]) == 8

    def test_learns_noiseless_single_query(self):
        # M=1, noiseless: one answer decides the class.
        spec = data.JointSpec(
            n_classes=2, n_queries=1, class_prior=np.array([0.5, 0.5]),
            truth_table=np.array([[1], [-1]]), reliability=np.array([1.0]))
        ds = data.synth_generate(spec, 200, seed=10)
        train = pursuit.PursuitData(answers=ds.answers, labels=ds.labels,
                                    n_classes=2, ids=ds.ids)
        model = pursuit.train_pursuit(train, config=quick_config(epochs=60))
        t1 = pursuit.infer(model, np.array([1], dtype=np.int8), stop_threshold=1.0)
        t2 = pursuit.infer(model, np.array([-1], dtype=np.int8), stop_threshold=1.0)
        assert t1.predicted != t2.predicted
        post = pursuit.class_posterior(model, np.array([1.0]))
        assert post.max() > 0.99


class TestInferenceEngine:
    def test_posterior_sums_to_one(self):
        model, train = trained_model()
        trace = pursuit.infer(model, train.answers[0], stop_threshold=1.0)
        for step in trace.steps:
            assert abs(sum(step.posterior) - 1.0) < 1e-9

    def test_never_repeats_a_query(self):
        model, train = trained_model()
        for i in range(30):
            trace = pursuit.infer(model, train.answers[i], stop_threshold=1.0)
            asked = [s.query for s in trace.steps]
            assert len(asked) == len(set(asked))

    def test_threshold_one_asks_all(self):
        model, train = trained_model(m=4)
        trace = pursuit.infer(model, train.answers[0], stop_threshold=1.0)
        assert trace.n_queries_asked == 4
        assert trace.termination == "exhausted"

    def test_threshold_one_with_budget(self):
        model, train = trained_model(m=4)
        trace = pursuit.infer(model, train.answers[0], stop_threshold=1.0, budget=2)
        assert trace.n_queries_asked == 2

    def test_budget_zero_predicts_from_prior(self):
        model, train = trained_model()
        trace = pursuit.infer(model, train.answers[0], stop_threshold=1.0, budget=0)
        assert trace.steps == []
        prior = pursuit.class_posterior(model, np.zeros(model.n_queries))
        assert trace.predicted == int(np.argmax(prior))
        assert trace.confidence == float(np.max(prior))

    def test_all_masked_zero_steps(self):
        model, train = trained_model()
        trace = pursuit.infer(model, train.answers[0],
                              mask=np.ones(model.n_queries, dtype=np.int8),
                              stop_threshold=1.0)
        assert trace.steps == []
        assert trace.termination == "exhausted"
        assert trace.masked == list(range(model.n_queries))

    def test_masked_queries_never_asked(self):
        model, train = trained_model(m=4)
        rng = np.random.default_rng(11)
        for i in range(20):
            mask = (rng.random(4) < 0.5).astype(np.int8)
            trace = pursuit.infer(model, train.answers[i], mask=mask,
                                  stop_threshold=1.0)
            for s in trace.steps:
                assert mask[s.query] == 0

    def test_deterministic_replay(self):
        model, train = trained_model()
        a = pursuit.infer(model, train.answers[3], stop_threshold=0.9)
        b = pursuit.infer(model, train.answers[3], stop_threshold=0.9)
        assert [s.query for s in a.steps] == [s.query for s in b.steps]
        for sa, sb in zip(a.steps, b.steps):
            assert (sa.posterior == sb.posterior).all()

    def test_confidence_stop(self):
        model, train = trained_model(reliability=1.0)
        trace = pursuit.infer(model, train.answers[0], stop_threshold=0.6)
        if trace.termination == "confidence":
            assert trace.confidence >= 0.6
            # Earlier steps must all be below the bar.
            for s in trace.steps[:-1]:
                assert max(s.posterior) < 0.6

    def test_stop_threshold_validated(self):
        model, train = trained_model(k=2)
        with pytest.raises(ConfigError):
            pursuit.infer(model, train.answers[0], stop_threshold=0.5)  # = 1/K
        with pytest.raises(ConfigError):
            pursuit.infer(model, train.answers[0], stop_threshold=1.0001)

    def test_budget_validated(self):
        model, train = trained_model(m=4)
        with pytest.raises(ConfigError):
            pursuit.infer(model, train.answers[0], budget=5)
        with pytest.raises(ConfigError):
            pursuit.infer(model, train.answers[0], budget=-1)

    def test_answer_vector_validated(self):
        model, _ = trained_model(m=4)
        with pytest.raises(DataError):
            pursuit.infer(model, np.array([1, 0, 1, 1]))
        with pytest.raises(DataError):
            pursuit.infer(model, np.array([1, 1, 1]))

    def test_unsure_masks_without_consuming_budget(self):
        model, train = trained_model(m=4)
        vec = train.answers[0]
        unsure_first = {}

        def provider(q):
            if q not in unsure_first:
                unsure_first[q] = True
                if len(unsure_first) == 1:
                    return pursuit.UNSURE
            return int(vec[q])

        trace = pursuit.infer(model, provider, stop_threshold=1.0, budget=3)
        assert trace.n_queries_asked == 3  # the unsure reply cost nothing
        assert len(trace.masked) == 1
        assert trace.masked[0] not in [s.query for s in trace.steps]

    def test_all_unsure_terminates(self):
        model, _ = trained_model(m=4)
        trace = pursuit.infer(model, lambda q: pursuit.UNSURE, stop_threshold=1.0)
        assert trace.steps == []
        assert sorted(trace.masked) == list(range(4))
        assert trace.termination == "exhausted"

    def test_step_engine_matches_infer(self):
        # Driving the primitives by hand reproduces infer exactly.
        model, train = trained_model()
        vec = train.answers[5]
        trace = pursuit.infer(model, vec, stop_threshold=0.9)

        state = pursuit.start_inference(model)
        posterior = pursuit.class_posterior(model, state.h)
        replayed = []
        while not pursuit.reached_confidence(posterior, 0.9) and len(replayed) < model.n_queries:
            q = pursuit.propose_query(model, state)
            if q is None:
                break
            posterior = pursuit.apply_answer(model, state, q, int(vec[q]))
            replayed.append((q, posterior.copy()))
        assert [q for q, _ in replayed] == [s.query for s in trace.steps]
        for (_, p), s in zip(replayed, trace.steps):
            assert (p == s.posterior).all()

    def test_apply_answer_guards(self):
        model, _ = trained_model(m=4)
        state = pursuit.start_inference(model)
        pursuit.apply_answer(model, state, 1, 1)
        with pytest.raises(ConfigError, match="not available"):
            pursuit.apply_answer(model, state, 1, -1)  # already asked
        with pytest.raises(ConfigError):
            pursuit.apply_answer(model, state, 0, 2)   # bad answer value
        pursuit.mark_unsure(state, 2)
        with pytest.raises(ConfigError, match="not available"):
            pursuit.apply_answer(model, state, 2, 1)   # masked

    def test_reached_confidence_threshold_one(self):
        assert not pursuit.reached_confidence(np.array([1.0, 0.0]), 1.0)
        assert pursuit.reached_confidence(np.array([0.9, 0.1]), 0.9)
        assert not pursuit.reached_confidence(np.array([0.89, 0.11]), 0.9)


class TestTraceSerialization:
    def test_dict_keys_and_round_trip(self):
        model, train = trained_model()
        trace = pursuit.infer(model, train.answers[2], stop_threshold=0.9,
                              sample_id="s42")
        d = trace.to_dict()
        assert set(d.keys()) == {"id", "steps", "masked", "termination",
                                 "predicted", "confidence"}
        assert d["id"] == "s42"
        for s in d["steps"]:
            assert set(s.keys()) == {"query", "answer", "posterior"}
            assert isinstance(s["posterior"], list)
        back = pursuit.ExplanationTrace.from_dict(d)
        assert back.sample_id == trace.sample_id
        assert back.predicted == trace.predicted
        assert [s.query for s in back.steps] == [s.query for s in trace.steps]
        for sa, sb in zip(back.steps, trace.steps):
            assert (sa.posterior == sb.posterior).all()


class TestBatchExplain:
    def test_summary_statistics(self):
        model, train = trained_model(n=40)
        traces, summary = pursuit.batch_explain(model, train, stop_threshold=1.0)
        assert summary.n == 40
        counts = [t.n_queries_asked for t in traces]
        assert summary.mean_queries == pytest.approx(np.mean(counts))
        assert summary.std_queries == pytest.approx(np.std(counts))
        correct = [t.predicted == train.labels[i] for i, t in enumerate(traces)]
        assert summary.accuracy == pytest.approx(np.mean(correct))

    def test_ids_flow_into_traces(self):
        model, train = trained_model(n=10)
        traces, _ = pursuit.batch_explain(model, train)
        assert [t.sample_id for t in traces] == train.ids

    def test_per_sample_masks_respected(self):
        model, train = trained_model(n=12, m=4)
        masked = pursuit.PursuitData(
            answers=train.answers[:12], labels=train.labels[:12], n_classes=2,
            masks=np.tile([1, 0, 0, 0], (12, 1)))
        traces, _ = pursuit.batch_explain(model, masked, stop_threshold=1.0)
        for t in traces:
            assert 0 not in [s.query for s in t.steps]
            assert t.masked == [0]


class TestFullConceptBaseline:
    def test_uses_every_answer(self):
        train = square_wave_answers(150, 5, 3, 0.95, seed=12)
        model = pursuit.train_full_concept_baseline(
            train, config=quick_config(epochs=40))
        post = pursuit.full_concept_posterior(model, train.answers.astype(np.float64))
        assert post.shape == (150, 3)
        acc = (post.argmax(axis=1) == train.labels).mean()
        assert acc > 0.8

    def test_deterministic(self):
        train = square_wave_answers(50, 3, 2, 0.9, seed=13)
        a = pursuit.train_full_concept_baseline(train, config=quick_config(epochs=5))
        b = pursuit.train_full_concept_baseline(train, config=quick_config(epochs=5))
        for la, lb in zip(a.classifier, b.classifier):
            assert (la.weight.value == lb.weight.value).all()

    def test_val_curve(self):
        train = square_wave_answers(50, 3, 2, 0.9, seed=14)
        val = square_wave_answers(20, 3, 2, 0.9, seed=15)
        model = pursuit.train_full_concept_baseline(train, val,
                                                    config=quick_config(epochs=4))
        assert len(model.train_meta["val_curve"]) == 4
