import numpy as np
import pytest

from rainbowlab import diffcore as dc
from rainbowlab import evolution as evo
from rainbowlab import gate as gating
from rainbowlab import harness as hn


def toy_runner(strategy="rainbow", tasks=2, separation=2.0, epochs=2,
               seed=0, samples_per_class=10):
    scenario = hn.build_scenario(hn.ScenarioConfig(
        tasks=tasks, classes_per_task=2, samples_per_class=samples_per_class,
        separation=separation, patches=4, dim=8, seed=seed,
    ))
    return hn.ContinualRunner(
        scenario, strategy, layers=3, heads=2, prompt_length=4,
        proj_dim=4, align_dim=4,
        loss_config=hn.LossConfig(epochs_per_task=epochs, batch_size=8),
        seed=seed,
    )


class TestScenario:
    def test_counts_and_shapes(self):
        cfg = hn.ScenarioConfig(tasks=3, classes_per_task=2,
                                samples_per_class=10, patches=4, dim=6)
        sc = hn.build_scenario(cfg)
        assert len(sc.tasks) == 3
        for t in sc.tasks:
            assert t.train_x.shape == (16, 4, 6)  # 80% of 2 x 10
            assert t.test_x.shape == (4, 4, 6)
            assert t.train_y.shape == (16,)

    def test_class_ids_globally_disjoint(self):
        sc = hn.build_scenario(hn.ScenarioConfig(
            tasks=4, classes_per_task=3, samples_per_class=5, patches=2, dim=4))
        all_ids = [c for t in sc.tasks for c in t.class_ids]
        assert len(all_ids) == len(set(all_ids)) == 12
        for t in sc.tasks:
            assert set(t.train_y) == set(t.class_ids)

    def test_deterministic_per_seed(self):
        cfg = hn.ScenarioConfig(tasks=2, samples_per_class=6, patches=3, dim=4, seed=5)
        a = hn.build_scenario(cfg)
        b = hn.build_scenario(cfg)
        assert np.array_equal(a.tasks[1].train_x, b.tasks[1].train_x)
        c = hn.build_scenario(hn.ScenarioConfig(
            tasks=2, samples_per_class=6, patches=3, dim=4, seed=6))
        assert not np.array_equal(a.tasks[0].train_x, c.tasks[0].train_x)

    def test_separation_controls_difficulty(self):
        # one trained task: well-separated clusters are learnable, fully
        # overlapping ones (separation 0) stay near chance on held-out data
        easy = toy_runner(tasks=1, separation=4.0, epochs=15, samples_per_class=40)
        easy.train_task(0)
        acc_easy = easy.evaluate_seen(0)[0]
        hard = toy_runner(tasks=1, separation=0.0, epochs=15, samples_per_class=40)
        hard.train_task(0)
        acc_hard = hard.evaluate_seen(0)[0]
        assert acc_easy > 0.95
        assert abs(acc_hard - 0.5) <= 0.25

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            hn.ScenarioConfig(tasks=0)
        with pytest.raises(ValueError):
            hn.ScenarioConfig(classes_per_task=0)


class TestLosses:
    def test_matching_loss_values(self):
        e = dc.constant([1.0, 1.0])
        aligned = hn.matching_loss(dc.constant([2.0, 2.0]), e)
        assert aligned.item() == pytest.approx(0.0, abs=1e-12)
        axis = hn.matching_loss(dc.constant([1.0, 0.0]), e)
        assert axis.item() == pytest.approx(1.0 - 1.0 / np.sqrt(2.0), abs=1e-12)
        opposite = hn.matching_loss(dc.constant([-1.0, -1.0]), e)
        assert opposite.item() == pytest.approx(2.0, abs=1e-12)

    def test_batch_matching_loss_is_mean_of_singles(self):
        rng = np.random.default_rng(0)
        qf = rng.normal(size=(6, 5))
        e = dc.parameter(rng.normal(size=5), name="e")
        got = hn.batch_matching_loss(qf, e).item()
        singles = [hn.matching_loss(dc.constant(q), e).item() for q in qf]
        assert got == pytest.approx(np.mean(singles), abs=1e-10)

    def test_batch_matching_rejects_zero_feature(self):
        e = dc.constant(np.ones(3))
        with pytest.raises(ValueError):
            hn.batch_matching_loss(np.zeros((2, 3)), e)

    def test_batch_matching_gradient_reaches_embedding(self):
        rng = np.random.default_rng(1)
        e = dc.parameter(rng.normal(size=4), name="e")
        qf = rng.normal(size=(3, 4))
        assert dc.grad_check(lambda: hn.batch_matching_loss(qf, e), [e]) < 1e-6

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            hn.LossConfig(lambda_sparse=-0.1)


class TestSelectTask:
    def test_picks_most_aligned(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        assert hn.select_task(np.array([0.9, 0.1]), emb) == 0
        assert hn.select_task(np.array([0.1, 5.0]), emb) == 1
        assert hn.select_task(np.array([-2.0, 0.0]), emb) == 2

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(4, 6))
        q = rng.normal(size=6)
        assert hn.select_task(q, emb) == hn.select_task(100.0 * q, emb)

    def test_tie_goes_to_smallest_id(self):
        emb = np.array([[1.0, 0.0], [2.0, 0.0]])  # same direction
        assert hn.select_task(np.array([3.0, 0.0]), emb) == 0

    def test_empty_embeddings_rejected(self):
        with pytest.raises(ValueError):
            hn.select_task(np.ones(2), np.zeros((0, 2)))


class TestMetrics:
    def test_two_task_worked_example(self):
        a, f, single = hn.metrics([[0.9], [0.5, 0.9]])
        assert a == pytest.approx(0.7)
        assert f == pytest.approx(0.4)
        assert not single

    def test_constant_matrix_has_zero_forgetting(self):
        m = [[0.8], [0.8, 0.8], [0.8, 0.8, 0.8]]
        a, f, _ = hn.metrics(m)
        assert a == pytest.approx(0.8)
        assert f == pytest.approx(0.0)

    def test_single_task_flagged(self):
        a, f, single = hn.metrics([[0.6]])
        assert (a, f, single) == (0.6, 0.0, True)

    def test_malformed_matrix_rejected(self):
        with pytest.raises(ValueError):
            hn.metrics([])
        with pytest.raises(ValueError):
            hn.metrics([[0.5, 0.5]])

    def test_forgetting_uses_best_previous(self):
        # task 0: 0.9 then dips to 0.6 then final 0.7 -> drop is 0.9 - 0.7
        m = [[0.9], [0.6, 0.8], [0.7, 0.8, 0.9]]
        _, f, _ = hn.metrics(m)
        assert f == pytest.approx(((0.9 - 0.7) + (0.8 - 0.8)) / 2)


class TestRunner:
    def test_unknown_strategy_rejected(self):
        scenario = hn.build_scenario(hn.ScenarioConfig(
            tasks=1, samples_per_class=4, patches=2, dim=8))
        with pytest.raises(ValueError, match="strategy"):
            hn.ContinualRunner(scenario, "magic")

    def test_tasks_must_run_in_order(self):
        runner = toy_runner()
        with pytest.raises(ValueError):
            runner.train_task(1)

    def test_single_task_learnable(self):
        runner = toy_runner(tasks=1, separation=3.0, epochs=20,
                            samples_per_class=20)
        runner.train_task(0)
        task = runner.scenario.tasks[0]
        train_acc = np.mean(runner.predict(task.train_x) == task.train_y)
        assert train_acc > 0.95

    def test_inference_never_evolves_or_relaxes(self):
        runner = toy_runner(tasks=2, epochs=2)
        runner.train_task(0)
        runner.train_task(1)
        before = (evo.evolution_call_count(), gating.relax_call_count())
        runner.predict(runner.scenario.tasks[0].test_x)
        runner.evaluate_seen(1)
        assert (evo.evolution_call_count(), gating.relax_call_count()) == before

    def test_predictions_ignore_evolution_weights_after_finalize(self):
        runner = toy_runner(tasks=2, epochs=2)
        runner.train_task(0)
        runner.train_task(1)
        x = np.concatenate([t.test_x for t in runner.scenario.tasks])
        base = runner.predict(x)
        rng = np.random.default_rng(9)
        for p in runner.evo_weights.trainable_params():
            p.data = p.data + rng.normal(scale=10.0, size=p.data.shape)
        assert np.array_equal(runner.predict(x), base)

    def test_stored_prompts_bitwise_stable_across_later_tasks(self):
        runner = toy_runner(tasks=2, epochs=2)
        runner.train_task(0)
        snap = {
            l: runner.prompt_set.full_prompt(0, l).copy()
            for l in runner.prompt_set.entries[0]["prompts"]
        }
        mask0 = runner.prompt_set.mask(0).copy()
        runner.train_task(1)
        assert np.array_equal(runner.prompt_set.mask(0), mask0)
        for l, arr in snap.items():
            assert np.array_equal(runner.prompt_set.full_prompt(0, l), arr)

    def test_empty_mask_falls_back_to_prompt_free_forward(self):
        runner = toy_runner(tasks=1, epochs=2)
        runner.train_task(0)
        # overwrite the stored entry with an all-off mask
        runner.prompt_set.entries.clear()
        runner.prompt_set.store(0, np.zeros(3, dtype=bool), {})
        x = runner.scenario.tasks[0].test_x
        preds = runner.predict(x)
        logits = runner.encoder.forward(
            dc.constant(x), [None, None, None], runner.classifier)
        assert np.array_equal(preds, np.argmax(logits.data, axis=1))

    def test_events_log_one_line_per_epoch(self):
        runner = toy_runner(tasks=2, epochs=3)
        runner.train_task(0)
        runner.train_task(1)
        assert len(runner.events) == 6
        assert runner.events[0].startswith("task=0 epoch=0 ce=")
        assert "alpha=" in runner.events[-1]

    def test_run_result_shape(self):
        runner = toy_runner(tasks=2, epochs=2)
        result = runner.run()
        assert [len(r) for r in result.accuracy_matrix] == [1, 2]
        assert len(result.diversity) == 2
        a, f, _ = hn.metrics(result.accuracy_matrix)
        assert result.average_accuracy == pytest.approx(a)
        assert result.average_forgetting == pytest.approx(f)

    def test_baseline_strategies_run(self):
        for strategy in ("fixed_weighted_sum", "frozen_specific"):
            runner = toy_runner(strategy=strategy, tasks=2, epochs=2)
            result = runner.run()
            assert len(result.accuracy_matrix) == 2
            assert runner.parameter_report()["stored_prompt_params"] > 0

    def test_parameter_report_consistency(self):
        runner = toy_runner(tasks=2, epochs=2)
        runner.run()
        report = runner.parameter_report()
        assert report["backbone_frozen"] > 0
        # each task stores masked layers of 4 x 8 prompts
        stored = sum(
            32 * int(runner.prompt_set.mask(t).sum()) for t in range(2))
        assert report["stored_prompt_params"] == stored
        assert report["trainable_at_last_task"] > 0
