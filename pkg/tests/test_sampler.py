import csv

import numpy as np
import pytest
import torch

from maskdiffrec.corpus import MASK, PAD, UserSequence
from maskdiffrec.sampler import (
    SamplingPlan,
    item_scores,
    masking_times,
    rank_items,
    recommend,
    sample,
    trace_forward,
    write_trace_csv,
)
from maskdiffrec.schedule import NoiseSchedule


class TestSamplingPlan:
    def test_default_uniform_descending_grid(self):
        plan = SamplingPlan(n_steps=3, horizon=60.0)
        np.testing.assert_allclose(plan.grid, [60.0, 40.0, 20.0])

    def test_single_step_plan(self):
        plan = SamplingPlan(n_steps=1, horizon=60.0)
        np.testing.assert_allclose(plan.grid, [60.0])

    def test_grid_must_start_at_horizon(self):
        with pytest.raises(ValueError, match="horizon"):
            SamplingPlan(n_steps=2, horizon=60.0, grid=np.array([50.0, 20.0]))

    def test_grid_must_decrease(self):
        with pytest.raises(ValueError, match="decreasing"):
            SamplingPlan(n_steps=3, horizon=60.0, grid=np.array([60.0, 10.0, 20.0]))

    def test_positive_steps_required(self):
        with pytest.raises(ValueError):
            SamplingPlan(n_steps=0)


class TestSample:
    def test_denoiser_called_once_per_step(self, tiny_model):
        sched = NoiseSchedule(horizon=10.0)
        for n_steps in (1, 3, 7):
            plan = SamplingPlan(n_steps=n_steps, horizon=10.0)
            before = tiny_model.apply_count
            sample(tiny_model, 0, plan, sched, {}, np.random.default_rng(0))
            assert tiny_model.apply_count - before == n_steps

    def test_output_is_full_length_decode(self, tiny_model):
        sched = NoiseSchedule(horizon=10.0)
        plan = SamplingPlan(n_steps=4, horizon=10.0)
        items = sample(tiny_model, 1, plan, sched, {}, np.random.default_rng(1))
        assert items.shape == (tiny_model.seq_len,)
        assert np.all((items >= 0) & (items < tiny_model.n_items))

    def test_deterministic_for_fixed_generator(self, tiny_model):
        sched = NoiseSchedule(horizon=10.0)
        plan = SamplingPlan(n_steps=5, horizon=10.0)
        a = sample(tiny_model, 2, plan, sched, {3: 0.2}, np.random.default_rng(7))
        b = sample(tiny_model, 2, plan, sched, {3: 0.2}, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_items_outside_history_fall_back_to_neutral_deviation(self, tiny_model):
        sched = NoiseSchedule(horizon=10.0)
        plan = SamplingPlan(n_steps=6, horizon=10.0)
        neutral = sample(tiny_model, 0, plan, sched, {}, np.random.default_rng(3))
        irrelevant = sample(
            tiny_model, 0, plan, sched, {999: 3.0}, np.random.default_rng(3)
        )
        assert np.array_equal(neutral, irrelevant)


class TestRanking:
    def test_rank_items_hand_example(self):
        scores = np.array([0.9, 0.1, 0.5, 0.3])
        items, top = rank_items(scores, k=2)
        assert items.tolist() == [0, 2]
        np.testing.assert_allclose(top, [0.9, 0.5])

    def test_excluded_top_item_promotes_next(self):
        scores = np.array([0.9, 0.1, 0.5, 0.3])
        items, _ = rank_items(scores, k=2, exclude={0})
        assert items.tolist() == [2, 3]

    def test_ties_break_by_item_id(self):
        scores = np.array([0.5, 0.7, 0.5, 0.7])
        items, _ = rank_items(scores, k=4)
        assert items.tolist() == [1, 3, 0, 2]

    def test_k_larger_than_candidates(self):
        scores = np.array([0.1, 0.2, 0.3])
        items, _ = rank_items(scores, k=10, exclude={2})
        assert items.tolist() == [1, 0]

    def test_scores_non_increasing_and_items_distinct(self, rng):
        scores = rng.normal(size=50)
        items, top = rank_items(scores, k=20, exclude=set(range(5)))
        assert len(set(items.tolist())) == len(items)
        assert np.all(np.diff(top) <= 0)
        assert not (set(items.tolist()) & set(range(5)))


class TestRecommend:
    def test_single_generated_item_scores_by_its_embedding(self, tiny_model):
        generated = np.array([4])
        scores = item_scores(tiny_model, 0, generated, metric="cosine")
        with torch.no_grad():
            q = tiny_model.item_table
            anchor = q[4]
            expected = (
                (q / q.norm(dim=1, keepdim=True)) @ (anchor / anchor.norm())
            ).numpy()
        np.testing.assert_allclose(scores, expected, atol=1e-6)
        assert scores.argmax() == 4

    def test_empty_generated_falls_back_to_user_embedding(self, tiny_model):
        with pytest.warns(UserWarning, match="empty generated"):
            scores = item_scores(tiny_model, 3, np.array([MASK, PAD]))
        assert scores.shape == (tiny_model.n_items,)

    def test_recommend_excludes_and_respects_k(self, tiny_model):
        rec = recommend(
            tiny_model, 1, np.array([2, 5]), k=4, exclude={0, 1, 2}, metric="cosine"
        )
        assert len(rec.items) == 4
        assert not (set(rec.items.tolist()) & {0, 1, 2})
        assert np.all(np.diff(rec.scores) <= 0)

    def test_dot_metric_available(self, tiny_model):
        scores = item_scores(tiny_model, 0, np.array([1]), metric="dot")
        with torch.no_grad():
            expected = (tiny_model.item_table @ tiny_model.item_table[1]).numpy()
        np.testing.assert_allclose(scores, expected, atol=1e-6)

    def test_unknown_metric_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            item_scores(tiny_model, 0, np.array([1]), metric="euclid")


def _seq_with_pad():
    items = np.array([PAD, PAD, 3, 1, 4, 1], dtype=np.int64)
    pad = np.array([True, True, False, False, False, False])
    return UserSequence(user_id=0, items=items, pad_mask=pad)


class TestTrace:
    def test_final_row_fully_masked(self, rng):
        sched = NoiseSchedule(horizon=60.0)
        seq = _seq_with_pad()
        dev = np.array([np.nan, np.nan, 0.3, -0.2, 0.1, -0.2])
        rows = trace_forward(seq, dev, sched, n_steps=12, rng=rng)
        final_t = max(row["t"] for row in rows)
        assert final_t == 60.0
        assert all(row["masked"] == 1 for row in rows if row["t"] == final_t)

    def test_padded_positions_never_traced(self, rng):
        sched = NoiseSchedule(horizon=60.0)
        rows = trace_forward(
            _seq_with_pad(),
            np.array([np.nan, np.nan, 0.3, -0.2, 0.1, -0.2]),
            sched, n_steps=5, rng=rng,
        )
        assert {row["position"] for row in rows} == {2, 3, 4, 5}

    def test_masking_is_monotone_along_path(self, rng):
        sched = NoiseSchedule(horizon=60.0)
        seq = _seq_with_pad()
        dev = np.array([np.nan, np.nan, 0.4, 0.0, -0.4, 0.2])
        rows = trace_forward(seq, dev, sched, n_steps=20, rng=rng)
        state: dict[int, int] = {}
        for row in sorted(rows, key=lambda r: (r["t"], r["position"])):
            pos = row["position"]
            assert row["masked"] >= state.get(pos, 0)
            state[pos] = row["masked"]

    def test_masking_times_nan_at_padding(self, rng):
        sched = NoiseSchedule(horizon=60.0)
        seq = _seq_with_pad()
        dev = np.array([np.nan, np.nan, 0.4, 0.0, -0.4, 0.2])
        times = masking_times(seq, dev, sched, n_steps=15, rng=rng)
        assert np.isnan(times[:2]).all()
        assert np.all(times[2:] <= 60.0) and np.all(times[2:] >= 0.0)

    def test_csv_round_trip(self, tmp_path, rng):
        sched = NoiseSchedule(horizon=60.0)
        seq = _seq_with_pad()
        dev = np.array([np.nan, np.nan, 0.3, -0.2, 0.1, -0.2])
        rows = trace_forward(seq, dev, sched, n_steps=4, rng=rng)
        path = tmp_path / "trace.csv"
        write_trace_csv(rows, path)
        with path.open() as handle:
            parsed = list(csv.DictReader(handle))
        assert len(parsed) == len(rows)
        assert set(parsed[0]) == {
            "t", "position", "item_id", "deviation", "cumulative_beta", "masked"
        }
