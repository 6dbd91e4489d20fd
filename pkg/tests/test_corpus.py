import numpy as np
import pytest

from maskdiffrec.corpus import (
    PAD,
    EmptyDatasetError,
    InteractionLog,
    ParseError,
    UserSequence,
    build_sequences,
    load_interactions,
    popularity,
    popularity_deviation,
    split_chronological,
    write_interactions,
)


def _write(tmp_path, lines, name="events.txt"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _log(users, items, timestamps=None, n_users=None, n_items=None):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    timestamps = (
        np.arange(len(users), dtype=np.int64)
        if timestamps is None
        else np.asarray(timestamps, dtype=np.int64)
    )
    return InteractionLog(
        users=users,
        items=items,
        ratings=np.full(len(users), 5.0),
        timestamps=timestamps,
        n_users=n_users or int(users.max()) + 1,
        n_items=n_items or int(items.max()) + 1,
    )


class TestLoadInteractions:
    def test_single_qualifying_row(self, tmp_path):
        path = _write(tmp_path, ["1\t7\t5\t100"])
        log = load_interactions(path, threshold=3.0)
        assert len(log) == 1
        assert log.n_users == 1 and log.n_items == 1

    def test_threshold_keeps_ratings_of_three_and_above(self, tmp_path):
        lines = [f"1,{i},{r},{i}" for i, r in enumerate([1, 2, 3, 4, 5])]
        log = load_interactions(_write(tmp_path, lines), threshold=3.0)
        assert len(log) == 3
        assert np.all(log.ratings >= 3.0)

    def test_malformed_row_reports_line_number(self, tmp_path):
        path = _write(tmp_path, ["1\t2\t5\t0", "oops\tnope"])
        with pytest.raises(ParseError, match="line 2"):
            load_interactions(path)

    def test_non_numeric_field_reports_line_number(self, tmp_path):
        path = _write(tmp_path, ["1\t2\tfive\t0"])
        with pytest.raises(ParseError, match="line 1"):
            load_interactions(path)

    def test_empty_result_raises(self, tmp_path):
        path = _write(tmp_path, ["1\t2\t1\t0", "1\t3\t2\t1"])
        with pytest.raises(EmptyDatasetError):
            load_interactions(path, threshold=3.0)

    def test_dense_reindex_by_first_appearance(self, tmp_path):
        path = _write(tmp_path, ["42\t900\t5\t0", "7\t900\t5\t1", "42\t800\t5\t2"])
        log = load_interactions(path)
        assert log.users.tolist() == [0, 1, 0]
        assert log.items.tolist() == [0, 0, 1]

    def test_reingestion_is_deterministic(self, tmp_path):
        lines = [f"{u}\t{v}\t5\t{t}" for t, (u, v) in
                 enumerate([(3, 9), (1, 4), (3, 4), (2, 9), (1, 1)])]
        path = _write(tmp_path, lines)
        first = load_interactions(path)
        second = load_interactions(path)
        assert np.array_equal(first.users, second.users)
        assert np.array_equal(first.items, second.items)

    def test_comma_and_tab_delimiters(self, tmp_path):
        log = load_interactions(_write(tmp_path, ["1,2,5,0", "1\t3\t5\t1"]))
        assert len(log) == 2

    def test_round_trip_through_writer(self, tmp_path):
        # ids already in first-appearance order survive a write/load cycle
        log = _log([0, 0, 1, 1], [0, 1, 0, 2], timestamps=[4, 5, 6, 7])
        path = tmp_path / "dump.txt"
        write_interactions(log, path)
        again = load_interactions(path, threshold=0.0)
        assert np.array_equal(again.users, log.users)
        assert np.array_equal(again.items, log.items)
        assert np.array_equal(again.timestamps, log.timestamps)


class TestSplitChronological:
    def test_ten_events_split_8_1_1(self):
        log = _log([0] * 10, range(10))
        split = split_chronological(log)
        assert (len(split.train), len(split.validation), len(split.test)) == (8, 1, 1)

    def test_two_events_go_entirely_to_train(self):
        log = _log([0, 0], [1, 2])
        split = split_chronological(log)
        assert (len(split.train), len(split.validation), len(split.test)) == (2, 0, 0)

    def test_twenty_events_split_16_2_2(self):
        log = _log([0] * 20, range(20))
        split = split_chronological(log)
        assert (len(split.train), len(split.validation), len(split.test)) == (16, 2, 2)

    def test_chronological_order_with_stable_ties(self):
        # equal timestamps keep file order, so the last-listed event is test
        log = _log([0] * 10, range(10, 20), timestamps=[5] * 10)
        split = split_chronological(log)
        assert split.train.items.tolist() == list(range(10, 18))
        assert split.validation.items.tolist() == [18]
        assert split.test.items.tolist() == [19]

    def test_five_events_split_4_1_0(self):
        split = split_chronological(_log([0] * 5, range(5)))
        assert (len(split.train), len(split.validation), len(split.test)) == (4, 1, 0)

    def test_positive_ratios_required(self):
        with pytest.raises(ValueError):
            split_chronological(_log([0], [0]), ratios=(8, 0, 2))

    def test_splits_partition_each_user(self, block_log):
        split = split_chronological(block_log)
        whole = set(map(tuple, np.column_stack([block_log.users, block_log.timestamps])))
        parts = []
        for piece in (split.train, split.validation, split.test):
            parts.append(set(map(tuple, np.column_stack([piece.users, piece.timestamps]))))
        assert parts[0] | parts[1] | parts[2] == whole
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])

    def test_eval_users_appear_in_train(self, block_split):
        train_users = set(block_split.train.users.tolist())
        assert set(block_split.validation.users.tolist()) <= train_users
        assert set(block_split.test.users.tolist()) <= train_users


class TestBuildSequences:
    def test_truncates_to_most_recent(self):
        log = _log([0] * 25, range(25))
        (seq,) = build_sequences(log, 20)
        assert seq.items.tolist() == list(range(5, 25))
        assert not seq.pad_mask.any()

    def test_left_pads_short_history(self):
        log = _log([0] * 5, [3, 1, 4, 1, 5])
        (seq,) = build_sequences(log, 20)
        assert seq.items[:15].tolist() == [PAD] * 15
        assert seq.items[15:].tolist() == [3, 1, 4, 1, 5]
        assert seq.pad_mask[:15].all() and not seq.pad_mask[15:].any()

    def test_oldest_first_ordering(self):
        log = _log([0, 0, 0], [7, 8, 9], timestamps=[30, 10, 20])
        (seq,) = build_sequences(log, 3)
        assert seq.items.tolist() == [8, 9, 7]

    def test_user_without_train_events_is_excluded(self):
        log = _log([0, 2], [1, 1], n_users=3)
        seqs = build_sequences(log, 4)
        assert sorted(s.user_id for s in seqs) == [0, 2]

    def test_length_validation(self):
        with pytest.raises(ValueError):
            build_sequences(_log([0], [0]), 0)


class TestPopularity:
    def test_normalized_by_max_count(self):
        log = _log([0] * 15, [0] * 10 + [1] * 5)
        table = popularity(log)
        assert table[0] == 1.0
        assert table[1] == 0.5

    def test_equal_counts_all_one(self):
        log = _log([0] * 4, [0, 1, 2, 3])
        assert popularity(log).pop.tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_single_item(self):
        log = _log([0], [0])
        assert popularity(log)[0] == 1.0

    def test_empty_log_rejected(self):
        log = _log([0], [0]).subset(np.array([], dtype=np.int64))
        with pytest.raises(EmptyDatasetError):
            popularity(log)


class TestPopularityDeviation:
    def _seq(self, items, pad=0):
        items = [PAD] * pad + list(items)
        mask = np.zeros(len(items), dtype=bool)
        mask[:pad] = True
        return UserSequence(user_id=0, items=np.asarray(items), pad_mask=mask)

    def test_hand_computed_offsets(self):
        table = popularity(_log([0] * 8, [0] * 4 + [1] * 2 + [2, 3]))
        assert table.pop.tolist() == [1.0, 0.5, 0.25, 0.25]
        dev = popularity_deviation(self._seq([0, 1, 2, 3]), table)
        np.testing.assert_allclose(dev, [0.5, 0.0, -0.25, -0.25])

    def test_uniform_popularity_gives_zeros(self):
        table = popularity(_log([0] * 3, [0, 1, 2]))
        dev = popularity_deviation(self._seq([0, 1, 2]), table)
        np.testing.assert_allclose(dev, 0.0)

    def test_mean_ignores_padding_and_sums_to_zero(self):
        table = popularity(_log([0] * 8, [0] * 4 + [1] * 2 + [2, 3]))
        dev = popularity_deviation(self._seq([0, 1, 2, 3], pad=3), table)
        assert np.isnan(dev[:3]).all()
        assert abs(np.nansum(dev)) < 1e-9

    def test_sum_zero_for_random_sequences(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(1, 50, size=30)
        log = _log([0] * int(counts.sum()), np.repeat(np.arange(30), counts))
        table = popularity(log)
        for _ in range(50):
            items = rng.integers(0, 30, size=12)
            dev = popularity_deviation(self._seq(items, pad=int(rng.integers(0, 5))), table)
            assert abs(np.nansum(dev)) < 1e-9

    def test_all_padding_rejected(self):
        table = popularity(_log([0], [0]))
        with pytest.raises(ValueError):
            popularity_deviation(self._seq([], pad=4), table)
