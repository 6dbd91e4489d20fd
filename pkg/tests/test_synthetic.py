import numpy as np

from maskdiffrec.corpus import split_chronological
from maskdiffrec.synthetic import clustered_corpus, two_block_corpus


class TestTwoBlockCorpus:
    def test_shape(self, block_log):
        assert block_log.n_users == 50 and block_log.n_items == 30
        assert len(block_log) == 1000
        counts = np.bincount(block_log.users, minlength=50)
        assert np.all(counts == 20)

    def test_users_stay_in_their_block(self, block_log):
        for user in range(50):
            items = block_log.items[block_log.users == user]
            block = 0 if user < 25 else 1
            assert np.all((items >= block * 15) & (items < (block + 1) * 15))

    def test_heldout_items_fresh_but_supported(self, block_log):
        split = split_chronological(block_log)
        train_sets = split.train.user_item_sets()
        train_support = set(split.train.items.tolist())
        for piece in (split.validation, split.test):
            for user, item in zip(piece.users, piece.items):
                assert int(item) not in train_sets[user]
                assert int(item) in train_support

    def test_popularity_varies_within_sequences(self, block_log):
        split = split_chronological(block_log)
        counts = np.bincount(split.train.items, minlength=30)
        assert counts.min() > 0
        assert counts.max() > 3 * counts.min()

    def test_deterministic(self):
        a, b = two_block_corpus(seed=3), two_block_corpus(seed=3)
        assert np.array_equal(a.items, b.items)


class TestClusteredCorpus:
    def test_structure(self):
        log = clustered_corpus(n_users=40, n_items=80, n_clusters=4,
                               min_events=12, max_events=20, seed=1)
        assert log.n_users == 40 and log.n_items == 80
        split = split_chronological(log)
        train_sets = split.train.user_item_sets()
        # the last four events per user are fresh in-cluster items; with at
        # least 12 events the final two always land in the test split
        cluster_size = 20
        for user in range(40):
            rows = np.flatnonzero(split.test.users == user)
            assert rows.size >= 1
            cluster = user % 4
            for item in split.test.items[rows][-2:]:
                assert cluster * cluster_size <= item < (cluster + 1) * cluster_size
                assert int(item) not in train_sets[user]

    def test_divisibility_validated(self):
        import pytest

        with pytest.raises(ValueError):
            clustered_corpus(n_items=10, n_clusters=3)
