"""Group sharding, fixed-order reduction, and the dispatch traffic model."""

import numpy as np
import pytest

from moelab.config import TokenBatch
from moelab.parallel import (
    DTYPE_BYTES,
    all_reduce_mean,
    ep_traffic,
    group_rows,
    shard_batch,
)


class TestShardBatch:
    def test_single_group_identity(self):
        emb = np.arange(12.0).reshape(4, 3)
        shards = shard_batch(TokenBatch(emb), 1)
        assert len(shards) == 1
        assert shards[0].group_index == 0
        assert np.array_equal(shards[0].batch.embeddings, emb)

    def test_contiguous_split(self):
        emb = np.arange(16.0).reshape(8, 2)
        shards = shard_batch(TokenBatch(emb), 2)
        assert np.array_equal(shards[0].batch.embeddings, emb[0:4])
        assert np.array_equal(shards[1].batch.embeddings, emb[4:8])
        assert [s.group_index for s in shards] == [0, 1]

    def test_indivisible_batch_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            shard_batch(TokenBatch(np.zeros((7, 2))), 2)

    def test_bad_group_count(self):
        with pytest.raises(ValueError, match="num_groups"):
            shard_batch(TokenBatch(np.zeros((4, 2))), 0)


class TestGroupRows:
    def test_matches_shard_slices(self):
        emb = np.random.default_rng(0).normal(size=(12, 2))
        shards = shard_batch(TokenBatch(emb), 3)
        for g in range(3):
            rows = group_rows(12, 3, g)
            assert np.array_equal(emb[rows], shards[g].batch.embeddings)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            group_rows(10, 3, 0)


class TestAllReduceMean:
    def test_identical_vectors(self):
        v = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(all_reduce_mean([v, v, v]), v)

    def test_symmetry(self):
        out = all_reduce_mean([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert np.array_equal(out, [0.5, 0.5])

    def test_matches_serial_sum_oracle_bitwise(self):
        rng = np.random.default_rng(17)
        vecs = [rng.normal(size=8) for _ in range(4)]
        out = all_reduce_mean(vecs)
        total = vecs[0].copy()
        for v in vecs[1:]:
            total = total + v
        assert np.array_equal(out, total / 4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="one shape"):
            all_reduce_mean([np.zeros(3), np.zeros(4)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="not be empty"):
            all_reduce_mean([])

    def test_inputs_not_mutated(self):
        a = np.array([2.0, 4.0])
        b = np.array([0.0, 0.0])
        all_reduce_mean([a, b])
        assert np.array_equal(a, [2.0, 4.0])


class TestEpTraffic:
    def test_reference_payload(self):
        # Micro batch 8, one expert per token, hidden 1536, 2-byte elements.
        assert ep_traffic(8, 1, 1536, 2) == 24576

    def test_unit_case(self):
        assert ep_traffic(1, 1, 1, 4) == 4

    def test_top_k_doubles_traffic(self):
        assert ep_traffic(8, 2, 1536, 2) == 2 * ep_traffic(8, 1, 1536, 2)

    def test_linearity_in_each_argument(self):
        base = ep_traffic(4, 2, 128, 2)
        assert ep_traffic(8, 2, 128, 2) == 2 * base
        assert ep_traffic(4, 4, 128, 2) == 2 * base
        assert ep_traffic(4, 2, 256, 2) == 2 * base
        assert ep_traffic(4, 2, 128, 4) == 2 * base

    def test_strict_monotonicity(self):
        assert ep_traffic(5, 1, 64, 2) > ep_traffic(4, 1, 64, 2)
        assert ep_traffic(4, 2, 64, 2) > ep_traffic(4, 1, 64, 2)
        assert ep_traffic(4, 1, 65, 2) > ep_traffic(4, 1, 64, 2)
        assert ep_traffic(4, 1, 64, 4) > ep_traffic(4, 1, 64, 2)

    @pytest.mark.parametrize("bad", [0, -1, 1.5])
    def test_positive_integer_arguments_enforced(self, bad):
        with pytest.raises(ValueError, match="micro_batch"):
            ep_traffic(bad, 1, 64, 2)
        with pytest.raises(ValueError, match="top_k"):
            ep_traffic(4, bad, 64, 2)
        with pytest.raises(ValueError, match="hidden_size"):
            ep_traffic(4, 1, bad, 2)
        with pytest.raises(ValueError, match="bytes_per_element"):
            ep_traffic(4, 1, 64, bad)

    def test_dtype_table(self):
        assert DTYPE_BYTES["fp16"] == 2
        assert DTYPE_BYTES["bf16"] == 2
        assert DTYPE_BYTES["fp32"] == 4
        assert DTYPE_BYTES["fp64"] == 8
