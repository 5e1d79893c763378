import numpy as np
import pytest

from meanfield_tools.constants import MAX_SEED
from meanfield_tools.exceptions import InvalidInputError
from meanfield_tools.rng import StreamKind, replica_streams, stream, validate_seed


class TestSeeds:
    def test_validate_seed_accepts_range_ends(self):
        assert validate_seed(0) == 0
        assert validate_seed(MAX_SEED) == MAX_SEED

    @pytest.mark.parametrize("seed", [-1, MAX_SEED + 1, 1.5, True, "7"])
    def test_validate_seed_rejects(self, seed: object):
        with pytest.raises(InvalidInputError):
            validate_seed(seed)  # type: ignore[arg-type]


class TestStreams:
    def test_same_address_same_draws(self):
        first = stream(42, StreamKind.INIT, 3, 100).standard_normal(8)
        second = stream(42, StreamKind.INIT, 3, 100).standard_normal(8)
        np.testing.assert_array_equal(first, second)

    def test_kinds_are_independent(self):
        init = stream(42, StreamKind.INIT, 0, 100).standard_normal(8)
        data = stream(42, StreamKind.DATA, 0, 100).standard_normal(8)
        assert not np.array_equal(init, data)

    def test_master_seed_changes_draws(self):
        a = stream(1, StreamKind.SPDE, 2).uniform(size=4)
        b = stream(2, StreamKind.SPDE, 2).uniform(size=4)
        assert not np.array_equal(a, b)

    def test_replica_streams_do_not_depend_on_other_cells(self):
        """Adding replicas or widths never changes an existing cell's draws."""
        init_a, data_a = replica_streams(7, 1, 50)
        replica_streams(7, 2, 50)
        replica_streams(7, 1, 200)
        init_b, data_b = replica_streams(7, 1, 50)
        np.testing.assert_array_equal(init_a.uniform(size=5), init_b.uniform(size=5))
        np.testing.assert_array_equal(data_a.integers(0, 3, 5), data_b.integers(0, 3, 5))

    def test_replicas_differ(self):
        first, _ = replica_streams(7, 0, 50)
        second, _ = replica_streams(7, 1, 50)
        assert not np.array_equal(first.uniform(size=5), second.uniform(size=5))

    def test_stream_validates_seed(self):
        with pytest.raises(InvalidInputError):
            stream(-5, StreamKind.DATA)
