"""Foundation types: seeded streams, schemas, shards, partitions."""

import numpy as np
import pytest

from privcollab import (
    AttributeSchema,
    DoctorShard,
    LabeledSample,
    Partition,
    PatientRecord,
    RngStream,
    as_generator,
    partition_dataset,
    validate_schema,
)


class TestRngStream:
    def test_same_seed_and_label_repeat(self):
        a = RngStream(7, "unit").generator().uniform(size=8)
        b = RngStream(7, "unit").generator().uniform(size=8)
        assert np.array_equal(a, b)

    def test_seed_and_label_both_matter(self):
        base = RngStream(7, "unit").generator().uniform(size=8)
        other_seed = RngStream(8, "unit").generator().uniform(size=8)
        other_label = RngStream(7, "unit2").generator().uniform(size=8)
        assert not np.array_equal(base, other_seed)
        assert not np.array_equal(base, other_label)

    def test_child_paths_compose(self):
        root = RngStream(3, "root")
        joined = root.child("rep", 4).generator().uniform(size=4)
        stepwise = root.child("rep").child(4).generator().uniform(size=4)
        assert np.array_equal(joined, stepwise)

    def test_children_are_distinct(self):
        root = RngStream(3, "root")
        a = root.child("rep", 0).generator().uniform(size=4)
        b = root.child("rep", 1).generator().uniform(size=4)
        assert not np.array_equal(a, b)

    def test_as_generator_passthrough_and_wrap(self):
        gen = np.random.default_rng(0)
        assert as_generator(gen) is gen
        stream = RngStream(11, "wrap")
        assert np.array_equal(
            as_generator(stream).uniform(size=3),
            stream.generator().uniform(size=3),
        )


class TestSchemaAndRecords:
    def test_default_ranges_are_unit(self):
        schema = AttributeSchema(qia_dims=2, ca_dims=3)
        assert schema.ranges == ((0.0, 1.0), (0.0, 1.0))
        assert schema.input_dims == 5

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError):
            AttributeSchema(qia_dims=1, ranges=((1.0, 1.0),))

    def test_needs_one_quasi_identifier(self):
        with pytest.raises(ValueError):
            AttributeSchema(qia_dims=0)

    def test_record_input_vector_concatenates(self):
        rec = PatientRecord(qia=[0.2], ca=[0.5, 0.7])
        assert np.array_equal(rec.input_vector, [0.2, 0.5, 0.7])

    def test_validate_schema_checks_dims_and_ranges(self):
        schema = AttributeSchema(qia_dims=1, ca_dims=2, ranges=((0.0, 2.0),))
        assert validate_schema(PatientRecord(qia=[1.5], ca=[9.0, -3.0]), schema)
        assert not validate_schema(PatientRecord(qia=[2.5], ca=[0.0, 0.0]), schema)
        assert not validate_schema(PatientRecord(qia=[0.5], ca=[0.0]), schema)


class TestDoctorShard:
    def test_basic_shape_and_defaults(self):
        shard = DoctorShard(np.zeros((4, 3)), np.arange(4.0))
        assert shard.size == 4
        assert shard.dim == 3
        assert shard.assessed_size == 4
        assert shard.kernel == "nwk_gaussian"

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            DoctorShard(np.zeros((4, 2)), np.zeros(3))

    def test_unknown_kernel_rejected(self):
        with pytest.raises(ValueError):
            DoctorShard(np.zeros((4, 2)), np.zeros(4), kernel="cubic-spline")

    def test_knn_shard_uses_neighbors_not_bandwidth(self):
        shard = DoctorShard(np.zeros((5, 2)), np.zeros(5), kernel="knn", neighbors=3)
        assert shard.bandwidth is None
        assert shard.neighbors == 3
        with pytest.raises(ValueError):
            DoctorShard(np.zeros((5, 2)), np.zeros(5), kernel="knn", neighbors=6)
        with pytest.raises(ValueError):
            DoctorShard(np.zeros((5, 2)), np.zeros(5), kernel="knn", neighbors=0)

    def test_from_samples_round_trip(self):
        samples = [LabeledSample([0.1, 0.2], 1.0), LabeledSample([0.3, 0.4], 2.0)]
        shard = DoctorShard.from_samples(samples)
        assert np.allclose(shard.inputs, [[0.1, 0.2], [0.3, 0.4]])
        assert np.allclose(shard.outputs, [1.0, 2.0])


class TestPartition:
    def _shards(self, sizes, dim=2):
        return tuple(DoctorShard(np.random.default_rng(i).uniform(size=(s, dim)),
                                 np.zeros(s)) for i, s in enumerate(sizes))

    def test_needs_two_doctors(self):
        with pytest.raises(ValueError):
            Partition(self._shards([5]))

    def test_dimension_mismatch_rejected(self):
        a = DoctorShard(np.zeros((3, 2)), np.zeros(3))
        b = DoctorShard(np.zeros((3, 4)), np.zeros(3))
        with pytest.raises(ValueError):
            Partition((a, b))

    def test_totals_and_assessed_sizes(self):
        part = Partition(self._shards([3, 5, 7]))
        assert part.m == 3
        assert part.total == 15
        assert part.assessed_total == 15
        assert np.array_equal(part.assessed_sizes, [3, 5, 7])

    def test_replace_shard_touches_one_slot(self):
        part = Partition(self._shards([3, 5, 7]))
        new = DoctorShard(np.ones((4, 2)), np.ones(4))
        swapped = part.replace_shard(1, new)
        assert swapped.shards[0] is part.shards[0]
        assert swapped.shards[2] is part.shards[2]
        assert swapped.shards[1].size == 4
        assert part.shards[1].size == 5


class TestPartitionDataset:
    def test_sizes_band_and_total(self):
        rng = RngStream(0, "split")
        X = np.random.default_rng(1).uniform(size=(1000, 3))
        y = np.zeros(1000)
        part = partition_dataset((X, y), 10, rng)
        sizes = [s.size for s in part.shards]
        assert sum(sizes) == 1000
        assert part.m == 10
        # all but the absorbing last shard obey the floor(U[0.8 n/m, n/m]) band
        for s in sizes[:-1]:
            assert 80 <= s <= 100

    def test_deterministic_under_stream(self):
        X = np.random.default_rng(2).uniform(size=(300, 2))
        y = np.arange(300.0)
        a = partition_dataset((X, y), 5, RngStream(4, "p"))
        b = partition_dataset((X, y), 5, RngStream(4, "p"))
        for sa, sb in zip(a.shards, b.shards):
            assert np.array_equal(sa.inputs, sb.inputs)
            assert np.array_equal(sa.outputs, sb.outputs)

    def test_shards_partition_the_samples(self):
        X = np.arange(60, dtype=float)[:, None]
        y = np.arange(60.0)
        part = partition_dataset((X, y), 4, RngStream(9, "p"))
        seen = np.sort(np.concatenate([s.outputs for s in part.shards]))
        assert np.array_equal(seen, y)

    def test_rejects_degenerate_splits(self):
        X = np.zeros((2, 1))
        with pytest.raises(ValueError):
            partition_dataset((X, np.zeros(2)), 2, RngStream(0, "p"))
        X = np.zeros((50, 1))
        with pytest.raises(ValueError):
            partition_dataset((X, np.zeros(50)), 1, RngStream(0, "p"))
