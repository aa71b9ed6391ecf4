import numpy as np
import pytest

from tallpack import (
    Scorer,
    SyntheticSpec,
    TensorMap,
    build_tall_mask,
    compute_task_vector,
    gen_disjoint_tasks,
    gen_overlapping_tasks,
    l1_scorer,
    normalized_accuracy,
    reconstruct,
    sum_task_vectors,
    support_indicator,
)
from tallpack.errors import IndivisibleP, LengthMismatch, ZeroDenominator

from conftest import tmap


class TestDisjointGeneration:
    def test_supports_partition_index_space(self):
        spec = SyntheticSpec(total_params=6, num_tasks=3, seed=0)
        _, _, supports = gen_disjoint_tasks(spec)
        assert all(len(s) == 2 for s in supports)
        combined = np.sort(np.concatenate(supports))
        assert combined.tolist() == [0, 1, 2, 3, 4, 5]

    def test_single_task_covers_everything(self):
        spec = SyntheticSpec(total_params=8, num_tasks=1, seed=0)
        _, _, supports = gen_disjoint_tasks(spec)
        assert supports[0].tolist() == list(range(8))

    def test_same_seed_reproduces_everything(self):
        spec = SyntheticSpec(total_params=64, num_tasks=4, seed=42)
        pre_a, fts_a, sup_a = gen_disjoint_tasks(spec)
        pre_b, fts_b, sup_b = gen_disjoint_tasks(spec)
        assert pre_a.equal(pre_b)
        assert all(a.equal(b) for a, b in zip(fts_a, fts_b))
        assert all(np.array_equal(a, b) for a, b in zip(sup_a, sup_b))

    def test_different_seed_differs(self):
        base = SyntheticSpec(total_params=64, num_tasks=4, seed=1)
        other = SyntheticSpec(total_params=64, num_tasks=4, seed=2)
        assert not gen_disjoint_tasks(base)[0].equal(gen_disjoint_tasks(other)[0])

    def test_indivisible_p_rejected(self):
        with pytest.raises(IndivisibleP):
            gen_disjoint_tasks(SyntheticSpec(total_params=10, num_tasks=3))

    def test_checkpoints_differ_exactly_on_support(self):
        spec = SyntheticSpec(total_params=40, num_tasks=4, seed=7)
        pre, fts, supports = gen_disjoint_tasks(spec)
        base = pre.concat()
        for ft, support in zip(fts, supports):
            flat = ft.concat()
            changed = np.nonzero(flat != base)[0]
            assert np.array_equal(changed, support)

    def test_deltas_respect_rejection_bound(self):
        spec = SyntheticSpec(total_params=400, num_tasks=4, seed=3, value_scale=1.0)
        pre, fts, supports = gen_disjoint_tasks(spec)
        base = pre.concat()
        for ft, support in zip(fts, supports):
            deltas = ft.concat()[support] - base[support]
            assert np.all(np.abs(deltas) >= 1e-3 * spec.value_scale)
            assert np.all(np.abs(deltas) <= spec.value_scale)

    def test_layered_variant_exercises_key_order(self):
        spec = SyntheticSpec(total_params=30, num_tasks=3, seed=1, num_tensors=4)
        pre, fts, supports = gen_disjoint_tasks(spec)
        assert pre.keys() == ("block00.w", "block01.w", "block02.w", "block03.w")
        vectors = [compute_task_vector(ft, pre) for ft in fts]
        mtl = sum_task_vectors(vectors)
        for vec, ft, support in zip(vectors, fts, supports):
            mask = build_tall_mask(vec, mtl, 0.4)
            assert mask == support_indicator(support, pre.shapes())
            assert reconstruct(pre, mtl, mask).equal(ft)

    def test_non_unit_value_scale_still_recovers_exactly(self):
        spec = SyntheticSpec(total_params=60, num_tasks=3, seed=2, value_scale=3.0)
        pre, fts, supports = gen_disjoint_tasks(spec)
        vectors = [compute_task_vector(ft, pre) for ft in fts]
        mtl = sum_task_vectors(vectors)
        for vec, ft, support in zip(vectors, fts, supports):
            mask = build_tall_mask(vec, mtl, 0.5)
            assert mask == support_indicator(support, pre.shapes())
            assert reconstruct(pre, mtl, mask).equal(ft)


class TestOverlappingGeneration:
    def test_support_sizes(self):
        spec = SyntheticSpec(
            total_params=100, num_tasks=8, seed=0, mode="overlapping", overlap_fraction=0.3
        )
        _, _, supports = gen_overlapping_tasks(spec)
        assert all(len(s) == 30 for s in supports)

    def test_full_fraction_covers_everything(self):
        spec = SyntheticSpec(
            total_params=16, num_tasks=2, seed=0, mode="overlapping", overlap_fraction=1.0
        )
        _, _, supports = gen_overlapping_tasks(spec)
        assert all(s.tolist() == list(range(16)) for s in supports)

    def test_zero_fraction_gives_identity_checkpoints(self):
        spec = SyntheticSpec(
            total_params=16, num_tasks=2, seed=0, mode="overlapping", overlap_fraction=0.0
        )
        pre, fts, supports = gen_overlapping_tasks(spec)
        assert all(s.size == 0 for s in supports)
        assert all(ft.equal(pre) for ft in fts)

    def test_mode_mismatch_rejected(self):
        with pytest.raises(ValueError):
            gen_overlapping_tasks(SyntheticSpec(total_params=8, num_tasks=2, mode="disjoint"))
        with pytest.raises(ValueError):
            gen_disjoint_tasks(
                SyntheticSpec(total_params=8, num_tasks=2, mode="overlapping")
            )


class TestSpecValidation:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            SyntheticSpec(total_params=8, num_tasks=2, mode="chaotic")

    def test_bad_overlap_fraction(self):
        with pytest.raises(ValueError):
            SyntheticSpec(total_params=8, num_tasks=2, overlap_fraction=1.5)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            SyntheticSpec(total_params=8, num_tasks=2, value_scale=0.0)


class TestNormalizedAccuracy:
    def test_mean_of_ratios(self):
        assert normalized_accuracy([45, 80], [90, 80]) == pytest.approx(75.0)

    def test_identity_is_hundred(self):
        assert normalized_accuracy([63.5, 70.0], [63.5, 70.0]) == pytest.approx(100.0)

    def test_values_above_hundred_are_legal(self):
        assert normalized_accuracy([100], [80]) == pytest.approx(125.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            normalized_accuracy([1.0], [1.0, 2.0])
        with pytest.raises(LengthMismatch):
            normalized_accuracy([], [])

    def test_zero_denominator(self):
        with pytest.raises(ZeroDenominator):
            normalized_accuracy([50.0], [0.0])


class TestL1Scorer:
    def test_perfect_match_scores_zero(self):
        target = tmap(w=[1.0, -2.0])
        assert l1_scorer(target)(target) == 0.0

    def test_unit_offset_scores_minus_one(self):
        target = tmap(w=[1.0, 0.0])
        candidate = tmap(w=[2.0, 0.0])
        assert l1_scorer(target)(candidate) == -1.0

    def test_summation_order_stability(self):
        rng = np.random.default_rng(9)
        values = rng.uniform(-1, 1, 256).astype(np.float32)
        target = tmap(w=np.zeros(256, dtype=np.float32))
        scorer = l1_scorer(target)
        forward = scorer(tmap(w=values))
        reversed_ = scorer(tmap(w=values[::-1].copy()))
        assert abs(forward - reversed_) <= 1e-6

    def test_scorer_dataclass_is_callable(self):
        s = Scorer(name="const", fn=lambda _: 7.0)
        assert s(tmap(w=[0.0])) == 7.0
        assert not s.serial
