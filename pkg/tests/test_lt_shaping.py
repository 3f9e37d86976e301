"""Exponential profiles, long-tail subsampling, and rotations."""
import numpy as np
import pytest

from fltbench.datasets import class_counts, generate_synthetic
from fltbench.errors import CapacityError, ProfileTooSteepError
from fltbench.lt_shaping import (
    LtProfile,
    exponential_profile,
    profile_from_json,
    rotate_profile,
    shape_long_tailed,
)

# Oracle values: floor(5000 * 10^(-j/9)) per class, tail forced to 5000/10.
PROFILE_5000_10_IF10 = [5000, 3871, 2997, 2320, 1796, 1391, 1077, 834, 645, 500]


class TestExponentialProfile:
    def test_if_one_is_flat(self):
        profile = exponential_profile(5000, 10, 1.0)
        assert profile.counts.tolist() == [5000] * 10
        assert profile.class_order.tolist() == list(range(10))

    def test_if_100_endpoints(self):
        profile = exponential_profile(5000, 10, 100.0)
        assert profile.counts[0] == 5000
        assert profile.counts[-1] == 50

    def test_if_10_full_vector(self):
        profile = exponential_profile(5000, 10, 10.0)
        assert profile.counts.tolist() == PROFILE_5000_10_IF10

    def test_monotone_in_target(self):
        tails = []
        for target in (2.0, 5.0, 10.0, 50.0):
            profile = exponential_profile(5000, 10, target)
            assert profile.counts[0] == 5000
            tails.append(int(profile.counts[-1]))
        assert tails == sorted(tails, reverse=True)
        assert len(set(tails)) == len(tails)

    def test_counts_non_increasing(self):
        for target in (1.0, 3.0, 17.5, 80.0):
            profile = exponential_profile(2000, 7, target)
            assert (np.diff(profile.counts) <= 0).all()

    def test_precondition_violations(self):
        with pytest.raises(ValueError):
            exponential_profile(5000, 1, 10.0)
        with pytest.raises(ValueError):
            exponential_profile(5000, 10, 0.5)
        with pytest.raises(ValueError):
            exponential_profile(50, 10, 100.0)

    def test_unrealizable_ratio_is_too_steep(self):
        # round(10 / 1.05) = 10 collides with the head; integer resolution
        # cannot express a 5% tilt over 10 samples.
        with pytest.raises(ProfileTooSteepError):
            exponential_profile(10, 10, 1.05)

    def test_json_round_trip(self):
        profile = exponential_profile(300, 5, 4.0)
        back = profile_from_json(profile.to_json_dict())
        assert back.target_if == profile.target_if
        np.testing.assert_array_equal(back.counts, profile.counts)
        np.testing.assert_array_equal(back.class_order, profile.class_order)


class TestRotate:
    def test_offset_zero_is_identity(self):
        profile = exponential_profile(100, 4, 2.0)
        rotated = rotate_profile(profile, 0)
        np.testing.assert_array_equal(rotated.class_order, profile.class_order)

    def test_offset_moves_head(self):
        profile = exponential_profile(5000, 10, 10.0)
        rotated = rotate_profile(profile, 3)
        assert rotated.class_order[0] == 3
        np.testing.assert_array_equal(rotated.counts, profile.counts)

    def test_rotation_balance_lemma(self):
        # Summing all M rotations of one profile loads every class equally.
        profile = exponential_profile(5000, 10, 100.0)
        totals = np.zeros(10, dtype=np.int64)
        for offset in range(10):
            rotated = rotate_profile(profile, offset)
            totals[rotated.class_order] += rotated.counts
        assert len(set(totals.tolist())) == 1
        assert totals[0] == profile.counts.sum()

    def test_offset_bounds(self):
        profile = exponential_profile(100, 4, 2.0)
        for bad in (-1, 4):
            with pytest.raises(ValueError):
                rotate_profile(profile, bad)


class TestShapeLongTailed:
    def test_counts_match_profile_exactly(self, cifar_scale_ds):
        profile = exponential_profile(5000, 10, 50.0)
        shaped = shape_long_tailed(cifar_scale_ds, profile, seed=4)
        np.testing.assert_array_equal(class_counts(shaped), profile.counts)

    def test_measured_if_within_two_percent(self, cifar_scale_ds):
        for target in (10.0, 50.0, 100.0):
            profile = exponential_profile(5000, 10, target)
            shaped = shape_long_tailed(cifar_scale_ds, profile, seed=4)
            counts = class_counts(shaped)
            measured = counts.max() / counts[counts > 0].min()
            assert abs(measured - target) <= 0.02 * target

    def test_if_one_gives_uniform_subsample(self):
        ds = generate_synthetic(4, 50, 2, 0.5, seed=0)
        shaped = shape_long_tailed(ds, exponential_profile(30, 4, 1.0), seed=1)
        assert class_counts(shaped).tolist() == [30] * 4

    def test_same_seed_same_selection(self, balanced_ds):
        profile = exponential_profile(400, 10, 10.0)
        a = shape_long_tailed(balanced_ds, profile, seed=8)
        b = shape_long_tailed(balanced_ds, profile, seed=8)
        assert a.features.tobytes() == b.features.tobytes()

    def test_capacity_error_names_class(self):
        ds = generate_synthetic(3, 10, 2, 0.5, seed=0)
        profile = LtProfile(
            target_if=2.0,
            counts=np.array([20, 15, 10]),
            class_order=np.array([2, 1, 0]),
        )
        with pytest.raises(CapacityError, match="class 2"):
            shape_long_tailed(ds, profile, seed=0)

    def test_rotated_profile_moves_head_class(self, balanced_ds):
        profile = rotate_profile(exponential_profile(400, 10, 10.0), 3)
        shaped = shape_long_tailed(balanced_ds, profile, seed=2)
        counts = class_counts(shaped)
        assert counts[3] == 400
        assert counts.argmax() == 3
