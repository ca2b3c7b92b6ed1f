import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomvox.phantom import PhantomSpec, synth_cohort
from anomvox.sampling import (
    BalanceError,
    PatchPair,
    SamplingError,
    bootstrap_split,
    build_similar_pairs,
    eligible_patch_centers,
    extract_axial_slices,
    extract_patches,
    patch_at,
    slice_band,
)
from anomvox.volume import BrainMask, SubjectMeta, Volume, compute_brain_mask


def make_volume(data, subject_id="s0"):
    return Volume(subject_id=subject_id, voxel_size_mm=(1.5, 1.5, 1.5), data=data)


@pytest.fixture(scope="module")
def phantom_pair():
    spec = PhantomSpec(n_controls=2, n_patients=0, dims=(20, 32, 32), lesion_radius=2.0)
    vols, _, _ = synth_cohort(spec, seed=5)
    return vols


class TestSliceBand:
    def test_canonical_band(self):
        assert list(slice_band(121, 40)) == list(range(40, 80))

    def test_full_depth_identity(self):
        assert list(slice_band(7, 7)) == list(range(7))

    def test_too_deep_rejected(self):
        with pytest.raises(SamplingError):
            slice_band(10, 11)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 200), st.data())
    def test_band_centered_within_one(self, depth, data):
        count = data.draw(st.integers(1, depth))
        band = slice_band(depth, count)
        lead = band.start
        trail = depth - band.stop
        assert abs(lead - trail) <= 1
        assert len(band) == count

    def test_dataset_arithmetic_matches_published_sizes(self):
        # 41 training subjects x 40 axial slices and 40 x 15000 patches.
        assert 41 * 40 == 1640
        assert 40 * 15_000 == 600_000


class TestExtractSlices:
    def test_slices_are_views_of_volume(self, phantom_pair):
        vol = phantom_pair[0]
        samples = extract_axial_slices(vol, count=8)
        assert len(samples) == 8
        zs = [s.slice_index for s in samples]
        assert zs == sorted(zs)
        for s in samples:
            assert np.array_equal(s.pixels, vol.data[:, s.slice_index])


class TestExtractPatches:
    def test_single_eligible_center(self):
        data = np.zeros((2, 3, 17, 17), dtype=np.float32)
        data[:, :, 1:16, 1:16] = 0.5  # 15x15 block in-plane
        mask = BrainMask(mask=(data > 0).any(axis=0))
        vol = make_volume(data)
        patches = extract_patches(vol, mask, count=1, seed=0)
        assert patches[0].center == (0, 8, 8) or patches[0].center[1:] == (8, 8)

    def test_no_eligible_center(self):
        data = np.zeros((2, 2, 8, 8), dtype=np.float32)
        data[:, :, 2:5, 2:5] = 0.5
        vol = make_volume(data)
        with pytest.raises(SamplingError, match="eligible"):
            extract_patches(vol, compute_brain_mask(vol), count=1)

    def test_patch_pixels_match_recorded_center(self, phantom_pair):
        vol = phantom_pair[0]
        mask = compute_brain_mask(vol)
        for patch in extract_patches(vol, mask, count=50, seed=3):
            z, y, x = patch.center
            resliced = vol.data[:, z, y - 7 : y + 8, x - 7 : x + 8]
            assert np.array_equal(patch.pixels, resliced)

    def test_requested_count_honored(self, phantom_pair):
        vol = phantom_pair[0]
        mask = compute_brain_mask(vol)
        assert len(extract_patches(vol, mask, count=200, seed=0)) == 200

    def test_deterministic(self, phantom_pair):
        vol = phantom_pair[0]
        mask = compute_brain_mask(vol)
        a = extract_patches(vol, mask, count=20, seed=9)
        b = extract_patches(vol, mask, count=20, seed=9)
        assert [p.center for p in a] == [p.center for p in b]

    def test_centers_inside_eroded_mask(self, phantom_pair):
        vol = phantom_pair[0]
        mask = compute_brain_mask(vol)
        eligible = eligible_patch_centers(mask)
        for p in extract_patches(vol, mask, count=100, seed=1):
            assert eligible[p.center]


class TestSimilarPairs:
    def test_two_subjects_shared_center(self, phantom_pair):
        va, vb = phantom_pair
        mask = compute_brain_mask(va)
        patches = {va.subject_id: extract_patches(va, mask, count=1, seed=0)}
        pairs = build_similar_pairs(
            patches, {va.subject_id: va, vb.subject_id: vb}, seed=0
        )
        assert len(pairs) == 1
        assert pairs[0].right.subject_id == vb.subject_id
        assert pairs[0].left.center == pairs[0].right.center

    def test_invariants_on_all_pairs(self, phantom_pair):
        va, vb = phantom_pair
        mask = compute_brain_mask(va)
        patches = {
            v.subject_id: extract_patches(v, mask, count=30, seed=i)
            for i, v in enumerate(phantom_pair)
        }
        volumes = {v.subject_id: v for v in phantom_pair}
        pairs = build_similar_pairs(patches, volumes, seed=4)
        assert len(pairs) == 60
        for pair in pairs:
            assert pair.left.center == pair.right.center
            assert pair.left.subject_id != pair.right.subject_id

    def test_deterministic(self, phantom_pair):
        va, vb = phantom_pair
        mask = compute_brain_mask(va)
        patches = {
            v.subject_id: extract_patches(v, mask, count=10, seed=i)
            for i, v in enumerate(phantom_pair)
        }
        volumes = {v.subject_id: v for v in phantom_pair}
        a = build_similar_pairs(patches, volumes, seed=11)
        b = build_similar_pairs(patches, volumes, seed=11)
        assert [(p.left.center, p.right.subject_id) for p in a] == [
            (p.left.center, p.right.subject_id) for p in b
        ]

    def test_single_subject_rejected(self, phantom_pair):
        va = phantom_pair[0]
        with pytest.raises(SamplingError, match="two subjects"):
            build_similar_pairs({va.subject_id: []}, {va.subject_id: va}, seed=0)

    def test_mismatched_pair_rejected(self, phantom_pair):
        va, vb = phantom_pair
        left = patch_at(va, (10, 16, 16), 15)
        with pytest.raises(SamplingError):
            PatchPair(left=left, right=patch_at(vb, (10, 16, 17), 15))
        with pytest.raises(SamplingError):
            PatchPair(left=left, right=patch_at(va, (10, 16, 16), 15))


def make_pool(n, seed=0, female_fraction=0.45, age_sd=9.0):
    rng = np.random.default_rng(seed)
    n_f = int(round(female_fraction * n))
    sexes = ["F"] * n_f + ["M"] * (n - n_f)
    rng.shuffle(sexes)
    return [
        SubjectMeta(f"c{i:02d}", float(max(25.0, rng.normal(61.0, age_sd))), sexes[i], "control")
        for i in range(n)
    ]


class TestBootstrapSplit:
    def test_canonical_sizes_and_disjointness(self):
        plans = bootstrap_split(make_pool(56), n_samples=10, n_train=41, n_test=15, seed=1)
        assert len(plans) == 10
        for plan in plans:
            assert len(plan.train_ids) == 41
            assert len(plan.test_ids) == 15
            assert not set(plan.train_ids) & set(plan.test_ids)

    def test_identical_ages_never_reject_on_age(self):
        pool = [SubjectMeta(f"c{i}", 61.0, "F" if i % 9 < 4 else "M", "control") for i in range(56)]
        plans = bootstrap_split(pool, n_samples=5, seed=0)
        assert len(plans) == 5
        for plan in plans:
            assert plan.balance.train_mean_age == plan.balance.test_mean_age == 61.0

    def test_balance_constraints_hold(self):
        plans = bootstrap_split(make_pool(56, seed=3), n_samples=10, seed=8)
        for plan in plans:
            b = plan.balance
            assert abs(b.train_mean_age - b.test_mean_age) <= 2.0
            assert 0.30 <= b.train_female_fraction <= 0.50
            assert 0.30 <= b.test_female_fraction <= 0.50

    def test_pure_function_of_seed(self):
        pool = make_pool(56, seed=5)
        assert bootstrap_split(pool, seed=2) == bootstrap_split(pool, seed=2)

    def test_pool_size_mismatch(self):
        with pytest.raises(SamplingError, match="pool"):
            bootstrap_split(make_pool(30), n_train=41, n_test=15)

    def test_unattainable_balance(self):
        pool = [SubjectMeta(f"c{i}", 61.0, "M", "control") for i in range(56)]
        with pytest.raises(BalanceError):
            bootstrap_split(pool, n_samples=1, seed=0, max_attempts=50)

    def test_patient_in_pool_rejected(self):
        pool = make_pool(55) + [SubjectMeta("p0", 60.0, "F", "patient")]
        with pytest.raises(SamplingError, match="controls"):
            bootstrap_split(pool)
