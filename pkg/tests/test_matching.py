import numpy as np
import pytest
import torch

from hdrfuse.features import FeaturePyramid, handcrafted_pyramid
from hdrfuse.matching import (
    MatchField,
    WindowSpec,
    brute_force_match,
    identity_match,
    match_coarsest,
    progressive_match,
    refine_level,
    similarity_map,
    single_scale_match,
    swap_level_features,
)
from hdrfuse.synthetic import make_scene


def random_pyramid(rng, h=32, w=32, c=8):
    return FeaturePyramid(
        levels=[
            rng.normal(size=(c, h, w)).astype(np.float32),
            rng.normal(size=(c, h // 2, w // 2)).astype(np.float32),
            rng.normal(size=(c, h // 4, w // 4)).astype(np.float32),
        ],
        source="handcrafted",
    )


def shifted_scene_pyramids(shift, size=48, seed=11):
    """Handcrafted pyramids of an image and its rigidly shifted copy.

    The source holds the content moved down-right by `shift`, so target
    content at k sits at source position k + shift: matching recovers
    displacement (+shift, +shift).
    """
    img = make_scene(size, size, seed=seed).gt_hdr.pixels.astype(np.float32)
    moved = img.copy()
    moved[shift:, shift:] = img[:-shift or None, :-shift or None]
    return handcrafted_pyramid(moved), handcrafted_pyramid(img)


def fields_equal(a, b):
    return all(
        np.array_equal(a.j_rows[l], b.j_rows[l]) and np.array_equal(a.j_cols[l], b.j_cols[l])
        for l in range(3)
    )


class TestWindowSpec:
    def test_defaults_valid(self):
        spec = WindowSpec()
        assert spec.radii == (2, 2, 8) and spec.patch_sizes == (3, 3, 3)

    def test_even_patch_rejected(self):
        with pytest.raises(ValueError):
            WindowSpec(patch_sizes=(2, 3, 3))

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            WindowSpec(radii=(-1, 2, 8))


class TestSimilarityMap:
    def test_identity_inner_product(self, rng):
        src = rng.normal(size=(4, 9, 9)).astype(np.float32)
        patch = src[:, 3:6, 3:6]
        scores, degenerate = similarity_map(src, patch, center=(4, 4), radius=2, normalization="cosine")
        assert not degenerate
        assert scores[2, 2] == pytest.approx(1.0, abs=1e-6)
        assert scores.max() == pytest.approx(scores[2, 2], abs=1e-9)

    def test_orthogonal_patches_score_zero(self):
        src = np.zeros((2, 5, 5), dtype=np.float32)
        src[0, 2, 2] = 1.0  # candidate energy only in channel 0
        patch = np.zeros((2, 1, 1), dtype=np.float32)
        patch[1, 0, 0] = 1.0  # target energy only in channel 1
        scores, _ = similarity_map(src, patch, center=(2, 2), radius=0, normalization="cosine")
        assert scores[0, 0] == 0.0

    def test_target_sqnorm_hand_value(self):
        # candidate a=(1,1), target b=(2,0): <a, b/||b||^2> = 2/4 = 0.5
        src = np.ones((2, 3, 3), dtype=np.float32)
        patch = np.zeros((2, 1, 1), dtype=np.float32)
        patch[0, 0, 0] = 2.0
        scores, _ = similarity_map(src, patch, center=(1, 1), radius=0, normalization="target_sqnorm")
        assert scores[0, 0] == pytest.approx(0.5, abs=1e-9)

    def test_zero_norm_target_degenerate(self):
        src = np.ones((2, 5, 5), dtype=np.float32)
        patch = np.zeros((2, 3, 3), dtype=np.float32)
        scores, degenerate = similarity_map(src, patch, center=(2, 2), radius=1)
        assert degenerate and np.all(scores == 0.0)

    def test_out_of_extent_masked(self, rng):
        src = rng.normal(size=(2, 4, 4)).astype(np.float32)
        scores, _ = similarity_map(src, src[:, 0:1, 0:1], center=(0, 0), radius=1)
        assert np.isinf(scores[0, 0]) and scores[0, 0] < 0  # candidate (-1,-1)
        assert np.isfinite(scores[1, 1])


class TestMatchCoarsest:
    def test_identity(self, rng):
        pyr = random_pyramid(rng)
        jr, jc, _ = match_coarsest(pyr.levels[2], pyr.levels[2], WindowSpec())
        kr, kc = np.mgrid[0:8, 0:8]
        assert np.array_equal(jr, kr) and np.array_equal(jc, kc)

    def test_shift_recovered_at_coarse_level(self):
        src_pyr, tgt_pyr = shifted_scene_pyramids(4)
        jr, jc, _ = match_coarsest(src_pyr.levels[2], tgt_pyr.levels[2], WindowSpec(radii=(2, 2, 4)))
        kr, kc = np.mgrid[0 : jr.shape[0], 0 : jr.shape[1]]
        inner = np.s_[3:-3, 3:-3]
        # a (4,4) image shift is (1,1) on the quarter-resolution grid
        assert np.mean((jr - kr)[inner] == 1) > 0.9
        assert np.mean((jc - kc)[inner] == 1) > 0.9

    def test_full_window_equals_exhaustive(self, rng):
        src, tgt = random_pyramid(rng, 16, 16), random_pyramid(rng, 16, 16)
        jr, jc, _ = match_coarsest(src.levels[2], tgt.levels[2], WindowSpec(radii=(2, 2, 16)))
        oracle = brute_force_match(src, tgt, radii=None)
        assert np.array_equal(jr, oracle.j_rows[2]) and np.array_equal(jc, oracle.j_cols[2])


class TestRefineLevel:
    def test_identity_propagation(self, rng):
        pyr = random_pyramid(rng, 16, 16)
        kr, kc = np.mgrid[0:4, 0:4]
        jr, jc, _, clamped = refine_level(kr, kc, pyr.levels[1], pyr.levels[1], WindowSpec(), level=1)
        kr1, kc1 = np.mgrid[0:8, 0:8]
        assert np.array_equal(jr, kr1) and np.array_equal(jc, kc1)
        assert not clamped.any()

    def test_zero_radius_copies_parent(self, rng):
        src, tgt = random_pyramid(rng, 16, 16), random_pyramid(rng, 16, 16)
        # level-2 parent grid of a 16x16 pyramid is 4x4
        prev_r = rng.integers(0, 4, size=(4, 4))
        prev_c = rng.integers(0, 4, size=(4, 4))
        spec = WindowSpec(radii=(0, 0, 8))
        jr, jc, _, _ = refine_level(prev_r, prev_c, src.levels[1], tgt.levels[1], spec, level=1)
        kr, kc = np.mgrid[0:8, 0:8]
        assert np.array_equal(jr, 2 * prev_r[kr // 2, kc // 2])
        assert np.array_equal(jc, 2 * prev_c[kr // 2, kc // 2])

    def test_uniform_shift_refines(self):
        src_pyr, tgt_pyr = shifted_scene_pyramids(4)
        h1 = tgt_pyr.levels[1].shape[1]
        kr, kc = np.mgrid[0 : h1 // 2, 0 : h1 // 2]
        # parents report the (1,1) coarse displacement
        jr, jc, _, _ = refine_level(
            kr + 1, kc + 1, src_pyr.levels[1], tgt_pyr.levels[1], WindowSpec(), level=1
        )
        kr1, kc1 = np.mgrid[0:h1, 0:h1]
        inner = np.s_[4:-4, 4:-4]
        assert np.mean((jr - kr1)[inner] == 2) > 0.9
        assert np.mean((jc - kc1)[inner] == 2) > 0.9


class TestProgressiveMatch:
    def test_identity_field(self, rng):
        pyr = random_pyramid(rng)
        field = progressive_match(pyr, pyr, WindowSpec())
        assert fields_equal(field, identity_match(pyr))

    def test_shift_recovery(self):
        src_pyr, tgt_pyr = shifted_scene_pyramids(4)
        field = progressive_match(src_pyr, tgt_pyr, WindowSpec(radii=(2, 2, 4)))
        dr, dc = field.displacement(0)
        inner = np.s_[8:-8, 8:-8]
        assert np.mean((dr[inner] == 4) & (dc[inner] == 4)) >= 0.95

    def test_equals_oracle_with_full_windows(self, rng):
        for _ in range(3):
            src, tgt = random_pyramid(rng), random_pyramid(rng)
            prog = progressive_match(src, tgt, WindowSpec(radii=(64, 64, 64)))
            oracle = brute_force_match(src, tgt, radii=None)
            assert fields_equal(prog, oracle)

    def test_cross_scale_consistency(self, rng):
        spec = WindowSpec(radii=(2, 3, 5))
        src, tgt = random_pyramid(rng), random_pyramid(rng)
        field = progressive_match(src, tgt, spec)
        for level in (0, 1):
            parent_r = field.j_rows[level + 1]
            parent_c = field.j_cols[level + 1]
            kr, kc = np.mgrid[0 : field.j_rows[level].shape[0], 0 : field.j_rows[level].shape[1]]
            dr = field.j_rows[level] - 2 * parent_r[kr // 2, kc // 2]
            dc = field.j_cols[level] - 2 * parent_c[kr // 2, kc // 2]
            assert np.abs(dr).max() <= spec.radii[level]
            assert np.abs(dc).max() <= spec.radii[level]

    def test_deterministic(self, rng):
        src, tgt = random_pyramid(rng), random_pyramid(rng)
        a = progressive_match(src, tgt, WindowSpec())
        b = progressive_match(src, tgt, WindowSpec())
        assert fields_equal(a, b) and all(np.array_equal(a.scores[l], b.scores[l]) for l in range(3))

    def test_argmax_invariant_to_target_scaling(self, rng):
        src = random_pyramid(rng, 16, 16)
        tgt = random_pyramid(rng, 16, 16)
        scaled = FeaturePyramid(levels=[3.7 * lv for lv in tgt.levels], source=tgt.source)
        for norm in ("cosine", "target_sqnorm"):
            a = progressive_match(src, tgt, WindowSpec(), normalization=norm)
            b = progressive_match(src, scaled, WindowSpec(), normalization=norm)
            assert fields_equal(a, b)

    def test_channel_mismatch_rejected(self, rng):
        src = random_pyramid(rng, 16, 16, c=8)
        tgt = random_pyramid(rng, 16, 16, c=4)
        with pytest.raises(ValueError, match="channel mismatch"):
            progressive_match(src, tgt, WindowSpec())

    def test_single_scale_variant(self, rng):
        src, tgt = random_pyramid(rng, 16, 16), random_pyramid(rng, 16, 16)
        field = single_scale_match(src, tgt, WindowSpec())
        ident = identity_match(tgt)
        for level in (1, 2):
            assert np.array_equal(field.j_rows[level], ident.j_rows[level])
            assert np.array_equal(field.j_cols[level], ident.j_cols[level])
        full = progressive_match(src, tgt, WindowSpec())
        assert field.j_rows[0].shape == full.j_rows[0].shape


class TestBruteForce:
    def test_identity(self, rng):
        pyr = random_pyramid(rng, 16, 16)
        field = brute_force_match(pyr, pyr, radii=None)
        assert fields_equal(field, identity_match(pyr))

    def test_hand_verified_argmax(self, rng):
        # independent check: direct dot products at three sampled positions
        level = rng.normal(size=(4, 8, 8)).astype(np.float32)
        other = rng.normal(size=(4, 8, 8)).astype(np.float32)
        pyr_src = FeaturePyramid(
            levels=[level, level[:, ::2, ::2].copy(), level[:, ::4, ::4].copy()], source="handcrafted"
        )
        pyr_tgt = FeaturePyramid(
            levels=[other, other[:, ::2, ::2].copy(), other[:, ::4, ::4].copy()], source="handcrafted"
        )
        field = brute_force_match(pyr_src, pyr_tgt, radii=None)

        padded_src = np.pad(level.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")
        padded_tgt = np.pad(other.astype(np.float64), ((0, 0), (1, 1), (1, 1)), mode="edge")

        def unit_patch(padded, r, c):
            vec = padded[:, r : r + 3, c : c + 3].ravel()
            return vec / np.linalg.norm(vec)

        for (kr, kc) in [(0, 0), (3, 5), (7, 7)]:
            target = unit_patch(padded_tgt, kr, kc)
            best, best_val = None, -np.inf
            for r in range(8):
                for c in range(8):
                    val = float(np.dot(target, unit_patch(padded_src, r, c)))
                    if val > best_val:
                        best, best_val = (r, c), val
            assert (field.j_rows[0][kr, kc], field.j_cols[0][kr, kc]) == best

    def test_windowed_restriction(self, rng):
        src, tgt = random_pyramid(rng, 16, 16), random_pyramid(rng, 16, 16)
        field = brute_force_match(src, tgt, radii=(1, 1, 1))
        for level in range(3):
            kr, kc = np.mgrid[0 : field.j_rows[level].shape[0], 0 : field.j_rows[level].shape[1]]
            assert np.abs(field.j_rows[level] - kr).max() <= 1
            assert np.abs(field.j_cols[level] - kc).max() <= 1


class TestSwapFeatures:
    def test_identity_field_replaces_with_source(self, rng):
        target = torch.from_numpy(rng.normal(size=(3, 8, 8)).astype(np.float32))
        source = torch.from_numpy(rng.normal(size=(3, 8, 8)).astype(np.float32))
        kr, kc = np.mgrid[0:8, 0:8]
        out = swap_level_features(target, source, kr, kc, patch=3, stride=1)
        assert torch.allclose(out, source, atol=1e-6)

    def test_constant_map_broadcasts_one_patch(self, rng):
        target = torch.from_numpy(rng.normal(size=(2, 6, 6)).astype(np.float32))
        source = torch.from_numpy(rng.normal(size=(2, 6, 6)).astype(np.float32))
        jr = np.full((6, 6), 2, dtype=np.int64)
        jc = np.full((6, 6), 3, dtype=np.int64)
        out = swap_level_features(target, source, jr, jc, patch=1, stride=1)
        assert torch.equal(out, source[:, 2:3, 3:4].expand(-1, 6, 6))

    def test_overlap_average_hand_computed(self):
        # stride 2, 3x3 patches: position (0,2) is covered by the patches
        # centered at (0,0), (0,2), (2,2), (2,0) reading source at j(k)+offset
        target = torch.zeros(1, 4, 4)
        source = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4)
        jr = np.zeros((4, 4), dtype=np.int64)
        jc = np.zeros((4, 4), dtype=np.int64)
        jr[0, 0], jc[0, 0] = 1, 1
        jr[0, 2], jc[0, 2] = 2, 2
        out = swap_level_features(target, source, jr, jc, patch=3, stride=2)
        # contributions at (0, 1): patch at k=(0,0) -> source (1,1)+(0,1)=6;
        # patch at k=(0,2) -> source (2,2)+(0,-1)=9; mean = 7.5
        assert float(out[0, 0, 1]) == pytest.approx(7.5)

    def test_uncovered_positions_keep_target(self, rng):
        target = torch.from_numpy(rng.normal(size=(2, 5, 5)).astype(np.float32))
        source = torch.from_numpy(rng.normal(size=(2, 5, 5)).astype(np.float32))
        kr, kc = np.mgrid[0:5, 0:5]
        out = swap_level_features(target, source, kr, kc, patch=1, stride=2)
        assert torch.equal(out[:, 1::2, :], target[:, 1::2, :])
        assert torch.equal(out[:, 0::2, 0::2], source[:, 0::2, 0::2])

    def test_gradients_flow_to_source(self, rng):
        target = torch.from_numpy(rng.normal(size=(2, 6, 6)).astype(np.float32))
        source = torch.from_numpy(rng.normal(size=(2, 6, 6)).astype(np.float32))
        source.requires_grad_(True)
        kr, kc = np.mgrid[0:6, 0:6]
        out = swap_level_features(target, source, kr, kc, patch=3, stride=1)
        out.sum().backward()
        assert source.grad is not None and float(source.grad.abs().sum()) > 0

    def test_grid_mismatch_rejected(self, rng):
        target = torch.zeros(2, 6, 6)
        source = torch.zeros(2, 6, 6)
        jr = np.zeros((3, 3), dtype=np.int64)
        with pytest.raises(ValueError, match="match map shape"):
            swap_level_features(target, source, jr, jr, patch=3, stride=1)
