import numpy as np
import pytest

from maskspec.patching import (
    MaskContractError,
    MaskPlan,
    gather_masked,
    gather_survivors,
    num_masked,
    patchify,
    plan_from_masked,
    random_mask,
    scatter_with_mask_token,
    stack_plans,
    unpatchify,
    validate_plan,
)
from maskspec.pretrain import SWEEP_RATIOS
from maskspec.tensor import Tensor


class TestPatchify:
    def test_canonical_grid(self, rng):
        grid = patchify(rng.standard_normal((992, 128)))
        assert (grid.rows, grid.cols, grid.n) == (8, 62, 496)
        assert grid.patches.shape == (496, 256)

    def test_whole_input_is_one_patch(self, rng):
        x = rng.standard_normal((16, 16))
        grid = patchify(x)
        assert grid.n == 1
        np.testing.assert_array_equal(grid.patches[0], x.reshape(-1))

    @pytest.mark.parametrize("shape,p", [((992, 128), 16), ((64, 32), 8), ((12, 9), 3)])
    def test_round_trip(self, rng, shape, p):
        x = rng.standard_normal(shape)
        np.testing.assert_array_equal(unpatchify(patchify(x, p)), x)

    def test_remainder_dropped(self, rng):
        x = rng.standard_normal((40, 20))
        grid = patchify(x, 16)
        assert (grid.rows, grid.cols) == (1, 2)
        np.testing.assert_array_equal(unpatchify(grid), x[:32, :16])

    def test_frequency_major_order(self):
        # value encodes position: time * 1000 + freq
        x = np.add.outer(np.arange(32) * 1000, np.arange(32)).astype(float)
        grid = patchify(x, 16)
        # tile 1 is the second time column in the lowest frequency row
        assert grid.patches[1][0] == 16 * 1000 + 0
        # tile 2 starts the second frequency row
        assert grid.patches[2][0] == 0 * 1000 + 16
        # inside a tile, consecutive entries step along frequency
        assert grid.patches[0][1] - grid.patches[0][0] == 1

    @pytest.mark.parametrize("p", [0, -1, 17])
    def test_bad_patch_side(self, p):
        with pytest.raises(ValueError):
            patchify(np.zeros((16, 16)), p)


class TestRandomMask:
    def test_canonical_counts(self):
        plan = random_mask(496, 0.75, 0)
        assert plan.N == 372 and len(plan.survivor_idx) == 124

    @pytest.mark.parametrize("alpha", [0.04, 0.96, -0.1, 1.0])
    def test_ratio_out_of_range(self, alpha):
        with pytest.raises(MaskContractError):
            random_mask(100, alpha, 0)

    def test_zero_patches(self):
        with pytest.raises(ValueError):
            random_mask(0, 0.5, 0)

    def test_same_seed_same_plan(self):
        a, b = random_mask(496, 0.75, 42), random_mask(496, 0.75, 42)
        np.testing.assert_array_equal(a.masked_idx, b.masked_idx)
        np.testing.assert_array_equal(a.survivor_idx, b.survivor_idx)

    def test_different_seeds_differ(self):
        assert not np.array_equal(random_mask(496, 0.75, 1).masked_idx, random_mask(496, 0.75, 2).masked_idx)

    def test_uniform_marginals(self):
        gen = np.random.default_rng(99)
        counts = np.zeros(20)
        draws = 10000
        for _ in range(draws):
            counts[random_mask(20, 0.5, gen).masked_idx] += 1
        freq = counts / draws
        assert np.all(np.abs(freq - 0.5) <= 0.02), freq

    def test_partition_over_random_triples(self):
        gen = np.random.default_rng(5)
        for _ in range(1000):
            n = int(gen.integers(1, 600))
            alpha = float(gen.uniform(0.05, 0.95))
            plan = random_mask(n, alpha, int(gen.integers(2**31)))
            validate_plan(plan)
            assert plan.N == int(np.floor(n * alpha + 1e-9))
            assert not set(plan.masked_idx) & set(plan.survivor_idx)

    @pytest.mark.parametrize("alpha", SWEEP_RATIOS)
    def test_sweep_grid(self, alpha):
        for n in (20, 496):
            plan = random_mask(n, alpha, 0)
            validate_plan(plan)
            assert plan.N >= 1

    def test_floor_is_robust_to_float_error(self):
        assert num_masked(20, 0.15) == 3
        assert num_masked(20, 0.35) == 7


class TestGatherScatter:
    def test_small_example(self):
        patches = np.arange(8.0).reshape(4, 2)
        plan = plan_from_masked(4, 0.5, [1, 3])
        np.testing.assert_array_equal(gather_survivors(patches, plan), patches[[0, 2]])
        np.testing.assert_array_equal(gather_masked(patches, plan), patches[[1, 3]])

    def test_empty_mask_returns_everything(self, rng):
        plan = random_mask(10, 0.05, 0)
        assert plan.N == 0
        x = rng.standard_normal((10, 3))
        np.testing.assert_array_equal(gather_survivors(x, plan), x)
        np.testing.assert_array_equal(scatter_with_mask_token(x, plan, np.ones(3)), x)

    def test_partition_reassembles_grid(self, rng):
        x = rng.standard_normal((30, 4))
        plan = random_mask(30, 0.4, 3)
        rows = np.concatenate([gather_survivors(x, plan), gather_masked(x, plan)])
        order = np.argsort(np.concatenate([plan.survivor_idx, plan.masked_idx]))
        np.testing.assert_array_equal(rows[order], x)

    def test_scatter_zero_token(self, rng):
        enc = rng.standard_normal((2, 5))
        out = scatter_with_mask_token(enc, plan_from_masked(3, 0.34, [1]), np.zeros(5))
        np.testing.assert_array_equal(out[[0, 2]], enc)
        np.testing.assert_array_equal(out[1], 0)

    def test_gather_of_scatter(self, rng):
        plan = random_mask(50, 0.75, 8)
        enc = rng.standard_normal((len(plan.survivor_idx), 6))
        full = scatter_with_mask_token(enc, plan, rng.standard_normal(6))
        np.testing.assert_array_equal(gather_survivors(full, plan), enc)

    def test_tensor_inputs_match_arrays(self, rng):
        plan = random_mask(12, 0.5, 1)
        x = rng.standard_normal((12, 3))
        np.testing.assert_array_equal(gather_survivors(Tensor(x), plan).data, gather_survivors(x, plan))
        enc = x[plan.survivor_idx]
        tok = rng.standard_normal(3)
        np.testing.assert_array_equal(
            scatter_with_mask_token(Tensor(enc), plan, tok).data, scatter_with_mask_token(enc, plan, tok)
        )

    def test_size_mismatch(self, rng):
        plan = random_mask(10, 0.5, 0)
        with pytest.raises(MaskContractError):
            gather_survivors(rng.standard_normal((9, 2)), plan)
        with pytest.raises(MaskContractError):
            scatter_with_mask_token(rng.standard_normal((6, 2)), plan, np.zeros(2))


class TestMaskPlan:
    def test_json_round_trip(self):
        plan = random_mask(496, 0.75, 11)
        back = MaskPlan.from_json(plan.to_json())
        assert back.n == plan.n and back.alpha == plan.alpha
        np.testing.assert_array_equal(back.masked_idx, plan.masked_idx)
        np.testing.assert_array_equal(back.survivor_idx, plan.survivor_idx)

    def test_duplicate_indices_rejected(self):
        with pytest.raises(MaskContractError):
            plan_from_masked(5, 0.4, [1, 1])

    def test_out_of_range_rejected(self):
        with pytest.raises(MaskContractError):
            plan_from_masked(5, 0.4, [5])

    def test_validate_catches_wrong_count(self):
        with pytest.raises(MaskContractError):
            validate_plan(plan_from_masked(10, 0.5, [0, 1]))

    def test_stack_requires_equal_sizes(self):
        with pytest.raises(MaskContractError):
            stack_plans([random_mask(10, 0.5, 0), random_mask(12, 0.5, 0)])
        surv, masked = stack_plans([random_mask(10, 0.5, s) for s in range(3)])
        assert surv.shape == (3, 5) and masked.shape == (3, 5)
