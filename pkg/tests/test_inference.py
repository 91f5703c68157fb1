"""Tile planning and sliding-window stitching."""
import numpy as np
import pytest

from llrseg.anomalymix import load_split
from llrseg.errors import LlrsegError
from llrseg.inference import SCORERS, score_image, tile_plan


class TestTilePlan:
    def test_single_exact_tile(self):
        plan = tile_plan(10, 10, 10, 10)
        assert plan.origins == [(0, 0)]
        assert plan.window == (10, 10)

    def test_border_clamp(self):
        plan = tile_plan(10, 18, 10, 8)
        xs = sorted({x for _, x in plan.origins})
        assert xs == [0, 8]
        covered = np.zeros(18, dtype=bool)
        for x in xs:
            covered[x:x + 10] = True
        assert covered.all()

    def test_stride_one_covers_everything(self):
        plan = tile_plan(12, 12, 4, 1)
        assert len({y for y, _ in plan.origins}) == 9
        covered = np.zeros((12, 12), dtype=bool)
        for y, x in plan.origins:
            covered[y:y + 4, x:x + 4] = True
        assert covered.all()

    def test_oversized_window_clamps_to_image(self):
        plan = tile_plan(6, 6, 10, 3)
        assert plan.window == (6, 6)
        assert plan.origins == [(0, 0)]

    def test_zero_stride_rejected(self):
        with pytest.raises(LlrsegError):
            tile_plan(10, 10, 4, 0)

    def test_coverage_over_many_geometries(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h, w = rng.integers(3, 30, 2)
            win = int(rng.integers(1, 12))
            stride = int(rng.integers(1, win + 1))  # coverage needs stride <= window
            plan = tile_plan(h, w, win, stride)
            wh, ww = plan.window
            covered = np.zeros((h, w), dtype=bool)
            for y, x in plan.origins:
                assert y + wh <= h and x + ww <= w
                covered[y:y + wh, x:x + ww] = True
            assert covered.all()

    def test_origins_row_major(self):
        plan = tile_plan(20, 20, 8, 4)
        assert plan.origins == sorted(plan.origins)


@pytest.fixture(scope="module")
def eval_scene(small_dataset_dir):
    f, _, omap = load_split(small_dataset_dir, "eval")[0]
    return f, omap


class TestScoreImage:
    def test_single_tile_equals_whole_image(self, small_stage2, eval_scene):
        f, _ = eval_scene
        whole = tile_plan(f.height, f.width, (f.height, f.width),
                          (f.height, f.width))
        assert whole.tile_count() == 1
        a = score_image(small_stage2, f, whole)
        b = score_image(small_stage2, f, tile_plan(f.height, f.width,
                                                   f.height, f.height))
        assert np.array_equal(a.scores, b.scores)

    @pytest.mark.parametrize("stride", [1, 4, 8, 16])
    def test_stitching_equals_whole_image(self, small_stage2, eval_scene, stride):
        f, _ = eval_scene
        whole = score_image(small_stage2, f,
                            tile_plan(f.height, f.width, f.height, f.height))
        tiled = score_image(small_stage2, f,
                            tile_plan(f.height, f.width, 16, stride))
        # stride 1 averages up to 256 identical contributions per pixel, so
        # allow for accumulation rounding beyond a single ulp
        assert np.abs(tiled.scores - whole.scores).max() < 1e-11

    @pytest.mark.parametrize("scorer", SCORERS)
    def test_all_scorers_produce_finite_maps(self, small_stage2, eval_scene,
                                             scorer):
        f, _ = eval_scene
        plan = tile_plan(f.height, f.width, 16, 8)
        smap = score_image(small_stage2, f, plan, scorer=scorer)
        assert smap.scores.shape == (f.height, f.width)
        assert np.isfinite(smap.scores).all()

    def test_unknown_scorer_rejected(self, small_stage2, eval_scene):
        f, _ = eval_scene
        with pytest.raises(LlrsegError):
            score_image(small_stage2, f, tile_plan(f.height, f.width, 16, 8),
                        scorer="entropy")

    def test_deterministic(self, small_stage2, eval_scene):
        f, _ = eval_scene
        plan = tile_plan(f.height, f.width, 16, 8)
        a = score_image(small_stage2, f, plan)
        b = score_image(small_stage2, f, plan)
        assert np.array_equal(a.scores, b.scores)
