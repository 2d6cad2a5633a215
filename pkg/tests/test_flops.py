"""Analytic FLOPs model against the tensor core's MAC counter and a hand count."""

import numpy as np
import pytest

from lmdvit import tensor as T
from lmdvit.config import TINY
from lmdvit.errors import UsageError
from lmdvit.flops import flops_report, stage_windows
from lmdvit.model import build, forward
from helpers import randomize_params

SCALES = (1, 2, 4, 8, 16, 8, 4, 2, 1)


def hand_count(h, w, kept_frac, c=8, win=4, mlp=4, depth=2):
    """Whole-network FLOPs of the tiny profile, every stage pruning, one image."""
    chans = [c, 2 * c, 4 * c, 8 * c, 16 * c, 16 * c, 8 * c, 4 * c, 2 * c]
    total = 2 * (h * w * 27 * c) + 4 * c * h * w  # stem conv + its layer norm
    for i in range(4):
        hw = (h >> (i + 1)) * (w >> (i + 1))
        total += 2 * hw * (4 * 4) * chans[i] * 2 * chans[i]
    for a, b, f in ((16 * c, 8 * c, 8), (16 * c, 4 * c, 4), (8 * c, 2 * c, 2), (4 * c, c, 1)):
        total += 2 * (h // f) * (w // f) * a * b
    total += 2 * h * w * 2 * c * 27
    wl = 0.0
    for i, (d, s) in enumerate(zip(chans, SCALES)):
        n = (h // s) * (w // s)
        n_win = n // win ** 2
        kept = kept_frac * n_win
        t = win * win
        heads = d // 8
        per_window = 2 * (t * d * 3 * d + 2 * t * t * d + t * d * d) + heads * t * t \
            + 2 * t * (2 * d * mlp * d + 9 * mlp * d)
        total += depth * (8 * d * n + n * d)  # norms and decision masking
        half = d // 2
        total += 2 * n * (2 * d * half + 2 * half * half + 2 * half)
        wl += depth * kept * per_window
    return total + wl, wl


class TestAnalyticModel:
    def test_all_kept_equals_dense(self):
        r = flops_report(TINY, [n for n in stage_windows(TINY, 64, 64)])
        assert r.pruned_total == r.dense_total and r.reduction == 0.0

    def test_nothing_kept_leaves_dense_path(self):
        r = flops_report(TINY, [0] * 9)
        assert r.window_local_pruned == 0.0
        assert r.pruned_total == r.dense_total - r.window_local_dense

    def test_halving_one_stage(self):
        n = stage_windows(TINY, 64, 64)
        full = flops_report(TINY)
        half = flops_report(TINY, [n[0] / 2] + n[1:])
        assert half.stage_flops(0, True) == 0.5 * full.stage_flops(0, True)

    @pytest.mark.parametrize("stage", range(9))
    def test_affine_in_each_stage(self, stage):
        n = stage_windows(TINY, 64, 64)
        totals = []
        for k in range(n[stage] + 1):
            kept = list(n)
            kept[stage] = k
            totals.append(flops_report(TINY, kept).pruned_total)
        np.testing.assert_allclose(np.diff(totals, 2), 0.0, atol=1e-6)
        assert np.all(np.diff(totals) > 0)

    def test_single_window_attention_formula(self):
        cfg = TINY.with_updates(prune_stages=())
        r = flops_report(cfg, [1] + [0] * 8)
        blk = [l for l in r.layers if l.stage == 0 and l.block == 0 and l.name.startswith("attn")]
        t, c, h = 16, 8, 1
        want = t * c * 3 * c + h * t * t * (c // h) * 2 + t * c * c
        assert sum(l.macs for l in blk if l.gemm) == want
        assert sum(l.flops for l in blk if not l.gemm) == h * t * t

    def test_hand_count_at_twenty_percent(self):
        n = stage_windows(TINY, 64, 64)
        r = flops_report(TINY, [0.2 * k for k in n])
        dense, wl_dense = hand_count(64, 64, 1.0)
        pruned, _ = hand_count(64, 64, 0.2)
        assert r.dense_total == pytest.approx(dense, rel=1e-12)
        assert r.window_local_dense == pytest.approx(wl_dense, rel=1e-12)
        assert abs(r.reduction - (1 - pruned / dense)) <= 0.01
        assert r.window_local_reduction == pytest.approx(0.8, abs=1e-12)

    def test_per_block_counts(self):
        n = stage_windows(TINY, 64, 64)
        a = flops_report(TINY, [[k, k] for k in n])
        assert a.pruned_total == a.dense_total

    def test_kept_out_of_range(self):
        n = stage_windows(TINY, 64, 64)
        with pytest.raises(UsageError):
            flops_report(TINY, [n[0] + 1] + n[1:])
        with pytest.raises(UsageError):
            flops_report(TINY, [1] * 8)

    def test_padded_extents(self):
        assert stage_windows(TINY, 70, 90)[0] == (128 // 4) ** 2

    def test_json(self, tmp_path):
        import json
        r = flops_report(TINY)
        r.write_json(tmp_path / "f.json")
        d = json.loads((tmp_path / "f.json").read_text())
        assert d["reduction"] == 0.0 and d["dense_flops"] == r.dense_total


class TestCounterAgreement:
    @pytest.mark.parametrize("seed", range(3))
    def test_instrumented_macs_match_model(self, seed):
        m = randomize_params(build(TINY, 0), seed=seed)
        rng = np.random.default_rng(seed)
        forced = [(rng.random((64 // s, 64 // s)) < 0.4).astype(float) for s in SCALES]
        with T.count_macs() as macs:
            res = forward(m, rng.random((3, 64, 64)), "infer", forced=forced)
        r = flops_report(TINY, res.kept_counts())
        assert macs[0] == r.gemm_macs()
