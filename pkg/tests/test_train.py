"""AdamW, the learning-rate schedule and the training loop."""

import math

import numpy as np
import pytest

from lmdvit.config import TINY, DataConfig, TrainConfig
from lmdvit.data import gen_sample
from lmdvit.errors import NumericError
from lmdvit.model import build
from lmdvit.optim import AdamW, cosine_lr
from lmdvit import tensor as T
from lmdvit.train import Batch, train, write_log


def batch(n=2, size=32):
    samples = [gen_sample(s, DataConfig(height=size, width=size)) for s in range(n)]
    return Batch(np.stack([s.blur for s in samples]), np.stack([s.sharp for s in samples]),
                 np.stack([s.mask for s in samples]))


class TestAdamW:
    def test_two_steps_by_hand(self):
        p = T.parameter(np.array([1.0, -2.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        g1, g2 = np.array([0.3, -0.1]), np.array([0.2, 0.4])
        w, m, v = p.data.copy(), 0.0, 0.0
        for k, g in enumerate((g1, g2), start=1):
            p.grad = g
            opt.step()
            w = w * (1 - 0.1 * 0.5)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-15)

    def test_missing_grad_only_decays(self):
        p = T.parameter(np.array([2.0]))
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(p.data, [1.9], rtol=1e-15)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 2e-4) == 2e-4
        assert cosine_lr(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6)
        assert cosine_lr(50, 100, 2e-4, 0.0) == pytest.approx(1e-4)

    def test_stepped_updates(self):
        assert cosine_lr(7, 100, 1.0, 0.0, update_every=5) == cosine_lr(5, 100, 1.0, 0.0)
        assert cosine_lr(3, 100, 1.0, 0.0, update_every=5) == 1.0

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestLoop:
    def test_rows_and_determinism(self):
        data = batch()
        cfg = TrainConfig(steps=3, batch_size=1, lr=1e-3, seed=4)
        runs = []
        for _ in range(2):
            m = build(TINY, 1)
            runs.append((train(m, data, cfg), m))
        (rows_a, ma), (rows_b, mb) = runs
        assert [r["step"] for r in rows_a] == [0, 1, 2]
        assert rows_a == rows_b
        for (_, pa), (_, pb) in zip(ma.named_parameters(), mb.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_first_row_psnr_is_input_psnr(self):
        data = batch()
        rows = train(build(TINY, 0), data, TrainConfig(steps=1, batch_size=2))
        mse = np.mean((data.blur - data.sharp) ** 2)
        assert rows[0]["psnr"] == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)

    def test_nan_parameter_is_reported(self):
        m = build(TINY, 0)
        m.in_bias.data[0] = np.nan
        with pytest.raises(NumericError, match="first non-finite op: conv2d"):
            train(m, batch(1), TrainConfig(steps=1, batch_size=1))

    def test_log_file(self, tmp_path):
        write_log(tmp_path / "log.csv", [{"step": 0, "loss": 0.1, "loss_r": 0.05, "loss_p": 0.05,
                                          "psnr": 20.0, "lr": 1e-4}], "abc")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines == ["# config abc", "step,loss,loss_r,loss_p,psnr,lr", "0,0.1,0.05,0.05,20.0,0.0001"]
