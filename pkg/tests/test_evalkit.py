import math

import numpy as np
import pytest

from pvp.evalkit import (
    PSNR_INFINITE,
    EvalReport,
    SplitSpec,
    evaluate_frames,
    masked_metrics,
    perceptual_proxy,
    psnr,
    report_machine,
    report_text,
    split_dataset,
    ssim,
)
from pvp.faceparams import Image


def _rand_image(seed, size=32):
    rng = np.random.default_rng(seed)
    return Image(pixels=rng.uniform(0.1, 0.9, (size, size, 3)))


class TestPsnr:
    def test_identical_images_sentinel(self):
        a = _rand_image(0)
        assert psnr(a, a) == PSNR_INFINITE

    def test_uniform_offset(self):
        a = Image(pixels=np.full((16, 16, 3), 0.4))
        b = Image(pixels=np.full((16, 16, 3), 0.5))
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_symmetric(self):
        a, b = _rand_image(1), _rand_image(2)
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(3)
        base = _rand_image(4)
        noise = rng.standard_normal(base.pixels.shape)
        prev = math.inf
        for amp in (0.01, 0.02, 0.04, 0.08, 0.16):
            noisy = Image(pixels=np.clip(base.pixels + amp * noise, 0, 1))
            val = psnr(base, noisy)
            assert val < prev
            prev = val

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            psnr(_rand_image(5, 16), _rand_image(5, 32))


class TestSsim:
    def test_identical_is_exactly_one(self):
        a = _rand_image(6)
        assert ssim(a, a) == 1.0

    def test_inverted_less_than_one(self):
        a = _rand_image(7)
        b = Image(pixels=1.0 - a.pixels)
        assert ssim(a, b) < 1.0

    def test_symmetric(self):
        a, b = _rand_image(8), _rand_image(9)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_raises(self):
        with pytest.raises(ValueError, match="window"):
            ssim(_rand_image(10, 8), _rand_image(10, 8))


class TestMasked:
    def test_full_mask_matches_unmasked(self):
        a, b = _rand_image(11), _rand_image(12)
        mp, ms, ml = masked_metrics(a, b, np.ones(a.pixels.shape[:2]))
        assert mp == pytest.approx(psnr(a, b), abs=1e-9)
        assert ms == pytest.approx(ssim(a, b), abs=1e-9)
        assert ml == pytest.approx(perceptual_proxy(a, b), abs=1e-9)

    def test_difference_outside_mask_is_invisible(self):
        a = _rand_image(13)
        px = a.pixels.copy()
        px[:4, :4] = 0.0
        b = Image(pixels=px)
        m = np.ones(a.pixels.shape[:2])
        m[:8, :8] = 0.0
        mp, _, _ = masked_metrics(a, b, m)
        assert mp == PSNR_INFINITE

    def test_half_mask_hand_value(self):
        h = w = 32
        a = Image(pixels=np.full((h, w, 3), 0.4))
        px = a.pixels.copy()
        px[:, : w // 2] += 0.1
        b = Image(pixels=px)
        m = np.zeros((h, w))
        m[:, : w // 2] = 1.0
        mp, _, _ = masked_metrics(a, b, m)
        assert mp == pytest.approx(20.0, abs=1e-9)

    def test_empty_mask_raises(self):
        a = _rand_image(14)
        with pytest.raises(ValueError, match="empty mask"):
            masked_metrics(a, a, np.zeros(a.pixels.shape[:2]))


class TestSplit:
    def test_nha(self):
        train, evl = split_dataset(1450, SplitSpec("nha"))
        assert train == list(range(0, 750))
        assert evl == list(range(750, 1450))

    def test_nbs(self):
        train, evl = split_dataset(3000, SplitSpec("nbs"))
        assert len(train) == 2500 and len(evl) == 500
        assert evl == list(range(2500, 3000))

    def test_insufficient_frames(self):
        with pytest.raises(ValueError, match="1450"):
            split_dataset(1000, SplitSpec("nha"))
        with pytest.raises(ValueError, match="501"):
            split_dataset(400, SplitSpec("nbs"))

    def test_custom_disjointness(self):
        with pytest.raises(ValueError, match="overlap"):
            split_dataset(100, SplitSpec("custom", train_range=(0, 60), eval_range=(50, 100)))
        train, evl = split_dataset(100, SplitSpec("custom", train_range=(0, 60),
                                                  eval_range=(60, 100)))
        assert train[-1] == 59 and evl[0] == 60

    def test_unknown_protocol(self):
        with pytest.raises(ValueError):
            SplitSpec("other")


class TestReports:
    def test_aggregates_are_per_frame_means(self):
        preds = [_rand_image(i) for i in range(4)]
        gts = [_rand_image(i + 100) for i in range(4)]
        report = evaluate_frames(preds, gts)
        for name, vals in report.per_frame.items():
            assert report.aggregates[name] == pytest.approx(float(np.mean(vals)), abs=1e-9)

    def test_text_and_machine_output(self):
        preds = [_rand_image(i) for i in range(3)]
        gts = [_rand_image(i + 50) for i in range(3)]
        masks = [np.ones((32, 32)) for _ in range(3)]
        report = evaluate_frames(preds, gts, masks=masks)
        text = report_text(report)
        assert "PSNR" in text and "ours" in text and "perceptual" in text.lower()
        machine = report_machine(report)
        lines = machine.splitlines()
        assert any(line.startswith("aggregate.psnr=") for line in lines)
        assert any(line.startswith("frame=0 ") for line in lines)
        assert "provenance.perceptual=pyramid-proxy" in machine

    def test_mismatched_counts(self):
        with pytest.raises(ValueError):
            evaluate_frames([_rand_image(0)], [])
