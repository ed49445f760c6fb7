import numpy as np
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from srfkit.errors import ContractError
from srfkit.metrics import MetricReport, psnr, ssim, validation_accuracy
from srfkit.scenes import ImageBuffer


def _img(rgb, alpha=1.0):
    rgba = np.concatenate(
        [rgb, np.full(rgb.shape[:2] + (1,), alpha, dtype=rgb.dtype)], axis=2
    )
    return ImageBuffer(rgb.shape[1], rgb.shape[0], rgba.astype(np.float32))


def test_psnr_identical_capped():
    rng = np.random.default_rng(0)
    img = _img(rng.uniform(0, 1, (16, 16, 3)))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_offsets():
    rng = np.random.default_rng(1)
    base = np.round(rng.uniform(0, 0.45, (32, 32, 3)) * 255) / 255
    # values quantize to the 8-bit lattice first (0.1*255 sits exactly on a
    # rounding tie), so the analytic numbers hold to ~0.2 dB
    assert psnr(_img(base), _img(base + 0.1)) == pytest.approx(20.0, abs=0.2)
    assert psnr(_img(base), _img(base + 0.5)) == pytest.approx(6.02, abs=0.1)


def test_psnr_mask_restricts():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[:4] = 0.5  # error only in the top half
    mask = np.zeros((8, 8))
    mask[4:] = 1.0
    assert psnr(_img(a), _img(b), mask=mask) == 99.0
    assert psnr(_img(a), _img(b)) < 15.0


def test_psnr_shape_contract():
    with pytest.raises(ContractError):
        psnr(_img(np.zeros((8, 8, 3))), _img(np.zeros((8, 9, 3))))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(2)
    base = rng.uniform(0.3, 0.7, (24, 24, 3))
    values = []
    for amp in (0.02, 0.05, 0.1, 0.2, 0.4):
        noisy = base + rng.uniform(-amp, amp, base.shape)
        values.append(psnr(_img(base), _img(noisy)))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_ssim_identical_and_symmetry():
    rng = np.random.default_rng(3)
    a = _img(rng.uniform(0, 1, (24, 24, 3)))
    b = _img(rng.uniform(0, 1, (24, 24, 3)))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) <= 1.0 + 1e-9


def test_ssim_against_reference_implementation():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ours = ssim(_img(a), _img(b))
    reference = skimage_ssim(
        a, b, channel_axis=2, data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    )
    assert ours == pytest.approx(reference, abs=5e-3)


def test_ssim_negative_checker_low():
    g = np.indices((32, 32)).sum(axis=0) % 2
    img = np.repeat(g[..., None], 3, axis=2).astype(np.float64)
    assert ssim(_img(img), _img(1.0 - img)) < 0.2


def test_ssim_small_image_contract():
    with pytest.raises(ContractError):
        ssim(_img(np.zeros((8, 8, 3))), _img(np.zeros((8, 8, 3))))


def test_validation_accuracy():
    assert validation_accuracy(30.0, 30.0) == 100.0
    assert validation_accuracy(20.46, 30.0) == pytest.approx(68.2)
    with pytest.raises(ContractError):
        validation_accuracy(20.0, 0.0)


def test_metric_report_dict():
    rep = MetricReport(psnr=25.0, ssim=0.9)
    assert rep.as_dict() == {"psnr": 25.0, "ssim": 0.9}
    rep = MetricReport(psnr=25.0, ssim=0.9, validation_accuracy=68.2)
    assert rep.as_dict()["validation_accuracy"] == 68.2
