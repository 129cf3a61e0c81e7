import math

import numpy as np
import pytest

from octcodec.metrics import (MSSSIM_WEIGHTS, gaussian_window, msssim, msssim_db, msssim_tensor, num_scales, psnr,
                              psnr_from_mse)
from octcodec.tensor import Tensor, gradcheck


def test_identical_images_score_one(rng):
    x = rng.uniform(0, 1, (3, 128, 128))
    assert abs(msssim(x, x) - 1.0) <= 1e-9
    assert psnr(x, x) == math.inf
    assert msssim_db(1.0) == math.inf


def test_db_conversions():
    assert msssim_db(0.9) == pytest.approx(10.0, abs=1e-12)
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    assert psnr_from_mse(1e-4) == pytest.approx(40.0, abs=1e-12)


def test_msssim_symmetric_and_drops_with_noise(rng):
    x = rng.uniform(0, 1, (3, 128, 128))
    y = np.clip(x + rng.normal(scale=0.3, size=x.shape), 0, 1)
    assert msssim(x, y) == pytest.approx(msssim(y, x), abs=1e-12)
    assert msssim(x, y) < msssim(x, np.clip(x + 0.1 * (y - x), 0, 1)) < 1.0


def test_independent_noise_images_score_low(rng):
    assert msssim(rng.uniform(0, 1, (3, 192, 192)), rng.uniform(0, 1, (3, 192, 192))) < 0.5


def test_scale_count_follows_image_size():
    assert num_scales(176, 176) == 5
    assert num_scales(175, 400) == 4
    assert num_scales(128, 128) == 4
    assert num_scales(10, 10) == 0


def test_window_normalized():
    g = gaussian_window()
    assert g.sum() == pytest.approx(1.0) and g.argmax() == 5


def test_matches_reference_implementation(rng):
    torch = pytest.importorskip("torch")
    pm = pytest.importorskip("pytorch_msssim")
    x = rng.uniform(0, 1, (2, 3, 192, 256))
    y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
    # the library builds its default window in float32; hand it a float64 one
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5**2))
    win = torch.from_numpy(np.tile(g / g.sum(), (3, 1, 1, 1)))
    ref = pm.ms_ssim(torch.from_numpy(x), torch.from_numpy(y), data_range=1.0, size_average=True, win=win,
                     weights=list(MSSSIM_WEIGHTS)).item()
    assert msssim(x, y) == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_msssim_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.2, 0.8, (1, 1, 24, 24)))
    y = Tensor(np.clip(x.data + rng.normal(scale=0.05, size=x.shape), 0, 1), requires_grad=True)
    assert gradcheck(lambda: msssim_tensor(x, y), [y], eps=1e-6, max_probes=30) < 1e-5


def test_msssim_rejects_mismatch(rng):
    with pytest.raises(ValueError, match="differ"):
        msssim(rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 31)))
