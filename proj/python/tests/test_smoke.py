import numpy as np
import pytest

import lfkm


def test_param_count_closed_forms():
    assert lfkm.estimate_per_view_params(5, 3, 5, 3, 3, 2, 3) == 4725
    assert lfkm.estimate_allocated_params(5, 3, 5, 3, 3, 2, 3) == 2025


def test_compute_bpp_hand_case():
    bpp = lfkm.compute_bpp(100000, 512, 512, 9, 9)
    assert f"{bpp:.6g}" == "0.037676"


def test_fb_bases_shape_and_norm():
    bases = lfkm.fb_bases(3, 6)
    assert bases.shape == (3, 3, 6)
    norms = np.sqrt((bases**2).sum(axis=(0, 1)))
    assert np.allclose(norms, 1.0)


def test_synthetic_shapes():
    lf = lfkm.make_synthetic("checkerboard-parallax", 20, 24, 2, 3, 1.0)
    assert lf.shape == (2, 3, 3, 20, 24)
    assert lf.min() >= 0.0 and lf.max() <= 1.0


def test_encode_decode_roundtrip():
    lfkm.set_num_threads(1)
    lf = lfkm.make_synthetic("gradient", 17, 17, 2, 2, 0.0)
    blob = lfkm.encode(
        lf, c_m=2, c_d=4, r=4, n=16, seed=11,
        epochs=2, uses_per_sai=20, quant_uses_per_sai=5,
    )
    assert isinstance(blob, bytes) and len(blob) > 0

    meta = lfkm.info(blob)
    assert meta["U"] == 2 and meta["V"] == 2
    assert meta["X"] == 17 and meta["Y"] == 17
    assert meta["bpp"] == pytest.approx(8.0 * len(blob) / (17 * 17 * 4))

    out = lfkm.decode(blob)
    assert out.shape == lf.shape
    assert np.isfinite(out).all()
    assert out.min() > 0.0 and out.max() < 1.0

    one = lfkm.decode_view(blob, 1, 0)
    assert np.array_equal(one, out[1, 0])

    mean_psnr = np.mean(
        [lfkm.psnr(out[u, v], lf[u, v]) for u in range(2) for v in range(2)]
    )
    assert mean_psnr > 10.0


def test_encode_deterministic():
    lfkm.set_num_threads(1)
    lf = lfkm.make_synthetic("gradient", 17, 17, 2, 2, 0.0)
    kwargs = dict(c_m=2, c_d=4, r=4, n=16, seed=3,
                  epochs=1, uses_per_sai=10, quant_uses_per_sai=0)
    assert lfkm.encode(lf, **kwargs) == lfkm.encode(lf, **kwargs)


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        lfkm.encode(np.zeros((2, 2, 4, 17, 17)))
    lf = lfkm.make_synthetic("gradient", 17, 17, 2, 2, 0.0)
    blob = lfkm.encode(lf, c_m=2, c_d=4, r=4, n=16, seed=5,
                       epochs=1, uses_per_sai=5, quant_uses_per_sai=0)
    with pytest.raises(ValueError):
        lfkm.decode_view(blob, 2, 0)
