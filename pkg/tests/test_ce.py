import math

import pytest
import torch

from conftest import random_map, random_mask
from scripts.ce import (
    LossWeights,
    assemble_decoder_input,
    latent_prior_mask,
    multiscale_aux_loss,
    support_prior_mask,
    total_loss,
)
from scripts.errors import DimensionError
from scripts.losses import cross_entropy_ignore
from scripts.numeric import cosine

EPS = 1e-7


def grid(*vectors, h=1, w=None):
    w = w or len(vectors)
    X = torch.tensor(vectors, dtype=torch.float64)  # hw x C
    return X.T.reshape(X.shape[1], h, w).contiguous()


def test_latent_prior_example():
    F_m = grid((1.0, 0.0), (0.0, 1.0), (1.0, 1.0))
    M = torch.ones(1, 3, dtype=torch.uint8)
    out = latent_prior_mask(torch.tensor([1.0, 0.0], dtype=torch.float64), F_m, M, EPS)
    s = 1 / math.sqrt(2)
    assert out[0].tolist() == pytest.approx([1 / (1 + EPS), 0.0, s / (1 + EPS)], abs=1e-12)


def test_latent_prior_outside_region_uses_zero_features():
    F_m = grid((1.0, 0.0), (1.0, 0.0), (-1.0, 0.0))
    M = torch.tensor([[1, 0, 1]], dtype=torch.uint8)
    out = latent_prior_mask(torch.tensor([1.0, 0.0], dtype=torch.float64), F_m, M, EPS)
    # raw cosines (1, 0, -1)
    assert out[0].tolist() == pytest.approx([2 / (2 + EPS), 1 / (2 + EPS), 0.0], abs=1e-12)


def test_latent_prior_matches_loop(tgen, rng):
    F_m = random_map(tgen, 5, 4, 4)
    M = random_mask(rng, 4, 4, labels=(0, 1, 255))
    M[0, 0] = 1
    v = random_map(tgen, 5, 1, 1).reshape(-1)
    raw = torch.zeros(16, dtype=torch.float64)
    for i in range(16):
        y, x = divmod(i, 4)
        if int(M[y, x]) == 1:
            raw[i] = cosine(v, F_m[:, y, x])
    expected = (raw - raw.min()) / (raw.max() - raw.min() + EPS)
    assert torch.allclose(latent_prior_mask(v, F_m, M, EPS).reshape(-1), expected, atol=1e-12)


def test_latent_prior_range_and_argmax(tgen, rng):
    for _ in range(50):
        F_m = random_map(tgen, 4, 5, 5)
        M = random_mask(rng, 5, 5)
        M[2, 2] = 1
        v = F_m[:, 2, 2].clone()
        out = latent_prior_mask(v, F_m, M, EPS)
        assert float(out.min()) >= 0.0 and float(out.max()) < 1.0
        # v equals a region feature, so the region reaches the top value
        assert int(M.reshape(-1)[int(out.argmax())]) == 1


def test_latent_prior_zero_prototype_is_zero_map(tgen):
    F_m = random_map(tgen, 3, 2, 2)
    out = latent_prior_mask(torch.zeros(3, dtype=torch.float64), F_m, torch.ones(2, 2, dtype=torch.uint8))
    assert torch.equal(out, torch.zeros(2, 2, dtype=torch.float64))


def test_latent_prior_shape_errors(tgen):
    F_m = random_map(tgen, 3, 2, 2)
    with pytest.raises(DimensionError):
        latent_prior_mask(torch.ones(4, dtype=torch.float64), F_m, torch.ones(2, 2, dtype=torch.uint8))
    with pytest.raises(DimensionError):
        latent_prior_mask(torch.ones(3, dtype=torch.float64), F_m, torch.ones(3, 2, dtype=torch.uint8))


def test_support_prior_example():
    F_q = grid((1.0, 0.0), (0.0, 1.0))
    F_s = grid((1.0, 0.0), (0.0, 1.0))
    M_s = torch.tensor([[1, 0]], dtype=torch.uint8)
    out = support_prior_mask(F_q, F_s, M_s, EPS)
    assert out[0].tolist() == pytest.approx([1 / (1 + EPS), 0.0], abs=1e-15)


def test_support_prior_empty_foreground_is_zero(tgen):
    out = support_prior_mask(random_map(tgen, 3, 2, 3), random_map(tgen, 3, 4, 4), torch.zeros(4, 4, dtype=torch.uint8))
    assert torch.equal(out, torch.zeros(2, 3, dtype=torch.float64))


def test_support_prior_matches_loop(tgen, rng):
    for _ in range(200):
        F_q, F_s = random_map(tgen, 4, 3, 3), random_map(tgen, 4, 4, 2)
        M_s = random_mask(rng, 4, 2)
        M_s[0, 0] = 1
        raw = torch.empty(9, dtype=torch.float64)
        for i in range(9):
            qy, qx = divmod(i, 3)
            best = -2.0
            for j in range(8):
                sy, sx = divmod(j, 2)
                if int(M_s[sy, sx]) == 1:
                    best = max(best, float(cosine(F_q[:, qy, qx], F_s[:, sy, sx])))
            raw[i] = best
        expected = (raw - raw.min()) / (raw.max() - raw.min() + EPS)
        assert torch.allclose(support_prior_mask(F_q, F_s, M_s, EPS).reshape(-1), expected, atol=1e-12)


def test_support_prior_range(tgen, rng):
    for _ in range(50):
        M_s = random_mask(rng, 3, 3)
        M_s[1, 1] = 1
        out = support_prior_mask(random_map(tgen, 3, 4, 4), random_map(tgen, 3, 3, 3), M_s)
        assert float(out.min()) >= 0.0 and float(out.max()) < 1.0


def test_prior_masks_stay_below_one_in_float32():
    # opposite vectors give raw cosines spanning [-1, 1]
    F = grid((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0)).float()
    M = torch.ones(1, 3, dtype=torch.uint8)
    latent = latent_prior_mask(torch.tensor([1.0, 0.0]), F, M)
    support = support_prior_mask(F, F[:, :, :1].contiguous(), torch.ones(1, 1, dtype=torch.uint8))
    for out in (latent, support):
        assert out.dtype == torch.float32
        assert float(out.min()) == 0.0 and float(out.max()) < 1.0
        assert int(out.argmax()) == 0


def test_support_prior_channel_mismatch(tgen):
    with pytest.raises(DimensionError):
        support_prior_mask(random_map(tgen, 3, 2, 2), random_map(tgen, 4, 2, 2), torch.ones(2, 2, dtype=torch.uint8))


def test_assemble_layout(tgen):
    F_m = random_map(tgen, 3, 2, 4)
    proto = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    prior = torch.rand(2, 4, generator=tgen, dtype=torch.float64)
    x = assemble_decoder_input(F_m, proto, prior)
    assert x.shape == (7, 2, 4)
    assert torch.equal(x[:3], F_m)
    for c in range(3):
        assert torch.equal(x[3 + c], torch.full((2, 4), proto[c].item(), dtype=torch.float64))
    assert torch.equal(x[6], prior)


def test_assemble_rejects_bad_shapes(tgen):
    F_m = random_map(tgen, 3, 2, 2)
    with pytest.raises(DimensionError):
        assemble_decoder_input(F_m, torch.ones(2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64))
    with pytest.raises(DimensionError):
        assemble_decoder_input(F_m, torch.ones(3, dtype=torch.float64), torch.zeros(3, 3, dtype=torch.float64))


def test_total_loss_default_weights():
    assert total_loss(0.7, 0.4, 0.2, LossWeights()) == pytest.approx(0.94, abs=1e-12)


def test_total_loss_zero_ce_weight():
    assert total_loss(0.7, 0.4, 0.2, LossWeights(w_ce=0.0)) == pytest.approx(0.9, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(w_ce=-0.1)
    with pytest.raises(ValueError):
        LossWeights(w_aux=float("nan"))
    assert not LossWeights(w_ce=0.0).ce_active
    assert not LossWeights(ce_enabled=False).ce_active
    assert LossWeights().ce_active


def test_multiscale_aux_is_sum_of_scales(tgen, rng):
    preds, masks = [], []
    for size in (4, 2):
        preds.append(torch.softmax(torch.randn(2, size, size, generator=tgen, dtype=torch.float64), dim=0))
        masks.append(random_mask(rng, size, size, labels=(0, 1, 255)))
    expected = sum(float(cross_entropy_ignore(P, M)) for P, M in zip(preds, masks))
    assert float(multiscale_aux_loss(preds, masks)) == pytest.approx(expected, abs=1e-12)


def test_multiscale_aux_length_mismatch():
    P = torch.full((2, 2, 2), 0.5, dtype=torch.float64)
    with pytest.raises(DimensionError):
        multiscale_aux_loss([P, P], [torch.zeros(2, 2, dtype=torch.uint8)])
