import math

import numpy as np
import pytest
import torch

from occflow.funcae import LatentEncoder, OccupancyDecoder, stage_a_loss


def make_pair(latent_dim=128, cond_dim=64, seed=0):
    torch.manual_seed(seed)
    enc = LatentEncoder(latent_dim=latent_dim, cond_dim=cond_dim, hidden=32, layers=3)
    dec = OccupancyDecoder(latent_dim=latent_dim, cond_dim=cond_dim, hidden=32, blocks=2)
    return enc.eval(), dec.eval()


def random_sample(b=2, q=50, cond_dim=64, seed=1):
    g = torch.Generator().manual_seed(seed)
    pos = torch.rand(b, q, 3, generator=g) - 0.5
    vals = (torch.rand(b, q, generator=g) > 0.5).float()
    cond = torch.randn(b, cond_dim, generator=g)
    return pos, vals, cond


def test_latent_dimension_default():
    enc, _ = make_pair()
    pos, vals, cond = random_sample()
    z = enc(pos, vals, cond)
    assert z.shape == (2, 128)
    assert torch.isfinite(z).all()


def test_latent_invariant_to_query_permutation():
    enc, _ = make_pair()
    pos, vals, cond = random_sample()
    perm = torch.randperm(pos.shape[1], generator=torch.Generator().manual_seed(2))
    z1 = enc(pos, vals, cond)
    z2 = enc(pos[:, perm], vals[:, perm], cond)
    assert (z1 - z2).abs().max() < 1e-5


def test_latent_without_cond_differs_but_works():
    enc, _ = make_pair()
    pos, vals, cond = random_sample()
    z_cond = enc(pos, vals, cond)
    z_none = enc(pos, vals, None)
    assert z_none.shape == z_cond.shape
    assert (z_cond - z_none).abs().max() > 0


def test_latent_signed_value_mapping_matters():
    enc, _ = make_pair()
    pos, vals, cond = random_sample()
    z_signed = enc(pos, vals, cond)
    enc.signed_values = False
    z_raw = enc(pos, vals, cond)
    assert (z_signed - z_raw).abs().max() > 0


def test_decoder_outputs_probabilities():
    enc, dec = make_pair()
    pos, vals, cond = random_sample()
    z = enc(pos, vals, cond)
    with torch.no_grad():
        probs = dec(pos, z.detach(), cond)
    assert probs.shape == vals.shape
    assert float(probs.min()) >= 0.0 and float(probs.max()) <= 1.0


def test_decoder_batch_equals_single_calls():
    enc, dec = make_pair()
    pos, vals, cond = random_sample(b=1, q=100)
    z = enc(pos, vals, cond)
    with torch.no_grad():
        full = dec(pos, z, cond)
        singles = torch.cat([dec(pos[:, i : i + 1], z, cond) for i in range(100)], dim=1)
    assert (full - singles).abs().max() < 1e-6


def test_decoder_dimension_mismatch_errors():
    _, dec = make_pair()
    pos = torch.rand(2, 10, 3)
    with pytest.raises(ValueError):
        dec(pos, torch.zeros(2, 7), torch.zeros(2, 64))
    with pytest.raises(ValueError):
        dec(pos, torch.zeros(2, 128), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        dec(pos, torch.zeros(1, 128), torch.zeros(2, 64))


def test_stage_a_loss_floor_and_components():
    q = 40
    eps = 1e-3
    labels = (torch.rand(1, q, generator=torch.Generator().manual_seed(3)) > 0.5).float()
    probs = labels * (1 - eps) + (1 - labels) * eps
    coarse = torch.rand(1, 16, 3)
    total, comps = stage_a_loss(probs, labels, coarse, coarse.clone(), eta=1000.0)
    assert comps["l_cd"].item() == pytest.approx(0.0, abs=1e-12)
    assert total.item() <= q * (-math.log(1 - eps)) + 1e-6


def test_stage_a_loss_eta_zero_is_occ_only():
    probs = torch.full((1, 10), 0.4)
    labels = torch.zeros(1, 10)
    coarse = torch.zeros(1, 4, 3)
    gt = torch.ones(1, 4, 3)
    total, comps = stage_a_loss(probs, labels, coarse, gt, eta=0.0)
    assert total.item() == pytest.approx(comps["l_occ"].item())
    assert comps["l_cd"].item() > 0  # still reported, just unweighted


def test_stage_a_loss_uniform_half_is_q_ln2():
    q = 1000
    probs = torch.full((1, q), 0.5)
    labels = (torch.rand(1, q, generator=torch.Generator().manual_seed(4)) > 0.5).float()
    total, comps = stage_a_loss(probs, labels, torch.zeros(1, 3, 3), torch.zeros(1, 3, 3), eta=0.0)
    assert comps["l_occ"].item() == pytest.approx(q * math.log(2.0), abs=1e-3)


def test_stage_a_loss_rejects_negative_eta():
    with pytest.raises(ValueError):
        stage_a_loss(torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1, 2, 3),
                     torch.zeros(1, 2, 3), eta=-1.0)


def test_stage_a_gradient_matches_finite_differences():
    # tiny double-precision model: decoder-parameter gradients vs central differences
    torch.manual_seed(5)
    dec = OccupancyDecoder(latent_dim=8, cond_dim=8, hidden=8, blocks=1, n_freqs=2).double()
    g = torch.Generator().manual_seed(6)
    pos = (torch.rand(1, 16, 3, generator=g, dtype=torch.float64) - 0.5)
    labels = (torch.rand(1, 16, generator=g) > 0.5).double()
    z = torch.randn(1, 8, generator=g, dtype=torch.float64)
    cond = torch.randn(1, 8, generator=g, dtype=torch.float64)
    coarse = torch.rand(1, 6, 3, generator=g, dtype=torch.float64)
    gt = torch.rand(1, 9, 3, generator=g, dtype=torch.float64)

    def loss_value():
        probs = dec(pos, z, cond)
        total, _ = stage_a_loss(probs, labels, coarse, gt, eta=10.0)
        return total

    loss = loss_value()
    loss.backward()
    params = [p for p in dec.parameters() if p.requires_grad]
    flat = torch.cat([p.detach().reshape(-1) for p in params])
    grads = torch.cat([p.grad.reshape(-1) for p in params])
    rng = np.random.default_rng(7)
    coords = rng.choice(len(flat), size=20, replace=False)
    eps = 1e-6
    for c in coords:
        c = int(c)
        offset = 0
        for p in params:
            n = p.numel()
            if c < offset + n:
                idx = np.unravel_index(c - offset, p.shape)
                with torch.no_grad():
                    p[idx] += eps
                up = loss_value().item()
                with torch.no_grad():
                    p[idx] -= 2 * eps
                down = loss_value().item()
                with torch.no_grad():
                    p[idx] += eps
                fd = (up - down) / (2 * eps)
                denom = max(abs(fd), abs(grads[c].item()), 1e-8)
                assert abs(fd - grads[c].item()) / denom < 1e-3
                break
            offset += n
