import numpy as np
import pytest
import torch
from scipy import stats

from m3ae import losses as L
from m3ae import masking as M
from m3ae.inversion import SubstituteImage, freeze_substitute, init_substitute, inversion_step


def test_init_statistics():
    sub = init_substitute((4, 32, 32, 32), seed=0)
    v = sub.numpy().ravel()
    assert abs(v.mean()) < 0.01
    assert v.std() == pytest.approx(1.0, abs=0.01)
    sample = np.random.default_rng(0).choice(v, 5000, replace=False)
    assert stats.kstest(sample, "norm").pvalue > 0.01


def test_seed_determinism():
    assert init_substitute((4, 8, 8, 8), 3).checksum() == init_substitute((4, 8, 8, 8), 3).checksum()
    assert init_substitute((4, 8, 8, 8), 3).checksum() != init_substitute((4, 8, 8, 8), 4).checksum()


def test_zero_gradient_leaves_image_unchanged():
    sub = init_substitute((4, 8, 8, 8), 0)
    before = sub.numpy()
    for _ in range(5):
        inversion_step(sub, torch.zeros(sub.shape), lr=1e-2)
    assert np.array_equal(sub.numpy(), before)


def test_regularizer_alone_shrinks_norm():
    sub = init_substitute((4, 8, 8, 8), 1)
    gamma = 0.005
    norms = [np.linalg.norm(sub.numpy())]
    for _ in range(100):
        sub.zero_grad()
        (gamma * L.l2_reg(sub.tensor())).backward()
        sub.step(1e-2)
        norms.append(np.linalg.norm(sub.numpy()))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_nonfinite_gradient_rejected():
    sub = init_substitute((4, 4, 4, 4), 0)
    grad = torch.zeros(sub.shape)
    grad[0, 0, 0, 0] = float("inf")
    with pytest.raises(FloatingPointError):
        inversion_step(sub, grad, 1e-3)


def _pretrain_setup(toy_model, gamma):
    g = torch.Generator().manual_seed(11)
    x = torch.rand(1, 4, 16, 16, 16, generator=g, dtype=torch.float64)
    spec = M.sample_pretrain_mask(4, (16, 16, 16), 8, 0.875, np.random.default_rng(2))
    mask = torch.from_numpy(spec.voxel_mask())[None]
    sub = init_substitute((4, 16, 16, 16), 5, dtype=torch.float64)
    weights = L.LossWeights(gamma_reg=gamma)

    def objective():
        xs = sub.tensor()
        recon = toy_model(M.apply_substitution(x, xs[None], mask)).recon
        return L.pretrain_objective(weights, recon, x, xs)[0]

    return sub, mask, objective


def test_substitute_gradient_matches_finite_differences(toy_model, fd, rel_err):
    sub, mask, objective = _pretrain_setup(toy_model, 0.005)
    objective().backward()
    grad = sub.voxels.grad.clone().view(-1)
    flat_mask = mask[0].reshape(-1).numpy()
    rng = np.random.default_rng(4)
    idx = np.concatenate([rng.choice(np.flatnonzero(flat_mask), 15, replace=False),
                          rng.choice(np.flatnonzero(~flat_mask), 5, replace=False)])
    with torch.no_grad():
        for i in idx:
            assert rel_err(grad[i].item(), fd(objective, sub.voxels, int(i), h=1e-5)) < 1e-4


def test_unmasked_coordinates_get_no_gradient_without_regularizer(toy_model):
    sub, mask, objective = _pretrain_setup(toy_model, 0.0)
    objective().backward()
    grad = sub.voxels.grad[None]
    assert torch.count_nonzero(grad[~mask]) == 0
    assert torch.count_nonzero(grad[mask]) > 0


def test_freeze_and_checkpoint_roundtrip():
    sub = init_substitute((4, 8, 8, 8), 2)
    inversion_step(sub, torch.ones(sub.shape), 1e-2)
    frozen = freeze_substitute(sub)
    assert not frozen.trainable
    assert frozen.checksum() == sub.checksum()
    with pytest.raises(RuntimeError):
        frozen.step(1e-3)
    back = SubstituteImage.from_state_dict(sub.state_dict())
    assert back.checksum() == sub.checksum()
    inversion_step(sub, torch.ones(sub.shape), 1e-2)
    inversion_step(back, torch.ones(back.shape), 1e-2)
    assert back.checksum() == sub.checksum()
