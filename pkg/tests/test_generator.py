import numpy as np
import pytest
import torch

from facerenov.generator import (
    Generator,
    ReplenishBlock,
    SpadeNorm,
    ablate_stage_forward,
    ablation_grid,
    generator_forward,
    instance_normalize,
    prefix_active_sets,
    spade_normalize,
)
from oracles import gradcheck_params


def _d(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _small_gen(seed=0, **kw):
    torch.manual_seed(seed)
    return Generator(32, (8, 8), spade_hidden=8, **kw).double()


def test_spade_zero_modulation_is_normalization():
    torch.manual_seed(0)
    blk = SpadeNorm(4, 3, 8).double()
    for conv in (blk.gamma, blk.beta):
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    x, g = _d(2, 4, 6, 6, seed=1), _d(2, 3, 12, 12, seed=2)
    assert torch.allclose(spade_normalize(x, g, blk), instance_normalize(x), atol=1e-12)
    n = instance_normalize(x)
    assert torch.allclose(n.mean((2, 3)), torch.zeros(2, 4, dtype=torch.float64), atol=1e-12)


def test_spade_constant_input_gives_beta():
    torch.manual_seed(1)
    blk = SpadeNorm(3, 2, 8).double()
    x = torch.ones(1, 3, 5, 5, dtype=torch.float64) * torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64).view(1, 3, 1, 1)
    g = _d(1, 2, 5, 5, seed=3)
    _, beta = blk.params(g, (5, 5))
    assert torch.allclose(blk(x, g), beta, atol=1e-12)


def test_spade_mean_equals_beta_mean_when_gamma_zero():
    torch.manual_seed(2)
    blk = SpadeNorm(3, 2, 8).double()
    torch.nn.init.zeros_(blk.gamma.weight)
    torch.nn.init.zeros_(blk.gamma.bias)
    x, g = _d(1, 3, 6, 6, seed=4), _d(1, 2, 6, 6, seed=5)
    _, beta = blk.params(g, (6, 6))
    assert torch.allclose(blk(x, g).mean((2, 3)), beta.mean((2, 3)), atol=1e-12)


def test_spade_gradients():
    torch.manual_seed(3)
    blk = SpadeNorm(3, 2, 4).double()
    x, g = _d(1, 3, 4, 4, seed=6).requires_grad_(True), _d(1, 2, 4, 4, seed=7).requires_grad_(True)
    w = _d(1, 3, 4, 4, seed=8)
    err = gradcheck_params(lambda: (spade_normalize(x, g, blk) * w).sum(), [x, g] + list(blk.parameters()))
    assert err < 1e-4


def test_replenish_block_shape_and_gradients():
    torch.manual_seed(4)
    blk = ReplenishBlock(8, 4, 3, 4).double()
    x, g = _d(1, 8, 4, 4, seed=9).requires_grad_(True), _d(1, 3, 4, 4, seed=10)
    out = blk(x, g)
    assert out.shape == (1, 4, 8, 8)
    assert torch.equal(out, blk(x, g))
    w = _d(1, 4, 8, 8, seed=11)
    err = gradcheck_params(lambda: (blk(x, g) * w).sum(), [x] + list(blk.parameters()))
    assert err < 1e-4


def test_generator_contract(face):
    torch.manual_seed(5)
    g = Generator(64, (8, 16, 16, 16), spade_hidden=8)
    out = generator_forward(face, g)
    assert out.shape == face.shape and out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, generator_forward(face, g))
    with pytest.raises(ValueError):
        g(torch.zeros(1, 3, 32, 32))


def test_descent_step():
    g = _small_gen(6)
    x, y = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1, torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    # the training optimizer (Adam, moments (0, 0.9)) at lr 1e-4
    opt = torch.optim.Adam(g.parameters(), lr=1e-4, betas=(0.0, 0.9))
    before = ((g(x) - y) ** 2).sum()
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = ((g(x) - y) ** 2).sum()
    assert after.item() < before.item()


def test_stage_ablation(face):
    torch.manual_seed(7)
    g = Generator(64, (8, 8, 8, 8), spade_hidden=8)
    assert np.array_equal(ablate_stage_forward(face, g, range(4)), generator_forward(face, g))
    other = np.clip(face[::-1] * 0.5 + 0.2, 0, 1)
    assert np.array_equal(ablate_stage_forward(face, g, []), ablate_stage_forward(other, g, []))
    assert not np.array_equal(ablate_stage_forward(face, g, [3]), ablate_stage_forward(other, g, [3]))
    sets = prefix_active_sets(4)
    assert sets[0] == [] and sets[1] == [3] and sorted(sets[-1]) == [0, 1, 2, 3]
    grid = ablation_grid(face, g)
    assert grid.shape == (64, 64 * 6, 3)
    with pytest.raises(ValueError, match="0..3"):
        ablate_stage_forward(face, g, [4])


def test_fixconv_generator_equals_unit_modulation():
    g = _small_gen(8)
    fix = _small_gen(8, adaptive=False)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    for st in g.encoder.stages:
        st.modulation = lambda z, st=st: torch.ones_like(st.__class__.modulation(st, z))
    assert torch.allclose(g(x), fix(x), atol=1e-12)


def test_end_to_end_two_stage_gradients():
    g = _small_gen(9)
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    y = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    loss = lambda: ((g(x) - y) ** 2).mean()  # noqa: E731
    # a 1e-5 step straddles leaky-ReLU kinks somewhere in the network; 1e-6 does not
    err = gradcheck_params(loss, list(g.parameters()), eps=1e-6, max_entries=6)
    assert err < 1e-3
