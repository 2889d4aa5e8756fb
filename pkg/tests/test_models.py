import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from abt.augment import mask_patches
from abt.encoder import (AudioNTT, AudioNTTConfig, EncoderConfig, ViT, ViTConfig, build_encoder,
                         patchify, sinusoidal_posenc, unpatchify)
from abt.objective import LossConfig, barlow_twins_loss
from abt.projector import Projector, ProjectorConfig

from oracles import param_grad_check


def tiny_vit(variant="vit_c", **kw):
    cfg = ViTConfig(variant=variant, size="T", patch_h=8, patch_w=4, n_mels=16, max_frames=16,
                    dim=16, depth=1, heads=2, **kw)
    torch.manual_seed(0)
    return ViT(cfg).double()


# -- AudioNTT -------------------------------------------------------------------

def test_audiontt_shapes():
    torch.manual_seed(0)
    enc = AudioNTT(AudioNTTConfig()).eval()
    x = torch.randn(8, 64, 96)
    assert enc(x).shape == (8, 2048)
    assert enc(torch.randn(2, 64, 192)).shape == (2, 2048)


def test_audiontt_constant_batch_equal_rows():
    enc = AudioNTT(AudioNTTConfig(fc_width=32)).eval()
    out = enc(torch.full((4, 64, 32), 0.7))
    assert torch.allclose(out, out[0].expand_as(out))


def test_audiontt_rejects_bad_input():
    with pytest.raises(ValueError):
        AudioNTT(AudioNTTConfig(n_mels=60))
    enc = AudioNTT(AudioNTTConfig(fc_width=8))
    with pytest.raises(ValueError):
        enc(torch.randn(2, 64, 16), mask=torch.arange(3))


def test_audiontt_gradients():
    torch.manual_seed(1)
    cfg = AudioNTTConfig(conv_channels=4, fc_width=6, n_mels=16)
    enc = AudioNTT(cfg).double()
    x = torch.randn(3, 16, 16, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64)
    param_grad_check(enc, lambda: (torch.tanh(enc(x)) * w).sum())


# -- patches and positional encodings -------------------------------------------

@pytest.mark.parametrize("ph,pw,grid", [(16, 8, (4, 12)), (64, 2, (1, 48))])
def test_patch_count(ph, pw, grid):
    x = np.arange(64 * 96, dtype=float).reshape(64, 96)
    p = patchify(x, ph, pw)
    assert p.shape == (48, ph * pw)
    # frequency-major: patch 1 is the next patch along time in the top band
    np.testing.assert_array_equal(p[1].reshape(ph, pw), x[:ph, pw:2 * pw])
    np.testing.assert_array_equal(unpatchify(p, ph, pw, grid[0]), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((64, 90)), 16, 8)


def test_posenc_properties():
    pe = sinusoidal_posenc(300, 64)
    np.testing.assert_allclose(pe[0, 0::2], 0.0)
    np.testing.assert_allclose(pe[0, 1::2], 1.0)
    assert np.all(np.abs(pe) <= 1.0)
    # exhaustive pairwise distinctness at desk sizes
    for n, d in [(48, 192), (24, 192), (300, 64)]:
        enc = sinusoidal_posenc(n, d)
        dist = np.linalg.norm(enc[:, None] - enc[None], axis=-1)
        assert np.all(dist[~np.eye(n, dtype=bool)] > 1e-6)
    with pytest.raises(ValueError):
        sinusoidal_posenc(4, 5)


# -- ViT ------------------------------------------------------------------------

def test_vit_size_t_output_dim():
    torch.manual_seed(0)
    cfg = ViTConfig(size="T", depth=1)
    vit = ViT(cfg).eval()
    assert cfg.n_patches == 48
    assert vit(torch.randn(2, 64, 96)).shape == (2, 192)


@pytest.mark.parametrize("variant", ["vit", "vit_c"])
def test_vit_zero_mask_equals_no_mask(variant):
    vit = tiny_vit(variant).eval()
    x = torch.randn(3, 16, 16, dtype=torch.float64)
    plan = mask_patches(8, 0.0, np.random.default_rng(0))
    kept = torch.from_numpy(plan.kept_indices)
    assert torch.allclose(vit(x), vit(x, kept), atol=1e-10)


@pytest.mark.parametrize("variant", ["vit", "vit_c"])
def test_vit_permutation_invariance_with_tied_positions(variant):
    vit = tiny_vit(variant).eval()
    x = torch.randn(2, 16, 16, dtype=torch.float64)
    kept = torch.tensor([5, 1, 7, 2])
    perm = kept[torch.tensor([3, 0, 2, 1])]
    assert torch.allclose(vit(x, kept), vit(x, perm), atol=1e-5)


def test_vit_masked_tokens_never_reach_blocks():
    vit = tiny_vit().eval()
    seen = []
    vit.blocks[0].register_forward_pre_hook(lambda m, a: seen.append(a[0].shape[1]))
    plan = mask_patches(8, 0.5, np.random.default_rng(0))
    vit(torch.randn(1, 16, 16, dtype=torch.float64), torch.from_numpy(plan.kept_indices))
    assert seen == [4 + 1]
    # N = 48 at r = 0.5 -> ceil(48 / 2) + 1 tokens
    cfg = ViTConfig(depth=1)
    full = ViT(cfg).eval()
    seen.clear()
    full.blocks[0].register_forward_pre_hook(lambda m, a: seen.append(a[0].shape[1]))
    plan = mask_patches(48, 0.5, np.random.default_rng(0))
    full(torch.randn(1, 64, 96), torch.from_numpy(plan.kept_indices))
    assert seen == [-(-48 // 2) + 1]


def test_vit_masked_output_ignores_masked_content():
    vit = tiny_vit("vit").eval()
    x = torch.randn(1, 16, 16, dtype=torch.float64)
    kept = torch.tensor([0, 1, 2, 3])  # first frequency band only
    y = x.clone()
    y[:, 8:] += 5.0  # alter only the masked band
    assert torch.allclose(vit(x, kept), vit(y, kept))


def test_vit_empty_kept_rejected():
    vit = tiny_vit()
    with pytest.raises(ValueError, match="no tokens kept"):
        vit(torch.randn(1, 16, 16, dtype=torch.float64), torch.zeros(1, 0, dtype=torch.long))


def test_vit_conv_stem_grid_matches_patch_grid():
    for ph, pw in [(16, 8), (16, 16), (64, 2)]:
        cfg = ViTConfig(patch_h=ph, patch_w=pw, depth=1)
        vit = ViT(cfg)
        assert vit.tokens(torch.randn(1, 64, 96)).shape == (1, cfg.n_patches, 192)


def test_vit_inference_deterministic():
    vit = tiny_vit().eval()
    x = torch.randn(2, 16, 16, dtype=torch.float64)
    assert torch.equal(vit(x), vit(x))


@pytest.mark.parametrize("variant", ["vit", "vit_c"])
def test_vit_gradients(variant):
    vit = tiny_vit(variant)
    x = torch.randn(3, 16, 16, dtype=torch.float64)
    w = torch.randn(16, dtype=torch.float64)
    param_grad_check(vit, lambda: (torch.tanh(vit(x)) * w).sum())


def test_vit_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(patch_w=7)
    with pytest.raises(ValueError):
        ViTConfig(size="XL")
    with pytest.raises(ValueError):
        ViT(ViTConfig(variant="vit_c", patch_h=12, n_mels=48))


def test_build_encoder_kinds():
    assert isinstance(build_encoder(EncoderConfig(kind="audiontt")), AudioNTT)
    assert EncoderConfig(kind="vit").rep_dim == 192


# -- projector --------------------------------------------------------------------

def test_projector_default_chain():
    assert ProjectorConfig(in_dim=2048).layer_dims == [2048, 8192, 1048]
    assert ProjectorConfig(in_dim=8, n_hidden_layers=0).layer_dims == [8, 1048]


@pytest.mark.parametrize("depth,out_dim", list(itertools.product(range(5), [64, 256, 1048, 16384])))
def test_projector_shape_grid(depth, out_dim):
    proj = Projector(ProjectorConfig(in_dim=8, hidden_dim=16, out_dim=out_dim, n_hidden_layers=depth))
    assert proj(torch.randn(3, 8)).shape == (3, out_dim)


def test_projector_zero_final_layer():
    proj = Projector(ProjectorConfig(in_dim=8, hidden_dim=16, out_dim=4))
    torch.nn.init.zeros_(proj.net[-1].weight)
    torch.nn.init.zeros_(proj.net[-1].bias)
    assert torch.count_nonzero(proj(torch.randn(5, 8))) == 0


def test_projector_batch_of_one():
    proj = Projector(ProjectorConfig(in_dim=8, hidden_dim=16, out_dim=4))
    with pytest.raises(ValueError, match="batch norm undefined"):
        proj(torch.randn(1, 8))
    proj.eval()
    assert proj(torch.randn(1, 8)).shape == (1, 4)


def test_projector_gradients():
    torch.manual_seed(2)
    proj = Projector(ProjectorConfig(in_dim=5, hidden_dim=7, out_dim=4, n_hidden_layers=2)).double()
    y = torch.randn(6, 5, dtype=torch.float64)
    w = torch.randn(4, dtype=torch.float64)
    param_grad_check(proj, lambda: (torch.tanh(proj(y)) * w).sum())


def test_full_stack_through_loss_gradients():
    vit = tiny_vit()
    torch.manual_seed(3)
    proj = Projector(ProjectorConfig(in_dim=16, hidden_dim=12, out_dim=6)).double()
    model = torch.nn.ModuleDict({"enc": vit, "proj": proj})
    x1 = torch.randn(5, 16, 16, dtype=torch.float64)
    x2 = x1 + 0.3 * torch.randn(5, 16, 16, dtype=torch.float64)

    def loss():
        z1, z2 = proj(vit(x1)), proj(vit(x2))
        return barlow_twins_loss(z1, z2, LossConfig())[0]

    param_grad_check(model, loss, coords_per_param=3)


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000))
def test_vit_output_finite(B, seed):
    torch.manual_seed(seed)
    vit = tiny_vit()
    assert torch.isfinite(vit(torch.randn(B, 16, 16, dtype=torch.float64))).all()
