import numpy as np
import pytest
import torch

from conftest import tiny_spec

from calodqm.core import NAME_RE
from calodqm.model import (
    ActivationFault,
    ModelSpec,
    build_model,
    compute_loss,
)
from calodqm.preprocess import build_adjacency
from calodqm import synthgen


@pytest.fixture(scope="module")
def tiny(desk_geometry, desk_topo):
    spec = tiny_spec(desk_geometry.dims, T=3)
    return build_model(spec, desk_topo, seed=11)


def _batch(geometry, B=2, T=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(B, T) + geometry.dims)
    x[:, :, ~geometry.valid_mask] = 0.0
    return torch.as_tensor(x, dtype=torch.float32)


class TestNaming:
    def test_all_names_canonical(self, desk_model):
        for name in desk_model.param_names():
            assert NAME_RE.match(name), name

    def test_geometry_dependent_tensors_present(self, desk_model):
        names = set(desk_model.param_names())
        assert "encoder.fc.0.weight" in names
        assert "decoder.fc.2.weight" in names
        # the projection back to the flatten is bias-free
        assert "decoder.fc.2.bias" not in names

    def test_running_stats_only_for_bn_blocks(self, desk_model):
        running = [n for n in desk_model.param_names() if "bn_running" in n]
        blocks = {n.rsplit(".", 1)[0] for n in running}
        assert blocks == {"encoder.cnn.0", "encoder.cnn.1", "decoder.cnn.0"}


class TestInit:
    def test_same_seed_identical(self, desk_geometry, desk_topo):
        spec = tiny_spec(desk_geometry.dims)
        a = build_model(spec, desk_topo, seed=3).to_store()
        b = build_model(spec, desk_topo, seed=3).to_store()
        for name in a.names():
            assert np.array_equal(a.get(name).values, b.get(name).values)

    def test_different_seed_differs(self, desk_geometry, desk_topo):
        spec = tiny_spec(desk_geometry.dims)
        a = build_model(spec, desk_topo, seed=3).to_store()
        b = build_model(spec, desk_topo, seed=4).to_store()
        assert any(
            not np.array_equal(a.get(n).values, b.get(n).values) for n in a.names()
        )


class TestStoreInterop:
    def test_round_trip_preserves_forward(self, tiny, desk_geometry, desk_topo):
        x = _batch(desk_geometry)
        tiny.eval()
        with torch.no_grad():
            ref, _, _ = tiny(x, sample=False)
        clone = build_model(tiny.spec, desk_topo, seed=99)
        clone.load_store(tiny.to_store())
        clone.eval()
        with torch.no_grad():
            out, _, _ = clone(x, sample=False)
        assert torch.equal(ref, out)

    def test_mismatched_store_rejected(self, tiny, desk_geometry, desk_topo):
        store = tiny.to_store()
        other = build_model(tiny_spec((4, 8, 2)), build_adjacency(
            synthgen.make_geometry("custom", rbx_count=2, dims=(4, 8, 2))
        ), seed=0)
        with pytest.raises(ValueError):
            other.load_store(store)


class TestForward:
    def test_output_shape_and_range(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        tiny.eval()
        with torch.no_grad():
            recon, (mu, logvar, z), state = tiny(x, sample=False)
        assert recon.shape == x.shape
        assert recon.min() >= 0.0 and recon.max() <= 1.0
        assert mu.shape == (2, 3, tiny.spec.latent_dim)
        assert torch.equal(z, mu)  # no sampling

    def test_decode_encode_matches_forward(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        tiny.eval()
        with torch.no_grad():
            mu, logvar, _ = tiny.encode(x)
            recon_split, _ = tiny.decode(mu)
            recon_fwd, _, _ = tiny(x, sample=False)
        assert torch.equal(recon_split, recon_fwd)

    def test_sampling_seeded(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        tiny.eval()
        with torch.no_grad():
            a, _, _ = tiny(x, sample=True, generator=torch.Generator().manual_seed(5))
            b, _, _ = tiny(x, sample=True, generator=torch.Generator().manual_seed(5))
            c, _, _ = tiny(x, sample=True, generator=torch.Generator().manual_seed(6))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_nan_input_raises_with_stage(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        x[0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(ActivationFault, match="encoder"):
            tiny(x)

    def test_state_changes_output(self, tiny, desk_geometry):
        x = _batch(desk_geometry, B=1)
        tiny.eval()
        with torch.no_grad():
            r0, _, state = tiny(x, sample=False)
            r1, _, _ = tiny(x, state=state, sample=False)
        assert not torch.equal(r0, r1)


class TestLoss:
    def test_zero_at_perfect_reconstruction(self, desk_geometry, desk_topo):
        model = build_model(tiny_spec(desk_geometry.dims, T=3), desk_topo, seed=0)
        x = _batch(desk_geometry)
        mu = torch.zeros(2, 3, model.spec.latent_dim)
        logvar = torch.zeros_like(mu)
        for t in model.parameters():
            t.data.zero_()
        parts = compute_loss(
            x, x.clone(), mu, logvar, model, torch.as_tensor(desk_geometry.valid_mask)
        )
        assert float(parts.total.detach()) == 0.0
        assert float(parts.mse) == 0.0
        assert float(parts.kl) == 0.0
        assert float(parts.l2.detach()) == 0.0

    def test_kl_zero_iff_identity_gaussian(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        mask = torch.as_tensor(desk_geometry.valid_mask)
        mu = torch.zeros(2, 3, tiny.spec.latent_dim)
        logvar = torch.zeros_like(mu)
        assert float(compute_loss(x, x, mu, logvar, tiny, mask).kl) == 0.0
        assert float(compute_loss(x, x, mu + 0.5, logvar, tiny, mask).kl) > 0.0
        assert float(compute_loss(x, x, mu, logvar - 0.5, tiny, mask).kl) > 0.0

    def test_invalid_cells_do_not_affect_loss(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        recon = torch.rand_like(x)
        mask = torch.as_tensor(desk_geometry.valid_mask)
        mu = torch.zeros(2, 3, tiny.spec.latent_dim)
        logvar = torch.zeros_like(mu)
        ref = compute_loss(x, recon, mu, logvar, tiny, mask)
        x2 = x.clone()
        x2[:, :, ~desk_geometry.valid_mask] = 123.0
        out = compute_loss(x2, recon, mu, logvar, tiny, mask)
        assert float(ref.mse) == float(out.mse)

    def test_mse_matches_per_channel_average(self, tiny, desk_geometry):
        x = _batch(desk_geometry)
        recon = torch.rand_like(x)
        mask = torch.as_tensor(desk_geometry.valid_mask)
        mu = torch.zeros(2, 3, tiny.spec.latent_dim)
        logvar = torch.zeros_like(mu)
        parts = compute_loss(x, recon, mu, logvar, tiny, mask, lam=0.0, rho=0.0)
        diff = (x - recon).numpy() ** 2
        manual = diff[:, :, desk_geometry.valid_mask].sum(-1) / desk_geometry.n_channels
        assert abs(float(parts.mse) - manual.mean()) < 1e-6

    def test_l2_counts_only_trainable_weights(self, desk_geometry, desk_topo):
        model = build_model(tiny_spec(desk_geometry.dims), desk_topo, seed=0)
        before = float(model.weight_l2().detach())
        assert before > 0
        # freezing a block removes its weights from the penalty
        for name in model.param_names():
            if name.startswith("encoder.cnn") and name.endswith(".weight"):
                model.named_tensor(name).requires_grad_(False)
        assert float(model.weight_l2().detach()) < before


class TestBnPolicy:
    def test_stats_update_follows_scale_trainability(self, desk_geometry, desk_topo):
        model = build_model(tiny_spec(desk_geometry.dims), desk_topo, seed=0)
        flags = [u for _, u in model.bn_stats_modules()]
        assert flags == [True, True, True]
        model.named_tensor("encoder.cnn.0.bn_scale").requires_grad_(False)
        flags = [u for _, u in model.bn_stats_modules()]
        assert flags == [False, True, True]
