import numpy as np
import pytest
import torch

from hfvae.flow import FlowStack
from hfvae.model import ModelConfig, StyleSynthesizer
from hfvae.numerics import DiagGaussian, RngStream, grad_check
from hfvae.vae import ReferenceEncoder, elbo_loss, posterior_sample


TINY = dict(latent_dim=4, vocab_size=8, emb_dim=4, enc_hidden=6,
            attn_dim=5, dec_hidden=6, ref_hidden=6, n_bands=8)


def tiny_model(arch="arch3", k=2, seed=0):
    model = StyleSynthesizer(ModelConfig(arch=arch, K=k, **TINY))
    model.init_parameters(seed)
    return model


def rand_mel(rng, t=12, b=8):
    return torch.from_numpy(rng.normal((t, b))).to(torch.float32)


class TestReferenceEncoder:
    def test_zero_mel_zero_heads(self):
        enc = ReferenceEncoder(n_bands=8, latent_dim=4)
        with torch.no_grad():
            enc.head_mu.weight.zero_()
            enc.head_mu.bias.zero_()
            enc.head_log_var.weight.zero_()
            enc.head_log_var.bias.zero_()
        posterior, head = enc(torch.zeros(10, 8))
        assert torch.equal(posterior.mu, torch.zeros(4))
        assert torch.equal(posterior.log_var, torch.zeros(4))
        assert head is None

    def test_deterministic(self):
        model = tiny_model()
        rng = RngStream(60, "mel")
        mel = rand_mel(rng)
        p1, _ = model.ref_encoder(mel)
        p2, _ = model.ref_encoder(mel)
        assert torch.equal(p1.mu, p2.mu)
        assert torch.equal(p1.log_var, p2.log_var)

    def test_output_shapes_per_arch(self):
        rng = RngStream(61, "mel")
        mel = rand_mel(rng)
        for arch, k, expect in [("vanilla", 2, None), ("arch1", 4, (4,)),
                                ("arch2", 4, (4, 4)), ("arch3", 4, None)]:
            posterior, head = tiny_model(arch, k).ref_encoder(mel)
            assert posterior.mu.shape == (4,)
            assert posterior.log_var.shape == (4,)
            if expect is None:
                assert head is None
            else:
                assert tuple(head.shape) == expect

    def test_empty_mel_errors(self):
        enc = ReferenceEncoder(n_bands=8, latent_dim=4)
        with pytest.raises(ValueError):
            enc(torch.zeros(0, 8))

    def test_single_frame_ok(self):
        enc = ReferenceEncoder(n_bands=8, latent_dim=4)
        posterior, _ = enc(torch.randn(1, 8))
        assert posterior.mu.shape == (4,)


class TestPosteriorSample:
    def test_zero_eps_is_flowed_mean(self):
        rng = RngStream(62, "ps")
        d = DiagGaussian(torch.from_numpy(rng.normal((4,))),
                         torch.from_numpy(rng.normal((4,))))
        stack = FlowStack("arch3",
                          [torch.from_numpy(rng.normal((4,)))
                           for _ in range(2)])
        latent = posterior_sample(d, stack, torch.zeros(4,
                                                        dtype=torch.float64))
        assert torch.equal(latent.z0, d.mu)
        from hfvae.flow import compose_flow
        assert torch.equal(latent.zK, compose_flow(stack, d.mu))

    def test_vanilla_stack_identity(self):
        rng = RngStream(63, "ps")
        d = DiagGaussian(torch.from_numpy(rng.normal((4,))),
                         torch.from_numpy(rng.normal((4,))))
        eps = torch.from_numpy(rng.normal((4,)))
        latent = posterior_sample(d, FlowStack("vanilla", []), eps)
        assert torch.equal(latent.zK, latent.z0)


class TestElboLoss:
    def test_beta_zero(self):
        assert elbo_loss(1.0, 2.0, 0.0) == 1.0

    def test_beta_one(self):
        assert elbo_loss(1.0, 2.0, 1.0) == 3.0

    def test_weighted(self):
        assert elbo_loss(0.7, 0.4, 0.1) == pytest.approx(0.74)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            elbo_loss(-1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            elbo_loss(0.0, -1.0, 1.0)


class TestModelInit:
    def test_shared_init_across_archs(self):
        vanilla = tiny_model("vanilla", seed=3)
        arch3 = tiny_model("arch3", k=4, seed=3)
        v_params = dict(vanilla.named_parameters())
        f_params = dict(arch3.named_parameters())
        assert set(v_params) < set(f_params)
        for name, p in v_params.items():
            assert torch.equal(p, f_params[name]), name

    def test_vanilla_has_no_flow_parameters(self):
        names = [n for n, _ in tiny_model("vanilla").named_parameters()]
        assert not any("flow" in n or "shared_vectors" in n
                       or "head_vec" in n for n in names)

    def test_arch3_vectors_are_unit(self):
        model = tiny_model("arch3", k=4)
        norms = model.shared_vectors.detach().norm(dim=1)
        assert torch.allclose(norms, torch.ones(4), atol=1e-6)

    def test_init_reproducible(self):
        a = dict(tiny_model("arch1", k=4, seed=9).named_parameters())
        b = dict(tiny_model("arch1", k=4, seed=9).named_parameters())
        for name in a:
            assert torch.equal(a[name], b[name])

    def test_arch1_affines_near_identity(self):
        model = tiny_model("arch1", k=4)
        for mat in model.flow_mats:
            assert float((mat.detach() - torch.eye(4)).abs().max()) < 0.1


class TestFullLoss:
    def test_loss_components(self):
        model = tiny_model("arch2", k=2)
        rng = RngStream(64, "loss")
        mel = rand_mel(rng)
        eps = torch.from_numpy(rng.normal((4,))).to(torch.float32)
        loss, recon, kl = model.loss_on(mel, [1, 2, 3], eps, beta=0.5)
        loss, recon, kl = (float(loss.detach()), float(recon.detach()),
                           float(kl.detach()))
        assert loss == pytest.approx(recon + 0.5 * kl, rel=1e-6)
        assert kl >= 0 and recon >= 0

    def test_synthesize_deterministic(self):
        model = tiny_model("arch3", k=2)
        rng = RngStream(65, "syn")
        mel = rand_mel(rng)
        a = model.synthesize(mel, [1, 2], 6)
        b = model.synthesize(mel, [1, 2], 6)
        assert torch.equal(a, b)
        assert a.shape == (6, 8)

    @pytest.mark.parametrize("arch,k", [("vanilla", 2), ("arch1", 2),
                                        ("arch2", 2), ("arch3", 2)])
    def test_full_loss_grad_check(self, arch, k):
        # end-to-end gradient through encoder, flow, attention and decoder
        model = tiny_model(arch, k).double()
        rng = RngStream(66, "gc")
        mel = torch.from_numpy(rng.normal((9, 8)))
        eps = torch.from_numpy(rng.normal((4,)))
        ids = [1, 4, 2]

        params = [p for _, p in sorted(model.named_parameters())]
        sizes = [p.numel() for p in params]
        # probe a random 100-parameter subset of the full vector
        total = sum(sizes)
        subset = np.sort(rng.permutation(total)[:100])
        base = torch.cat([p.detach().reshape(-1) for p in params])

        def f(x):
            full = base.clone()
            full[subset] = x
            chunks = torch.split(full, sizes)
            for p, c in zip(params, chunks):
                with torch.no_grad():
                    p.copy_(c.reshape(p.shape))
            loss, _, _ = model.loss_on(mel, ids, eps, beta=1.0)
            return loss

        # analytic gradient at the base point via autograd
        for p, c in zip(params, torch.split(base, sizes)):
            with torch.no_grad():
                p.copy_(c.reshape(p.shape))
        loss, _, _ = model.loss_on(mel, ids, eps, beta=1.0)
        model.zero_grad()
        loss.backward()
        grad_full = torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p))
            .reshape(-1) for p in params])
        err = grad_check(f, base[subset].clone(),
                         analytic=grad_full[subset])
        assert err < 1e-4
