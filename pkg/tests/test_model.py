import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vtaldm import model as M
from vtaldm.codec import CheckpointError
from vtaldm.diffusion import SamplerConfig, make_schedule, sample
from vtaldm.dsp import MelConfig, StftConfig
from vtaldm.model import Denoiser, LDMBatch, ModelConfig, NonFiniteError, sinusoidal_pe

FRAMES = 24


def event_features(start, length=4, frames=FRAMES, d_vis=16, cls=1):
    f = np.zeros((frames, d_vis))
    f[start:start + length, cls] = 1.0
    return f


def make_batch(cfg=ModelConfig(), b=2, frames=FRAMES, seed=0, unconditional=False, drop=None):
    g = np.random.default_rng(seed)
    return LDMBatch(
        z0=g.normal(size=(b, frames, cfg.d_lat)),
        t=g.integers(1, 1001, b),
        eps=g.normal(size=(b, frames, cfg.d_lat)),
        vis=g.normal(size=(b, frames, cfg.d_vis)),
        text=g.normal(size=(b, cfg.d_txt)) if cfg.use_text else None,
        flow=g.normal(size=(b, frames, cfg.d_flow)) if cfg.use_flow else None,
        drop=drop,
        unconditional=unconditional,
    )


class TestPositionalEncoding:
    def test_oracle(self):
        pe = sinusoidal_pe(5, 4)
        for pos in range(5):
            for i in range(2):
                w = 1.0 / 10000 ** (2 * i / 4)
                assert pe[pos, 2 * i] == pytest.approx(np.sin(pos * w), abs=1e-15)
                assert pe[pos, 2 * i + 1] == pytest.approx(np.cos(pos * w), abs=1e-15)

    def test_odd_dimension(self):
        with pytest.raises(ValueError, match="even"):
            sinusoidal_pe(4, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 300), st.sampled_from([2, 8, 64]))
    def test_rows_distinct_and_bounded(self, n, d):
        pe = sinusoidal_pe(n, d)
        assert np.all(np.abs(pe) <= 1)
        assert len({row.tobytes() for row in pe}) == n


class TestCondition:
    def test_projection_is_affine(self):
        m = Denoiser()
        g = np.random.default_rng(0)
        a, b = g.normal(size=(5, 16)), g.normal(size=(5, 16))
        with torch.no_grad():
            lhs = m.project_condition(a + b) - m.project_condition(b)
            rhs = m.project_condition(a) - m.project_condition(np.zeros((5, 16)))
        torch.testing.assert_close(lhs, rhs, atol=1e-5, rtol=0)

    def test_projection_oracle(self):
        m = Denoiser().double()
        vis = np.random.default_rng(1).normal(size=(7, 16))
        w = m.phi_vis.weight.detach().numpy()
        b = m.phi_vis.bias.detach().numpy()
        np.testing.assert_allclose(M.project_condition(vis, m).detach().numpy(), vis @ w.T + b, atol=1e-12)

    def test_projection_width(self):
        with pytest.raises(ValueError, match="d_vis"):
            Denoiser().project_condition(np.zeros((4, 15)))

    def test_token_layout(self):
        cfg = ModelConfig(use_text=True, use_flow=True)
        m = Denoiser(cfg).double()
        batch = make_batch(cfg)
        cond = m.build_condition(batch.vis, batch.text, batch.flow)
        assert cond.shape == (2, 2 * FRAMES + 1, cfg.d_cond)
        with torch.no_grad():
            torch.testing.assert_close(cond[:, :FRAMES], m.phi_vis(torch.as_tensor(batch.vis)))
            torch.testing.assert_close(cond[:, FRAMES:2 * FRAMES], m.phi_flow(torch.as_tensor(batch.flow)))
            torch.testing.assert_close(cond[:, -1], m.phi_txt(torch.as_tensor(batch.text)))

    def test_pe_added_over_sequence(self):
        base = Denoiser(ModelConfig(use_text=True)).double()
        with_pe = Denoiser(ModelConfig(use_text=True, use_pe=True)).double()
        batch = make_batch(base.cfg)
        diff = with_pe.build_condition(batch.vis, batch.text) - base.build_condition(batch.vis, batch.text)
        expected = sinusoidal_pe(FRAMES + 1, 64)
        np.testing.assert_allclose(diff.detach().numpy(), np.broadcast_to(expected, diff.shape), atol=1e-12)

    def test_drop_gives_null(self):
        m = Denoiser(ModelConfig(use_pe=True))
        cond = m.build_condition(np.ones((3, FRAMES, 16)), drop=np.array([False, True, False]))
        assert torch.all(cond[1] == 0)
        assert torch.any(cond[0] != 0)

    def test_training_dropout_seeded(self):
        m = Denoiser()
        vis = np.ones((FRAMES, 16))
        a = M.build_condition(vis, m, p_drop=0.5, train=True, seed=3)
        b = M.build_condition(vis, m, p_drop=0.5, train=True, seed=3)
        assert torch.equal(a, b)
        assert torch.all(M.build_condition(vis, m, p_drop=1.0, train=True, seed=0) == 0)
        assert torch.any(M.build_condition(vis, m, p_drop=1.0, train=False) != 0)

    def test_missing_optional_streams(self):
        with pytest.raises(ValueError, match="text"):
            Denoiser(ModelConfig(use_text=True)).build_condition(np.zeros((1, 4, 16)))
        with pytest.raises(ValueError, match="flow"):
            Denoiser(ModelConfig(use_flow=True)).build_condition(np.zeros((1, 4, 16)))


class TestDenoiser:
    def test_output_shape(self):
        m = Denoiser()
        cond = m.build_condition(np.zeros((3, FRAMES, 16)))
        out = m(np.zeros((3, FRAMES, 8)), np.array([1, 2, 3]), cond)
        assert out.shape == (3, FRAMES, 8)

    def test_zero_network(self):
        m = Denoiser()
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        g = np.random.default_rng(0)
        out = m(g.normal(size=(2, FRAMES, 8)), np.array([7, 900]), m.build_condition(g.normal(size=(2, FRAMES, 16))))
        assert torch.all(out == 0)

    def test_seeded_init(self):
        a, b, c = Denoiser(seed=1), Denoiser(seed=1), Denoiser(seed=2)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert not torch.equal(a.in_proj.weight, c.in_proj.weight)

    def test_nonfinite_reports_block(self):
        m = Denoiser()
        zt = np.zeros((1, FRAMES, 8))
        zt[0, 3, 0] = np.inf
        with pytest.raises(NonFiniteError, match="block 0"):
            m(zt, np.array([5]), m.build_condition(np.zeros((1, FRAMES, 16))))

    def test_shape_errors(self):
        m = Denoiser()
        cond = m.build_condition(np.zeros((2, FRAMES, 16)))
        with pytest.raises(ValueError, match="d_lat"):
            m(np.zeros((2, FRAMES, 7)), np.array([1, 1]), cond)
        with pytest.raises(ValueError, match="condition"):
            m(np.zeros((3, FRAMES, 8)), np.array([1, 1, 1]), cond)

    def test_attention_rows_are_distributions(self):
        m = Denoiser()
        cond = m.build_condition(np.random.default_rng(0).normal(size=(2, FRAMES, 16)))
        with torch.no_grad():
            _, attn = m(np.zeros((2, FRAMES, 8)), np.array([3, 4]), cond, return_attn=True)
        assert len(attn) == 2
        for a in attn:
            torch.testing.assert_close(a.sum(-1), torch.ones(2, FRAMES))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_blocks=0)
        with pytest.raises(ValueError):
            ModelConfig(d_model=63)


class TestGradients:
    @pytest.mark.parametrize("cfg", [
        ModelConfig(),
        ModelConfig(use_text=True, use_flow=True, use_pe=True),
    ])
    def test_grad_check(self, cfg):
        model = Denoiser(cfg, seed=0)
        batch = make_batch(cfg, b=2, frames=12, drop=np.array([False, True]))
        report = M.grad_check(model, batch, make_schedule(), h=1e-4, n_probes=20, seed=0)
        assert report["max_rel_error"] < 1e-4, report["worst"]
        assert {"phi_vis", "in_proj", "t_mlp1", "blocks.0", "blocks.1", "out_proj"} <= set(report["groups"])

    def test_tiny_model_grad_check(self):
        cfg = ModelConfig(d_model=8, n_blocks=1, d_cond=8)
        report = M.grad_check(Denoiser(cfg, seed=3), make_batch(cfg, frames=10), make_schedule(),
                              h=1e-4, n_probes=20, seed=1)
        assert report["max_rel_error"] < 1e-4

    def test_dead_parameters_report_zero(self):
        # flow and text heads are unused when those streams are disabled
        report = M.grad_check(Denoiser(), make_batch(frames=8), make_schedule(), n_probes=20)
        assert report["groups"]["phi_flow"] < 1e-10
        assert report["groups"]["phi_txt"] < 1e-10

    def test_duplicated_batch_same_loss_and_grads(self):
        model = Denoiser().double()
        b = make_batch(b=2)
        dup = LDMBatch(*(np.concatenate([x, x]) for x in (b.z0, b.t, b.eps, b.vis)))
        l1, g1 = M.loss_and_grads(b, model, make_schedule())
        l2, g2 = M.loss_and_grads(dup, model, make_schedule())
        assert l1 == pytest.approx(l2, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-12)

    def test_gradcheck_does_not_touch_model(self):
        model = Denoiser()
        before = [p.clone() for p in model.parameters()]
        M.grad_check(model, make_batch(b=1, frames=6), make_schedule(), n_probes=2)
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
        assert model.in_proj.weight.dtype == torch.float32

    def test_unconditional_batch_has_no_condition_gradient(self):
        model = Denoiser().double()
        _, grads = M.loss_and_grads(make_batch(unconditional=True), model, make_schedule())
        assert np.all(grads["phi_vis.weight"] == 0)
        assert np.any(grads["in_proj.weight"] != 0)


class TestAblationHooks:
    """PE makes the model sensitive to *when* a feature occurs; the null condition ignores features."""

    cfg_sampler = SamplerConfig(steps=10, guidance=3.0, seed=5)

    def generate(self, model, vis, drop=None):
        cond = model.build_condition(vis[None], drop=drop)
        return sample(cond, model, make_schedule(), self.cfg_sampler, (1, FRAMES, 8))

    def test_features_are_permutation_of_each_other(self):
        a, b = event_features(3), event_features(15)
        assert sorted(map(tuple, a)) == sorted(map(tuple, b))

    def test_without_pe_event_time_is_invisible_to_attention(self):
        m = Denoiser(ModelConfig(use_pe=False)).double()
        a, b = event_features(3), event_features(15)
        with torch.no_grad():
            ca, cb = m.build_condition(a[None]), m.build_condition(b[None])
            zt = torch.as_tensor(np.random.default_rng(0).normal(size=(1, FRAMES, 8)))
            ea, eb = m(zt, np.array([500]), ca), m(zt, np.array([500]), cb)
        torch.testing.assert_close(ea, eb, atol=1e-10, rtol=0)

    def test_pe_changes_outputs(self):
        a, b = event_features(3), event_features(15)
        on = Denoiser(ModelConfig(use_pe=True))
        off = Denoiser(ModelConfig(use_pe=False))
        out_on_a, out_on_b = self.generate(on, a), self.generate(on, b)
        assert not torch.equal(out_on_a, out_on_b)
        assert not torch.equal(out_on_a, self.generate(off, a))

    @pytest.mark.parametrize("use_pe", [False, True])
    def test_null_condition_ignores_features(self, use_pe):
        m = Denoiser(ModelConfig(use_pe=use_pe))
        drop = np.array([True])
        a = self.generate(m, event_features(3), drop)
        b = self.generate(m, event_features(15, cls=2), drop)
        c = self.generate(m, np.random.default_rng(1).normal(size=(FRAMES, 16)), drop)
        assert torch.equal(a, b) and torch.equal(a, c)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = ModelConfig(use_text=True, use_pe=True, n_blocks=3)
        m = Denoiser(cfg, seed=4)
        sched = make_schedule(500, 2e-4, 0.03)
        M.save(tmp_path / "d.ckpt", m, sched, stft_cfg=StftConfig(512, 128), mel_cfg=MelConfig(32, 0, 7000))
        ck = M.load(tmp_path / "d.ckpt")
        assert ck.model.cfg == cfg
        assert ck.sched.T == 500
        np.testing.assert_allclose(ck.sched.betas, sched.betas)
        assert ck.stft_cfg == StftConfig(512, 128)
        assert ck.mel_cfg == MelConfig(32, 0, 7000)
        for p, q in zip(m.parameters(), ck.model.parameters()):
            assert torch.equal(p, q)

    def test_bytes_deterministic(self):
        assert M.to_bytes(Denoiser(), make_schedule()) == M.to_bytes(Denoiser(), make_schedule())

    @pytest.mark.parametrize("mutate,msg", [
        (lambda b: b"VTAC" + b[4:], "magic"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b + b"\0\0\0\0", "trailing"),
        (lambda b: b[:20], "truncated"),
    ])
    def test_corrupt(self, mutate, msg):
        with pytest.raises(CheckpointError, match=msg):
            M.from_bytes(mutate(M.to_bytes(Denoiser(), make_schedule())))
