import numpy as np
import pytest
import torch

from countgen import annotations as ann
from countgen import denoiser as dn
from countgen.errors import ConfigError, FormatError, ShapeError

TINY = dn.Arch(widths=(4, 8), blocks=1, emb_dim=8, groups=1)


@pytest.fixture(scope="module")
def tiny64():
    return dn.init_model(TINY, seed=7, dtype="float64")


def make_cond(rng, shape=(16, 16), tag=1):
    return dn.Conditioning(tag=tag, dmap=ann.DensityMap(values=np.abs(rng.standard_normal(shape)) * 0.02))


def fd_param_check(p, batch, loss_def, n_coords=25, h=1e-5, seed=0):
    """Central finite differences on randomly chosen parameter coordinates."""
    loss0, grads = dn.loss_gradients(p, batch, loss_def)
    names = [n for n, q in p.net.named_parameters() if q.requires_grad]
    r = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(r.integers(0, len(names)))]
        param = dict(p.net.named_parameters())[name]
        flat_idx = int(r.integers(0, param.numel()))
        idx = np.unravel_index(flat_idx, tuple(param.shape))
        with torch.no_grad():
            orig = float(param[idx])
            param[idx] = orig + h
            lp = loss_def(p, batch).item()
            param[idx] = orig - h
            lm = loss_def(p, batch).item()
            param[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name][idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


class TestInit:
    def test_same_seed_identical(self):
        a = dn.init_model(TINY, seed=3)
        b = dn.init_model(TINY, seed=3)
        for (na, ta), (nb, tb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
            assert na == nb and torch.equal(ta, tb)

    def test_fusion_projections_zero(self):
        p = dn.init_model(TINY, seed=3)
        for proj in p.net.ctrl_proj:
            assert not proj.weight.detach().any() and not proj.bias.detach().any()

    def test_different_seeds_differ(self):
        a = dn.init_model(TINY, seed=3)
        b = dn.init_model(TINY, seed=4)
        assert not torch.equal(a.net.stem.weight, b.net.stem.weight)

    def test_tiny_model_under_5000_params(self, tiny64):
        assert tiny64.parameter_count() <= 5000

    def test_bad_arch(self):
        with pytest.raises(ConfigError):
            dn.Arch(widths=(8,))
        with pytest.raises(ConfigError):
            dn.Arch(widths=(6, 8), groups=4)
        with pytest.raises(ConfigError):
            dn.Arch(emb_dim=7)


class TestPredictEps:
    def test_zero_init_identity_across_dmaps(self, rng):
        p = dn.init_model(TINY, seed=5)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        zero = dn.Conditioning(tag=2, dmap=ann.DensityMap(values=np.zeros((16, 16))))
        ref = dn.predict_eps(p, x, 9, zero)
        for _ in range(5):
            out = dn.predict_eps(p, x, 9, make_cond(rng, tag=2))
            assert out.tobytes() == ref.tobytes()

    def test_output_shape(self, rng):
        p = dn.init_model(dn.Arch(widths=(8, 16), blocks=1, emb_dim=8, groups=2), seed=0)
        x = rng.standard_normal((64, 64)).astype(np.float32)
        out = dn.predict_eps(p, x, 500, make_cond(rng, shape=(64, 64)))
        assert out.shape == (64, 64)

    def test_shape_errors(self, rng):
        p = dn.init_model(TINY, seed=0)
        with pytest.raises(ShapeError):
            dn.predict_eps(p, rng.standard_normal((15, 16)), 5, make_cond(rng, shape=(15, 16)))
        with pytest.raises(ShapeError):
            dn.predict_eps(p, rng.standard_normal((16, 16)), 5, make_cond(rng, shape=(16, 32)))
        with pytest.raises(ConfigError):
            dn.predict_eps(p, rng.standard_normal((16, 16)), 0, make_cond(rng))

    def test_trunk_parameter_sensitivity(self, rng):
        # finite-difference probe: bumping one stem weight must move the output
        p = dn.init_model(TINY, seed=6)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        c = make_cond(rng)
        before = dn.predict_eps(p, x, 7, c)
        with torch.no_grad():
            p.net.stem.weight[0, 0, 1, 1] += 1e-2
        after = dn.predict_eps(p, x, 7, c)
        assert np.abs(after - before).max() > 0

    def test_deterministic_repeat(self, rng):
        p = dn.init_model(TINY, seed=8)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        c = make_cond(rng)
        assert dn.predict_eps(p, x, 3, c).tobytes() == dn.predict_eps(p, x, 3, c).tobytes()

    def test_null_tag_equals_zeroed_embedding(self, rng):
        p = dn.init_model(TINY, seed=9)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        c_null = make_cond(rng, tag=TINY.null_tag)
        with torch.no_grad():
            p.net.tag_embed.weight[0].zero_()  # tag 0 now has the zero embedding
        c_zeroed = dn.Conditioning(tag=0, dmap=c_null.dmap)
        assert np.array_equal(
            dn.predict_eps(p, x, 5, c_null), dn.predict_eps(p, x, 5, c_zeroed)
        )


def _quadratic_loss(p, batch):
    xb, tb, tagb, dmapb, target = batch
    out = dn.batched_forward(p, xb, tb, tagb, dmapb)
    diff = out - target
    return (diff * diff).sum()


def make_batch(p, rng, shape=(8, 8), n=2):
    dtype = p.dtype
    xb = torch.from_numpy(rng.standard_normal((n, 1) + shape)).to(dtype)
    tb = torch.tensor(rng.integers(1, 1000, size=n).astype(np.float64)).to(dtype)
    tagb = torch.tensor(rng.integers(0, 5, size=n), dtype=torch.long)
    dmapb = torch.from_numpy(np.abs(rng.standard_normal((n, 1) + shape)) * 0.02).to(dtype)
    target = torch.from_numpy(rng.standard_normal((n, 1) + shape)).to(dtype)
    return (xb, tb, tagb, dmapb, target)


class TestGradients:
    def test_zero_loss_zero_gradients(self, tiny64, rng):
        batch = make_batch(tiny64, rng)
        _, grads = dn.loss_gradients(tiny64, batch, lambda p, b: 0.0 * _quadratic_loss(p, b))
        assert all(not g.any() for g in grads.values())

    def test_param_gradients_match_finite_differences(self, tiny64, rng):
        batch = make_batch(tiny64, rng)
        worst = fd_param_check(tiny64, batch, _quadratic_loss)
        assert worst < 1e-4, f"worst relative error {worst}"

    def test_gradients_cover_all_parameters(self, tiny64, rng):
        batch = make_batch(tiny64, rng)
        _, grads = dn.loss_gradients(tiny64, batch, _quadratic_loss)
        assert set(grads) == {n for n, _ in tiny64.net.named_parameters()}

    def test_frozen_base_trunk_gradients_zero(self, rng):
        p = dn.init_model(TINY, seed=11, dtype="float64")
        # give the zero projections nonzero weights so control grads can flow
        with torch.no_grad():
            for proj in p.net.ctrl_proj:
                proj.weight += 0.05
        dn.set_frozen_trunk(p, True)
        batch = make_batch(p, rng)
        _, grads = dn.loss_gradients(p, batch, _quadratic_loss)
        assert all(not grads[n].any() for n in p.trunk_parameter_names())
        assert any(grads[n].any() for n in p.control_parameter_names())
        dn.set_frozen_trunk(p, False)
        _, grads = dn.loss_gradients(p, batch, _quadratic_loss)
        assert any(grads[n].any() for n in p.trunk_parameter_names())


class TestInputGradient:
    def test_constant_loss_gives_zero_grid(self, tiny64, rng):
        x = rng.standard_normal((8, 8))
        g = dn.input_gradient(
            tiny64, x, 5, make_cond(rng, shape=(8, 8)), lambda xt, eps: (eps * 0).sum() + 3.0
        )
        assert not g.any() and g.shape == (8, 8)

    def test_matches_finite_differences(self, tiny64, rng):
        x = rng.standard_normal((8, 8))
        c = make_cond(rng, shape=(8, 8))

        def loss(xt, eps):
            return ((eps - 0.3) ** 2).sum() + (xt * xt).sum() * 0.1

        analytic = dn.input_gradient(tiny64, x, 5, c, loss)

        def scalar_at(xv):
            eps = dn.predict_eps(tiny64, xv, 5, c)
            return float(((eps - 0.3) ** 2).sum() + (xv * xv).sum() * 0.1)

        r = np.random.default_rng(0)
        h = 1e-5
        worst = 0.0
        for _ in range(25):
            i, j = int(r.integers(0, 8)), int(r.integers(0, 8))
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (scalar_at(xp) - scalar_at(xm)) / (2 * h)
            rel = abs(analytic[i, j] - fd) / max(abs(fd), abs(analytic[i, j]), 1e-8)
            worst = max(worst, rel)
        assert worst < 1e-4, f"worst relative error {worst}"

    def test_doubling_loss_doubles_gradient(self, tiny64, rng):
        x = rng.standard_normal((8, 8))
        c = make_cond(rng, shape=(8, 8))
        g1 = dn.input_gradient(tiny64, x, 5, c, lambda xt, eps: (eps * eps).sum())
        g2 = dn.input_gradient(tiny64, x, 5, c, lambda xt, eps: 2.0 * (eps * eps).sum())
        assert np.allclose(g2, 2.0 * g1, rtol=1e-12, atol=0)


class TestCheckpoint:
    def test_roundtrip_bit_identical_predictions(self, rng):
        p = dn.init_model(TINY, seed=12)
        x = rng.standard_normal((16, 16)).astype(np.float32)
        c = make_cond(rng)
        before = dn.predict_eps(p, x, 9, c)
        q = dn.load_params(dn.save_params(p))
        assert dn.predict_eps(q, x, 9, c).tobytes() == before.tobytes()
        assert q.parameter_count() == p.parameter_count()

    def test_wrong_version_byte(self):
        blob = bytearray(dn.save_params(dn.init_model(TINY, seed=0)))
        blob[5] = 99
        with pytest.raises(FormatError):
            dn.load_params(bytes(blob))

    def test_truncated_payload(self):
        blob = dn.save_params(dn.init_model(TINY, seed=0))
        with pytest.raises(FormatError):
            dn.load_params(blob[: len(blob) - 40])

    def test_trailing_garbage(self):
        blob = dn.save_params(dn.init_model(TINY, seed=0))
        with pytest.raises(FormatError):
            dn.load_params(blob + b"\x00\x00")

    def test_bad_magic(self):
        blob = dn.save_params(dn.init_model(TINY, seed=0))
        with pytest.raises(FormatError):
            dn.load_params(b"XXXXX" + blob[5:])
