import json

import numpy as np
import pytest

from countgen import annotations as ann
from countgen import counter as ctr
from countgen import denoiser as dn
from countgen import sample as smp
from countgen.corpus import Scene
from countgen.errors import ConfigError
from countgen.rng import make_rng
from countgen.schedule import build_schedule, ddim_step, predict_x0, timestep_subsequence

TINY = dn.Arch(widths=(4, 8), blocks=1, emb_dim=8, groups=1)
TINY_COUNTER = ctr.CounterArch(widths=(4, 8, 8, 4, 1))


@pytest.fixture(scope="module")
def sched():
    return build_schedule(T=100)


@pytest.fixture(scope="module")
def model():
    return dn.init_model(TINY, seed=21)


@pytest.fixture(scope="module")
def frozen_counter():
    return ctr.init_counter(TINY_COUNTER, seed=22, zero_head=False)


def make_cond(rng, shape=(16, 16), tag=0):
    dots = ann.DotMap(points=((7.0, 7.0), (10.5, 9.0)), width=shape[1], height=shape[0])
    return dn.Conditioning(tag=tag, dmap=ann.render_density(dots))


class TestGuidanceScale:
    def test_zero_at_terminal(self):
        assert smp.guidance_scale(1000, 1000, 0.1) == 0.0

    def test_full_at_zero(self):
        assert smp.guidance_scale(0, 1000, 0.1) == 0.1

    def test_half_at_midpoint(self):
        assert smp.guidance_scale(500, 1000, 0.1) == 0.05

    def test_nonincreasing_in_t_over_subsequence(self, sched):
        seq = timestep_subsequence(sched.T, 25)
        scales = [smp.guidance_scale(t, sched.T, 0.1) for t in seq]
        assert all(b > a for a, b in zip(scales, scales[1:]))
        assert scales[0] == 0.0  # first visited step is t = T


class TestGuidedEpsilon:
    def test_s_zero_equals_predict_eps(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        x = rng.standard_normal((16, 16))
        cfg = smp.GuidanceConfig(s=0.0, steps=10, seed=0)
        guided = smp.guided_epsilon(model, frozen_counter, x, 50, c, c.dmap, cfg, sched)
        plain = dn.predict_eps(model, x.astype(np.float32), 50, c)
        assert guided.astype(np.float32).tobytes() == plain.tobytes()

    def test_terminal_t_equals_predict_eps(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        x = rng.standard_normal((16, 16))
        cfg = smp.GuidanceConfig(s=0.1, steps=10, seed=0)
        guided = smp.guided_epsilon(model, frozen_counter, x, sched.T, c, c.dmap, cfg, sched)
        plain = dn.predict_eps(model, x.astype(np.float32), sched.T, c)
        assert guided.astype(np.float32).tobytes() == plain.tobytes()

    def test_satisfied_counter_leaves_eps_unchanged(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        x = rng.standard_normal((16, 16))
        t = 40
        eps = dn.predict_eps(model, x.astype(np.float32), t, c)
        x0_hat = np.clip(predict_x0(x, t, eps, sched), -1.0, 1.0).astype(np.float32)
        y_gt = ctr.predict_density(frozen_counter, x0_hat)
        cfg = smp.GuidanceConfig(s=0.1, steps=10, seed=0)
        guided = smp.guided_epsilon(model, frozen_counter, x, t, c, y_gt, cfg, sched)
        assert np.array_equal(guided.astype(np.float32), eps)

    def test_guided_step_decreases_counting_loss(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        x = rng.standard_normal((16, 16))
        t, t_prev = 50, 40
        cfg = smp.GuidanceConfig(s=0.1, steps=10, seed=0)
        eps_plain = dn.predict_eps(model, x.astype(np.float32), t, c).astype(np.float64)
        eps_guided = smp.guided_epsilon(model, frozen_counter, x, t, c, c.dmap, cfg, sched)

        def count_loss_of(eps):
            x0 = np.clip(predict_x0(x, t, eps, sched), -1, 1)
            return ctr.counting_loss(frozen_counter, x0, c.dmap)

        assert count_loss_of(eps_guided) < count_loss_of(eps_plain)

    def test_full_backprop_variant_runs(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        x = rng.standard_normal((16, 16))
        cfg = smp.GuidanceConfig(s=0.1, steps=10, seed=0, full_backprop_guidance=True)
        out = smp.guided_epsilon(model, frozen_counter, x, 50, c, c.dmap, cfg, sched)
        assert np.isfinite(out).all()
        stop = smp.guided_epsilon(
            model, frozen_counter, x, 50, c, c.dmap,
            smp.GuidanceConfig(s=0.1, steps=10, seed=0), sched,
        )
        assert not np.array_equal(out, stop)


class TestSampleImage:
    def test_s_zero_matches_reference_unguided_ddim(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        cfg = smp.GuidanceConfig(s=0.0, steps=10, seed=33)
        out = smp.sample_image(model, frozen_counter, c, c.dmap, cfg, sched)

        x = make_rng(33).standard_normal((16, 16))
        seq = timestep_subsequence(sched.T, 10)
        for i, t in enumerate(seq):
            t_prev = seq[i + 1] if i + 1 < len(seq) else 0
            eps = dn.predict_eps(model, x.astype(np.float32), t, c).astype(np.float64)
            x = ddim_step(x, eps, t, t_prev, sched)
        ref = np.clip(x, -1.0, 1.0)
        assert out.tobytes() == ref.tobytes()

    def test_single_step_returns_clean_estimate_of_noise(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        cfg = smp.GuidanceConfig(s=0.0, steps=1, seed=7)
        out = smp.sample_image(model, frozen_counter, c, c.dmap, cfg, sched)
        xT = make_rng(7).standard_normal((16, 16))
        eps = dn.predict_eps(model, xT.astype(np.float32), sched.T, c).astype(np.float64)
        expected = np.clip(predict_x0(xT, sched.T, eps, sched), -1.0, 1.0)
        assert out.tobytes() == expected.tobytes()

    def test_deterministic_and_bounded(self, model, frozen_counter, sched, rng):
        c = make_cond(rng)
        cfg = smp.GuidanceConfig(s=0.1, steps=10, seed=5)
        a = smp.sample_image(model, frozen_counter, c, c.dmap, cfg, sched)
        b = smp.sample_image(model, frozen_counter, c, c.dmap, cfg, sched)
        assert a.tobytes() == b.tobytes()
        assert a.min() >= -1.0 and a.max() <= 1.0

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            smp.GuidanceConfig(s=-0.1)
        with pytest.raises(ConfigError):
            smp.GuidanceConfig(steps=0)


def make_scenes(rng, n, shape=(16, 16)):
    scenes = []
    for i in range(n):
        pts = tuple(
            (round(float(rng.uniform(6, shape[1] - 7)), 1), round(float(rng.uniform(6, shape[0] - 7)), 1))
            for _ in range(int(rng.integers(1, 4)))
        )
        dots = ann.DotMap(points=pts, width=shape[1], height=shape[0])
        scenes.append(
            Scene(
                scene_id=f"scene_{i:03d}",
                image=np.zeros(shape, dtype=np.float32),
                dots=dots,
                dmap=ann.render_density(dots),
                tag=int(rng.integers(0, 4)),
            )
        )
    return scenes


class TestBatchSample:
    def test_counts_and_manifest(self, model, frozen_counter, sched, rng, tmp_path):
        scenes = make_scenes(rng, 4)
        cfg = smp.GuidanceConfig(s=0.1, steps=5, seed=11)
        manifest = smp.batch_sample(model, frozen_counter, scenes, 3, cfg, sched, tmp_path)
        assert len(manifest) == 12
        assert len(list(tmp_path.glob("*.pgm"))) == 12
        assert len(list(tmp_path.glob("*.dots"))) == 12
        assert len(list(tmp_path.glob("*.dmap"))) == 12
        lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 12
        entry = json.loads(lines[0])
        assert set(entry) == {"scene_id", "sample_idx", "seed", "tag", "output_path"}

    def test_tags_cycle_within_scene(self, model, frozen_counter, sched, rng, tmp_path):
        scenes = make_scenes(rng, 2)
        cfg = smp.GuidanceConfig(s=0.0, steps=3, seed=1)
        manifest = smp.batch_sample(model, frozen_counter, scenes, 4, cfg, sched, tmp_path)
        for scene in scenes:
            tags = [e["tag"] for e in manifest if e["scene_id"] == scene.scene_id]
            assert sorted(tags) == [0, 1, 2, 3]

    def test_zero_per_image(self, model, frozen_counter, sched, rng, tmp_path):
        scenes = make_scenes(rng, 3)
        cfg = smp.GuidanceConfig(s=0.1, steps=5, seed=11)
        manifest = smp.batch_sample(model, frozen_counter, scenes, 0, cfg, sched, tmp_path)
        assert manifest == []
        assert (tmp_path / "manifest.jsonl").read_text() == ""

    def test_rerun_bit_identical(self, model, frozen_counter, sched, rng, tmp_path):
        scenes = make_scenes(rng, 2)
        cfg = smp.GuidanceConfig(s=0.1, steps=5, seed=42)
        smp.batch_sample(model, frozen_counter, scenes, 2, cfg, sched, tmp_path / "a")
        smp.batch_sample(model, frozen_counter, scenes, 2, cfg, sched, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_copied_annotations_roundtrip(self, model, frozen_counter, sched, rng, tmp_path):
        scenes = make_scenes(rng, 1)
        cfg = smp.GuidanceConfig(s=0.0, steps=3, seed=2)
        smp.batch_sample(model, frozen_counter, scenes, 1, cfg, sched, tmp_path)
        dots = ann.parse_dots((tmp_path / "scene_000_s0.dots").read_text())
        assert dots == scenes[0].dots
        dmap = ann.read_density((tmp_path / "scene_000_s0.dmap").read_bytes())
        assert np.array_equal(
            dmap.values.astype("<f4"), scenes[0].dmap.values.astype("<f4")
        )
