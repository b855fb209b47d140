import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from hazemeta import ConfigError, NumericalError
from hazemeta.checkpoint import FORMAT_VERSION, load_container
from hazemeta.datagen import Task, default_domains
from hazemeta.trainer import (TrainConfig, TrainState, batch_tensors, build_extractor, build_scene_bank, fit,
                              infer, load_model, sample_batch, train_step)


def batch_ok(doms):
    counts = {d: doms.count(d) for d in set(doms)}
    return sorted(counts.values()).count(2) == 1 and max(counts.values()) == 2 and len(counts) >= 2


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.num_tasks_per_batch, c.samples_per_task, c.lr) == (3, 4, 2e-4)
        assert (c.adam_beta1, c.adam_beta2) == (0.9, 0.999)
        assert (c.lambda1, c.lambda2, c.lambda3, c.lambda4) == (0.5, 0.1, 1.0, 0.5)

    def test_n2_disables_dcr(self):
        with pytest.warns(UserWarning):
            c = TrainConfig(num_tasks_per_batch=2).validate()
        assert not c.dcr_enabled

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(crop_size=20), dict(adapt_net="vit"),
                                    dict(lambda3=-1.0), dict(adapt_net="none")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()

    def test_round_trip(self):
        c = TrainConfig(seed=5, aggregator="average")
        assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


class TestSampling:
    def test_constraint_1000(self, domains, small_bank):
        cfg = TrainConfig(crop_size=16, samples_per_task=1)
        rng = np.random.default_rng(0)
        bad = 0
        for _ in range(1000):
            doms = [t.domain_id for t in sample_batch(domains[:2], cfg, rng, small_bank)]
            bad += not batch_ok(doms)
        assert bad == 0

    def test_three_domains(self, domains, small_bank):
        cfg = TrainConfig(crop_size=16, samples_per_task=1, num_tasks_per_batch=4, train_domains=[0, 1, 2])
        rng = np.random.default_rng(1)
        for _ in range(100):
            assert batch_ok([t.domain_id for t in sample_batch(domains, cfg, rng, small_bank)])

    def test_unconstrained_without_dcr(self, domains, small_bank):
        with pytest.warns(UserWarning):
            cfg = TrainConfig(crop_size=16, samples_per_task=1, num_tasks_per_batch=2).validate()
        rng = np.random.default_rng(0)
        seen = {tuple(t.domain_id for t in sample_batch(domains[:2], cfg, rng, small_bank)) for _ in range(200)}
        assert {(0, 0), (1, 1), (0, 1), (1, 0)} <= seen

    def test_deterministic(self, domains, small_bank):
        cfg = TrainConfig(crop_size=16, samples_per_task=2)
        a = sample_batch(domains[:2], cfg, np.random.default_rng(3), small_bank)
        b = sample_batch(domains[:2], cfg, np.random.default_rng(3), small_bank)
        for s, t in zip(a, b):
            assert s.domain_id == t.domain_id
            np.testing.assert_array_equal(s.hazy, t.hazy)

    def test_shapes(self, domains, small_bank):
        cfg = TrainConfig(crop_size=16, samples_per_task=2)
        hazy, clear = batch_tensors(sample_batch(domains[:2], cfg, np.random.default_rng(0), small_bank))
        assert hazy.shape == clear.shape == (3, 2, 3, 16, 16)


class TestTrainStep:
    def test_dcr_disabled_zero(self, tiny_config, domains):
        cfg = replace(tiny_config, dcr_enabled=False)
        state = TrainState.create(cfg, domains[:2])
        batch = sample_batch(state.domains, cfg, state.rng, build_scene_bank(cfg))
        _, br = train_step(state, batch, build_extractor(cfg))
        assert br.dcr == 0 and br.ce == 0
        assert br.total == pytest.approx(br.pixel + 0.5 * br.ssim + 0.1 * br.cr, abs=1e-6)

    def test_rejects_bad_batch(self, tiny_config, domains):
        state = TrainState.create(tiny_config, domains[:2])
        bank = build_scene_bank(tiny_config)
        batch = sample_batch(state.domains, tiny_config, state.rng, bank)
        same = [Task(batch[0].pairs, batch[0].domain_id)] * 3
        with pytest.raises(ValueError):
            train_step(state, same, build_extractor(tiny_config))

    def test_non_finite_snapshot(self, tiny_config, domains):
        state = TrainState.create(replace(tiny_config, dcr_enabled=False, adapt_net="none"), domains[:2])
        batch = sample_batch(state.domains, state.config, state.rng, build_scene_bank(tiny_config))
        with torch.no_grad():
            state.model.backbone.tail.bias.fill_(float("inf"))
        with pytest.raises(NumericalError) as info:
            train_step(state, batch, build_extractor(tiny_config))
        assert info.value.snapshot is not None and set(info.value.snapshot) >= {"pixel", "ssim"}

    def test_overfit_sanity(self, tiny_config, domains):
        bank = build_scene_bank(tiny_config)
        ext = build_extractor(tiny_config)
        wins = 0
        for seed in range(10):
            cfg = replace(tiny_config, seed=seed)
            state = TrainState.create(cfg, domains[:2])
            batch = sample_batch(state.domains, cfg, state.rng, bank)
            _, first = train_step(state, batch, ext)
            _, second = train_step(state, batch, ext)
            wins += second.pixel <= first.pixel
        assert wins >= 8


class TestFit:
    def test_zero_steps(self, tiny_config, domains, tmp_path):
        ckpt = fit(replace(tiny_config, max_steps=0), domains, tmp_path)
        assert ckpt.name == "step_000000.pt"
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000000.pt"]
        assert (tmp_path / "metrics.jsonl").read_text() == ""

    def test_outputs(self, tiny_config, domains, tmp_path):
        ckpt = fit(tiny_config, domains, tmp_path)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["final.pt", "step_000000.pt", "step_000002.pt"]
        assert ckpt.name == "final.pt"
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [1, 2, 3]
        for r in lines:
            expected = r["pixel"] + 0.5 * r["ssim"] + 0.1 * r["cr"] + r["ce"] + 0.5 * r["dcr"]
            assert r["total"] == pytest.approx(expected, abs=1e-6)
        blob = load_container(ckpt)
        assert blob["version"] == FORMAT_VERSION and blob["step"] == 3

    def test_reproducible(self, tiny_config, domains, tmp_path):
        fit(tiny_config, domains, tmp_path / "a")
        fit(tiny_config, domains, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_config, domains, tmp_path):
        cfg = replace(tiny_config, max_steps=4, checkpoint_every=2)
        fit(cfg, domains, tmp_path / "full")
        # start a fresh directory from the mid-run checkpoint
        resumed = tmp_path / "resumed"
        (resumed / "checkpoints").mkdir(parents=True)
        full_lines = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
        (resumed / "metrics.jsonl").write_text("\n".join(full_lines[:2]) + "\n")
        fit(cfg, domains, resumed, resume=tmp_path / "full" / "checkpoints" / "step_000002.pt")
        assert (resumed / "metrics.jsonl").read_text().splitlines() == full_lines

    def test_unknown_domain(self, tiny_config, domains, tmp_path):
        with pytest.raises(ConfigError):
            fit(replace(tiny_config, train_domains=[0, 7]), domains, tmp_path)

    def test_corrupt_checkpoint(self, tmp_path):
        from hazemeta import DataError

        (tmp_path / "bad.pt").write_bytes(b"garbage")
        with pytest.raises(DataError):
            load_model(tmp_path / "bad.pt")


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    cfg = TrainConfig(crop_size=32, scene_size=40, scene_bank_size=8, samples_per_task=2, max_steps=2,
                      checkpoint_every=0)
    return fit(cfg, default_domains(), tmp_path_factory.mktemp("infer"))


class TestInfer:
    @pytest.fixture
    def hazy(self):
        return np.random.default_rng(0).uniform(0, 1, (32, 40, 3)).astype(np.float32)

    def test_round_trip_bitwise(self, ckpt, hazy):
        blob = load_container(ckpt)
        a = load_model(ckpt)
        b = load_model(ckpt)
        for k, v in blob["weights"].items():
            assert torch.equal(a.state_dict()[k], v)
        np.testing.assert_array_equal(infer(a, hazy), infer(b, hazy))

    def test_no_context_is_k1(self, ckpt, hazy):
        model = load_model(ckpt)
        with torch.no_grad():
            x = torch.from_numpy(hazy).permute(2, 0, 1)
            phi = model.adapt(x[None])
            ref = model.backbone(x[None], phi, clamp=True)[0].permute(1, 2, 0).numpy()
        np.testing.assert_array_equal(infer(model, hazy), ref)

    def test_duplicate_context(self, ckpt, hazy):
        model = load_model(ckpt)
        base = infer(model, hazy)
        np.testing.assert_allclose(infer(model, hazy, [hazy, hazy, hazy]), base, atol=1e-6)

    def test_no_grad_and_no_update(self, ckpt, hazy, monkeypatch):
        model = load_model(ckpt)
        model.train()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        seen = []
        monkeypatch.setattr(torch.Tensor, "backward", lambda *a, **k: seen.append("backward"))
        handle = model.backbone.tail.register_forward_hook(
            lambda m, i, o: seen.append(torch.is_grad_enabled() or o.requires_grad))
        out = infer(model, hazy, [hazy])
        handle.remove()
        assert seen == [False]
        assert out.shape == hazy.shape and out.min() >= 0 and out.max() <= 1
        assert model.training
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_context_resized(self, ckpt, hazy, caplog):
        out = infer(ckpt, hazy, [hazy[:16, :16]])
        assert out.shape == hazy.shape
        assert "resizing" in caplog.text
