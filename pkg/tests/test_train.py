import numpy as np
import pytest

from raqr import channel, train as tr
from raqr import diffengine as de
from raqr.channel import ScenarioConfig
from raqr.classic import NMSE_FLOOR_DB
from raqr.errors import CheckpointError, ConfigError, DivergenceError
from raqr.storage import read_container, write_container
from raqr.train import (TrainConfig, build_dataset, evaluate, load_checkpoint, load_dataset,
                        mean_nmse, save_checkpoint, summarize, train)
from raqr.urformer import URformer, URformerConfig, URformerParams, param_shapes

DESK = ScenarioConfig(num_antennas=16, num_users=2, num_pilots=8)
TINY = ScenarioConfig(num_antennas=6, num_users=2, num_pilots=4)
TINY_UR = URformerConfig(num_layers=2, d_model=8, num_heads=2, num_encoders=1)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    build_dataset(TINY, TrainConfig(num_samples=40, batch_size=8, seed=3), path)
    return path


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.num_samples, cfg.batch_size, cfg.epochs) == (20000, 64, 50)
        assert cfg.snr_range_db == (-5.0, 15.0)
        assert (cfg.learning_rate, cfg.final_learning_rate) == (1e-3, 1e-5)

    @pytest.mark.parametrize("kw", [
        {"snr_range_db": (5, 0)},
        {"validation_fraction": 1.0},
        {"validation_fraction": 0.0},
        {"num_samples": 10, "batch_size": 10},
        {"grad_clip_norm": 0.0},
        {"learning_rate": -1.0},
        {"epochs": -1},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_cosine_schedule(self):
        cfg = TrainConfig()
        assert tr._cosine_lr(cfg, 0, 100) == cfg.learning_rate
        assert tr._cosine_lr(cfg, 99, 100) == pytest.approx(cfg.final_learning_rate, abs=1e-18)
        lrs = [tr._cosine_lr(cfg, s, 100) for s in range(100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestDataset:
    def test_shapes_and_manifest(self, tiny_data):
        ds = load_dataset(tiny_data)
        manifest, tensors = read_container(tiny_data)
        assert manifest["num_samples"] == len(ds) == 40
        assert ds.H.shape == (40, 6, 2)
        assert ds.Z.shape == (40, 6, 4)
        assert ds.S.shape == (4, 2)
        assert ds.b.shape == (40, 6)
        assert ds.sigma2.shape == ds.snr_db.shape == (40,)
        assert manifest["scenario"]["num_pilots"] == 4
        assert {t["name"] for t in manifest["tensors"]} == set(tensors)

    def test_byte_identical(self, tmp_path):
        cfg = TrainConfig(num_samples=12, batch_size=4, seed=9)
        a, b, c = tmp_path / "a.bin", tmp_path / "b.bin", tmp_path / "c.bin"
        build_dataset(TINY, cfg, a)
        build_dataset(TINY, cfg, b)
        build_dataset(TINY, TrainConfig(num_samples=12, batch_size=4, seed=10), c)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_samples_match_simulator(self, tiny_data):
        ds = load_dataset(tiny_data)
        for i in (0, 17, 39):
            sc = channel.simulate(ds.scenario, trial=i, pilots=ds.S, snr_db=ds.snr_db[i])
            assert np.array_equal(sc.H, ds.H[i])
            assert np.array_equal(sc.meas.Z, ds.Z[i])
            assert np.array_equal(sc.meas.B[:, 0], ds.b[i])
            assert sc.meas.sigma2 == ds.sigma2[i]

    def test_snr_draws(self, tiny_data):
        ds = load_dataset(tiny_data)
        assert np.all((ds.snr_db >= -5) & (ds.snr_db <= 15))
        assert np.ptp(ds.snr_db) > 10

    def test_empirical_snr(self, tmp_path):
        path = tmp_path / "d.bin"
        build_dataset(DESK, TrainConfig(num_samples=300, seed=4), path)
        ds = load_dataset(path)
        clean = ds.H @ ds.S.T + ds.b[:, :, None]
        noise_power = np.mean(ds.Z ** 2 - np.abs(clean) ** 2, axis=(1, 2))
        signal_power = np.mean(np.abs(ds.H @ ds.S.T) ** 2, axis=(1, 2))
        # E[Z^2] = |clean|^2 + sigma2, so the excess power estimates the noise
        ratio = np.sum(noise_power) / np.sum(ds.sigma2)
        assert abs(10 * np.log10(ratio)) < 0.5
        np.testing.assert_allclose(signal_power / ds.sigma2, 10 ** (ds.snr_db / 10), rtol=1e-10)

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "x.bin"
        write_container(path, {"kind": "other"}, {})
        with pytest.raises(CheckpointError):
            load_dataset(path)


class TestTraining:
    def test_zero_epochs_returns_init(self, tiny_data):
        ds = load_dataset(tiny_data)
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=0, seed=1)
        params, report = train(ds, TINY_UR, cfg)
        init = URformerParams.init(TINY_UR, 6, 2, seed=1)
        for name, arr in init.arrays().items():
            assert np.array_equal(params.tensors[name].value, arr)
        assert report["epochs"] == []
        assert report["best_epoch"] == 0

    def test_deterministic_checkpoint(self, tiny_data, tmp_path):
        ds = load_dataset(tiny_data)
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=2, seed=1)
        train(ds, TINY_UR, cfg, checkpoint_path=tmp_path / "a.ckpt")
        train(ds, TINY_UR, cfg, checkpoint_path=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_report_and_best_not_worse(self, tiny_data, tmp_path):
        ds = load_dataset(tiny_data)
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=3, seed=2, learning_rate=3e-2)
        params, report = train(ds, TINY_UR, cfg, checkpoint_path=tmp_path / "c.ckpt")
        assert [e["epoch"] for e in report["epochs"]] == [1, 2, 3]
        assert report["best_val_nmse_db"] <= report["init_val_nmse_db"]
        assert report["seed"] == 2 and report["checkpoint"].endswith("c.ckpt")
        assert report["wallclock_s"] > 0
        _, val_idx = tr._split(len(ds), cfg)
        best = 10 * np.log10(mean_nmse(URformer(params), ds, val_idx))
        assert best == pytest.approx(report["best_val_nmse_db"], abs=1e-12)
        ck = load_checkpoint(tmp_path / "c.ckpt")
        assert ck.manifest["training"]["epoch"] == report["best_epoch"]
        assert np.array_equal(ck.pilots, ds.S)

    def test_one_epoch_descent_desk(self, tmp_path):
        path = tmp_path / "desk.bin"
        cfg = TrainConfig(num_samples=2000, epochs=1, seed=0)
        build_dataset(DESK, cfg, path)
        ds = load_dataset(path)
        ur = URformerConfig(num_layers=4, d_model=32)
        train_idx, _ = tr._split(len(ds), cfg)
        before = mean_nmse(URformer(URformerParams.init(ur, 16, 2, seed=0)), ds, train_idx)
        params, _ = train(ds, ur, cfg)
        after = mean_nmse(URformer(params), ds, train_idx)
        assert after < before

    @pytest.mark.slow
    def test_overfit_small_batch(self, tmp_path):
        path = tmp_path / "small.bin"
        cfg = TrainConfig(num_samples=36, batch_size=32, epochs=200, seed=0, learning_rate=1e-2)
        build_dataset(DESK, cfg, path)
        ds = load_dataset(path)
        _, report = train(ds, URformerConfig(num_layers=4, d_model=32), cfg)
        assert len(tr._split(36, cfg)[0]) == 32
        assert report["epochs"][-1]["train_nmse_db"] < -30

    def test_nonfinite_loss_recovers_once(self, tiny_data, monkeypatch):
        ds = load_dataset(tiny_data)
        real = tr.nmse_loss
        calls = {"n": 0}

        def flaky(h_r, h_i, H):
            calls["n"] += 1
            if calls["n"] == 3:
                return de.constant(np.array(np.nan))
            return real(h_r, h_i, H)

        monkeypatch.setattr(tr, "nmse_loss", flaky)
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=2, seed=1)
        _, report = train(ds, TINY_UR, cfg)
        assert report["lr_retries"] == 1
        assert len(report["epochs"]) == 2
        assert report["epochs"][0]["lr"] < cfg.learning_rate / 2 + 1e-12

    def test_nonfinite_loss_aborts(self, tiny_data, monkeypatch):
        ds = load_dataset(tiny_data)
        monkeypatch.setattr(tr, "nmse_loss", lambda *a: de.constant(np.array(np.inf)))
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=2, seed=1)
        with pytest.raises(DivergenceError, match="epoch 1, batch 0"):
            train(ds, TINY_UR, cfg)

    def test_param_mismatch(self, tiny_data):
        ds = load_dataset(tiny_data)
        cfg = TrainConfig(num_samples=40, batch_size=8, epochs=1)
        wrong = URformerParams.init(TINY_UR, 8, 2)
        with pytest.raises(ConfigError):
            train(ds, TINY_UR, cfg, params=wrong)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = URformerParams.init(TINY_UR, 6, 2, seed=4)
        for t in params.parameters():
            t.value = rng.standard_normal(t.value.shape)
        S = channel.generate_pilots(TINY, rng)
        save_checkpoint(tmp_path / "x.ckpt", params, S, {"epoch": 3, "seed": 4, "loss": 0.5})
        ck = load_checkpoint(tmp_path / "x.ckpt")
        assert ck.params.cfg == TINY_UR
        assert np.array_equal(ck.pilots, S)
        assert ck.manifest["training"] == {"epoch": 3, "seed": 4, "loss": 0.5}
        for name, arr in params.arrays().items():
            assert ck.params.tensors[name].value.tobytes() == arr.tobytes()
        census = tr.checkpoint_census(ck.manifest)
        assert census == dict(param_shapes(TINY_UR, 6, 2))

    def test_float32(self, tmp_path, rng):
        params = URformerParams.init(TINY_UR, 6, 2, seed=4)
        S = channel.generate_pilots(TINY, rng)
        save_checkpoint(tmp_path / "x.ckpt", params, S, dtype="<f4")
        ck = load_checkpoint(tmp_path / "x.ckpt")
        w = params.tensors["layer0.former.w_proj"].value
        np.testing.assert_array_equal(ck.params.tensors["layer0.former.w_proj"].value, w.astype(np.float32))

    def test_shape_validation(self, tmp_path, rng):
        params = URformerParams.init(TINY_UR, 6, 2)
        S = channel.generate_pilots(TINY, rng)
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, params, S)
        manifest, tensors = read_container(path)
        manifest = {k: v for k, v in manifest.items() if k != "tensors"}
        tensors["layer1.gate"] = np.zeros(3)
        write_container(path, manifest, tensors)
        with pytest.raises(CheckpointError, match="layer1.gate"):
            load_checkpoint(path)

    def test_config_mismatch_detected(self, tmp_path, rng):
        params = URformerParams.init(TINY_UR, 6, 2)
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, params, channel.generate_pilots(TINY, rng))
        manifest, tensors = read_container(path)
        manifest = {k: v for k, v in manifest.items() if k != "tensors"}
        manifest["config"]["num_layers"] = 3
        write_container(path, manifest, tensors)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestEvaluate:
    def test_true_channel_hits_floor(self):
        rows = evaluate(TINY, "snr_db", [10.0], 3, methods=("gs",), estimator=lambda sc: sc.H)
        custom = [r for r in rows if r["method"] == "custom"]
        assert len(custom) == 3
        assert all(r["nmse_db"] == NMSE_FLOOR_DB for r in custom)

    def test_pairing(self):
        rows = evaluate(TINY, "snr_db", [0.0, 10.0], 4, methods=("gs", "emgs"))
        assert len(rows) == 2 * 2 * 4
        by = {}
        for r in rows:
            by.setdefault((r["sweep_value"], r["trial"]), set()).add(r["digest"])
        assert all(len(v) == 1 for v in by.values())
        assert len({next(iter(v)) for v in by.values()}) == len(by)

    def test_wallclock_optional(self):
        rows = evaluate(TINY, "snr_db", [5.0], 1, methods=("gs",))
        assert rows[0]["wallclock_ms"] is None
        rows = evaluate(TINY, "snr_db", [5.0], 1, methods=("gs",), timing=True)
        assert rows[0]["wallclock_ms"] > 0

    def test_emgs_improves_with_snr(self):
        rows = evaluate(DESK, "snr_db", [0.0, 10.0], 200, methods=("emgs",))
        s = summarize(rows)
        assert s[("emgs", 10.0)] < s[("emgs", 0.0)]

    def test_urformer_needs_checkpoint(self):
        with pytest.raises(CheckpointError):
            evaluate(TINY, "snr_db", [5.0], 1, methods=("urformer",))

    def test_incompatible_checkpoint(self, rng):
        params = URformerParams.init(TINY_UR, 8, 2)
        ck = tr.Checkpoint(params=params, pilots=channel.generate_pilots(TINY, rng), manifest={})
        with pytest.raises(CheckpointError, match="M=8"):
            evaluate(TINY, "snr_db", [5.0], 1, methods=("urformer",), models={4: ck})

    def test_checkpoint_pilots_used(self, rng):
        params = URformerParams.init(TINY_UR, 6, 2)
        S = channel.generate_pilots(TINY, rng)
        ck = tr.Checkpoint(params=params, pilots=S, manifest={})
        rows = evaluate(TINY, "snr_db", [5.0], 2, methods=("emgs", "urformer"), models={4: ck})
        sc = channel.simulate(TINY.replace(snr_db=5.0), trial=1, pilots=S)
        assert rows[-1]["digest"] == tr.measurement_digest(sc.meas)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            evaluate(TINY, "rsr_db", [5.0], 1)
        with pytest.raises(ConfigError):
            evaluate(TINY, "snr_db", [5.0], 0)
        with pytest.raises(ConfigError):
            evaluate(TINY, "snr_db", [5.0], 1, methods=("cnn",))
