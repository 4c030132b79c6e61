import json
import math

import numpy as np
import pytest
from sklearn.base import clone

from selffusion import autodiff as ad
from selffusion.checkpoint import (
    CheckpointError,
    decode_records,
    encode_records,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from selffusion.cli import main
from selffusion.complexity import complexity, parameter_count
from selffusion.config import ModelConfig
from selffusion.data import default_specs, generate_dataset, load_dataset
from selffusion.errors import ConfigError, DataError, DivergenceError
from selffusion.estimator import PointCloudCompleter
from selffusion.evaluation import evaluate
from selffusion.gradcheck import CASES, GradCase, run_gradcheck
from selffusion.metrics import chamfer_value, f_score
from selffusion.model import CompletionNetwork, predict_batch
from selffusion.training import Adam, TrainConfig, train

TINY = dict(n_input=32, levels=(16, 8, 4), widths=(8, 8, 8), k=4, heads=2, pos_hidden=4, fusion_width=8,
            decoder_width=8, decoder_heads=2, decoder_layers=1, n_miss=16, n_out=32)


def tiny_config(**kw):
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(default_specs(6, n_gt=32, seed=0), root)
    return root


@pytest.fixture(scope="module")
def samples(dataset):
    return load_dataset(dataset, "all", n_input=32)


class TestTrain:
    def test_logged_loss_is_pre_update_chamfer(self, samples):
        config = TrainConfig(model=tiny_config(), epochs=1, batch_size=1, seed=3)
        sample = samples[0]
        model = CompletionNetwork(config.model)
        start = np.random.default_rng([3, 1]).integers(0, 32, 1)
        pred = model.forward(ad.Tape("narrow"), sample.partial[None], start, start).complete.data[0]
        result = train(config, [sample])
        assert result.log[0][1] == pytest.approx(chamfer_value(sample.gt, pred), rel=1e-5)

    def test_zero_step_leaves_parameters(self, samples):
        config = TrainConfig(model=tiny_config(), epochs=3, batch_size=2, learning_rate=0.0, seed=1)
        result = train(config, samples[:2])
        before = CompletionNetwork(config.model).parameter_dict()
        for name, arr in result.checkpoint.params.items():
            np.testing.assert_array_equal(arr, before[name].data)
        assert len({round(v, 12) for _, v in result.log}) == 1

    def test_seed_fixes_model_seed(self):
        assert TrainConfig(model=tiny_config(seed=9), seed=4).model.seed == 4

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochz": 3})

    def test_empty_and_mismatched_data(self, samples):
        with pytest.raises(DataError):
            train(TrainConfig(model=tiny_config(), epochs=1), [])
        with pytest.raises(DataError):
            train(TrainConfig(model=tiny_config(n_input=24, n_out=24)), samples[:1])

    def test_divergence_guard(self, samples):
        config = TrainConfig(model=tiny_config(), epochs=1, batch_size=1)
        bad = samples[0]
        bad = type(bad)(bad.id, bad.category, bad.seed, bad.split, bad.partial, np.full_like(bad.gt, 1e300))
        with pytest.raises(DivergenceError):
            train(config, [bad])

    def test_checkpoints_every_k_and_resume(self, samples, tmp_path):
        config = TrainConfig(model=tiny_config(), epochs=4, batch_size=3, seed=2, checkpoint_every=2)
        full = train(config, samples, tmp_path / "full")
        assert (tmp_path / "full" / "checkpoint_e0002.sfck").exists()
        assert (tmp_path / "full" / "checkpoint_e0004.json").exists()
        mid = load_checkpoint(tmp_path / "full" / "checkpoint_e0002")
        resumed = train(config, samples, tmp_path / "resumed", resume=mid)
        assert resumed.log == full.log
        for name, arr in full.checkpoint.params.items():
            assert arr.tobytes() == resumed.checkpoint.params[name].tobytes()

    def test_adam_matches_hand_update(self):
        p = ad.Parameter("w", np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.1)
        opt.step({"w": np.array([0.5, -0.25])})
        # the first bias-corrected step moves each coordinate by lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)

    def test_augmentation_is_seeded(self, samples):
        from selffusion.training import Augmentation

        config = TrainConfig(model=tiny_config(), epochs=1, batch_size=3, augmentation=Augmentation(0.3, 0.01))
        a, b = train(config, samples[:3]), train(config, samples[:3])
        assert a.log == b.log


class TestCheckpoint:
    def test_records_round_trip(self, rng):
        records = [("param/a", rng.normal(size=(2, 3))), ("adam.m/a", np.zeros(4)), ("scalar", np.array(1.5))]
        blob = encode_records(records)
        decoded = decode_records(blob)
        assert [n for n, _ in decoded] == [n for n, _ in records]
        for (_, x), (_, y) in zip(records, decoded):
            np.testing.assert_array_equal(x, y)
        assert encode_records(decoded) == blob

    def test_save_load_save_byte_identical(self, samples, tmp_path):
        result = train(TrainConfig(model=tiny_config(), epochs=1, batch_size=3), samples[:3])
        save_checkpoint(result.checkpoint, tmp_path / "a")
        save_checkpoint(load_checkpoint(tmp_path / "a.sfck"), tmp_path / "b")
        for ext in (".sfck", ".json"):
            assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()

    def test_round_trip_reproduces_forward(self, samples, tmp_path):
        result = train(TrainConfig(model=tiny_config(), epochs=1, batch_size=3), samples[:3])
        save_checkpoint(result.checkpoint, tmp_path / "c")
        model = CompletionNetwork(result.model.config)
        load_into(model, load_checkpoint(tmp_path / "c"))
        partials = np.stack([s.partial for s in samples])
        assert predict_batch(model, partials).tobytes() == predict_batch(result.model, partials).tobytes()

    def test_corruption_and_mismatch(self, samples, tmp_path):
        result = train(TrainConfig(model=tiny_config(), epochs=1, batch_size=3), samples[:3])
        save_checkpoint(result.checkpoint, tmp_path / "c")
        blob = (tmp_path / "c.sfck").read_bytes()
        with pytest.raises(CheckpointError):
            decode_records(blob[:-3])
        with pytest.raises(CheckpointError):
            decode_records(b"NOPE" + blob[4:])
        meta = json.loads((tmp_path / "c.json").read_text())
        meta["format_version"] = 2
        (tmp_path / "c.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")
        with pytest.raises(CheckpointError):
            load_into(CompletionNetwork(tiny_config(widths=(8, 8, 16))), result.checkpoint)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent")


class TestEvaluate:
    def test_bypass_is_perfect(self, samples, tmp_path):
        ckpt = train(TrainConfig(model=tiny_config(), epochs=1, batch_size=6), samples).checkpoint
        report = evaluate(ckpt, samples, tmp_path, bypass=True)
        assert report.mean_cd_times_1e3 == 0.0 and report.f_score_at_tau == 1.0

    def test_files_deterministic_and_consistent(self, samples, tmp_path):
        ckpt = train(TrainConfig(model=tiny_config(), epochs=1, batch_size=6), samples).checkpoint
        evaluate(ckpt, samples, tmp_path / "a", tau=0.05)
        report = evaluate(ckpt, samples, tmp_path / "b", tau=0.05)
        for name in ("metrics.csv", "metrics.json", "samples.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = [line.split(",") for line in (tmp_path / "a" / "samples.csv").read_text().splitlines()[1:]]
        by_cat = {}
        for _, cat, cd, f in rows:
            by_cat.setdefault(cat, []).append((float(cd), float(f)))
        for cat, vals in by_cat.items():
            cd, f = report.per_category[cat]
            assert cd == pytest.approx(math.fsum(v[0] for v in vals) / len(vals), rel=1e-12)
            assert f == pytest.approx(math.fsum(v[1] for v in vals) / len(vals), rel=1e-12)
        preds = predict_batch(CompletionNetwork(ckpt.model_config), np.stack([s.partial for s in samples]))
        assert preds.shape == (6, 32, 3)


class TestComplexity:
    def test_branch_ordering(self):
        counts = [complexity(tiny_config(branches=b)).parameters for b in (2, 3, 4)]
        assert counts[0] < counts[1] < counts[2]

    def test_registry_sum_and_width_monotonicity(self):
        config = tiny_config()
        model = CompletionNetwork(config)
        report = complexity(config)
        assert report.parameters == parameter_count(model) == sum(p.data.size for p in model.parameters())
        wider = complexity(tiny_config(widths=(8, 8, 16)))
        assert wider.parameters > report.parameters and wider.flops > report.flops
        assert report.to_dict()["input_size"] == 32


class TestGradcheck:
    def test_report_deterministic_and_passing(self):
        subset = {k: CASES[k] for k in ("matmul", "layer_norm", "chamfer_distance", "merge_and_resample")}
        a, b = run_gradcheck(5, 3, subset), run_gradcheck(5, 3, subset)
        assert a.passed and a.to_dict() == b.to_dict()

    def test_corrupted_backward_is_reported(self):
        def broken(x):
            # forward x**2, backward claims 3x
            return ad.record_op("broken_square", (x,), x.data ** 2, lambda g: (g * 3 * x.data,))

        def case(rng):
            return GradCase([rng.uniform(-1, 1, (3, 4))], lambda t: broken(t[0]))

        report = run_gradcheck(0, 3, {"broken_square": case, "relu": CASES["relu"]})
        status = {r.name: r.passed for r in report.results}
        assert status == {"broken_square": False, "relu": True}
        assert not report.passed


class TestCli:
    def test_full_workflow(self, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        cfg = tmp_path / "c.toml"
        cfg.write_text("epochs = 1\nbatch_size = 4\n[model]\n" + "".join(
            f"{k} = {list(v) if isinstance(v, tuple) else v}\n" for k, v in TINY.items()))
        assert main(["gen-data", "--out", str(data), "--count", "4", "--n-gt", "32", "--seed", "1"]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--split", "all",
                     "--branches", "2", "--fusion", "single"]) == 0
        assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--out",
                     str(tmp_path / "ev"), "--split", "all"]) == 0
        assert (tmp_path / "ev" / "metrics.csv").read_text().startswith("category,count,cd_x1e3,fscore")
        partial = next((data / "shapes").glob("*_partial.pcf"))
        assert main(["complete", "--checkpoint", str(run / "checkpoint"), "--input", str(partial),
                     "--out", str(tmp_path / "out.xyz")]) == 0
        assert len((tmp_path / "out.xyz").read_text().splitlines()) == 32
        assert main(["export-plot", "--input", str(partial), "--out", str(tmp_path / "p.csv")]) == 0
        assert (tmp_path / "p.csv").read_text().startswith("x,y,z\n")
        assert main(["complexity", "--config", str(cfg), "--branches", "3", "--out", str(tmp_path / "cx.json")]) == 0
        assert json.loads((tmp_path / "cx.json").read_text())["parameters"] > 0

    def test_exit_codes(self, tmp_path, dataset):
        bad = tmp_path / "bad.toml"
        bad.write_text("epochs = 0\n")
        assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path)]) == 2
        bad.write_text("not toml [")
        assert main(["complexity", "--config", str(bad)]) == 2
        assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(dataset),
                     "--out", str(tmp_path)]) == 3
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3


class TestEstimator:
    def test_fit_predict_score(self, samples):
        X = [s.partial[:16] for s in samples[:4]]  # resampled back up to n_input
        y = np.stack([s.gt for s in samples[:4]])
        est = PointCloudCompleter(epochs=2, batch_size=2, **{k: TINY[k] for k in
                                  ("n_input", "n_out", "n_miss", "levels", "widths", "k", "heads")})
        assert est.fit(X, y) is est
        pred = est.predict(X)
        assert pred.shape == (4, 32, 3)
        assert est.score(X, y) == pytest.approx(-np.mean([chamfer_value(g, p) for g, p in zip(y, pred)]))
        assert len(est.loss_curve_) == 2 and est.n_parameters_ > 0
        params = est.get_params()
        assert params["epochs"] == 2 and clone(est).get_params() == params

    def test_validation(self, samples):
        est = PointCloudCompleter(epochs=1)
        with pytest.raises(DataError):
            est.fit(np.zeros((2, 5, 2)), np.zeros((2, 5, 3)))
        with pytest.raises(DataError):
            est.fit(np.ones((2, 300, 3)), np.ones((3, 32, 3)))
        with pytest.raises(Exception, match="not fitted"):
            PointCloudCompleter().predict(np.zeros((1, 256, 3)))
        with pytest.raises(ConfigError):
            PointCloudCompleter(branches=1).fit(np.ones((1, 256, 3)), np.ones((1, 32, 3)))

    def test_f_score_helper_on_predictions(self, samples):
        assert 0.0 <= f_score(samples[0].gt, samples[0].partial, 0.01) <= 1.0
