"""
Unit tests for two-stage training and checkpoint I/O.
"""

import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from src.corpus import CorpusSpec, PairLoader, gen_corpus
from src.evaluation import auc, score_records
from src.filters import ahf_apply, input_highpass
from src.gradcore import ContractViolation, NumericFailure, seed_everything
from src.model import ModelConfig, Stage1Model, trainable_ahf_kernels
from src.trainer import (
    CheckpointError,
    Checkpoint,
    MetricsLog,
    PreconditionError,
    TrainConfig,
    _optimize,
    build_stage1,
    build_stage2,
    load_checkpoint,
    resolve_methods,
    save_checkpoint,
    stage1_losses,
    stage2_losses,
    train_stage1,
    train_stage2,
)


def small_config(**overrides) -> TrainConfig:
    model = ModelConfig(image_size=16, content_channels=8, forgery_channels=8, base_width=4, embed_dim=4)
    values = dict(lr=0.01, batch_size=8, epochs=1, seed=0, prefetch_depth=0, model=model)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def stage1_ckpt(tiny_corpus):
    return train_stage1(small_config(), tiny_corpus)


@pytest.fixture(scope="module")
def stage2_ckpt(tiny_corpus, stage1_ckpt):
    return train_stage2(small_config(), tiny_corpus, stage1_ckpt)


def first_batch(cfg, manifest):
    cfg = resolve_methods(cfg, manifest)
    loader = PairLoader(manifest, cfg.batch_size, cfg.seed, input_highpass(3, 3, cfg.sigma))
    return cfg, next(iter(loader))


def assert_ahf_invariants(kernel):
    """Center -1, surround summing to +1, no response to a constant image."""
    weight = kernel.weight.detach().double()
    c = kernel.center
    center = weight[:, 0, c, c]
    assert bool((center == -1.0).all())
    assert (weight.sum(dim=(1, 2, 3)) - center - 1.0).abs().max().item() <= 1e-5
    side = 2 * kernel.size + 1
    constant = torch.full((1, kernel.channels, side, side), 0.6)
    interior = ahf_apply(kernel, constant)[:, :, c:side - c, c:side - c]
    assert interior.abs().max().item() <= 1e-5


@pytest.fixture(scope="module")
def learning_corpus(tmp_path_factory):
    spec = CorpusSpec(n_real=30, n_fake_per_method=10, image_size=16, seed=8)
    return gen_corpus(spec, str(tmp_path_factory.mktemp("learning_corpus")))


class TestTrainConfig:
    """Test hyperparameter checks."""

    def test_dict_round_trip(self):
        """Test from_dict(to_dict()) including nested sections."""
        cfg = small_config(train_methods=["splice_hue"])
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_odd_batch(self):
        """Test that the batch must split into equal halves."""
        with pytest.raises(ContractViolation, match="batch size"):
            small_config(batch_size=7).validate()

    def test_non_positive_lr(self):
        """Test that the step size must be positive."""
        with pytest.raises(ContractViolation, match="learning rate"):
            small_config(lr=0.0).validate()


class TestResolveMethods:
    """Test training-method resolution."""

    def test_all_methods_by_default(self, tiny_corpus):
        """Test that every corpus method is used and counted."""
        cfg = resolve_methods(small_config(), tiny_corpus)
        assert cfg.train_methods == tiny_corpus.methods
        assert cfg.model.num_methods == 3

    def test_subset(self, tiny_corpus):
        """Test a held-out style subset."""
        cfg = resolve_methods(small_config(train_methods=["splice_noise", "splice_block"]), tiny_corpus)
        assert cfg.model.num_methods == 2

    def test_unknown_method(self, tiny_corpus):
        """Test that a misspelled method is reported with a suggestion."""
        with pytest.raises(ContractViolation, match="did you mean"):
            resolve_methods(small_config(train_methods=["splice_nois"]), tiny_corpus)


class TestStage1:
    """Test stage-1 training."""

    def test_losses_present_and_finite(self, tiny_corpus):
        """Test the stage-1 loss dictionary."""
        cfg, batch = first_batch(small_config(), tiny_corpus)
        seed_everything(0)
        losses = stage1_losses(Stage1Model(cfg.model), batch, cfg.weights)
        assert set(losses) == {"cls", "rec", "total"}
        assert all(bool(torch.isfinite(v)) for v in losses.values())
        expected = cfg.weights.rho1 * losses["cls"] + cfg.weights.rho2 * losses["rec"]
        assert losses["total"].item() == pytest.approx(expected.item(), rel=1e-6)

    def test_repeated_steps_reduce_loss(self, tiny_corpus):
        """Test that SGD on a fixed batch lowers the total."""
        cfg, batch = first_batch(small_config(), tiny_corpus)
        seed_everything(0)
        model = Stage1Model(cfg.model)
        initial = stage1_losses(model, batch, cfg.weights)["total"].item()
        for _ in range(10):
            _optimize(model, stage1_losses(model, batch, cfg.weights)["total"], 5e-3)
        assert stage1_losses(model, batch, cfg.weights)["total"].item() < initial

    def test_ahf_invariants_hold_after_training(self, stage1_ckpt):
        """Test center -1 and zero sum for every trained kernel."""
        model = build_stage1(stage1_ckpt)
        kernels = trainable_ahf_kernels(model)
        assert kernels
        for kernel in kernels:
            weight = kernel.weight.detach().double()
            center = kernel.center
            assert bool((weight[:, 0, center, center] == -1.0).all())
            assert weight.sum(dim=(1, 2, 3)).abs().max().item() <= 1e-6

    def test_ahf_invariants_every_step(self, tiny_corpus, monkeypatch):
        """Test the kernel invariants after each of at least 200 optimizer steps."""
        steps = []

        def checked_optimize(model, total, lr):
            _optimize(model, total, lr)
            kernels = trainable_ahf_kernels(model)
            assert kernels
            for kernel in kernels:
                assert_ahf_invariants(kernel)
            steps.append(len(steps))

        monkeypatch.setattr("src.trainer._optimize", checked_optimize)
        per_epoch = len(PairLoader(tiny_corpus, 4, 0, input_highpass()))
        ckpt = train_stage1(small_config(batch_size=4, epochs=-(-200 // per_epoch)), tiny_corpus)
        assert len(steps) == ckpt.step >= 200

    def test_training_moves_parameters(self, tiny_corpus, stage1_ckpt):
        """Test that at least the detector weights changed."""
        seed_everything(0)
        fresh = Stage1Model(stage1_ckpt.model_config)
        assert not torch.equal(fresh.detector1.weight, stage1_ckpt.params["detector1.weight"])

    def test_deterministic(self, tiny_corpus, stage1_ckpt):
        """Test that a repeated run gives bit-identical parameters."""
        again = train_stage1(small_config(), tiny_corpus)
        assert again.params.keys() == stage1_ckpt.params.keys()
        for name, value in again.params.items():
            assert torch.equal(value, stage1_ckpt.params[name]), name

    def test_logged_losses_deterministic(self, tiny_corpus):
        """Test that two runs log the same loss sequence bit for bit."""
        logs = [MetricsLog(), MetricsLog()]
        for log in logs:
            train_stage1(small_config(epochs=2), tiny_corpus, metrics=log)
        for term in ("cls", "rec", "total"):
            assert logs[0].values(term)
            assert logs[0].values(term) == logs[1].values(term), term

    def test_outputs_written(self, tiny_corpus, tmp_path):
        """Test the checkpoint and metrics files."""
        epochs = []
        train_stage1(small_config(epochs=2), tiny_corpus, out_dir=str(tmp_path),
                     on_epoch=lambda epoch, means: epochs.append((epoch, set(means))))
        assert (tmp_path / "stage1.fsck").exists()
        assert epochs == [(0, {"cls", "rec", "total"}), (1, {"cls", "rec", "total"})]

        with open(tmp_path / "stage1_metrics.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["step", "epoch", "term", "value"]
        steps = {int(r["step"]) for r in rows}
        assert len(rows) == 3 * len(steps)
        assert {r["term"] for r in rows} == {"cls", "rec", "total"}

    def test_last_good_on_non_finite_loss(self, tiny_corpus, tmp_path, monkeypatch):
        """Test that a NaN loss aborts with a last-good checkpoint on disk."""
        def broken(model, batch, w):
            nan = torch.tensor(float("nan"))
            return {"cls": nan, "rec": nan, "total": nan}

        monkeypatch.setattr("src.trainer.stage1_losses", broken)
        with pytest.raises(NumericFailure):
            train_stage1(small_config(), tiny_corpus, out_dir=str(tmp_path))
        last_good = load_checkpoint(str(tmp_path / "stage1_last_good.fsck"), expected_stage=1)
        assert last_good.step == 0
        assert not (tmp_path / "stage1.fsck").exists()

    def test_prefetch_matches_direct_loading(self, tiny_corpus, stage1_ckpt):
        """Test that the prefetch thread does not change results."""
        prefetched = train_stage1(small_config(prefetch_depth=2), tiny_corpus)
        for name, value in prefetched.params.items():
            assert torch.equal(value, stage1_ckpt.params[name]), name


class TestStage2:
    """Test stage-2 training."""

    def test_needs_stage1(self, tiny_corpus):
        """Test that stage 2 without a stage-1 checkpoint raises."""
        with pytest.raises(PreconditionError, match="stage-1"):
            train_stage2(small_config(), tiny_corpus, None)

    def test_rejects_stage2_checkpoint(self, tiny_corpus, stage2_ckpt):
        """Test that a stage-2 checkpoint cannot seed stage 2."""
        with pytest.raises(CheckpointError, match="stage-1"):
            train_stage2(small_config(), tiny_corpus, stage2_ckpt)

    def test_frozen_branch_unchanged(self, stage1_ckpt, stage2_ckpt):
        """Test that the embedded branch keeps the stage-1 weights bit for bit."""
        prefix1, prefix2 = "encoder1.forgery.", "encoder2.branch."
        branch = {k[len(prefix2):]: v for k, v in stage2_ckpt.params.items() if k.startswith(prefix2)}
        assert branch
        for name, value in branch.items():
            assert torch.equal(value, stage1_ckpt.params[prefix1 + name]), name

    def test_unfrozen_branch_moves(self, tiny_corpus, stage1_ckpt):
        """Test that an unfrozen branch is updated."""
        ckpt = train_stage2(small_config(freeze_embedded=False), tiny_corpus, stage1_ckpt)
        name = "encoder2.branch.head.weight"
        assert not torch.equal(ckpt.params[name], stage1_ckpt.params["encoder1.forgery.head.weight"])

    def test_losses(self, tiny_corpus, stage1_ckpt):
        """Test the stage-2 loss dictionary."""
        cfg, batch = first_batch(small_config(), tiny_corpus)
        model = build_stage2(train_stage2(cfg, tiny_corpus, stage1_ckpt))
        losses = stage2_losses(model, batch, cfg.weights, np.random.default_rng(0))
        assert set(losses) == {"cls1", "cls2", "con", "rec", "total"}
        assert losses["con"].item() >= 0.0
        assert all(bool(torch.isfinite(v)) for v in losses.values())

    def test_sampler_state_saved(self, stage2_ckpt):
        """Test that the tuple sampler state travels with the checkpoint."""
        sampler = stage2_ckpt.restore_rng()
        assert sampler is not None
        assert sampler.bit_generator.state == stage2_ckpt.rng_state["numpy"]

    def test_sigma_follows_stage1(self, tiny_corpus, stage1_ckpt):
        """Test that stage 2 filters Xh with the stage-1 sigma, not its own."""
        ckpt = train_stage2(small_config(sigma=3.0), tiny_corpus, stage1_ckpt)
        assert ckpt.train_config.sigma == stage1_ckpt.train_config.sigma
        assert ckpt.model_config.sigma == stage1_ckpt.model_config.sigma

    def test_logged_losses_deterministic(self, tiny_corpus, stage1_ckpt):
        """Test that two stage-2 runs log the same loss sequence bit for bit."""
        logs = [MetricsLog(), MetricsLog()]
        for log in logs:
            train_stage2(small_config(), tiny_corpus, stage1_ckpt, metrics=log)
        for term in ("cls1", "cls2", "con", "rec", "total"):
            assert logs[0].values(term) == logs[1].values(term), term


class TestLearning:
    """Test that training actually learns on a 60-image corpus."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, learning_corpus, seed):
        """Test that the last epoch's mean total is below the first's."""
        log = MetricsLog()
        cfg = small_config(seed=seed, epochs=8)
        train_stage1(cfg, learning_corpus, metrics=log)
        assert log.epoch_means(cfg.epochs - 1)["total"] < log.epoch_means(0)["total"]

    def test_detector3_beats_chance_on_train(self, learning_corpus):
        """Test Detector3's train-split AUC after both stages."""
        cfg = small_config(epochs=8)
        stage1 = train_stage1(cfg, learning_corpus)
        stage2 = train_stage2(cfg, learning_corpus, stage1)
        records = learning_corpus.select(split="train")
        highpass = input_highpass(3, stage2.model_config.kernel_size, stage2.train_config.sigma)
        scores = score_records(build_stage1(stage1).eval(), build_stage2(stage2).eval(),
                               learning_corpus, records, highpass)
        assert auc(scores["fc"], [r.y for r in records]) > 0.5


class TestCheckpointIO:
    """Test the checkpoint file format."""

    def test_round_trip_bit_exact(self, stage1_ckpt, tmp_path):
        """Test that save/load preserves every tensor, the config and the step."""
        path = save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        loaded = load_checkpoint(str(path), expected_stage=1)
        assert loaded.stage == 1
        assert loaded.step == stage1_ckpt.step
        assert loaded.config == stage1_ckpt.config
        for name, value in stage1_ckpt.params.items():
            assert torch.equal(loaded.params[name], value), name

    def test_restored_model_matches(self, stage1_ckpt, tmp_path):
        """Test identical outputs from the original and the reloaded model."""
        path = save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        a, b = build_stage1(stage1_ckpt), build_stage1(load_checkpoint(str(path)))
        x = torch.rand(2, 3, 16, 16)
        xh = torch.rand(2, 3, 16, 16)
        assert torch.equal(a.encoder1(x, xh).forgery, b.encoder1(x, xh).forgery)

    def test_stage_rejection(self, stage1_ckpt, tmp_path):
        """Test that asking for the wrong stage raises."""
        path = save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        with pytest.raises(CheckpointError, match="stage 2 is required"):
            load_checkpoint(str(path), expected_stage=2)

    def test_truncated(self, stage1_ckpt, tmp_path):
        """Test that a cut-off file is reported as truncated."""
        path = save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(path))

    def test_trailing_bytes(self, stage1_ckpt, tmp_path):
        """Test that extra bytes after the last record are rejected."""
        path = save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        path.write_bytes(path.read_bytes() + b"\0\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(str(path))

    def test_bad_magic(self, tmp_path):
        """Test that a foreign file is rejected."""
        path = tmp_path / "x.fsck"
        path.write_bytes(b"PNG\0" + bytes(16))
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(str(path))

    def test_missing_file(self, tmp_path):
        """Test that a missing file surfaces as OSError."""
        with pytest.raises(OSError):
            load_checkpoint(str(tmp_path / "absent.fsck"))

    def test_no_temporary_left(self, stage1_ckpt, tmp_path):
        """Test that the atomic write leaves only the final file."""
        save_checkpoint(stage1_ckpt, str(tmp_path / "s1.fsck"))
        assert [p.name for p in tmp_path.iterdir()] == ["s1.fsck"]

    def test_restore_into_wrong_model(self, stage1_ckpt):
        """Test that restoring into a different architecture raises."""
        other = Stage1Model(replace(stage1_ckpt.model_config, use_mhff=False))
        with pytest.raises(CheckpointError, match="incompatible"):
            stage1_ckpt.restore(other)

    def test_restore_shape_mismatch(self, stage1_ckpt):
        """Test that a width change is reported by parameter name."""
        other = Stage1Model(replace(stage1_ckpt.model_config, num_methods=1))
        wrong = Checkpoint(1, dict(stage1_ckpt.params), stage1_ckpt.config, {})
        wrong.params["detector1.weight"] = torch.zeros(8, 3)
        with pytest.raises(CheckpointError, match="detector1.weight"):
            wrong.restore(other)


class TestMetricsLog:
    """Test the per-step metrics log."""

    def test_epoch_means(self):
        """Test per-epoch averages."""
        log = MetricsLog()
        log.log(0, 0, {"total": 1.0})
        log.log(1, 0, {"total": 3.0})
        log.log(2, 1, {"total": 5.0})
        assert log.epoch_means(0) == {"total": 2.0}
        assert log.values("total") == [1.0, 3.0, 5.0]

    def test_non_finite_rejected(self):
        """Test that NaN values cannot be logged."""
        with pytest.raises(NumericFailure):
            MetricsLog().log(0, 0, {"total": float("nan")})

    def test_csv_values_exact(self, tmp_path):
        """Test that CSV values parse back to the logged floats."""
        log = MetricsLog()
        log.log(0, 0, {"rec": 0.1 + 0.2})
        path = log.write_csv(str(tmp_path / "m.csv"))
        with open(path, newline="") as f:
            row = next(csv.DictReader(f))
        assert float(row["value"]) == 0.1 + 0.2
