"""Sequence NLL properties, gradient correctness, training loop, checkpoints."""
import numpy as np
import pytest

from sliceflow import autodiff as ad
from sliceflow.flow import FlowConfig
from sliceflow.optim import finite_difference_check
from sliceflow.process import init_state, predictive_logpdf
from sliceflow.training import (
    CheckpointError,
    DivergenceError,
    ModelConfig,
    SequenceModel,
    TrainHistory,
    checkpoint_meta,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
    train,
    volume_to_arrays,
)
from sliceflow.volumes import PhantomSpec, generate_phantom


def tiny_config(side=4, K=8, M=3, layers=2, width=6, embed=3, mode="student-t", **over):
    flow = FlowConfig(image_shape=side, pose_dim=K, layers=layers, width=width, pose_embed=embed)
    defaults = dict(
        flow=flow,
        process_mode=mode,
        slices_per_volume=K,
        sequence_length=M,
        batch_size=4,
        epochs=2,
        seed=3,
    )
    defaults.update(over)
    return ModelConfig(**defaults)


def random_batch(config, rng, batch=2, randomize_model=None):
    m = config.sequence_length
    h, w = config.flow.image_shape
    k = config.slices_per_volume
    images = rng.uniform(0.05, 0.95, (batch, m, h, w)).astype(np.float32)
    poses = np.stack(
        [np.eye(k, dtype=np.float32)[rng.choice(k, m, replace=False)] for _ in range(batch)]
    )
    return images, poses


def phantom_set(n, shape=(16, 12, 12), start_seed=0):
    return [
        generate_phantom(PhantomSpec(seed=start_seed + i, shape=shape, subject_id=f"p{start_seed + i}"))
        for i in range(n)
    ]


class TestSequenceNLL:
    def test_permutation_invariance_float32(self):
        config = tiny_config()
        model = SequenceModel(config, rng=np.random.default_rng(0))
        for layer in model.flow.layers:  # make the flow non-trivial
            layer.w3.data[...] = 0.1 * np.random.default_rng(1).standard_normal(layer.w3.data.shape)
        rng = np.random.default_rng(2)
        images, poses = random_batch(config, rng, batch=1)
        base = model.sequence_nll((images[0], poses[0]))
        for _ in range(4):
            perm = rng.permutation(config.sequence_length)
            permuted = model.sequence_nll((images[0][perm], poses[0][perm]))
            assert abs(permuted - base) < 1e-4

    def test_single_slice_sequence_is_prior_term(self):
        config = tiny_config()
        model = SequenceModel(config, rng=np.random.default_rng(0))
        rng = np.random.default_rng(4)
        h, w = config.flow.image_shape
        image = rng.uniform(0.1, 0.9, (h, w)).astype(np.float32)
        pose = np.eye(config.slices_per_volume, dtype=np.float32)[2]
        nll = model.sequence_nll((image[None], pose[None]))
        z, logdet = model.flow.forward(image, pose)
        params = model.process.snapshot()
        lp = predictive_logpdf(z.astype(np.float64), init_state(params), params)
        np.testing.assert_allclose(nll, -(lp + logdet), rtol=1e-5)

    def test_near_independent_process_reduces_to_flow_prior_nll(self):
        # with a Gaussian process at rho ~ 0, mu=0, v=1 the sequence NLL is the
        # plain change-of-variables likelihood under a unit Gaussian prior
        config = tiny_config(mode="gaussian", init_covariance=1e-9)
        model = SequenceModel(config, rng=np.random.default_rng(0))
        rng = np.random.default_rng(5)
        images, poses = random_batch(config, rng, batch=1)
        nll = model.sequence_nll((images[0], poses[0]))

        flat_i = images[0]
        flat_p = poses[0]
        total = 0.0
        d = config.flow.latent_dim
        for i in range(config.sequence_length):
            z, logdet = model.flow.forward(flat_i[i], flat_p[i])
            total += -0.5 * float(z @ z) - 0.5 * d * np.log(2 * np.pi) + logdet
        np.testing.assert_allclose(nll, -total, rtol=1e-4)

    def test_last_mode_scores_only_query(self):
        config_full = tiny_config()
        config_last = tiny_config(loss_terms="last")
        m_full = SequenceModel(config_full, rng=np.random.default_rng(0))
        m_last = SequenceModel(config_last, rng=np.random.default_rng(0))
        rng = np.random.default_rng(6)
        images, poses = random_batch(config_full, rng, batch=1)
        assert m_last.sequence_nll((images[0], poses[0])) != pytest.approx(
            m_full.sequence_nll((images[0], poses[0]))
        )

    @pytest.mark.parametrize("mode", ["gaussian", "student-t"])
    def test_gradients_match_finite_differences(self, mode):
        # 8-pixel images, 2 coupling layers, full sequence objective
        with ad.precision(np.float64):
            config = tiny_config(side=(2, 4), K=6, M=3, layers=2, width=4, embed=2,
                                 mode=mode, init_dof=9.0)
            model = SequenceModel(config, rng=np.random.default_rng(1))
            for layer in model.flow.layers:
                layer.w3.data[...] = 0.1 * np.random.default_rng(2).standard_normal(layer.w3.data.shape)
            rng = np.random.default_rng(7)
            images, poses = random_batch(config, rng, batch=2)

            err = finite_difference_check(
                lambda ps: model.batch_nll(images, poses),
                model.parameters(),
                eps=1e-6,
                max_coords_per_param=12,
            )
            assert err < 1e-3

    def test_bad_shapes_rejected(self):
        config = tiny_config()
        model = SequenceModel(config, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="B,M"):
            model.batch_nll(np.zeros((2, 4, 4)), np.zeros((2, 3, 8)))


class TestModelConfig:
    def test_round_trip(self):
        config = tiny_config()
        doc = config.to_dict()
        back = ModelConfig.from_dict(doc)
        assert back.to_dict() == doc

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"optimizer": "sgd"})

    def test_sequence_length_bounds(self):
        with pytest.raises(ValueError, match="sequence_length"):
            tiny_config(M=1)
        with pytest.raises(ValueError, match="slices_per_volume"):
            tiny_config(K=4, M=6)

    def test_pose_dim_must_match_k(self):
        flow = FlowConfig(image_shape=4, pose_dim=5)
        with pytest.raises(ValueError, match="pose_dim"):
            ModelConfig(flow=flow, slices_per_volume=8, sequence_length=3)


class TestTrainingLoop:
    def test_loss_decreases_and_is_deterministic(self, tmp_path):
        vols = phantom_set(12)
        config = tiny_config(K=8, M=3, batch_size=4, epochs=3, learning_rate=1e-3)
        config.middle_fraction = 1.0
        config.flow.image_shape = (12, 12)
        model_a, hist_a = train(vols, config)
        model_b, hist_b = train(vols, config)
        assert hist_a.train_nll == hist_b.train_nll  # bitwise identical curves
        assert hist_a.train_nll[-1] < hist_a.train_nll[0]

    def test_trained_beats_fresh_on_held_out(self):
        vols = phantom_set(12)
        held_out = phantom_set(3, start_seed=100)
        config = tiny_config(K=8, M=3, batch_size=4, epochs=4, learning_rate=1e-3)
        config.middle_fraction = 1.0
        config.flow.image_shape = (12, 12)
        trained, _ = train(vols, config)
        fresh = SequenceModel(config, rng=np.random.default_rng(config.seed))

        rng = np.random.default_rng(9)
        def heldout_nll(model):
            total = 0.0
            for vol in held_out:
                images, poses = volume_to_arrays(vol, config)
                picks = rng.choice(config.slices_per_volume, config.sequence_length, replace=False)
                total += model.sequence_nll((images[picks], poses[picks]))
            return total

        rng = np.random.default_rng(9)
        nll_trained = heldout_nll(trained)
        rng = np.random.default_rng(9)
        nll_fresh = heldout_nll(fresh)
        assert nll_trained < nll_fresh

    def test_val_curve_emitted(self, tmp_path):
        vols = phantom_set(8)
        val = phantom_set(2, start_seed=50)
        config = tiny_config(K=8, M=3, batch_size=4, epochs=2)
        config.middle_fraction = 1.0
        config.flow.image_shape = (12, 12)
        _, hist = train(vols, config, out_dir=tmp_path, val_volumes=val)
        assert all(v is not None for v in hist.val_nll)
        hist.write_csv(tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_nll,val_nll"
        assert len(lines) == 3
        assert (tmp_path / "model.brnc").exists()

    def test_divergence_aborts(self):
        vols = phantom_set(4)
        config = tiny_config(K=8, M=3, batch_size=4, epochs=2, learning_rate=1e10)
        config.middle_fraction = 1.0
        config.flow.image_shape = (12, 12)
        with pytest.raises(DivergenceError):
            train(vols, config)

    def test_too_few_volumes_rejected(self):
        config = tiny_config()
        with pytest.raises(ValueError, match="two training volumes"):
            train(phantom_set(1), config)


class TestCheckpoints:
    def _model(self, seed=0):
        config = tiny_config()
        model = SequenceModel(config, rng=np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 1)
        for _, p in model.parameter_items():
            p.data[...] = rng.standard_normal(p.data.shape).astype(p.data.dtype)
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.brnc"
        save_checkpoint(model, path, step=17, loss_tail=[3.0, 2.5])
        back = load_checkpoint(path)
        for (name_a, pa), (name_b, pb) in zip(model.parameter_items(), back.parameter_items()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)
        meta = checkpoint_meta(path)
        assert meta["step"] == 17
        assert meta["loss_tail"] == [3.0, 2.5]

    def test_round_trip_preserves_nll(self, tmp_path):
        model = self._model(3)
        # keep the flow tame so the NLL is finite with random weights
        for layer in model.flow.layers:
            layer.w3.data[...] *= 0.01
            layer.gain.data[...] = 1.0
        path = tmp_path / "m.brnc"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        rng = np.random.default_rng(4)
        images, poses = random_batch(model.config, rng, batch=2)
        a = model.batch_nll(images, poses).item()
        b = back.batch_nll(images, poses).item()
        assert a == b

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.brnc"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_corrupted_blob_length_rejected(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.brnc"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(CheckpointError, match="blob"):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.brnc"
        save_checkpoint(model, path)
        other = SequenceModel(tiny_config(K=10, M=3), rng=np.random.default_rng(0))
        with pytest.raises(CheckpointError, match="config mismatch"):
            restore_parameters(other, path)

    def test_resume_continues_curve(self, tmp_path):
        vols = phantom_set(8)
        config = tiny_config(K=8, M=3, batch_size=4, epochs=2, learning_rate=1e-3)
        config.middle_fraction = 1.0
        config.flow.image_shape = (12, 12)
        _, hist1 = train(vols, config, out_dir=tmp_path)
        _, hist2 = train(vols, config, out_dir=tmp_path, resume_from=tmp_path / "model.brnc")
        assert hist2.train_nll[-1] < hist1.train_nll[0]
        assert checkpoint_meta(tmp_path / "model.brnc")["step"] > 0
