import numpy as np
import pytest

from cpgan import losses as L
from cpgan import tensor as T
from cpgan.data import SynthConfig, generate_synthetic, split_dataset
from cpgan.networks import init_params
from cpgan.tensor import Adam, Tensor
from cpgan.trainer import (
    ConfigError,
    NonFiniteLossError,
    PlateauScheduler,
    TrainConfig,
    apply_label_rate,
    lr_plateau,
    make_batches,
    make_optimizers,
    pretrain_assistant,
    run_experiment,
    train_step,
)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SynthConfig(count=24, size=16, seed=4, radius=(2, 4)))


def frozen_nets(seed=0, **kw):
    nets = init_params(seed, **kw)
    if nets.assistant is not None:
        nets.assistant.freeze()
    return nets


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, label_rate=0.4, scm_enabled=False, seg_loss="dice")
        assert TrainConfig.loads(cfg.dumps()) == cfg

    def test_comments_and_blank_lines(self):
        text = "# header\n\n" + TrainConfig().dumps().replace("epochs = 20", "epochs = 7  # short")
        assert TrainConfig.loads(text).epochs == 7

    def test_missing_key_named(self):
        text = "".join(line + "\n" for line in TrainConfig().dumps().splitlines() if not line.startswith("lambda_adv"))
        with pytest.raises(ConfigError, match="lambda_adv"):
            TrainConfig.loads(text)

    def test_unknown_and_duplicate_keys(self):
        with pytest.raises(ConfigError, match="unknown config key 'gamma'"):
            TrainConfig.loads(TrainConfig().dumps() + "gamma = 1\n")
        with pytest.raises(ConfigError, match="duplicate"):
            TrainConfig.loads(TrainConfig().dumps() + "seed = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig.loads(TrainConfig().dumps().replace("epochs = 20", "epochs = many"))

    @pytest.mark.parametrize("kw", [dict(label_rate=0.0), dict(label_rate=1.5), dict(batch_size=1, label_rate=0.5),
                                    dict(lr=0.0), dict(seg_loss="focal"), dict(plateau_factor=1.0)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestLabelRate:
    def test_full_rate(self, tiny):
        lab, unl = apply_label_rate(tiny, 1.0, 0)
        assert len(lab) == len(tiny) and unl == []

    def test_counts(self):
        samples = generate_synthetic(SynthConfig(count=100, size=16, lesions=(0, 0)))
        lab, unl = apply_label_rate(samples, 0.4, 3)
        assert (len(lab), len(unl)) == (40, 60)
        assert all(s.labeled for s in lab) and not any(s.labeled for s in unl)

    def test_nested(self, tiny):
        ids = lambda r: {s.id for s in apply_label_rate(tiny, r, 5)[0]}  # noqa: E731
        assert ids(0.2) <= ids(0.4) <= ids(0.6) <= ids(1.0)


class TestBatches:
    def test_all_labeled_at_full_rate(self, tiny):
        lab, unl = apply_label_rate(tiny, 1.0, 0)
        for b in make_batches(lab, unl, TrainConfig(), 0):
            assert all(s.labeled for s in b)

    def test_proportional_mixing(self, tiny):
        lab, unl = apply_label_rate(tiny[:20], 0.5, 0)
        batches = list(make_batches(lab, unl, TrainConfig(batch_size=4), 0))
        assert len(batches) == 5
        for b in batches:
            assert sum(s.labeled for s in b) == 2 and len(b) == 4

    def test_every_sample_once(self, tiny):
        lab, unl = apply_label_rate(tiny, 0.3, 1)
        ids = [s.id for b in make_batches(lab, unl, TrainConfig(batch_size=4), 2) for s in b]
        assert sorted(ids) == sorted(s.id for s in tiny)

    def test_seeded_order(self, tiny):
        lab, unl = apply_label_rate(tiny, 0.5, 0)
        order = lambda ep: [s.id for b in make_batches(lab, unl, TrainConfig(), ep) for s in b]  # noqa: E731
        assert order(0) == order(0)
        assert order(0) != order(1)


class TestTrainStep:
    def test_degenerate_config_is_supervised_step(self, tiny):
        cfg = TrainConfig(lambda_adv=0.0, lambda_rot=0.0)
        batch = tiny[:4]
        nets = frozen_nets(0)
        train_step(batch, nets, make_optimizers(nets, cfg.lr), cfg)

        ref = frozen_nets(0).seg
        opt = Adam(ref.params, cfg.lr)
        x = np.stack([s.image for s in batch])[:, None]
        y = np.stack([s.mask for s in batch])[:, None]
        out = ref(Tensor(np.concatenate([x, x[..., ::-1, ::-1]])))
        loss = L.supervised_seg_loss(out, Tensor(np.concatenate([y, y[..., ::-1, ::-1]])), cfg.seg_loss)
        loss.backward()
        opt.step()
        for k, p in ref.params.items():
            np.testing.assert_allclose(nets.seg.params[k].data, p.data, rtol=0, atol=1e-7, err_msg=k)

    def test_disc_update_leaves_seg_untouched(self, tiny):
        cfg = TrainConfig()
        nets = frozen_nets(1)
        opt = make_optimizers(nets, cfg.lr)
        before = nets.seg.digest()
        d_before = nets.disc.digest()
        seen = {}
        real_step = opt.seg.step

        def spy(grads=None):
            seen["seg"] = nets.seg.digest()
            seen["disc"] = nets.disc.digest()
            real_step(grads)

        opt.seg.step = spy
        stats = train_step(tiny[:4], nets, opt, cfg)
        assert seen["seg"] == before
        assert seen["disc"] != d_before
        assert nets.seg.digest() != before
        assert set(stats) >= {"l_seg", "l_rot", "l_adv", "l_disc_sup", "l_disc_unsup", "generator_total"}

    def test_unlabeled_only_batch(self, tiny):
        cfg = TrainConfig(label_rate=0.5)
        nets = frozen_nets(2)
        _, unl = apply_label_rate(tiny, 0.5, 0)
        stats = train_step(unl[:4], nets, make_optimizers(nets, cfg.lr), cfg)
        assert stats["l_seg"] == 0.0 and stats["l_disc_sup"] == 0.0
        assert stats["l_disc_unsup"] > 0

    def test_unfrozen_assistant_rejected(self, tiny):
        nets = init_params(0)
        with pytest.raises(RuntimeError, match="frozen"):
            train_step(tiny[:2], nets, make_optimizers(nets, 1e-3), TrainConfig())

    def test_nan_loss_names_term(self, tiny, monkeypatch):
        def bad(a, b):
            return T.mul(T.mean(T.square(T.sub(a, T.rotate180(b)))), 1.0 / np.float32(0.0))

        monkeypatch.setattr(L, "rotation_loss", bad)
        nets = frozen_nets(0)
        with pytest.raises(NonFiniteLossError) as err, np.errstate(divide="ignore", invalid="ignore"):
            train_step(tiny[:2], nets, make_optimizers(nets, 1e-3), TrainConfig())
        assert err.value.term == "l_rot"


class TestPlateau:
    def test_improving(self):
        assert lr_plateau([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], TrainConfig()) == 0.001

    def test_flat_halves(self):
        assert lr_plateau([0.5] * 6, TrainConfig()) == pytest.approx(0.0005)

    def test_four_flat_keeps(self):
        assert lr_plateau([0.5] * 5, TrainConfig()) == 0.001

    def test_floor(self):
        s = PlateauScheduler(1e-3, patience=1, factor=0.5)
        for _ in range(100):
            lr = s.step(0.0)
        assert lr == 1e-6


class TestAssistant:
    def test_zero_epochs_keeps_init(self, tiny):
        a = init_params(3).assistant
        before = a.digest()
        pretrain_assistant(tiny, 0, seed=3, assistant=a)
        assert a.frozen and a.digest() == before

    def test_pretraining_beats_chance(self, tiny):
        cfg = TrainConfig(warmup_epochs=1)
        a, acc = pretrain_assistant(tiny, 3, seed=0, cfg=cfg, return_accuracy=True)
        assert a.frozen
        assert acc > 0.5


class TestRunExperiment:
    def test_zero_epochs(self, tiny):
        data = split_dataset(tiny, seed=0)
        rep = run_experiment(TrainConfig(epochs=0, assistant_epochs=0), data)
        assert rep["epochs"] == [] and rep["losses"] == []
        assert rep["final_validation"] == rep["init_validation"]

    def test_run_dir_is_deterministic(self, tiny, tmp_path):
        data = split_dataset(tiny, seed=0)
        cfg = TrainConfig(epochs=1, assistant_epochs=1, warmup_epochs=1)
        a = run_experiment(cfg, data, tmp_path / "a")
        run_experiment(cfg, data, tmp_path / "b")
        for name in ("losses.csv", "metrics.csv", "epochs.csv", "config.txt", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert (tmp_path / "a" / "checkpoints" / "final.ckpt").exists()
        header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
        assert header == "split,Dic,Jac,Acc,Sen,Spe"
        assert len(a["epochs"]) == 1
        assert a["nets"].assistant.frozen
