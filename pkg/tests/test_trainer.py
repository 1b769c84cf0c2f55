import csv

import numpy as np
import pytest

from xmadapt import trainer
from xmadapt.errors import ContractError, DataFormatError, DimensionError
from xmadapt.formats import read_checkpoint
from xmadapt.model import GliomaNet, ModelConfig
from xmadapt.module import Parameter
from xmadapt.synthdata import MODALITIES, ModalityProfile, PhantomSpec, build_dataset
from xmadapt.trainer import (OptimizerState, TrainConfig, adamw_step, checkpoint_load,
                             checkpoint_save, count_params, epoch_order, evaluate, train,
                             write_history_csv)

TINY = ModelConfig(image_size=16, patch_size=4, embed_dim=8, depth=2, heads=2, mlp_ratio=2.0, seed=1)
TINY_SPEC = dict(image_size=16, center_range=(6, 10), axis_range=(3, 6), offset_range=(1, 3),
                 min_intersection=8, seed=11)


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    return build_dataset(PhantomSpec(**TINY_SPEC), 6, 3, tmp_path_factory.mktemp("tiny"))


def scalar_param(value, name="p"):
    p = Parameter(np.array([value]), name=name)
    p.grad = None
    return p


def snapshot(params):
    return {p.name: p.data.tobytes() for p in params}


class TestAdamW:
    def test_hand_step(self):
        p = scalar_param(1.0)
        st = OptimizerState(lr=1e-3, weight_decay=0.0, m={"p": np.zeros(1, np.float32)},
                            v={"p": np.zeros(1, np.float32)})
        p.grad = np.array([1.0], np.float32)
        adamw_step([p], st)
        assert p.data[0] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-7)
        assert round(float(p.data[0]), 4) == 0.9990 and st.t == 1

    def test_zero_gradient_no_decay(self):
        p = scalar_param(0.7)
        st = OptimizerState(weight_decay=0.0, m={"p": np.zeros(1, np.float32)}, v={"p": np.zeros(1, np.float32)})
        p.grad = np.zeros(1, np.float32)
        adamw_step([p], st)
        assert p.data[0] == np.float32(0.7)

    def test_decoupled_decay(self):
        p = scalar_param(2.0)
        st = OptimizerState(lr=0.1, weight_decay=0.5, m={"p": np.zeros(1, np.float32)},
                            v={"p": np.zeros(1, np.float32)})
        p.grad = np.zeros(1, np.float32)
        adamw_step([p], st)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-7)

    def test_matches_float64_reference_over_steps(self):
        rng = np.random.default_rng(0)
        p = Parameter(rng.normal(size=5), name="w")
        ref = p.data.astype(np.float64)
        st = OptimizerState.for_params([p])
        m = v = np.zeros(5)
        for t in range(1, 6):
            g = rng.normal(size=5).astype(np.float32)
            p.grad = g
            adamw_step([p], st)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 1e-3 * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.01 * ref)
        np.testing.assert_allclose(p.data, ref, atol=1e-6)
        assert st.t == 5

    def test_missing_grad(self):
        p = scalar_param(1.0)
        st = OptimizerState.for_params([p])
        with pytest.raises(ContractError, match="'p'"):
            adamw_step([p], st)

    def test_frozen_params_skipped(self):
        p = scalar_param(1.0)
        p.trainable = False
        st = OptimizerState.for_params([p])
        assert st.m == {} and st.v == {}
        adamw_step([p], st)
        assert p.data[0] == 1.0


class TestFreezing:
    def test_state_covers_adapter_lift_decoder(self):
        net = GliomaNet(TINY)
        st = OptimizerState.for_params(net.parameters())
        names = set(st.m)
        assert names == {n for n, p in net.named_parameters() if not n.startswith("encoder")}
        assert all(n.startswith(("adapters", "lift", "decoder")) for n in names)

    def test_five_steps(self, tiny_ds):
        net = GliomaNet(TINY)
        frozen = snapshot(net.encoder_parameters())
        live = [p for p in net.parameters() if p.trainable]
        before = snapshot(live)
        st = OptimizerState.for_params(net.parameters())
        train(net, tiny_ds, TrainConfig(epochs=5, batch_size=8, eval_every=0), st)
        assert st.t == 5
        assert snapshot(net.encoder_parameters()) == frozen
        after = snapshot(live)
        changed = {n for n in before if before[n] != after[n]}
        assert any(n.startswith("adapters") for n in changed)
        assert any(n.startswith("decoder") for n in changed)
        assert set(st.m) == set(before)


class TestTrain:
    def test_lr_zero(self, tiny_ds):
        net = GliomaNet(TINY)
        before = snapshot(net.parameters())
        train(net, tiny_ds, TrainConfig(epochs=1, batch_size=4, lr=0.0, weight_decay=0.0, eval_every=0))
        assert snapshot(net.parameters()) == before

    def test_deterministic(self, tiny_ds):
        runs = []
        for _ in range(2):
            net = GliomaNet(TINY)
            hist = train(net, tiny_ds, TrainConfig(epochs=2, batch_size=4, seed=3, eval_every=1))
            runs.append((hist, snapshot(net.parameters())))
        assert runs[0] == runs[1]

    def test_overfit_four_samples(self, tmp_path):
        ds = build_dataset(PhantomSpec(**TINY_SPEC), 4, 1, tmp_path)
        net = GliomaNet(TINY)
        hist = train(net, ds, TrainConfig(epochs=200, batch_size=4, lr=1e-2, eval_every=0))
        assert hist[-1].train_loss <= 0.5 * hist[0].train_loss

    def test_epoch_order(self):
        ids = [f"s{i}" for i in range(10)]
        a = epoch_order(ids, 1, 0)
        assert a == epoch_order(ids, 1, 0) and sorted(a) == ids
        assert a != epoch_order(ids, 1, 1)

    def test_nan_abort(self, tiny_ds):
        net = GliomaNet(TINY)
        net.decoder.head_bias.data[:] = np.nan
        with pytest.raises(trainer.TrainingDiverged, match="step 1"):
            train(net, tiny_ds, TrainConfig(epochs=1, eval_every=0))

    def test_history_csv(self, tiny_ds, tmp_path):
        net = GliomaNet(TINY)
        hist = train(net, tiny_ds, TrainConfig(epochs=2, batch_size=4, eval_every=2))
        path = tmp_path / "h.csv"
        write_history_csv(hist, path)
        rows = list(csv.DictReader(open(path)))
        assert list(rows[0]) == ["epoch", "train_loss", "dice_percent", "hd95", "hd95_undefined_count"]
        assert float(rows[0]["train_loss"]) == hist[0].train_loss and rows[0]["dice_percent"] == ""
        assert float(rows[1]["dice_percent"]) == hist[1].dice_percent

    def test_config_contract(self):
        with pytest.raises(ContractError):
            TrainConfig(batch_size=0)


def _decoder_count(c, widths):
    total, prev = 0, c
    for w in widths:
        total += prev * 4 * w + 4 * w + 2 * w + w * w + w
        prev = w
    return total + prev * 2 + 2


class TestCountParams:
    def test_closed_form_cross(self):
        S, p, c, L, m, n = 64, 8, 64, 8, 256, 4
        tokens = (S // p) ** 2
        patch = c * 3 * p * p + c + tokens * c
        block = 4 * c + 4 * (c * c + c) + (m * c + m) + (c * m + c)
        encoder = patch + L * block
        adapters = n * (2 * c * c + c)
        lifts = 2 * (3 * 2 + 3)
        decoder = _decoder_count(c, (32, 16, 8))
        rep = count_params(GliomaNet(ModelConfig()))
        assert rep.total_params == 2 * encoder + adapters + lifts + decoder
        assert rep.trainable_params == adapters + lifts + decoder
        assert rep.percent == 100.0 * rep.trainable_params / rep.total_params
        assert rep.percent < 30.0

    def test_early_unfrozen(self):
        net = GliomaNet(ModelConfig(variant="early"))
        net.set_trainable(True)
        assert count_params(net).percent == 100.0


class TestCheckpoint:
    def test_save_load_save_identical(self, tiny_ds, tmp_path):
        net = GliomaNet(TINY)
        st = OptimizerState.for_params(net.parameters())
        train(net, tiny_ds, TrainConfig(epochs=1, batch_size=4, eval_every=0), st)
        a, b = tmp_path / "a.xmck", tmp_path / "b.xmck"
        checkpoint_save(net, st, a)
        net2, st2 = checkpoint_load(a, TINY)
        checkpoint_save(net2, st2, b)
        assert a.read_bytes() == b.read_bytes()
        assert st2.t == st.t
        for n, p in net2.named_parameters():
            assert p.trainable == dict(net.named_parameters())[n].trainable

    def test_no_buffers_for_frozen(self, tmp_path):
        net = GliomaNet(TINY)
        path = tmp_path / "c.xmck"
        checkpoint_save(net, OptimizerState.for_params(net.parameters()), path)
        names = {e.name for e in read_checkpoint(path)}
        assert not any(n.startswith("encoder") and n.endswith((".m", ".v")) for n in names)
        assert "t" in names

    def test_mismatched_config(self, tmp_path):
        path = tmp_path / "c.xmck"
        checkpoint_save(GliomaNet(TINY), None, path)
        with pytest.raises(DimensionError, match="decoder|lift|encoder|adapters"):
            checkpoint_load(path, TINY.replace(embed_dim=12, heads=2))
        with pytest.raises(DataFormatError):
            checkpoint_load(path, TINY.replace(variant="early"))

    def test_resume_equals_uninterrupted(self, tiny_ds, tmp_path):
        cfg = TrainConfig(epochs=4, batch_size=4, seed=2, eval_every=2)
        full_net = GliomaNet(TINY)
        full = train(full_net, tiny_ds, cfg)

        net = GliomaNet(TINY)
        st = OptimizerState.for_params(net.parameters(), cfg)
        first = train(net, tiny_ds, TrainConfig(epochs=2, batch_size=4, seed=2, eval_every=2), st)
        path = tmp_path / "mid.xmck"
        checkpoint_save(net, st, path)
        net2, st2 = checkpoint_load(path, TINY, cfg)
        rest = train(net2, tiny_ds, cfg, st2)
        assert first + rest == full
        assert snapshot(net2.parameters()) == snapshot(full_net.parameters())


def _noise_free_ds(tmp_path):
    profiles = {m: ModalityProfile(0.4, 0.3, 0.0) for m in MODALITIES}
    return build_dataset(PhantomSpec(profiles=profiles, **TINY_SPEC), 2, 4, tmp_path)


class TestEvaluate:
    def test_perfect_stub(self, tmp_path, monkeypatch):
        ds = _noise_free_ds(tmp_path)

        def oracle(inputs, net, trace=None):
            x1, x2 = inputs
            fg = (x1[:, 0] > 0.5) & (x2[:, 0] > 0.5)
            return np.stack([np.zeros_like(fg, float), fg.astype(float)], axis=1)

        monkeypatch.setattr(trainer, "forward", oracle)
        agg, recs = evaluate(GliomaNet(TINY), ds)
        assert agg.dice_percent == 100.0 and agg.hd95 == 0.0 and len(recs) == 4

    def test_background_stub(self, tmp_path, monkeypatch):
        ds = _noise_free_ds(tmp_path)
        monkeypatch.setattr(trainer, "forward", lambda inputs, net, trace=None: np.zeros((len(inputs[0]), 2, 16, 16)))
        agg, recs = evaluate(GliomaNet(TINY), ds)
        assert agg.dice_percent == 0.0 and agg.hd95 is None and agg.hd95_undefined == len(recs) == 4

    def test_aggregate_is_hand_average(self, tiny_ds):
        agg, recs = evaluate(GliomaNet(TINY), tiny_ds, batch_size=2)
        assert agg.dice_percent == pytest.approx(np.mean([r.dice_percent for r in recs]), abs=1e-12)
        defined = [r.hd95 for r in recs if r.hd95 is not None]
        assert agg.hd95_undefined == len(recs) - len(defined)
        if defined:
            assert agg.hd95 == pytest.approx(np.mean(defined), abs=1e-12)
        else:
            assert agg.hd95 is None

    def test_empty_split(self, tiny_ds):
        with pytest.raises(ContractError):
            evaluate(GliomaNet(TINY), tiny_ds, split="validation")
