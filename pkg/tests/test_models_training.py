import dataclasses

import numpy as np
import pytest

from wsnorm.data import Dataset, standardize_channels, synth_blobs
from wsnorm.models import ModelSpec, build_model
from wsnorm.norms import MicroBatchError
from wsnorm.reparam import ws_forward
from wsnorm.tensor import Tensor, no_grad
from wsnorm.train import Trainer, TrainConfig, TrainingDiverged, train


def small_data(n=64, size=16, seed=1):
    tr = synth_blobs(seed, n, size=size)
    va = synth_blobs(seed + 1, 32, size=size)
    return standardize_channels(tr, va)


def params(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


@pytest.mark.parametrize("arch", ["convnet4", "miniresnet"])
def test_logits_shape(arch):
    model = build_model(ModelSpec(architecture=arch, width=8), 0)
    with no_grad():
        out = model(np.zeros((2, 3, 32, 32), dtype=np.float32))
    assert out.shape == (2, 10)


def test_convnet4_layout():
    model = build_model(ModelSpec(), 0)
    assert len(model.convs) == 4
    assert all(c.weight.shape[0] == 32 for c in model.convs.values())


def test_miniresnet_depths():
    for d in (8, 14, 20):
        m = build_model(ModelSpec(architecture="miniresnet", depth=d, width=4), 0)
        assert len(m.convs) == d - 1
    with pytest.raises(ValueError, match="6n"):
        ModelSpec(architecture="miniresnet", depth=10)


def test_group_incompatibility_rejected():
    with pytest.raises(ValueError):
        build_model(ModelSpec(norm="gn", width=6, groups=4), 0)


def test_same_seed_same_parameters():
    a, b = params(build_model(ModelSpec(width=8), 3)), params(build_model(ModelSpec(width=8), 3))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_reparam_swap_only_standardizes_rows():
    plain = build_model(ModelSpec(width=8, reparam="none"), 5, np.float64)
    ws = build_model(ModelSpec(width=8, reparam="ws"), 5, np.float64)
    for name, conv in plain.convs.items():
        w = conv.weight.data
        expected = ws_forward(Tensor(w), ws.convs[name].eps).data.reshape(w.shape)
        np.testing.assert_allclose(ws.convs[name].effective_weight().data.reshape(w.shape), expected, atol=1e-12)


def test_zero_lr_leaves_parameters_unchanged():
    data = small_data()
    model = build_model(ModelSpec(width=8), 0)
    before = params(model)
    train(model, data, TrainConfig(lr=0.0, epochs=1, batch_size=16))
    after = params(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_accumulated_micro_batches_match_full_batch():
    data = small_data(n=8)
    spec = ModelSpec(width=4, norm="none", reparam="ws")
    a = build_model(spec, 2, np.float64)
    b = build_model(spec, 2, np.float64)
    base = dict(lr=0.05, epochs=1, seed=4)
    train(a, data, TrainConfig(batch_size=1, iteration_size=8, **base))
    train(b, data, TrainConfig(batch_size=8, iteration_size=1, **base))
    pa, pb = params(a), params(b)
    assert max(np.abs(pa[k] - pb[k]).max() for k in pa) < 1e-10


def test_steps_per_epoch():
    data = small_data(n=64)
    tr = Trainer(build_model(ModelSpec(width=4, norm="gn"), 0), TrainConfig(batch_size=4, iteration_size=2))
    tr.run_epoch(data[0])
    assert tr.step == 64 // 8
    assert tr.cfg.effective_batch == 8


def test_training_is_bitwise_reproducible():
    data = small_data()
    cfg = TrainConfig(epochs=2, batch_size=16, augment=True)
    runs = []
    for _ in range(2):
        m = build_model(ModelSpec(width=8, norm="gn", reparam="ws"), 1)
        runs.append((train(m, data, cfg), params(m)))
    assert [dataclasses.astuple(r) for r in runs[0][0]] == [dataclasses.astuple(r) for r in runs[1][0]]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


@pytest.mark.parametrize("norm", ["gn", "ln", "in", "bcn_micro"])
def test_micro_batch_training_runs(norm):
    hist = train(build_model(ModelSpec(width=8, norm=norm, reparam="ws"), 0), small_data(n=16),
                 TrainConfig(batch_size=1, iteration_size=4, epochs=1))
    assert np.isfinite(hist[0].train_loss)


@pytest.mark.parametrize("norm", ["bn", "bcn", "fixed"])
def test_batch_statistics_norms_refuse_batch_one(norm):
    with pytest.raises(MicroBatchError):
        train(build_model(ModelSpec(width=8, norm=norm), 0), small_data(n=16), TrainConfig(batch_size=1))


def test_divergence_records_step():
    data = small_data()
    with pytest.raises(TrainingDiverged) as info:
        train(build_model(ModelSpec(width=8, norm="none"), 0), data,
              TrainConfig(lr=1e6, epochs=3, batch_size=16, momentum=0.0))
    assert info.value.step >= 0


def test_weight_decay_skips_affine_parameters():
    data = small_data(n=16)
    model = build_model(ModelSpec(width=4, norm="gn"), 0)
    for st in model.norm_states():
        st.gamma.requires_grad = False
    gammas = [st.gamma.data.copy() for st in model.norm_states()]
    train(model, data, TrainConfig(epochs=1, batch_size=16, weight_decay=10.0))
    assert all(np.array_equal(g, st.gamma.data) for g, st in zip(gammas, model.norm_states()))


@pytest.mark.parametrize("variant", ["pgd_exact", "pgd_lagrangian"])
def test_pgd_keeps_rows_standardized(variant):
    model = build_model(ModelSpec(width=8, norm="gn", reparam="ws"), 0, np.float64)
    train(model, small_data(), TrainConfig(epochs=1, batch_size=16, ws_optimizer=variant, weight_decay=0.0))
    for conv in model.convs.values():
        rows = conv.weight.data.reshape(conv.weight.shape[0], -1)
        np.testing.assert_allclose(rows.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose((rows ** 2).mean(axis=1), 1.0, atol=1e-4)


def test_bcn_rate_follows_learning_rate():
    model = build_model(ModelSpec(width=8, norm="bcn_micro"), 0)
    tr = Trainer(model, TrainConfig(lr=0.2, decay_epochs=(1,), batch_size=8))
    d = small_data(n=16)
    tr.run_epoch(d[0])
    assert all(st.rate == 0.2 for st in model.norm_states())
    tr.run_epoch(d[0])
    assert all(st.rate == pytest.approx(0.02) for st in model.norm_states())


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(ws_optimizer="adam")


@pytest.mark.parametrize("seed", range(5))
def test_bn_train_error_decreases_early(seed):
    data = standardize_channels(synth_blobs(1, 2000, size=16, noise=2.0), synth_blobs(2, 200, size=16, noise=2.0))
    hist = train(build_model(ModelSpec(norm="bn"), seed),
                 data, TrainConfig(epochs=5, seed=seed, decay_epochs=(8,)))
    errs = [h.train_err for h in hist]
    assert all(b < a for a, b in zip(errs, errs[1:])), errs


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_with_finite_checking_on():
    with pytest.raises(TrainingDiverged):
        train(build_model(ModelSpec(width=8, norm="none"), 0), small_data(),
              TrainConfig(lr=1e6, epochs=3, batch_size=16, momentum=0.0, check_finite=True))
