import numpy as np
import pytest

from lambdatune.backends import FEATURE_CRF, SyntheticEncoder, synthetic_corpus
from lambdatune.features import (
    SEMANTIC_BLOCK_LEN,
    FeatureLayoutMismatch,
    SemanticFeatures,
    assemble_features,
)
from lambdatune.mlp import (
    TABLE_BN_LAYERS,
    TABLE_DROPOUT_LAYERS,
    TABLE_SIZES,
    DimensionMismatch,
    EmptyDataset,
    MLPModel,
    NonFiniteLoss,
    TrainConfig,
    gelu,
    gradient_check,
    load_model,
    mae,
    predict_k,
    save_model,
    train,
)


def toy_data(n=12, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    y = rng.normal(size=n)
    return x, y


def test_gelu_reference_values():
    # gelu(0) = 0; gelu(1) + gelu(-1) = erf(1/sqrt(2))
    assert gelu(np.array(0.0)) == 0.0
    s = gelu(np.array(1.0)) + gelu(np.array(-1.0))
    assert s == pytest.approx(0.6826894921370859, abs=1e-15)


def test_table_architecture_constants():
    assert TABLE_SIZES == (1000, 800, 600, 200, 100, 64, 32, 16, 8, 4, 1)
    assert TABLE_BN_LAYERS == (1, 2, 11)
    assert TABLE_DROPOUT_LAYERS == (1, 2, 3, 8)
    model = MLPModel(input_dim=1523)
    assert model.sizes == TABLE_SIZES
    assert model.blocks[0].bn is not None and model.blocks[10].bn is not None
    assert model.blocks[3].bn is None


def test_final_batch_norm_escape_hatch():
    model = MLPModel(input_dim=8, sizes=(4, 1), bn_layers=(1, 2), dropout_layers=(),
                     final_batch_norm=False)
    assert model.blocks[0].bn is not None
    assert model.blocks[1].bn is None


# -- gradient checks per layer type -------------------------------------------

def grad_ok(model, seed=0, n=10):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, model.input_dim))
    y = rng.normal(size=n)
    return gradient_check(model, x, y, rng=rng)


def test_gradients_dense_only():
    model = MLPModel(input_dim=5, sizes=(7, 1), bn_layers=(), dropout_layers=(),
                     activation=False, seed=1)
    assert grad_ok(model, seed=1) < 1e-5


def test_gradients_with_gelu():
    model = MLPModel(input_dim=5, sizes=(7, 3, 1), bn_layers=(), dropout_layers=(),
                     seed=2)
    assert grad_ok(model, seed=2) < 1e-5


def test_gradients_with_batch_norm():
    model = MLPModel(input_dim=5, sizes=(7, 1), bn_layers=(1,), dropout_layers=(),
                     activation=False, seed=3)
    assert grad_ok(model, seed=3) < 1e-5


def test_gradients_composite():
    # every layer kind at once; dropout layers are inert in check mode
    model = MLPModel(input_dim=6, sizes=(10, 6, 1), bn_layers=(1, 3),
                     dropout_layers=(2,), seed=4)
    assert grad_ok(model, seed=4) < 1e-5


# -- training behavior --------------------------------------------------------

def test_training_is_deterministic():
    x, y = toy_data(20, 8, seed=5)
    reports = []
    for _ in range(2):
        model = MLPModel(input_dim=8, sizes=(16, 8, 1), bn_layers=(1,),
                         dropout_layers=(2,), seed=9)
        _, rep = train(x, y, TrainConfig(epochs=30, rng_seed=9), model=model)
        reports.append(rep.train_mae)
    assert reports[0] == reports[1]


def test_full_batch_small_lr_descends():
    # linear toy: 10 samples, full batch, tiny step
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    y = x @ np.array([0.5, -0.2, 0.1, 0.3]) + 1.0
    model = MLPModel(input_dim=4, sizes=(1,), bn_layers=(), dropout_layers=(),
                     activation=False, seed=3)
    _, rep = train(
        x, y, TrainConfig(epochs=200, learning_rate=1e-4, batch_size=10, rng_seed=3),
        model=model,
    )
    diffs = np.diff(rep.train_mae)
    assert np.all(diffs <= 1e-12)


def test_early_stop_on_target():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 6))
    y = x @ rng.normal(size=6) * 0.5 + 0.3
    model = MLPModel(input_dim=6, sizes=(32, 16, 1), bn_layers=(), dropout_layers=(),
                     seed=6)
    _, rep = train(
        x, y, TrainConfig(epochs=5000, rng_seed=6, target_train_mae=0.2), model=model
    )
    assert rep.stopped_early
    assert rep.final_train_mae < 0.2
    assert rep.epochs_run < 5000


def test_validation_curve_reported():
    x, y = toy_data(24, 5, seed=7)
    model = MLPModel(input_dim=5, sizes=(8, 1), bn_layers=(), dropout_layers=(), seed=7)
    _, rep = train(x[:16], y[:16], TrainConfig(epochs=5, rng_seed=7), model=model,
                   validation=(x[16:], y[16:]))
    assert rep.val_mae is not None and len(rep.val_mae) == rep.epochs_run


def test_infer_is_pure():
    x, y = toy_data(20, 8, seed=8)
    model = MLPModel(input_dim=8, sizes=(16, 1), bn_layers=(1,), dropout_layers=(2,),
                     seed=8)
    model, _ = train(x, y, TrainConfig(epochs=3, rng_seed=8), model=model)
    stats_before = [None if b.bn is None else (b.bn.running_mean.copy(),
                                               b.bn.running_var.copy())
                    for b in model.blocks]
    p1 = model.predict(x)
    p2 = model.predict(x)
    assert np.array_equal(p1, p2)
    for block, before in zip(model.blocks, stats_before):
        if block.bn is not None:
            assert np.array_equal(block.bn.running_mean, before[0])
            assert np.array_equal(block.bn.running_var, before[1])


def test_input_validation():
    x, y = toy_data()
    model = MLPModel(input_dim=6, sizes=(4, 1), bn_layers=(), dropout_layers=())
    with pytest.raises(DimensionMismatch):
        train(x, y[:-1], TrainConfig(epochs=1), model=model)
    with pytest.raises(EmptyDataset):
        train(np.zeros((0, 6)), np.zeros(0), TrainConfig(epochs=1), model=model)
    with pytest.raises(NonFiniteLoss):
        train(x, np.full_like(y, np.nan), TrainConfig(epochs=1), model=model)
    with pytest.raises(DimensionMismatch):
        model.predict(np.zeros((3, 5)))


# -- persistence ---------------------------------------------------------------

def test_save_load_round_trip_is_bit_exact(tmp_path):
    x, y = toy_data(20, 8, seed=10)
    model = MLPModel(input_dim=8, sizes=(16, 4, 1), bn_layers=(1, 3),
                     dropout_layers=(2,), seed=10)
    model, _ = train(x, y, TrainConfig(epochs=4, rng_seed=10), model=model)
    path = tmp_path / "model.npz"
    save_model(model, path)
    back = load_model(path)
    assert np.array_equal(back.predict(x), model.predict(x))
    for (na, a, _), (nb, b, _) in zip(model.parameters(), back.parameters()):
        assert na == nb
        assert np.array_equal(a, b)
    assert back.norm_stats is not None
    assert np.array_equal(back.norm_stats.mean, model.norm_stats.mean)


# -- end-to-end k prediction ----------------------------------------------------

def test_predict_k_learns_synthetic_signal(tmp_path):
    # tiny but real: probe features carry k_star, a small net must recover it
    backend = SyntheticEncoder()
    clips = synthetic_corpus(24, seed=17)
    x = np.stack([
        assemble_features(backend.encode(c, FEATURE_CRF, 1.0).stats).active()
        for c in clips
    ])
    y = np.array([c.source.k_star for c in clips])
    model = MLPModel(input_dim=x.shape[1], sizes=(64, 16, 1), bn_layers=(1,),
                     dropout_layers=(), seed=0)
    model, rep = train(
        x, y, TrainConfig(epochs=4000, rng_seed=0, target_train_mae=0.04), model=model
    )
    assert rep.final_train_mae < 0.04
    pred = predict_k(model, backend.encode(clips[0], FEATURE_CRF, 1.0).stats)
    assert abs(pred - clips[0].source.k_star) < 0.15
    assert 0.2 <= pred <= 3.0


def test_predict_k_clamps_to_search_range():
    backend = SyntheticEncoder()
    clips = synthetic_corpus(4, seed=18)
    x = np.stack([
        assemble_features(backend.encode(c, FEATURE_CRF, 1.0).stats).active()
        for c in clips
    ])
    model = MLPModel(input_dim=x.shape[1], sizes=(4, 1), bn_layers=(), dropout_layers=(),
                     seed=1)
    # steer the raw output far above the valid range
    model, _ = train(x, np.full(4, 50.0), TrainConfig(epochs=300, rng_seed=1), model=model)
    result = predict_k(model, backend.encode(clips[0], FEATURE_CRF, 1.0).stats,
                       detail=True)
    assert result.raw > 3.0
    assert result.k == 3.0


def test_predict_k_layout_mismatch_both_ways():
    backend = SyntheticEncoder()
    clip = synthetic_corpus(1, seed=19)[0]
    stats = backend.encode(clip, FEATURE_CRF, 1.0).stats
    x = np.stack([assemble_features(stats).active()] * 2)
    no_sem = MLPModel(input_dim=x.shape[1], sizes=(2, 1), bn_layers=(),
                      dropout_layers=(), seed=2)
    no_sem, _ = train(x, np.ones(2), TrainConfig(epochs=1, rng_seed=2), model=no_sem)
    sem = SemanticFeatures(clip_id=clip.id, values=np.zeros(SEMANTIC_BLOCK_LEN))
    with pytest.raises(FeatureLayoutMismatch):
        predict_k(no_sem, stats, sem)

    xs = np.stack([assemble_features(stats, sem).active()] * 2)
    with_sem = MLPModel(input_dim=xs.shape[1], sizes=(2, 1), bn_layers=(),
                        dropout_layers=(), seed=2)
    with_sem, _ = train(xs, np.ones(2), TrainConfig(epochs=1, rng_seed=2),
                        model=with_sem, semantics_used=True)
    with pytest.raises(FeatureLayoutMismatch):
        predict_k(with_sem, stats)


def test_mae_helper():
    assert mae(np.array([1.0, 2.0]), np.array([2.0, 0.0])) == 1.5
