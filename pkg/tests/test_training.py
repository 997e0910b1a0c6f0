import numpy as np
import pytest

from leno import tensor as T
from leno.data import Dataset, Sample
from leno.errors import ConfigError, ContractError
from leno.sodnet import ModelConfig, build_model, freeze_for_phase2
from leno.tensor import Tensor
from leno.training import (
    LossConfig,
    TrainConfig,
    loss_noise,
    loss_pred,
    loss_side,
    loss_total,
    model_losses,
    train_baseline,
    train_leno,
    train_phase1,
    train_phase2,
)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def snapshot(model):
    return {k: t.data.copy() for k, t in model.state().items()}


def cfg16(**kw):
    return ModelConfig(channels=4, height=32, width=32, **kw)


# -- losses --------------------------------------------------------------------

def test_loss_noise_at_half_is_ln2():
    half = t64(np.full((1, 4, 4), 0.5))
    # MSE is 0 when both maps are 0.5, so the value is BCE alone
    assert loss_noise(half, half).item() == pytest.approx(np.log(2), abs=1e-12)


def test_loss_noise_lambda_zero_is_bce(rng):
    p, q = t64(rng.uniform(0.1, 0.9, (1, 3, 3))), t64(rng.random((1, 3, 3)))
    assert loss_noise(p, q, lam=0).item() == T.bce(p, q).item()
    with pytest.raises(ConfigError):
        loss_noise(p, q, lam=-1)


def test_loss_noise_clamp_floor():
    val = loss_noise(t64([[[0.0]]]), t64([[[1.0]]]), lam=0).item()
    assert val == pytest.approx(-np.log(1e-7), rel=1e-9)


def test_loss_side_identical_maps(rng):
    s, g = t64(rng.uniform(0.1, 0.9, (1, 4, 4))), t64((rng.random((1, 4, 4)) > 0.5) * 1.0)
    assert loss_side([s, s, s], g).item() == pytest.approx(3 * T.bce(s, g).item(), rel=1e-12)
    with pytest.raises(ContractError):
        loss_side([s, s], g)


def test_loss_total_adds_terms():
    assert loss_total(t64(0.1), t64(0.2), t64(0.3)).item() == pytest.approx(0.6, abs=1e-15)
    assert loss_total(None, t64(0.2), t64(0.3)).item() == pytest.approx(0.5, abs=1e-15)


def test_total_objective_is_sum_of_terms(ref_model, rng):
    images = rng.random((2, 3, 16, 16))
    masks = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)
    parts = model_losses(ref_model, images, masks, LossConfig(), with_noise=True)
    summed = parts["l_noise"].item() + parts["l_side"].item() + parts["l_pred"].item()
    assert abs(parts["l_total"].item() - summed) < 1e-6
    assert parts["l_pred"].item() == pytest.approx(loss_pred(ref_model(images).S, t64(masks)).item())


def test_total_objective_gradcheck_phase2_partition(ref_model, rng):
    """Finite differences over the weights phase 2 trains (target held fixed)."""
    images = rng.random((1, 3, 16, 16))
    masks = (rng.random((1, 1, 16, 16)) > 0.5).astype(float)
    trainable = freeze_for_phase2(ref_model)

    def fn(*params):
        return model_losses(ref_model, images, masks, LossConfig(), with_noise=True)["l_total"]

    assert T.gradcheck(fn, trainable, probes=6) < 1e-4


def test_prediction_objective_gradcheck_all_params(ref_model, rng):
    images = rng.random((1, 3, 16, 16))
    masks = (rng.random((1, 1, 16, 16)) > 0.5).astype(float)

    def fn(*params):
        return model_losses(ref_model, images, masks, LossConfig(), with_noise=False)["l_total"]

    assert T.gradcheck(fn, ref_model.parameters(), probes=4) < 1e-4


# -- configs -------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lr=0), dict(lr=-1), dict(batch_size=0), dict(alternation="random")])
def test_bad_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_train_config_round_trip():
    c = TrainConfig(lr=0.01, seed=4)
    assert TrainConfig.from_dict({**c.to_dict(), "unknown": 1}) == c


# -- loops ---------------------------------------------------------------------

def test_per_batch_alternation_touches_one_partition(tiny_data):
    model = build_model(cfg16(), seed=1)
    n_ids = {id(p) for p in model.theta_n}
    records = []
    prev = snapshot(model)

    def on_log(rec):
        nonlocal prev
        now = snapshot(model)
        changed = {k for k in now if now[k].tobytes() != prev[k].tobytes()}
        named = model.named_parameters()
        if rec["updated_partition"] == "theta_n":
            assert changed and all(id(named[k]) in n_ids for k in changed)
        else:
            assert changed and changed <= {k for k in named if id(named[k]) not in n_ids}
        prev = now
        records.append(rec["updated_partition"])

    train_phase1(model, tiny_data.subset(range(8)), TrainConfig(epochs_phase1=2, batch_size=2), on_log=on_log)
    assert records == ["theta_n", "theta_w"] * 4
    for p in model.parameters():
        assert p.requires_grad


def test_phase1_log_has_no_noise_term(tiny_data):
    logs = []
    model = build_model(cfg16(), seed=1)
    train_leno(model, tiny_data.subset(range(4)), TrainConfig(epochs_phase1=1, epochs_phase2=1, batch_size=4),
               on_log=logs.append)
    assert [r["phase"] for r in logs] == [1, 2]
    assert logs[0]["l_noise"] is None and logs[1]["l_noise"] is not None
    assert set(logs[0]) == {"phase", "epoch", "batch", "l_noise", "l_side", "l_pred", "l_total", "updated_partition"}


def test_phase2_keeps_stem_and_noise_weights(tiny_data):
    model = build_model(cfg16(), seed=2)
    train_phase1(model, tiny_data.subset(range(4)), TrainConfig(epochs_phase1=1, batch_size=4))
    frozen = {id(p) for p in model.stem_params + model.theta_w}
    before = snapshot(model)
    train_phase2(model, tiny_data.subset(range(4)), TrainConfig(epochs_phase2=2, batch_size=2))
    after = snapshot(model)
    named = model.named_parameters()
    for k, t in named.items():
        same = before[k].tobytes() == after[k].tobytes()
        assert same if id(t) in frozen else not same, k


def test_phase1_reduces_loss(tiny_data):
    model = build_model(cfg16(), seed=0)
    losses = []
    train_phase1(model, tiny_data, TrainConfig(epochs_phase1=20, batch_size=4, lr=0.05), on_log=losses.append)
    per_epoch = [np.mean([r["l_total"] for r in losses if r["epoch"] == e]) for e in range(20)]
    assert per_epoch[-1] <= 0.7 * per_epoch[0]


def test_phase2_noise_loss_decreases_on_held_out(tiny_data):
    train, held = tiny_data.subset(range(12)), tiny_data.subset(range(12, 16))
    model = build_model(cfg16(), seed=0)
    train_phase1(model, train, TrainConfig(epochs_phase1=4, batch_size=4))
    images, masks = held.arrays()
    lc = LossConfig()

    def held_noise():
        with T.no_grad():
            return model_losses(model, images, masks, lc, with_noise=True)["l_noise"].item()

    start = held_noise()
    train_phase2(model, train, TrainConfig(epochs_phase2=8, batch_size=4), lc)
    assert held_noise() < start


def test_training_is_deterministic(tiny_data):
    ds = tiny_data.subset(range(6))
    runs = []
    for _ in range(2):
        m = build_model(cfg16(), seed=9)
        train_leno(m, ds, TrainConfig(epochs_phase1=2, epochs_phase2=1, batch_size=3, seed=5))
        runs.append(snapshot(m))
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_baseline_equals_phase1_without_alternation(tiny_data):
    ds = tiny_data.subset(range(6))
    a, b = build_model(cfg16(defense=False), seed=3), build_model(cfg16(defense=False), seed=3)
    cfg = TrainConfig(epochs_phase1=2, batch_size=3)
    train_baseline(a, ds, cfg)
    train_phase1(b, ds, TrainConfig(**{**cfg.to_dict(), "alternation": "none"}))
    for (k, x), y in zip(a.state().items(), b.state().values()):
        assert x.data.tobytes() == y.data.tobytes(), k


def test_adversarial_samples_rejected(tiny_data):
    s = tiny_data[0]
    adv = Sample("adv", s.image, s.mask, {"kind": "adversarial", "source_id": s.id, "attack": {}})
    with pytest.raises(ContractError):
        train_phase1(build_model(cfg16()), Dataset([s, adv]), TrainConfig(epochs_phase1=1))
