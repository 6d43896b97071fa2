import numpy as np
import pytest

from gradshield.datagen import gen_blobs, gen_images
from gradshield.errors import KeyMismatchError
from gradshield.flsim import (
    GRADIENT,
    PARAMETER_DELTA,
    ClientState,
    RoundUpdate,
    aggregate,
    fedavg_local_train,
    fedsgd_client_step,
    local_train,
    sample_batch,
    verify_architecture,
)
from gradshield.nn import checkpoint_bytes, evaluate, forward, backward, loss_and_grads, zoo
from gradshield import attacks


@pytest.fixture
def client():
    return ClientState(3, gen_images(24, 3, 8, 8, 1.0, seed=1))


@pytest.fixture
def model():
    return zoo.toy_cnn(seed=2)


class TestFedSgd:
    def test_payload_is_backward_on_the_batch(self, model, client):
        update = fedsgd_client_step(model, client, 8, seed=5)
        idx = sample_batch(24, 8, 5, client.id, client.round)
        _, trace = forward(model, client.dataset.inputs[idx], "train")
        ref = backward(model, trace, client.dataset.labels[idx])
        assert update.kind == GRADIENT and update.sample_count == 8
        for k in ref.grads:
            assert np.array_equal(update.payload[k], ref.grads[k])

    def test_full_batch_ignores_seed(self, model, client):
        a, b = fedsgd_client_step(model, client, 24, seed=1), fedsgd_client_step(model, client, 24, seed=2)
        assert all(np.array_equal(a.payload[k], b.payload[k]) for k in a.payload)

    def test_seeds_change_batches(self, model, client):
        a, b = fedsgd_client_step(model, client, 8, seed=1), fedsgd_client_step(model, client, 8, seed=2)
        assert any(not np.array_equal(a.payload[k], b.payload[k]) for k in a.payload)

    def test_batch_too_large(self, model, client):
        with pytest.raises(ValueError):
            fedsgd_client_step(model, client, 25, seed=0)


class TestFedAvg:
    def test_single_step_is_scaled_gradient(self, model, client):
        update = fedavg_local_train(model, client, 1, 24, 0.1, seed=0)
        g = loss_and_grads(model, client.dataset.inputs, client.dataset.labels).grads
        assert update.kind == PARAMETER_DELTA and update.steps == 1
        for k in g:
            # (theta - lr g) - theta rounds at the scale of theta
            np.testing.assert_allclose(update.payload[k], -0.1 * g[k], rtol=0, atol=1e-15)

    def test_zero_lr(self, model, client):
        update = fedavg_local_train(model, client, 2, 6, 0.0, seed=0)
        assert all(not v.any() for v in update.payload.values())

    def test_training_reduces_loss(self):
        data = gen_blobs(3, 30, 4, 0.3, seed=1)
        model = zoo.toy_mlp(4, hidden=8, classes=3, seed=1)
        before = evaluate(model, data.inputs, data.labels)[0]
        update = fedavg_local_train(model, ClientState(0, data), 5, 10, 0.1, seed=1)
        after = evaluate(aggregate([update], model), data.inputs, data.labels)[0]
        assert update.steps == 45
        assert after < before

    def test_zero_epochs_rejected(self, model, client):
        with pytest.raises(ValueError):
            fedavg_local_train(model, client, 0, 4, 0.1, seed=0)

    def test_conservation(self):
        data = gen_blobs(2, 10, 3, 0.5, seed=4)
        model = zoo.toy_mlp(3, hidden=4, seed=4)
        clients = [ClientState(i, data) for i in range(3)]
        updates = [fedavg_local_train(model, c, 3, len(data), 0.2, seed=9) for c in clients]
        central, _, _ = local_train(model, data, 3, len(data), 0.2, seed=9)
        merged = aggregate(updates, model)
        for k in model.params:
            np.testing.assert_allclose(merged.params[k], central.params[k], rtol=0, atol=1e-10)


class TestAggregate:
    def test_single_client(self, model, client):
        update = fedavg_local_train(model, client, 1, 12, 0.1, seed=0)
        local, _, _ = local_train(model, client.dataset, 1, 12, 0.1, seed=0, client_id=client.id)
        merged = aggregate([update], model)
        for k in model.params:
            np.testing.assert_allclose(merged.params[k], local.params[k], atol=1e-15)

    def test_identical_deltas(self, model):
        d = {k: np.full(v.shape, 0.25) for k, v in model.params.items()}
        one = aggregate([RoundUpdate(PARAMETER_DELTA, d, 5)], model)
        two = aggregate([RoundUpdate(PARAMETER_DELTA, d, 5), RoundUpdate(PARAMETER_DELTA, d, 5)], model)
        assert one.equals(two)

    def test_sample_weighting(self, model):
        d = {k: np.ones(v.shape) for k, v in model.params.items()}
        z = {k: np.zeros(v.shape) for k, v in model.params.items()}
        merged = aggregate([RoundUpdate(PARAMETER_DELTA, d, 1), RoundUpdate(PARAMETER_DELTA, z, 3)], model)
        for k in model.params:
            np.testing.assert_allclose(merged.params[k], model.params[k] + 0.25, atol=1e-15)

    def test_gradient_mean(self, model):
        g1 = {k: np.ones(v.shape) for k, v in model.params.items()}
        g2 = {k: 3 * np.ones(v.shape) for k, v in model.params.items()}
        merged = aggregate([RoundUpdate(GRADIENT, g1, 1), RoundUpdate(GRADIENT, g2, 9)], model, lr_server=0.5)
        for k in model.params:
            np.testing.assert_allclose(merged.params[k], model.params[k] - 1.0, atol=1e-15)

    def test_errors(self, model):
        g = {k: np.zeros(v.shape) for k, v in model.params.items()}
        with pytest.raises(ValueError):
            aggregate([RoundUpdate(GRADIENT, g, 1), RoundUpdate(PARAMETER_DELTA, g, 1)], model)
        with pytest.raises(KeyMismatchError):
            aggregate([RoundUpdate(GRADIENT, {"x": np.zeros(1)}, 1)], model)
        with pytest.raises(ValueError):
            aggregate([], model)


class TestVerifyArchitecture:
    def test_identical(self, model):
        assert verify_architecture(model, checkpoint_bytes(model)).accepted

    def test_inserted_fc(self, model):
        inserted = attacks.ImprintPlan(bins=16).apply(model)
        check = verify_architecture(model.manifest(), checkpoint_bytes(inserted))
        assert not check.accepted and check.reason == "extra key"

    def test_missing_key(self, model):
        smaller = zoo.toy_cnn(depth=1, seed=2)
        assert verify_architecture(model, smaller).reason == "missing key"

    def test_widened(self, model):
        wider = zoo.toy_cnn(channels=5, seed=2)
        assert verify_architecture(model, wider).reason == "shape"

    def test_unreadable(self, model, tmp_path):
        assert verify_architecture(model, b"not a checkpoint").reason == "parse"
        assert verify_architecture(model, tmp_path / "missing").reason == "parse"


def test_empty_client_rejected():
    with pytest.raises(ValueError):
        ClientState(0, gen_blobs(2, 0, 2, 0.1, seed=0))
