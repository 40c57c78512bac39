import numpy as np
import pytest
import torch
from torch.func import functional_call

from persuasion.config import ScoringSettings, TrainConfig
from persuasion.core import AttitudeLevel, Claim, ConversationHistory, Polarity
from persuasion.errors import DivergenceError, EmptyDatasetError, ShapeMismatchError
from persuasion.services.gateway import MockEmbeddingBackend, RuleChatBackend
from persuasion.services.predictor import (
    AttitudeMLP,
    AttitudePredictor,
    PredictorCheckpoint,
    PredictorDataset,
    PredictorExample,
    Split,
    evaluate,
    evaluate_dataset,
    evaluate_predictions,
    forward,
    predict_levels,
    prompting_baseline,
    random_guess_baseline,
    train,
    train_arrays,
)
from persuasion.services.scoring import AttitudeJudge


def _clusters(per_class: int, dim: int, seed: int, centers: np.ndarray):
    rng = np.random.default_rng(seed)
    x = np.concatenate([c + 0.3 * rng.standard_normal((per_class, dim)) for c in centers])
    y = np.repeat(np.arange(5), per_class)
    return x, y


@pytest.fixture(scope="module")
def cluster_data():
    centers = np.random.default_rng(0).standard_normal((5, 128))
    return (
        _clusters(500, 128, 1, centers),
        _clusters(100, 128, 2, centers),
        _clusters(100, 128, 3, centers),
    )


@pytest.fixture(scope="module")
def cluster_checkpoint(cluster_data):
    (x_tr, y_tr), (x_va, y_va), _ = cluster_data
    return train_arrays(x_tr, y_tr, x_va, y_va, TrainConfig())


def _checkpoint(input_dim: int, hidden_dims, seed: int = 0) -> PredictorCheckpoint:
    torch.manual_seed(seed)
    model = AttitudeMLP(input_dim, hidden_dims)
    return PredictorCheckpoint(input_dim=input_dim, hidden_dims=list(hidden_dims), state_dict=model.state_dict())


def test_gradients_match_finite_differences():
    torch.manual_seed(42)
    model = AttitudeMLP(8, [8, 4, 4]).double()
    x = torch.randn(20, 8, dtype=torch.float64)
    y = torch.randint(0, 5, (20,))
    names = [name for name, _ in model.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())

    def loss(*values):
        logits = functional_call(model, dict(zip(names, values)), (x,))
        return torch.nn.functional.cross_entropy(logits, y)

    assert torch.autograd.gradcheck(loss, params, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_learns_separable_clusters(cluster_data, cluster_checkpoint):
    _, _, (x_te, y_te) = cluster_data
    checkpoint = cluster_checkpoint
    em, mse = evaluate(checkpoint, x_te, y_te)
    assert em >= 0.95
    assert mse <= 0.1
    assert len(checkpoint.val_losses) == 20
    assert checkpoint.best_val_loss == min(checkpoint.val_losses)
    assert checkpoint.val_losses.index(checkpoint.best_val_loss) + 1 == checkpoint.best_epoch


def test_training_loss_never_increases_on_separable_data(cluster_checkpoint):
    losses = cluster_checkpoint.train_losses
    assert len(losses) == 20
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((60, 6)), rng.integers(0, 5, size=60)
    config = TrainConfig(epochs=3, batch_size=16, hidden_dims=[8, 4])
    a = train_arrays(x, y, x, y, config)
    b = train_arrays(x, y, x, y, config)
    for key, value in a.state_dict.items():
        assert torch.equal(value, b.state_dict[key])
    assert a.val_losses == b.val_losses


def test_fits_single_example_at_default_settings():
    x = np.ones((1, 4))
    y = np.array([3])
    checkpoint = train_arrays(x, y, x, y, TrainConfig())
    assert checkpoint.training_config["epochs"] == 20
    assert forward(checkpoint, x[0])[3] > 0.99


def test_zero_weights_give_uniform_distribution():
    checkpoint = _checkpoint(6, [4])
    zeros = {name: torch.zeros_like(value) for name, value in checkpoint.state_dict.items()}
    uniform = PredictorCheckpoint(input_dim=6, hidden_dims=[4], state_dict=zeros)
    probs = forward(uniform, np.random.default_rng(0).standard_normal((3, 6)))
    np.testing.assert_allclose(probs, np.full((3, 5), 0.2))


def test_output_bias_shift_keeps_argmax():
    checkpoint = _checkpoint(6, [4, 3], seed=1)
    x = np.random.default_rng(1).standard_normal((10, 6))
    shifted_state = {name: value.clone() for name, value in checkpoint.state_dict.items()}
    last_bias = [name for name in shifted_state if name.endswith("bias")][-1]
    shifted_state[last_bias] += 3.5
    shifted = PredictorCheckpoint(input_dim=6, hidden_dims=[4, 3], state_dict=shifted_state)
    np.testing.assert_array_equal(forward(checkpoint, x).argmax(axis=1), forward(shifted, x).argmax(axis=1))


def test_forward_returns_distribution():
    checkpoint = _checkpoint(6, [4])
    probs = forward(checkpoint, np.random.default_rng(0).standard_normal(6))
    assert probs.shape == (5,)
    assert probs.sum() == pytest.approx(1.0)
    assert np.all(probs >= 0)
    with pytest.raises(ShapeMismatchError):
        forward(checkpoint, np.zeros(7))


def test_checkpoint_rejects_mismatched_state():
    state = _checkpoint(6, [4]).state_dict
    with pytest.raises(ValueError):
        PredictorCheckpoint(input_dim=6, hidden_dims=[5], state_dict=state)
    broken = dict(state)
    broken["classifier.0.weight"] = torch.full_like(state["classifier.0.weight"], float("nan"))
    with pytest.raises(ValueError):
        PredictorCheckpoint(input_dim=6, hidden_dims=[4], state_dict=broken)


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal((40, 6)), rng.integers(0, 5, size=40)
    checkpoint = train_arrays(x, y, x, y, TrainConfig(epochs=2, batch_size=8, hidden_dims=[5]))
    path = tmp_path / "predictor.pt"
    checkpoint.save(path)
    loaded = PredictorCheckpoint.load(path)
    np.testing.assert_array_equal(forward(checkpoint, x), forward(loaded, x))
    assert loaded.best_val_loss == checkpoint.best_val_loss
    assert loaded.best_epoch == checkpoint.best_epoch
    assert loaded.training_config == checkpoint.training_config
    assert loaded.n_parameters == 6 * 5 + 5 + 5 * 5 + 5


def test_divergence_is_reported():
    x = np.full((4, 3), np.nan)
    y = np.zeros(4, dtype=np.int64)
    with pytest.raises(DivergenceError) as excinfo:
        train_arrays(x, y, x, y, TrainConfig(epochs=1, hidden_dims=[4]))
    assert excinfo.value.epoch == 1


def test_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        train_arrays(np.zeros((0, 3)), np.zeros(0), np.zeros((1, 3)), np.zeros(1), TrainConfig())
    with pytest.raises(EmptyDatasetError):
        evaluate_predictions([], [])


def test_random_guessing_baseline():
    labels = np.random.default_rng(1).integers(0, 5, size=50_000)
    em, mse = evaluate_predictions(random_guess_baseline(labels, seed=2), labels)
    assert em == pytest.approx(0.2, abs=0.01)
    assert mse == pytest.approx(4.0, abs=0.15)


def test_evaluate_predictions_values():
    assert evaluate_predictions([0, 1, 4], [0, 3, 4]) == (2 / 3, 4 / 3)


def _attitude_by_claim(request):
    if "sunny" in request.user_prompt:
        return "<thought>ok</thought><attitude>Agree</attitude>"
    if "rainy" in request.user_prompt:
        return "<thought>hmm</thought><attitude>Partly Disagree</attitude>"
    return "no tags here"


def test_prompting_baseline_asks_judge_per_example():
    judge = AttitudeJudge(RuleChatBackend(_attitude_by_claim), ScoringSettings(retries=0))
    dataset = PredictorDataset(
        split=Split.TEST,
        examples=(
            PredictorExample(history_text="Alice: hi", claim_text="It is sunny.", label=AttitudeLevel.AGREE,
                             topic_text="Weather is nice."),
            PredictorExample(history_text="Alice: hi", claim_text="It is rainy.", label=AttitudeLevel.NEUTRAL),
            PredictorExample(history_text="Alice: hi", claim_text="It is foggy.", label=AttitudeLevel.DISAGREE),
        ),
    )
    predictions, labels, failed = prompting_baseline(judge, dataset, seed=1)
    assert predictions == [int(AttitudeLevel.AGREE), int(AttitudeLevel.PARTLY_DISAGREE)]
    assert labels == [int(AttitudeLevel.AGREE), int(AttitudeLevel.NEUTRAL)]
    assert failed == 1
    assert evaluate_predictions(predictions, labels) == (0.5, 0.5)

    with pytest.raises(EmptyDatasetError):
        prompting_baseline(judge, PredictorDataset(split=Split.TEST))


def test_prompting_baseline_uses_rendered_history_and_topic():
    seen = []

    def rule(request):
        seen.append(request)
        return "<attitude>Neutral</attitude>"

    judge = AttitudeJudge(RuleChatBackend(rule))
    example = PredictorExample(
        history_text="Alice (turn 1): \"Cats rule.\"", claim_text="Cats are good.", label=AttitudeLevel.NEUTRAL,
        topic_text="Cats are better pets.",
    )
    prompting_baseline(judge, PredictorDataset(split=Split.TEST, examples=(example,)))
    assert 'Alice (turn 1): "Cats rule."' in seen[0].user_prompt
    assert '"Cats are good."' in seen[0].user_prompt
    assert '"Cats are better pets."' in seen[0].system_prompt


def test_train_and_predict_with_embeddings():
    embed = MockEmbeddingBackend(dimension=8, seed=1)
    history = ConversationHistory().with_turn("", "Point.", "").with_turn("", "Reply.", "")
    examples = tuple(
        PredictorExample(history_text=f"history {i % 3}", claim_text=f"claim {i}", label=AttitudeLevel(i % 5))
        for i in range(20)
    )
    train_set = PredictorDataset(split=Split.TRAIN, examples=examples)
    val_set = PredictorDataset(split=Split.VAL, examples=examples[:5])
    assert train_set.class_counts == [4, 4, 4, 4, 4]
    assert train_set.is_balanced

    checkpoint = train(train_set, val_set, embed, TrainConfig(epochs=2, batch_size=8, hidden_dims=[6]))
    assert checkpoint.input_dim == 16
    assert checkpoint.embedding_model == "mock-embed"
    em, mse = evaluate_dataset(checkpoint, embed, val_set)
    assert 0.0 <= em <= 1.0 and mse >= 0.0

    claims = [Claim.create(f"c{i}", "t", Polarity.CON) for i in range(3)]
    levels = AttitudePredictor(checkpoint, embed).predict(history, claims)
    assert len(levels) == 3
    assert all(isinstance(level, AttitudeLevel) for level in levels)
    assert predict_levels(checkpoint, embed, history, []) == []

    with pytest.raises(ShapeMismatchError):
        AttitudePredictor(checkpoint, MockEmbeddingBackend(dimension=4))


def test_train_rejects_empty_datasets(mock_embed):
    empty = PredictorDataset(split=Split.TRAIN)
    with pytest.raises(EmptyDatasetError):
        train(empty, empty, mock_embed)
