import pytest

from persuasion.config import GenerationSettings
from persuasion.core import Speaker, Turn
from persuasion.errors import AnnotationParseError
from persuasion.services.annotation import (
    StrategyLabel,
    annotate_strategies,
    annotate_turn,
    parse_strategies,
)
from persuasion.services.gateway import MockChatBackend, RuleChatBackend, ScriptedChatBackend
from persuasion.services.orchestrator import PersuasionRunner
from tests.conftest import fixed_persuader, keyword_persuadee


def _turn(index: int = 1) -> Turn:
    return Turn(
        index=index,
        speaker=Speaker.for_index(index),
        thought="Cite a study.",
        argument="Studies show remote workers are more productive.",
    )


def test_parse_strategies_canonical_names_in_taxonomy_order():
    labels, unknown = parse_strategies("Rhetoric, evidential appeals ,Emotional Appeals.")
    assert labels == (
        StrategyLabel.EVIDENTIAL_APPEALS,
        StrategyLabel.EMOTIONAL_APPEALS,
        StrategyLabel.RHETORIC,
    )
    assert unknown == []


def test_parse_strategies_aliases_and_unknown(caplog):
    labels, unknown = parse_strategies("Evidence, Common Ground, Storytelling, , Evidential Appeals")
    assert labels == (StrategyLabel.EVIDENTIAL_APPEALS, StrategyLabel.COMMON_GROUND_APPEALS)
    assert unknown == ["Storytelling"]
    assert "Storytelling" in caplog.text


def test_bare_concession_is_not_a_strategy(caplog):
    labels, unknown = parse_strategies("Rhetoric, Concession")
    assert labels == (StrategyLabel.RHETORIC,)
    assert unknown == ["Concession"]
    assert "Concession" in caplog.text


def test_parse_strategies_empty_answer():
    assert parse_strategies("") == ((), [])


def test_annotate_turn_renders_prompt():
    backend = ScriptedChatBackend(["<thought>x</thought><answer>Evidential Appeals</answer>"])
    result = annotate_turn(backend, _turn(3), seed=5)
    assert result.turn_index == 3
    assert result.strategies == (StrategyLabel.EVIDENTIAL_APPEALS,)
    request = backend.requests[0]
    assert "Cite a study." in request.user_prompt
    assert "Studies show remote workers are more productive." in request.user_prompt
    assert request.system_prompt.startswith("You are a debate expert")
    assert request.seed == 5


def test_annotate_turn_retries_then_fails():
    backend = ScriptedChatBackend(["no tags", "still none"])
    with pytest.raises(AnnotationParseError):
        annotate_turn(backend, _turn(), GenerationSettings(parse_retries=1))
    assert len(backend.requests) == 2


def test_annotate_strategies_covers_persuader_turns(pair, run_config):
    record = PersuasionRunner(run_config, fixed_persuader(), keyword_persuadee(pair)).run_conversation(pair)
    results = annotate_strategies(MockChatBackend(seed=4), record)
    assert [r.turn_index for r in results] == [1, 3, 5]
    assert all(r.pair_id == record.pair.id for r in results)
    assert all(1 <= len(r.strategies) <= 3 for r in results)
    assert annotate_strategies(MockChatBackend(seed=4), record) == results


def test_annotate_strategies_skips_failed_turns(pair, run_config):
    record = PersuasionRunner(run_config, fixed_persuader(), keyword_persuadee(pair)).run_conversation(pair)

    def rule(request):
        if "Argument number 2" in request.user_prompt:
            return "nothing"
        return "<answer>Framing Effects</answer>"

    results = annotate_strategies(RuleChatBackend(rule), record)
    assert [r.turn_index for r in results] == [1, 5]
