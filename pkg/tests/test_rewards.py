from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from persuasion.config import RewardSettings
from persuasion.services.rewards import (
    CallableTokenizer,
    build_tokenizer,
    combine,
    default_tokenizer,
    format_reward,
    overlength_penalty,
    persuasion_reward,
    repetition_penalty,
    score_turn,
    tag_reward,
)

WELL_FORMED = "<thought>plan</thought>\n<argument>point</argument>"


@pytest.mark.parametrize(
    "s_prev, s_new, expected",
    [
        (0.25, 0.625, 0.5),
        (0.5, 0.25, -0.5),
        (0.0, 0.0, 0.0),
        (1.0, 1.0, 0.0),
        (0.0, 1.0, 1.0),
        (1.0, 0.0, -1.0),
        (0.75, 1.0, 1.0),
    ],
)
def test_persuasion_reward_golden(s_prev, s_new, expected):
    assert persuasion_reward(s_prev, s_new) == expected


@given(st.integers(0, 8), st.integers(0, 8))
def test_persuasion_reward_is_bounded_and_signed(a, b):
    r = persuasion_reward(a / 8, b / 8)
    assert -1.0 <= r <= 1.0
    assert (r > 0) == (b > a) and (r < 0) == (b < a)


def test_persuasion_reward_rejects_out_of_range():
    with pytest.raises(ValueError):
        persuasion_reward(1.2, 0.5)


@pytest.mark.parametrize(
    "length, expected",
    [(0, 0.0), (200, 0.0), (250, -0.25), (300, -0.5), (400, -0.5)],
)
def test_overlength_penalty_golden(length, expected):
    assert overlength_penalty(length) == expected


def test_repetition_penalty_golden():
    previous = [f"p{i}" for i in range(3)] + [f"w{i}" for i in range(10)]
    # 17 トークン → 8-gram 10 個、そのうち 3 個が過去と一致
    current = [f"w{i}" for i in range(10)] + [f"n{i}" for i in range(7)]
    tau, penalty = repetition_penalty(current, [previous])
    assert Fraction(tau).limit_denominator(100) == Fraction(3, 10)
    assert penalty == pytest.approx(-0.2, abs=1e-12)


def test_repetition_below_threshold_is_free():
    tau, penalty = repetition_penalty(list("abcdefgh"), [list("zzzzzzzz")])
    assert tau == 0.0 and penalty == 0.0


def test_repetition_short_argument():
    assert repetition_penalty(["a", "b"], [["a", "b"]]) == (0.0, 0.0)


@pytest.mark.parametrize(
    "raw, tag, fmt",
    [
        (WELL_FORMED, 1.0, 1),
        ("<thought>plan</thought>\n<argument>point", 0.75, 0),
        ("<argument>point</argument><thought>plan</thought>", 1.0, 0),
        ("intro <thought>plan</thought><argument>point</argument>", 1.0, 0),
        ("  " + WELL_FORMED, 1.0, 0),
        (WELL_FORMED + "\n", 1.0, 0),
        ("<thought>a</thought><thought>b</thought><argument>c</argument>", 0.5, 0),
        ("nothing", 0.0, 0),
    ],
)
def test_tag_and_format_rewards(raw, tag, fmt):
    assert tag_reward(raw) == tag
    assert format_reward(raw) == fmt


def test_combine_weights():
    assert combine(0.5, 1, 1.0, -0.2, -0.25) == pytest.approx(0.5 + 0.1 * (1 + 1.0 - 0.2 - 0.25), abs=1e-12)
    assert combine(0.0, 0, 0.0, 0.0, 0.0) == 0.0


def test_score_turn_breakdown():
    breakdown = score_turn(
        raw=WELL_FORMED,
        thought="plan",
        argument="point",
        previous_arguments=[],
        s_prev=0.25,
        s_new=0.625,
    )
    assert breakdown.persuade == 0.5
    assert breakdown.format == 1 and breakdown.tag == 1.0
    assert breakdown.repeat == 0.0 and breakdown.overlength == 0.0
    assert breakdown.argument_len == 1 and breakdown.thought_len == 1
    assert breakdown.final == pytest.approx(0.5 + 0.1 * 2.0, abs=1e-12)


def test_score_turn_penalizes_missing_argument():
    breakdown = score_turn("<thought>x</thought>", "x", "", [], 0.5, 0.5)
    assert breakdown.format == 0
    assert breakdown.tag == 0.5
    assert breakdown.final == pytest.approx(0.05, abs=1e-12)


def test_score_turn_custom_tokenizer_and_settings():
    tokenizer = CallableTokenizer(lambda text: list(text))
    settings = RewardSettings(max_argument_tokens=4)
    breakdown = score_turn(WELL_FORMED, "plan", "points", [], 0.5, 0.5, settings, tokenizer)
    assert breakdown.argument_len == 6
    assert breakdown.overlength == -0.5


def test_default_tokenizer():
    assert default_tokenizer("Hello, world!") == ["Hello", ",", "world", "!"]


def test_tokenizer_selected_from_settings():
    assert build_tokenizer() is default_tokenizer
    whitespace = build_tokenizer(RewardSettings(tokenizer="whitespace"))
    assert isinstance(whitespace, CallableTokenizer)
    assert whitespace("Hello, world!") == ["Hello,", "world!"]

    argument = "Well, yes: it works."
    settings = RewardSettings(tokenizer="whitespace")
    breakdown = score_turn(WELL_FORMED, "plan", argument, [], 0.5, 0.5, settings)
    assert breakdown.argument_len == 4
    assert score_turn(WELL_FORMED, "plan", argument, [], 0.5, 0.5).argument_len == 7
