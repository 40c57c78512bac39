import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from persuasion.core import (
    AttitudeJudgment,
    AttitudeLevel,
    ConversationHistory,
    ConversationRecord,
    Speaker,
    ToMContext,
    Turn,
    balanced_score,
    extract_tagged,
    read_jsonl,
    render_history,
    rendered_agreement,
    write_jsonl,
)
from persuasion.errors import UnparseableAttitudeError
from tests.conftest import make_pair


@pytest.mark.parametrize("s_pro", range(5))
@pytest.mark.parametrize("s_con", range(5))
def test_balanced_scores_of_opposite_claims_sum_to_one(s_pro, s_con):
    assert balanced_score(s_pro, s_con) + balanced_score(s_con, s_pro) == 1.0
    assert 0.0 <= balanced_score(s_pro, s_con) <= 1.0


def test_balanced_score_values():
    assert balanced_score(4, 0) == 1.0
    assert balanced_score(0, 4) == 0.0
    assert balanced_score(2, 2) == 0.5
    assert balanced_score(3, 1) == 0.75


def test_rendered_agreement_covers_odd_values():
    assert rendered_agreement(3, 0) == 7
    assert rendered_agreement(4, 0) == 8
    assert rendered_agreement(2, 2) == 4
    assert rendered_agreement(0, 4) == 0


@pytest.mark.parametrize(
    "text, level",
    [
        ("Agree", AttitudeLevel.AGREE),
        ("  partly   agree ", AttitudeLevel.PARTLY_AGREE),
        ("NEUTRAL", AttitudeLevel.NEUTRAL),
        ("Partly Disagree", AttitudeLevel.PARTLY_DISAGREE),
        ("disagree\n", AttitudeLevel.DISAGREE),
    ],
)
def test_attitude_from_label(text, level):
    assert AttitudeLevel.from_label(text) is level


@pytest.mark.parametrize("text", ["Strongly Agree", "", "Agreed", "Partly"])
def test_attitude_from_label_rejects_unknown(text):
    with pytest.raises(UnparseableAttitudeError):
        AttitudeLevel.from_label(text)


def test_speaker_parity():
    assert Speaker.for_index(1) is Speaker.PERSUADER
    assert Speaker.for_index(2) is Speaker.PERSUADEE
    with pytest.raises(ValidationError):
        Turn(index=2, speaker=Speaker.PERSUADER, argument="x")


def test_argument_must_not_contain_tags():
    with pytest.raises(ValidationError):
        Turn(index=1, speaker=Speaker.PERSUADER, argument="<argument>x</argument>")


def test_history_growth_and_prefix():
    h = ConversationHistory().with_turn("t1", "a1", "r1").with_turn("", "b1", "r2").with_turn("t2", "a2", "r3")
    assert len(h) == 3
    assert h.next_speaker is Speaker.PERSUADEE
    assert h.persuader_arguments() == ["a1", "a2"]
    assert len(h.prefix(2)) == 2
    assert h.prefix(0) == ConversationHistory()


def test_render_history_greeting_offsets_turn_numbers():
    h = ConversationHistory().with_turn("", "First point.", "").with_turn("", "A reply.", "")
    assert render_history(h) == (
        "# Following are the previous turns of the conversation.\n\n"
        'Alice (turn 1): "Hi, I am Alice. How are you today? "\n\n'
        'Bob (turn 2): "Nice to meet you. Let\'s begin the discussion."\n\n'
        'Alice (turn 3): "First point."\n\n'
        'Bob (turn 4): "A reply."'
    )


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("<argument>x</argument>", "x"),
        ("pre <argument> spaced </argument> post", " spaced "),
        ("<argument>x</argument><argument>y</argument>", None),
        ("<argument>x", None),
        ("</argument>x<argument>", None),
    ],
)
def test_extract_tagged(raw, expected):
    assert extract_tagged(raw, "argument") == expected


def test_extract_tagged_unknown_tag():
    with pytest.raises(ValueError):
        extract_tagged("<foo>x</foo>", "foo")


@given(st.integers(0, 4), st.integers(0, 4))
def test_judgment_score_consistency(s_pro, s_con):
    j = AttitudeJudgment.from_levels("p", AttitudeLevel(s_pro), AttitudeLevel(s_con), history_len=0)
    assert j.score == balanced_score(s_pro, s_con)


def test_judgment_rejects_inconsistent_score():
    with pytest.raises(ValidationError):
        AttitudeJudgment(pair_ref="p", s_pro=4, s_con=0, score=0.5, history_len=0)


def test_tom_context_alignment():
    pair = make_pair()
    ctx = ToMContext.with_levels([pair.con], [pair.pro], [(3, 0)])
    assert ctx.rendered_agreement == (7,)
    with pytest.raises(ValidationError):
        ToMContext(counterclaims=(pair.con,), paired_claims=(pair.pro,), predicted_levels=((3, 0),), rendered_agreement=(4,))


def test_record_requires_one_judgment_per_persuadee_turn():
    pair = make_pair()
    h = ConversationHistory().with_turn("", "a", "").with_turn("", "b", "")
    j0 = AttitudeJudgment.from_levels(pair.id, AttitudeLevel(1), AttitudeLevel(3), 0)
    j1 = AttitudeJudgment.from_levels(pair.id, AttitudeLevel(3), AttitudeLevel(1), 2)
    record = ConversationRecord(pair=pair, history=h, judgments=(j0, j1))
    assert record.agreement_shift == 0.5
    assert not record.initial_above_half
    with pytest.raises(ValidationError):
        ConversationRecord(pair=pair, history=h, judgments=(j0,))
    # 無効な記録は部分的でもよい
    ConversationRecord(pair=pair, history=h, judgments=(j0,), valid=False, error="x")


def test_jsonl_round_trip(tmp_path):
    pair = make_pair()
    path = tmp_path / "pairs.jsonl"
    assert write_jsonl(path, [pair, pair.swapped()]) == 2
    loaded = read_jsonl(path, type(pair))
    assert loaded[0] == pair
    assert loaded[1].pro.text == pair.con.text
