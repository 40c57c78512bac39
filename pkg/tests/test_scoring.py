import pytest

from persuasion.config import ScoringSettings
from persuasion.core import AttitudeLevel, ConversationHistory
from persuasion.errors import AttitudeElicitationError, UnparseableAttitudeError
from persuasion.services.gateway import ChatRequest, RuleChatBackend, ScriptedChatBackend
from persuasion.services.scoring import AttitudeJudge, parse_attitude
from tests.conftest import LEVELS


def _reply(level: str) -> str:
    return f"<thought>hmm</thought>\n<attitude>{level}</attitude>"


@pytest.mark.parametrize("s_pro", range(5))
@pytest.mark.parametrize("s_con", range(5))
def test_judge_balanced_score(pair, s_pro, s_con):
    backend = ScriptedChatBackend([_reply(LEVELS[s_pro]), _reply(LEVELS[s_con])])
    judgment = AttitudeJudge(backend).judge(ConversationHistory(), pair)
    assert judgment.s_pro == s_pro and judgment.s_con == s_con
    assert judgment.score == 0.5 + (s_pro - s_con) / 8
    assert judgment.raw_pro == _reply(LEVELS[s_pro])
    # 2回目の問い合わせは ¬Q について
    assert f'"{pair.con.text}"' in backend.requests[1].user_prompt


@pytest.mark.parametrize("level_a", range(5))
@pytest.mark.parametrize("level_b", range(5))
def test_swapped_pair_scores_are_complementary(pair, level_a, level_b):
    def by_claim(request: ChatRequest) -> str:
        level = level_a if f'"{pair.pro.text}"' in request.user_prompt else level_b
        return _reply(LEVELS[level])

    judge = AttitudeJudge(RuleChatBackend(by_claim))
    history = ConversationHistory().with_turn("", "Machines scale.", "").with_turn("", "People adapt.", "")
    forward = judge.judge(history, pair)
    backward = judge.judge(history, pair.swapped())
    assert (forward.s_pro, forward.s_con) == (backward.s_con, backward.s_pro)
    assert forward.score + backward.score == 1.0


@pytest.mark.parametrize("raw", ["<attitude>Sort of</attitude>", "no tags", "<attitude>Agree</attitude><attitude>Agree</attitude>"])
def test_parse_attitude_rejects(raw):
    with pytest.raises(UnparseableAttitudeError):
        parse_attitude(raw)


def test_retry_then_success(pair):
    backend = ScriptedChatBackend(["garbage", _reply("Partly Agree")])
    level = AttitudeJudge(backend, ScoringSettings(retries=2)).elicit_level(ConversationHistory(), pair.pro)
    assert level is AttitudeLevel.PARTLY_AGREE
    assert len(backend.requests) == 2
    assert backend.requests[0] == backend.requests[1]


def test_retries_exhausted(pair):
    backend = ScriptedChatBackend(["x", "y", "z"])
    with pytest.raises(AttitudeElicitationError):
        AttitudeJudge(backend, ScoringSettings(retries=2)).elicit_level(ConversationHistory(), pair.pro)
    assert len(backend.requests) == 3


def test_judgment_records_history_length(pair):
    history = ConversationHistory().with_turn("", "a", "").with_turn("", "b", "")
    backend = ScriptedChatBackend([_reply("Agree"), _reply("Disagree")])
    judgment = AttitudeJudge(backend).judge(history, pair, seed=4)
    assert judgment.history_len == 2
    assert judgment.score == 1.0
    assert all(r.seed == 4 for r in backend.requests)
