import re

import pytest

from persuasion.config import RunConfig
from persuasion.core import Claim, ClaimPair, Polarity
from persuasion.services.gateway import ChatRequest, MockChatBackend, MockEmbeddingBackend, RuleChatBackend

LEVELS = ("Disagree", "Partly Disagree", "Neutral", "Partly Agree", "Agree")
_ALICE_TURN = re.compile(r"^Alice \(turn \d+\):", re.MULTILINE)


def make_pair(pro: str = "AI will replace human jobs.", con: str = "AI will not replace human jobs.", topic: str = "t1") -> ClaimPair:
    return ClaimPair(pro=Claim.create(pro, topic, Polarity.PRO), con=Claim.create(con, topic, Polarity.CON))


def persuader_rounds(user_prompt: str) -> int:
    """描画済み履歴中の説得側ターン数（挨拶行を除く）"""
    return len(_ALICE_TURN.findall(user_prompt)) - 1


def keyword_persuadee(pair: ClaimPair) -> RuleChatBackend:
    """
    説得側のターン数 r に応じて態度を返す被説得側。

    Q には 1 + r、¬Q には 3 - r（0..4 にクリップ）を返すので、
    スコアは 0.25 → 0.5 → 0.75 → 1.0 と上がる。
    """

    def rule(request: ChatRequest) -> str:
        user = request.user_prompt
        if "<attitude></attitude>" in user:
            r = persuader_rounds(user)
            if f'"{pair.con.text}"' in user:
                level = min(4, max(0, 3 - r))
            elif f'"{pair.pro.text}"' in user:
                level = min(4, max(0, 1 + r))
            else:
                level = 2
            return f"<thought>Considering.</thought>\n<attitude>{LEVELS[level]}</attitude>"
        return "<thought>Listening.</thought>\n<argument>I see your point, tell me more.</argument>"

    return RuleChatBackend(rule, name="keyword-persuadee")


def fixed_persuader() -> RuleChatBackend:
    """ラウンドごとに異なる整形済みの発話を返す説得側"""

    def rule(request: ChatRequest) -> str:
        if request.user_prompt.startswith("Propose reasons why another debater"):
            return "<thought>List.</thought>\n1. First reason.\n2. Second reason.\n3. Third reason."
        r = persuader_rounds(request.user_prompt) + 1
        return f"<thought>Round {r} plan.</thought>\n<argument>Argument number {r} with fresh content.</argument>"

    return RuleChatBackend(rule, name="fixed-persuader")


@pytest.fixture
def pair() -> ClaimPair:
    return make_pair()


@pytest.fixture
def mock_chat() -> MockChatBackend:
    return MockChatBackend(seed=7)


@pytest.fixture
def mock_embed() -> MockEmbeddingBackend:
    return MockEmbeddingBackend(dimension=16, seed=3)


@pytest.fixture
def run_config() -> RunConfig:
    return RunConfig(n_turns=3, trials=1, seed=11, max_parallel=1)
