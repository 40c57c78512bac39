"""
態度スコアリングサービス

被説得側に 5 段階の態度を尋ね、主張 Q と反対主張 ¬Q の両方の回答から
バランス同意スコア S = 0.5 + (s_pro - s_con) / 8 を計算する。
"""

import logging
from typing import Optional, Tuple

from persuasion.config import ScoringSettings
from persuasion.core import (
    AttitudeJudgment,
    AttitudeLevel,
    Claim,
    ClaimPair,
    ConversationHistory,
    extract_tagged,
    make_id,
    render_history,
)
from persuasion.errors import AttitudeElicitationError, UnparseableAttitudeError
from persuasion.services.gateway import ChatBackend, ChatRequest, load_template, render_prompt

logger = logging.getLogger(__name__)


def parse_attitude(raw: str) -> AttitudeLevel:
    """
    `<attitude>` タグの内容をレベルに変換する。

    Raises:
        UnparseableAttitudeError: タグがない・重複している・内容が不正
    """
    content = extract_tagged(raw, "attitude")
    if content is None:
        raise UnparseableAttitudeError("<attitude> タグがない、または重複しています")
    return AttitudeLevel.from_label(content)


class AttitudeJudge:
    """
    被説得側バックエンドに態度を尋ねる判定器。

    システムプロンプトは被説得側のもの（目標主張 Q を埋め込む）で、
    ユーザープロンプトに判定対象の主張と会話履歴を入れる。
    """

    def __init__(self, backend: ChatBackend, settings: Optional[ScoringSettings] = None):
        self.backend = backend
        self.settings = settings or ScoringSettings()

    def elicit_level(
        self,
        history: ConversationHistory,
        claim: Claim,
        topic_claim: Optional[Claim] = None,
        seed: Optional[int] = None,
    ) -> AttitudeLevel:
        """
        1つの主張に対する態度レベルを取得する。

        パース失敗時は同一プロンプトで最大 retries 回まで再試行する。

        Args:
            history: 会話履歴
            claim: 判定対象の主張
            topic_claim: 被説得側システムプロンプトに入れる目標主張（省略時は claim）
            seed: リクエストシード

        Raises:
            AttitudeElicitationError: 再試行後も態度を読み取れない
        """
        return self._elicit(history, claim, topic_claim, seed)[0]

    def elicit_rendered(
        self,
        turns_text: str,
        claim_text: str,
        topic_text: Optional[str] = None,
        seed: Optional[int] = None,
    ) -> AttitudeLevel:
        """
        描画済みの履歴テキストに対して態度を取得する。

        Raises:
            AttitudeElicitationError: 再試行後も態度を読み取れない
        """
        return self._request_level(turns_text, claim_text, topic_text or claim_text, make_id(claim_text), seed)[0]

    def _elicit(
        self,
        history: ConversationHistory,
        claim: Claim,
        topic_claim: Optional[Claim],
        seed: Optional[int],
    ) -> Tuple[AttitudeLevel, str]:
        """レベルと生の応答を返す"""
        topic = topic_claim or claim
        return self._request_level(render_history(history), claim.text, topic.text, claim.id, seed)

    def _request_level(
        self,
        turns_text: str,
        claim_text: str,
        topic_text: str,
        claim_ref: str,
        seed: Optional[int],
    ) -> Tuple[AttitudeLevel, str]:
        request = ChatRequest(
            system_prompt=render_prompt(load_template("persuadee_system"), {"claim": topic_text}),
            user_prompt=render_prompt(
                load_template("attitude"),
                {"turns": turns_text, "claim": claim_text},
            ),
            temperature=self.settings.temperature,
            max_tokens=self.settings.max_tokens,
            seed=seed,
        )

        attempts = self.settings.retries + 1
        for attempt in range(1, attempts + 1):
            raw = self.backend.chat(request)
            try:
                return parse_attitude(raw), raw
            except UnparseableAttitudeError as e:
                logger.warning(
                    "態度パース失敗: claim=%s, attempt=%d/%d, error=%s",
                    claim_ref, attempt, attempts, e,
                )
        raise AttitudeElicitationError(
            f"態度を取得できませんでした: claim={claim_ref}, attempts={attempts}"
        )

    def judge(
        self,
        history: ConversationHistory,
        pair: ClaimPair,
        seed: Optional[int] = None,
    ) -> AttitudeJudgment:
        """
        Q と ¬Q の態度を取得し、バランス同意スコアを計算する。

        Raises:
            AttitudeElicitationError: どちらかの態度を取得できない
        """
        s_pro, raw_pro = self._elicit(history, pair.pro, pair.pro, seed)
        s_con, raw_con = self._elicit(history, pair.con, pair.pro, seed)
        judgment = AttitudeJudgment.from_levels(
            pair_ref=pair.id,
            s_pro=s_pro,
            s_con=s_con,
            history_len=len(history),
            raw_pro=raw_pro,
            raw_con=raw_con,
        )
        logger.debug(
            "態度判定: pair=%s, history_len=%d, s_pro=%d, s_con=%d, score=%.3f",
            pair.id, len(history), s_pro, s_con, judgment.score,
        )
        return judgment
