"""
説得戦略注釈サービス

説得側の各ターン（thought + argument）を判定モデルに見せ、
9 種類の戦略分類から該当するものを選ばせる。
"""

import enum
import logging
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict

from persuasion.config import GenerationSettings
from persuasion.core import ConversationRecord, Speaker, Turn, extract_tagged
from persuasion.errors import AnnotationParseError
from persuasion.services.gateway import ChatBackend, ChatRequest, load_template, render_prompt

logger = logging.getLogger(__name__)


class StrategyLabel(str, enum.Enum):
    EVIDENTIAL_APPEALS = "Evidential Appeals"
    AUTHORITY_APPEALS = "Authority Appeals"
    EMOTIONAL_APPEALS = "Emotional Appeals"
    SOCIAL_APPEALS = "Social Appeals"
    COMMON_GROUND_APPEALS = "Common Ground Appeals"
    GRADUAL_CONCESSION = "Gradual Concession"
    FRAMING_EFFECTS = "Framing Effects"
    RHETORIC = "Rhetoric"
    PREEMPTIVE_REBUTTAL = "Preemptive Rebuttal"


# 略称 → 正式名（キーは小文字）
_ALIASES: Dict[str, StrategyLabel] = {
    "evidence": StrategyLabel.EVIDENTIAL_APPEALS,
    "authority appeal": StrategyLabel.AUTHORITY_APPEALS,
    "emotional appeal": StrategyLabel.EMOTIONAL_APPEALS,
    "social appeal": StrategyLabel.SOCIAL_APPEALS,
    "common ground": StrategyLabel.COMMON_GROUND_APPEALS,
    "framing": StrategyLabel.FRAMING_EFFECTS,
}
_CANONICAL: Dict[str, StrategyLabel] = {label.value.casefold(): label for label in StrategyLabel}


class TurnStrategies(BaseModel):
    model_config = ConfigDict(frozen=True)

    pair_id: str = ""
    turn_index: int
    strategies: Tuple[StrategyLabel, ...]
    unknown: Tuple[str, ...] = ()
    raw: str = ""


def parse_strategies(answer: str) -> Tuple[Tuple[StrategyLabel, ...], List[str]]:
    """
    カンマ区切りの戦略名を分類に写像する（大文字小文字は無視）。

    略称は正式名に写像して警告し、分類にない名前は捨てて返す。

    Returns:
        (分類順に並べた戦略, 分類外の名前)
    """
    labels = set()
    unknown: List[str] = []
    for item in answer.split(","):
        name = " ".join(item.split()).strip(" .")
        if not name:
            continue
        key = name.casefold()
        if key in _CANONICAL:
            labels.add(_CANONICAL[key])
        elif key in _ALIASES:
            logger.warning("略称を正式名に変換: %s → %s", name, _ALIASES[key].value)
            labels.add(_ALIASES[key])
        else:
            logger.warning("分類にない戦略名を無視: %s", name)
            unknown.append(name)
    return tuple(label for label in StrategyLabel if label in labels), unknown


def annotate_turn(
    backend: ChatBackend,
    turn: Turn,
    settings: Optional[GenerationSettings] = None,
    seed: Optional[int] = None,
) -> TurnStrategies:
    """
    説得側1ターンの戦略を注釈する。

    Raises:
        AnnotationParseError: 再試行後も <answer> を取得できない
    """
    s = settings or GenerationSettings()
    request = ChatRequest(
        system_prompt=load_template("strategy_system").body,
        user_prompt=render_prompt(
            load_template("strategy_user"),
            {"thought_text": turn.thought, "argument_text": turn.argument},
        ),
        temperature=s.temperature,
        max_tokens=s.max_tokens,
        seed=seed,
    )
    attempts = s.parse_retries + 1
    for attempt in range(1, attempts + 1):
        raw = backend.chat(request)
        answer = extract_tagged(raw, "answer")
        if answer is not None:
            labels, unknown = parse_strategies(answer)
            return TurnStrategies(turn_index=turn.index, strategies=labels, unknown=tuple(unknown), raw=raw)
        logger.warning("戦略注釈のパース失敗: turn=%d, attempt=%d/%d", turn.index, attempt, attempts)
    raise AnnotationParseError(f"戦略注釈を取得できませんでした: turn={turn.index}")


def annotate_strategies(
    backend: ChatBackend,
    record: ConversationRecord,
    settings: Optional[GenerationSettings] = None,
    seed: int = 0,
) -> List[TurnStrategies]:
    """会話記録の説得側ターンをすべて注釈する。失敗したターンはスキップする"""
    results: List[TurnStrategies] = []
    for turn in record.history.turns:
        if turn.speaker is not Speaker.PERSUADER:
            continue
        try:
            annotated = annotate_turn(backend, turn, settings, seed + turn.index)
            results.append(annotated.model_copy(update={"pair_id": record.pair.id}))
        except AnnotationParseError as e:
            logger.error("戦略注釈失敗: pair=%s, %s", record.pair.id, e)
    return results
