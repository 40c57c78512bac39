"""
ドメイン型と正規シリアライズ

全サービスで共有する型（主張、ターン、会話履歴、態度判定、報酬内訳、
ToM コンテキスト、会話レコード）と JSON Lines 入出力を定義する。
型はすべて pydantic の frozen モデルで、生成後は変更しない。
"""

import enum
import hashlib
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, Iterable, List, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from persuasion.errors import UnparseableAttitudeError

logger = logging.getLogger(__name__)

PERSUADER_NAME = "Alice"
PERSUADEE_NAME = "Bob"

HISTORY_HEADER = "# Following are the previous turns of the conversation."
GREETING_LINES = (
    'Alice (turn 1): "Hi, I am Alice. How are you today? "',
    "Bob (turn 2): \"Nice to meet you. Let's begin the discussion.\"",
)

TAG_NAMES = ("thought", "argument", "attitude", "answer")
_TURN_TAGS = ("<thought>", "</thought>", "<argument>", "</argument>")


class Polarity(str, enum.Enum):
    """説得側の目標主張に対する向き"""

    PRO = "PRO"
    CON = "CON"

    def flipped(self) -> "Polarity":
        return Polarity.CON if self is Polarity.PRO else Polarity.PRO


class Speaker(str, enum.Enum):
    PERSUADER = "PERSUADER"
    PERSUADEE = "PERSUADEE"

    @classmethod
    def for_index(cls, index: int) -> "Speaker":
        """奇数ターンは説得側、偶数ターンは被説得側"""
        return cls.PERSUADER if index % 2 == 1 else cls.PERSUADEE


class AttitudeLevel(enum.IntEnum):
    """5段階リッカート尺度（Agree が最大）"""

    DISAGREE = 0
    PARTLY_DISAGREE = 1
    NEUTRAL = 2
    PARTLY_AGREE = 3
    AGREE = 4

    @property
    def label(self) -> str:
        return _LEVEL_LABELS[self]

    @classmethod
    def from_label(cls, text: str) -> "AttitudeLevel":
        """
        態度文字列をレベルに変換する。

        前後空白を除去し、大文字小文字を区別せずに5つの正規文字列と照合する。

        Raises:
            UnparseableAttitudeError: どの文字列にも一致しない
        """
        key = " ".join(text.split()).casefold()
        for level, label in _LEVEL_LABELS.items():
            if label.casefold() == key:
                return level
        raise UnparseableAttitudeError(f"未知の態度文字列: {text!r}")


_LEVEL_LABELS: Dict[AttitudeLevel, str] = {
    AttitudeLevel.DISAGREE: "Disagree",
    AttitudeLevel.PARTLY_DISAGREE: "Partly Disagree",
    AttitudeLevel.NEUTRAL: "Neutral",
    AttitudeLevel.PARTLY_AGREE: "Partly Agree",
    AttitudeLevel.AGREE: "Agree",
}

AgreementScore = Annotated[float, Field(ge=0.0, le=1.0)]


def balanced_score(s_pro: int, s_con: int) -> float:
    """バランス同意スコア 0.5 + (s_pro - s_con) / 8（k/8 の値は浮動小数点で厳密）"""
    return 0.5 + (int(s_pro) - int(s_con)) / 8


def rendered_agreement(level_on_claim: int, level_on_opposite: int) -> int:
    """ToM ブロックに表示する X/8 の X"""
    return round(8 * balanced_score(level_on_claim, level_on_opposite))


def make_id(*parts: str) -> str:
    """部品文字列から安定 ID を作る"""
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    return digest[:16]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Claim(_Frozen):
    id: str
    text: str
    topic_id: str
    polarity: Polarity

    @field_validator("text")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("主張テキストが空です")
        return v

    @classmethod
    def create(cls, text: str, topic_id: str, polarity: Polarity) -> "Claim":
        text = text.strip()
        return cls(
            id=make_id(topic_id, polarity.value, text),
            text=text,
            topic_id=topic_id,
            polarity=polarity,
        )


class ClaimPair(_Frozen):
    """目標主張 Q（pro）とその反対 ¬Q（con）"""

    pro: Claim
    con: Claim

    @model_validator(mode="after")
    def _check(self) -> "ClaimPair":
        if self.pro.text == self.con.text:
            raise ValueError("pro と con が同一テキストです")
        if self.pro.topic_id != self.con.topic_id:
            raise ValueError("pro と con の topic_id が異なります")
        if self.pro.polarity is not Polarity.PRO or self.con.polarity is not Polarity.CON:
            raise ValueError("pro/con の polarity が不正です")
        return self

    @property
    def id(self) -> str:
        return make_id(self.pro.id, self.con.id)

    def swapped(self) -> "ClaimPair":
        """向きを入れ替えたペア（¬Q を目標とする）"""
        return ClaimPair(
            pro=self.con.model_copy(update={"polarity": Polarity.PRO}),
            con=self.pro.model_copy(update={"polarity": Polarity.CON}),
        )


class Turn(_Frozen):
    index: int = Field(ge=1)
    speaker: Speaker
    thought: str = ""
    argument: str = ""
    raw: str = ""

    @model_validator(mode="after")
    def _check(self) -> "Turn":
        if self.speaker is not Speaker.for_index(self.index):
            raise ValueError(f"ターン {self.index} の話者が不正です: {self.speaker.value}")
        if any(tag in self.argument for tag in _TURN_TAGS):
            raise ValueError("argument にタグが残っています")
        return self


def strip_turn_tags(text: str) -> str:
    """thought/argument タグ文字列を取り除く"""
    for tag in _TURN_TAGS:
        text = text.replace(tag, "")
    return text.strip()


class ConversationHistory(_Frozen):
    """H_n。空のターン列が H_0"""

    turns: Tuple[Turn, ...] = ()
    greeting: bool = True

    @model_validator(mode="after")
    def _contiguous(self) -> "ConversationHistory":
        for expected, turn in enumerate(self.turns, start=1):
            if turn.index != expected:
                raise ValueError(f"ターン番号が連続していません: {turn.index} (期待値 {expected})")
        return self

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def next_speaker(self) -> Speaker:
        return Speaker.for_index(len(self.turns) + 1)

    def with_turn(self, thought: str, argument: str, raw: str) -> "ConversationHistory":
        """次の話者のターンを追加した新しい履歴を返す"""
        index = len(self.turns) + 1
        turn = Turn(
            index=index,
            speaker=Speaker.for_index(index),
            thought=thought,
            argument=argument,
            raw=raw,
        )
        return self.model_copy(update={"turns": self.turns + (turn,)})

    def prefix(self, n: int) -> "ConversationHistory":
        return self.model_copy(update={"turns": self.turns[:n]})

    def persuader_arguments(self) -> List[str]:
        return [t.argument for t in self.turns if t.speaker is Speaker.PERSUADER]


def render_history(history: ConversationHistory) -> str:
    """
    会話履歴をプロンプト用テキストに整形する。

    ヘッダと固定の挨拶2行のあとに各ターンを続ける。
    保存上のターン 1 は表示上 "turn 3" になる。
    """
    lines = [HISTORY_HEADER]
    offset = 0
    if history.greeting:
        lines.extend(GREETING_LINES)
        offset = len(GREETING_LINES)
    for turn in history.turns:
        name = PERSUADER_NAME if turn.speaker is Speaker.PERSUADER else PERSUADEE_NAME
        lines.append(f'{name} (turn {turn.index + offset}): "{turn.argument}"')
    return "\n\n".join(lines)


def extract_tagged(raw: str, tag: str) -> Optional[str]:
    """
    `<tag>…</tag>` の内側を返す。

    タグの組がちょうど1回出現しない場合は None。

    Raises:
        ValueError: 未対応のタグ名
    """
    if tag not in TAG_NAMES:
        raise ValueError(f"未対応のタグ: {tag}")
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    if raw.count(open_tag) != 1 or raw.count(close_tag) != 1:
        return None
    start = raw.index(open_tag) + len(open_tag)
    end = raw.index(close_tag)
    if end < start:
        return None
    return raw[start:end]


class AttitudeJudgment(_Frozen):
    pair_ref: str
    s_pro: AttitudeLevel
    s_con: AttitudeLevel
    score: AgreementScore
    raw_pro: str = ""
    raw_con: str = ""
    history_len: int = Field(ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "AttitudeJudgment":
        if self.score != balanced_score(self.s_pro, self.s_con):
            raise ValueError("score がバランス同意スコアと一致しません")
        return self

    @classmethod
    def from_levels(
        cls,
        pair_ref: str,
        s_pro: AttitudeLevel,
        s_con: AttitudeLevel,
        history_len: int,
        raw_pro: str = "",
        raw_con: str = "",
    ) -> "AttitudeJudgment":
        return cls(
            pair_ref=pair_ref,
            s_pro=s_pro,
            s_con=s_con,
            score=balanced_score(s_pro, s_con),
            raw_pro=raw_pro,
            raw_con=raw_con,
            history_len=history_len,
        )


class RewardBreakdown(_Frozen):
    persuade: float = Field(ge=-1.0, le=1.0)
    format: int = Field(ge=0, le=1)
    tag: float = Field(ge=0.0, le=1.0)
    repeat: float = Field(ge=-1.0, le=0.0)
    overlength: float = Field(le=0.0)
    overlap_rate: float = Field(ge=0.0, le=1.0)
    argument_len: int = Field(ge=0)
    thought_len: int = Field(default=0, ge=0)
    final: float


class ToMContext(_Frozen):
    """
    説得側プロンプトに差し込む ToM 情報。

    predicted_levels[i] は (反対主張 ¬q_i へのレベル, 対の主張 q_i へのレベル)。
    反対主張のみのモードでは predicted_levels / rendered_agreement は空。
    """

    counterclaims: Tuple[Claim, ...]
    paired_claims: Tuple[Claim, ...] = ()
    predicted_levels: Tuple[Tuple[AttitudeLevel, AttitudeLevel], ...] = ()
    rendered_agreement: Tuple[int, ...] = ()

    @model_validator(mode="after")
    def _aligned(self) -> "ToMContext":
        k = len(self.counterclaims)
        if self.paired_claims and len(self.paired_claims) != k:
            raise ValueError("paired_claims の長さが counterclaims と一致しません")
        if self.predicted_levels or self.rendered_agreement:
            if len(self.paired_claims) != k or len(self.predicted_levels) != k:
                raise ValueError("predicted_levels の長さが counterclaims と一致しません")
            expected = tuple(rendered_agreement(c, p) for c, p in self.predicted_levels)
            if self.rendered_agreement != expected:
                raise ValueError("rendered_agreement が predicted_levels と一致しません")
        return self

    @classmethod
    def with_levels(
        cls,
        counterclaims: Iterable[Claim],
        paired_claims: Iterable[Claim],
        levels: Iterable[Tuple[AttitudeLevel, AttitudeLevel]],
    ) -> "ToMContext":
        levels = tuple((AttitudeLevel(c), AttitudeLevel(p)) for c, p in levels)
        return cls(
            counterclaims=tuple(counterclaims),
            paired_claims=tuple(paired_claims),
            predicted_levels=levels,
            rendered_agreement=tuple(rendered_agreement(c, p) for c, p in levels),
        )


class ClaimLabels(_Frozen):
    """偶数プレフィックス H_{history_len} における各主張への実際の態度"""

    history_len: int = Field(ge=0)
    levels: Dict[str, AttitudeLevel]


class PromptPair(_Frozen):
    system: str
    user: str


class ConversationRecord(_Frozen):
    pair: ClaimPair
    history: ConversationHistory
    judgments: Tuple[AttitudeJudgment, ...] = ()
    per_turn_rewards: Tuple[RewardBreakdown, ...] = ()
    tom_contexts: Tuple[ToMContext, ...] = ()
    prompts: Tuple[PromptPair, ...] = ()
    counterclaims: Tuple[Claim, ...] = ()
    paired_claims: Tuple[Claim, ...] = ()
    claim_labels: Tuple[ClaimLabels, ...] = ()
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    trial: int = 0
    valid: bool = True
    error: Optional[str] = None

    @model_validator(mode="after")
    def _judgment_count(self) -> "ConversationRecord":
        if self.valid:
            persuadee_turns = sum(1 for t in self.history.turns if t.speaker is Speaker.PERSUADEE)
            if len(self.judgments) != persuadee_turns + 1:
                raise ValueError(
                    f"判定数が不正です: {len(self.judgments)} (期待値 {persuadee_turns + 1})"
                )
        return self

    @property
    def scores(self) -> List[float]:
        return [j.score for j in self.judgments]

    @property
    def agreement_shift(self) -> Optional[float]:
        if not self.judgments:
            return None
        return self.judgments[-1].score - self.judgments[0].score

    @property
    def initial_above_half(self) -> bool:
        return bool(self.judgments) and self.judgments[0].score >= 0.5


M = TypeVar("M", bound=BaseModel)


def write_jsonl(path: Union[str, Path], items: Iterable[BaseModel]) -> int:
    """モデル列を UTF-8 JSON Lines で書き出し、行数を返す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for item in items:
            f.write(item.model_dump_json())
            f.write("\n")
            count += 1
    logger.info("JSONL 書き出し: path=%s, lines=%d", path, count)
    return count


def read_jsonl(path: Union[str, Path], model: Type[M]) -> List[M]:
    """JSON Lines を読み込みモデルのリストにする（空行は無視）"""
    items: List[M] = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                items.append(model.model_validate_json(line))
    return items
