"""
報酬計算サービス

説得側の1ターンに対して、説得報酬と補助報酬（形式・タグ・繰り返し・超過長）を
計算し、重み付き和で最終報酬を得る。すべて純関数。
"""

import logging
import re
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

from persuasion.config import RewardSettings, RewardWeights
from persuasion.core import RewardBreakdown

logger = logging.getLogger(__name__)

_FORMAT_RE = re.compile(r"<thought>.*?</thought>\s*<argument>.*?</argument>", re.DOTALL)
_TURN_TAGS = ("<thought>", "</thought>", "<argument>", "</argument>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class Tokenizer(Protocol):
    def __call__(self, text: str) -> List[str]:
        ...


def default_tokenizer(text: str) -> List[str]:
    """Unicode の単語文字列と記号1文字ずつに分割する"""
    return _TOKEN_RE.findall(text)


class CallableTokenizer:
    """
    外部トークナイザ（例: 学習対象モデルの tokenizer.tokenize）を包むアダプタ。

    ロールアウト出力時にモデル固有のトークン数で報酬を計算したい場合に使う。
    """

    def __init__(self, fn: Callable[[str], Sequence]):
        self._fn = fn

    def __call__(self, text: str) -> List[str]:
        return [str(t) for t in self._fn(text)]


_TOKENIZERS = {
    "default": default_tokenizer,
    "whitespace": CallableTokenizer(str.split),
}


def build_tokenizer(settings: Optional[RewardSettings] = None) -> Tokenizer:
    """RewardSettings.tokenizer に対応するトークナイザ"""
    name = (settings or RewardSettings()).tokenizer
    return _TOKENIZERS[name]


def persuasion_reward(s_prev: float, s_new: float) -> float:
    """
    同意スコアの変化を [-1, 1] に正規化した説得報酬。

    上昇は残り余地 (1 - S_prev) で、下降は S_prev で割る。変化なしは 0。
    """
    if not (0.0 <= s_prev <= 1.0 and 0.0 <= s_new <= 1.0):
        raise ValueError(f"スコアは [0, 1] の範囲で指定してください: {s_prev}, {s_new}")
    diff = s_new - s_prev
    if diff == 0:
        return 0.0
    if diff > 0:
        return diff / (1.0 - s_prev)
    return diff / s_prev


def tag_reward(raw: str) -> float:
    """4種のタグそれぞれがちょうど1回出現すれば 0.25 ずつ加点"""
    return sum(0.25 for tag in _TURN_TAGS if raw.count(tag) == 1)


def format_reward(raw: str) -> int:
    """`<thought>…</thought>` → `<argument>…</argument>` の形式に厳密に従い、前後に空白も含めて何もなければ 1"""
    if tag_reward(raw) != 1.0:
        return 0
    return 1 if _FORMAT_RE.fullmatch(raw) else 0


def _ngrams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def repetition_penalty(
    current_tokens: Sequence[str],
    previous_tokens: Sequence[Sequence[str]],
    n: int = 8,
    threshold: float = 0.1,
) -> Tuple[float, float]:
    """
    過去の説得側 argument との n-gram 重複率 τ と繰り返しペナルティを返す。

    τ は現在の argument の n-gram 出現（多重集合）のうち、
    過去 argument の n-gram 集合に含まれるものの割合。
    ペナルティは min(0, threshold - τ)。

    Returns:
        (τ, r_repeat)
    """
    grams = _ngrams(current_tokens, n)
    if not grams:
        return 0.0, 0.0
    seen = set()
    for tokens in previous_tokens:
        seen.update(_ngrams(tokens, n))
    tau = sum(1 for g in grams if g in seen) / len(grams)
    return tau, min(0.0, threshold - tau)


def overlength_penalty(length: int, max_tokens: int = 200, floor: float = -0.5) -> float:
    """max(floor, min(0, -(l - max) / max))"""
    if length < 0:
        raise ValueError(f"長さは 0 以上で指定してください: {length}")
    return max(floor, min(0.0, -(length - max_tokens) / max_tokens))


def combine(
    persuade: float,
    format: float,
    tag: float,
    repeat: float,
    overlength: float,
    weights: Optional[RewardWeights] = None,
) -> float:
    """最終報酬 = persuade + Σ 重み × 補助報酬"""
    w = weights or RewardWeights()
    return (
        persuade
        + w.format * format
        + w.tag * tag
        + w.repeat * repeat
        + w.overlength * overlength
    )


def score_turn(
    raw: str,
    thought: str,
    argument: str,
    previous_arguments: Sequence[str],
    s_prev: float,
    s_new: float,
    settings: Optional[RewardSettings] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> RewardBreakdown:
    """
    説得側1ターン分の報酬内訳を計算する。

    Args:
        raw: 説得側モデルの生出力
        thought: 抽出した thought
        argument: 抽出した argument（長さ・繰り返しの対象）
        previous_arguments: それ以前の説得側 argument
        s_prev: ターン前の同意スコア
        s_new: 被説得側の応答後の同意スコア
        settings: 報酬設定
        tokenizer: トークナイザ（省略時は settings.tokenizer）

    Returns:
        RewardBreakdown
    """
    s = settings or RewardSettings()
    tokenizer = tokenizer or build_tokenizer(s)
    current = tokenizer(argument)
    tau, repeat = repetition_penalty(
        current,
        [tokenizer(a) for a in previous_arguments],
        n=s.ngram,
        threshold=s.overlap_threshold,
    )
    persuade = persuasion_reward(s_prev, s_new)
    fmt = format_reward(raw)
    tag = tag_reward(raw)
    overlength = overlength_penalty(len(current), s.max_argument_tokens, s.overlength_floor)
    final = combine(persuade, fmt, tag, repeat, overlength, s.weights)

    logger.debug(
        "報酬: persuade=%.4f, format=%d, tag=%.2f, repeat=%.4f, overlength=%.4f, final=%.4f",
        persuade, fmt, tag, repeat, overlength, final,
    )
    return RewardBreakdown(
        persuade=persuade,
        format=fmt,
        tag=tag,
        repeat=repeat,
        overlength=overlength,
        overlap_rate=tau,
        argument_len=len(current),
        thought_len=len(tokenizer(thought)),
        final=final,
    )
