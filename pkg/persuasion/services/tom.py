"""
ToM（相手モデル化）サービス

- 反対主張 ¬q_1..k の生成（説得側に反対側の理由を列挙させる）
- 主張の否定文 q_i の生成
- 主張集合どうしの類似度（コサイン類似度 + ハンガリアン法による最適対応）
- 複数モデルが生成した主張集合の比較
"""

import itertools
import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict
from scipy.optimize import linear_sum_assignment

from persuasion.config import GenerationSettings
from persuasion.core import Claim, ClaimPair, Polarity, extract_tagged
from persuasion.errors import CounterclaimParseError, NegationParseError, NonSquareMatrixError
from persuasion.services.gateway import (
    ChatBackend,
    ChatRequest,
    EmbeddingBackend,
    cosine,
    load_template,
    render_prompt,
)

logger = logging.getLogger(__name__)

_ITEM_RE = re.compile(r"^\s*(?:\d+\s*[.)]|-)\s+(.+?)\s*$")
_QUOTES = "\"'“”‘’"


@dataclass(frozen=True)
class SimilarityMatrix:
    """行 = 集合 A、列 = 集合 B のコサイン類似度"""

    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("類似度行列は2次元にしてください")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("類似度行列に非有限値があります")

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])


class Matching(BaseModel):
    model_config = ConfigDict(frozen=True)

    assignment: Dict[int, int]
    total: float
    mean: float


def hungarian(sim: SimilarityMatrix) -> Matching:
    """
    類似度の総和を最大化する1対1対応を求める（厳密解）。

    Raises:
        NonSquareMatrixError: 正方行列でない、または空
    """
    if sim.rows != sim.cols or sim.rows == 0:
        raise NonSquareMatrixError(f"正方行列ではありません: {sim.rows}x{sim.cols}")
    row_ind, col_ind = linear_sum_assignment(sim.values, maximize=True)
    assignment = {int(r): int(c) for r, c in zip(row_ind, col_ind)}
    # 行順の和（総当たりと同じ加算順）
    total = sum(float(sim.values[r, assignment[r]]) for r in range(sim.rows))
    return Matching(assignment=assignment, total=total, mean=total / sim.rows)


def _text(item: Union[Claim, str]) -> str:
    return item.text if isinstance(item, Claim) else item


def similarity_matrix(
    embed_backend: EmbeddingBackend,
    a: Sequence[Union[Claim, str]],
    b: Sequence[Union[Claim, str]],
) -> SimilarityMatrix:
    vectors_a = [embed_backend.embed(_text(x)) for x in a]
    vectors_b = [embed_backend.embed(_text(y)) for y in b]
    values = np.array([[cosine(u, v) for v in vectors_b] for u in vectors_a], dtype=np.float64)
    return SimilarityMatrix(values=values.reshape(len(a), len(b)))


def match_claim_sets(
    embed_backend: EmbeddingBackend,
    a: Sequence[Union[Claim, str]],
    b: Sequence[Union[Claim, str]],
) -> Matching:
    """
    2つの主張集合を埋め込み、最適対応の平均類似度を求める。

    Raises:
        NonSquareMatrixError: |A| != |B| または空
    """
    if len(a) != len(b) or not a:
        raise NonSquareMatrixError(f"主張集合のサイズが不正です: {len(a)} vs {len(b)}")
    matching = hungarian(similarity_matrix(embed_backend, a, b))
    logger.info("主張集合マッチング: n=%d, mean=%.4f", len(a), matching.mean)
    return matching


def parse_numbered_list(raw: str) -> List[str]:
    """
    "1." / "1)" / "- " 形式の箇条書きを取り出す。

    <thought> ブロックは除外し、項目を囲む引用符は取り除く。
    """
    thought = extract_tagged(raw, "thought")
    if thought is not None:
        raw = raw.replace(f"<thought>{thought}</thought>", "")
    items = []
    for line in raw.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            item = m.group(1).strip().strip(_QUOTES).strip()
            if item:
                items.append(item)
    return items


def generate_counterclaims(
    backend: ChatBackend,
    claim: Claim,
    anti_claim: Claim,
    k: int = 3,
    settings: Optional[GenerationSettings] = None,
    seed: Optional[int] = None,
) -> List[Claim]:
    """
    目標主張 Q に反対する主張 ¬q_1..k を生成する。

    反対主張プロンプトの <anti_claim> に ¬Q を入れて 10 個の理由を出させ、
    説得力順の先頭 k 個を CON の主張として返す。

    Raises:
        CounterclaimParseError: 再試行後も k 個に満たない
    """
    if k < 1:
        raise ValueError(f"k は 1 以上で指定してください: {k}")
    s = settings or GenerationSettings()
    request = ChatRequest(
        system_prompt=render_prompt(load_template("persuader_system"), {"claim": claim.text}),
        user_prompt=render_prompt(load_template("counterclaim"), {"anti_claim": anti_claim.text}),
        temperature=s.temperature,
        max_tokens=s.max_tokens,
        seed=seed,
    )
    attempts = s.parse_retries + 1
    for attempt in range(1, attempts + 1):
        items = parse_numbered_list(backend.chat(request))
        if len(items) >= k:
            return [Claim.create(text, claim.topic_id, Polarity.CON) for text in items[:k]]
        logger.warning(
            "反対主張のパース不足: claim=%s, parsed=%d, k=%d, attempt=%d/%d",
            claim.id, len(items), k, attempt, attempts,
        )
    raise CounterclaimParseError(f"反対主張を {k} 個取得できませんでした: claim={claim.id}")


def negate_claim(
    backend: ChatBackend,
    claim: Claim,
    settings: Optional[GenerationSettings] = None,
    seed: Optional[int] = None,
) -> Claim:
    """
    主張の直接の否定文を生成する（topic_id は同じ、polarity は反転）。

    Raises:
        NegationParseError: 再試行後も <answer> を取得できない
    """
    s = settings or GenerationSettings()
    request = ChatRequest(
        user_prompt=render_prompt(load_template("negate_claim"), {"claim": claim.text}),
        temperature=s.temperature,
        max_tokens=s.max_tokens,
        seed=seed,
    )
    attempts = s.parse_retries + 1
    for attempt in range(1, attempts + 1):
        answer = extract_tagged(backend.chat(request), "answer")
        text = (answer or "").strip().strip(_QUOTES).strip()
        if text and text != claim.text:
            return Claim.create(text, claim.topic_id, claim.polarity.flipped())
        logger.warning("否定文のパース失敗: claim=%s, attempt=%d/%d", claim.id, attempt, attempts)
    raise NegationParseError(f"否定文を取得できませんでした: claim={claim.id}")


# ========================================
# モデル間の主張比較
# ========================================

class ModelComparison(BaseModel):
    """2つのモデルが生成した主張集合の平均マッチング類似度"""

    model_config = ConfigDict(frozen=True)

    model_a: str
    model_b: str
    mean_similarity: float
    n_pairs: int


def compare_models(
    backends: Sequence[Tuple[str, ChatBackend]],
    embed_backend: EmbeddingBackend,
    pairs: Sequence[ClaimPair],
    k: int = 3,
    settings: Optional[GenerationSettings] = None,
    seed: Optional[int] = None,
) -> List[ModelComparison]:
    """
    各モデルにペアごとに ¬Q を支持する主張を k 個生成させ、
    モデルの組ごとに主張集合をハンガリアン法で対応付けて平均類似度を求める。

    生成に失敗したペアは、そのモデルを含む組の集計から除く。

    Args:
        backends: (名前, バックエンド) のリスト（名前は重複不可）
        embed_backend: 埋め込みバックエンド
        pairs: 主張ペア
        k: モデルごとの主張数

    Raises:
        ValueError: モデルが2つ未満、名前の重複、またはペアが空
    """
    names = [name for name, _ in backends]
    if len(names) < 2 or len(set(names)) != len(names):
        raise ValueError(f"比較するモデルは重複なしで2つ以上指定してください: {names}")
    if not pairs:
        raise ValueError("主張ペアが空です")

    # Step 1: モデルごとに主張を生成
    generated: Dict[str, Dict[str, List[Claim]]] = {}
    for name, backend in backends:
        generated[name] = {}
        for pair in pairs:
            try:
                generated[name][pair.id] = generate_counterclaims(backend, pair.pro, pair.con, k, settings, seed)
            except CounterclaimParseError as e:
                logger.warning("主張生成失敗: model=%s, pair=%s, %s", name, pair.id, e)

    # Step 2: モデルの組ごとにマッチング
    results = []
    for a, b in itertools.combinations(names, 2):
        means = [
            match_claim_sets(embed_backend, generated[a][pair.id], generated[b][pair.id]).mean
            for pair in pairs
            if pair.id in generated[a] and pair.id in generated[b]
        ]
        mean = float(np.mean(means)) if means else float("nan")
        logger.info("モデル比較: %s vs %s, n_pairs=%d, mean=%.4f", a, b, len(means), mean)
        results.append(ModelComparison(model_a=a, model_b=b, mean_similarity=mean, n_pairs=len(means)))
    return results
