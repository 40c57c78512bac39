"""
データサービス

- コーパス取り込み（CMV / Anthropic / args.me / 独自形式の JSON Lines）
- トピックからの主張ペア生成
- 態度予測器の学習データ（D_ToM）構築・クラス均衡化・分割
- 外部 RL トレーナー向けロールアウトの書き出し
"""

import asyncio
import enum
import functools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from persuasion.config import GenerationSettings
from persuasion.core import (
    Claim,
    ClaimPair,
    ConversationRecord,
    Polarity,
    RewardBreakdown,
    Speaker,
    make_id,
    render_history,
    write_jsonl,
)
from persuasion.errors import MissingClassError, MissingLabelError, PairParseError
from persuasion.services.gateway import ChatBackend, ChatRequest, load_template
from persuasion.services.predictor import N_CLASSES, PredictorDataset, PredictorExample, Split

logger = logging.getLogger(__name__)

ROLLOUT_SCHEMA_VERSION = 1


class TopicSource(str, enum.Enum):
    CMV = "CMV"
    ANTHROPIC = "ANTHROPIC"
    ARGSME = "ARGSME"
    CUSTOM = "CUSTOM"


class Topic(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    source: TopicSource
    text: str

    @field_validator("text")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("トピック本文が空です")
        return v


# ========================================
# 取り込み
# ========================================

def _join(*parts: Any) -> str:
    return "\n\n".join(str(p).strip() for p in parts if p and str(p).strip())


# 各コーパスのネイティブな1行 → 本文。正規化済みの "text" があればそれを優先する
_SOURCE_ADAPTERS: Dict[TopicSource, Callable[[Dict[str, Any]], str]] = {
    TopicSource.CMV: lambda obj: _join(obj.get("title"), obj.get("selftext")),
    TopicSource.ANTHROPIC: lambda obj: _join(obj.get("claim")),
    TopicSource.ARGSME: lambda obj: _join(obj.get("conclusion"), obj.get("premise")),
    TopicSource.CUSTOM: lambda obj: "",
}


def _topic_text(obj: Dict[str, Any], source: TopicSource) -> str:
    text = obj.get("text")
    if isinstance(text, str) and text.strip():
        return text
    return _SOURCE_ADAPTERS[source](obj)


def ingest(path: Union[str, Path], source: Union[TopicSource, str]) -> List[Topic]:
    """
    JSON Lines のコーパスを読み込む。

    ID は (source, text) のハッシュで安定。不正な行は行番号付きで警告してスキップする。

    Raises:
        FileNotFoundError: ファイルがない
    """
    source = TopicSource(source.upper() if isinstance(source, str) else source)
    topics: List[Topic] = []
    skipped = 0
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("JSON オブジェクトではありません")
                text = _topic_text(obj, source)
                topics.append(Topic(id=make_id(source.value, text), source=source, text=text))
            except ValueError as e:
                skipped += 1
                logger.warning("不正な行をスキップ: path=%s, line=%d, error=%s", path, line_no, e)
    logger.info("取り込み完了: source=%s, topics=%d, skipped=%d", source.value, len(topics), skipped)
    return topics


# ========================================
# 主張ペア生成
# ========================================

def generate_claim_pair(
    backend: ChatBackend,
    topic: Topic,
    settings: Optional[GenerationSettings] = None,
    seed: Optional[int] = None,
) -> ClaimPair:
    """
    トピックから賛否2つの主張を生成する。

    空でない最初の2行を PRO / CON とする。3行以上なら警告して先頭2行を使う。

    Raises:
        PairParseError: 再試行後も2行に満たない
    """
    s = settings or GenerationSettings()
    request = ChatRequest(
        system_prompt=load_template("claim_pair_system").body,
        user_prompt=topic.text,
        temperature=s.temperature,
        max_tokens=s.max_tokens,
        seed=seed,
    )
    attempts = s.parse_retries + 1
    for attempt in range(1, attempts + 1):
        lines = [line.strip() for line in backend.chat(request).splitlines() if line.strip()]
        if len(lines) >= 2:
            if len(lines) > 2:
                logger.warning("主張ペアの出力が %d 行あります。先頭2行を使います: topic=%s", len(lines), topic.id)
            return ClaimPair(
                pro=Claim.create(lines[0], topic.id, Polarity.PRO),
                con=Claim.create(lines[1], topic.id, Polarity.CON),
            )
        logger.warning("主張ペアのパース失敗: topic=%s, lines=%d, attempt=%d/%d", topic.id, len(lines), attempt, attempts)
    raise PairParseError(f"主張ペアを取得できませんでした: topic={topic.id}")


def generate_claim_pairs(
    backend: ChatBackend,
    topics: Sequence[Topic],
    settings: Optional[GenerationSettings] = None,
    seed: int = 0,
    max_parallel: int = 4,
) -> Tuple[List[ClaimPair], List[str]]:
    """
    トピックごとに並列で主張ペアを生成する。

    Returns:
        (トピック順のペア, 失敗したトピック ID)
    """

    def _one(index: int) -> Optional[ClaimPair]:
        try:
            return generate_claim_pair(backend, topics[index], settings, seed + index)
        except PairParseError as e:
            logger.error("主張ペア生成失敗: %s", e)
            return None

    async def _gather() -> List[Optional[ClaimPair]]:
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            futures = [loop.run_in_executor(pool, functools.partial(_one, i)) for i in range(len(topics))]
            return list(await asyncio.gather(*futures))

    results = asyncio.run(_gather()) if topics else []
    pairs = [p for p in results if p is not None]
    failed = [t.id for t, p in zip(topics, results) if p is None]
    logger.info("主張ペア生成完了: ok=%d, failed=%d", len(pairs), len(failed))
    return pairs, failed


# ========================================
# 態度予測データ
# ========================================

def _record_examples(record: ConversationRecord, claims_per_record: Optional[int]) -> Iterator[PredictorExample]:
    k = len(record.counterclaims) if claims_per_record is None else claims_per_record
    if k > len(record.counterclaims) or (k > 0 and len(record.paired_claims) < k):
        raise MissingLabelError(
            f"主張数が不足しています: record={record.pair.id}/{record.trial}, k={k}, "
            f"counterclaims={len(record.counterclaims)}, paired={len(record.paired_claims)}"
        )
    extra = list(record.counterclaims[:k]) + list(record.paired_claims[:k])
    judgments = {j.history_len: j for j in record.judgments}
    labels = {cl.history_len: cl.levels for cl in record.claim_labels}
    n = sum(1 for t in record.history.turns if t.speaker is Speaker.PERSUADEE)

    for i in range(1, n + 1):
        prefix_len = 2 * i
        judgment = judgments.get(prefix_len)
        if judgment is None:
            raise MissingLabelError(f"H_{prefix_len} の判定がありません: record={record.pair.id}")
        history_text = render_history(record.history.prefix(prefix_len))
        topic_text = record.pair.pro.text
        yield PredictorExample(
            history_text=history_text, claim_text=record.pair.pro.text, label=judgment.s_pro, topic_text=topic_text
        )
        yield PredictorExample(
            history_text=history_text, claim_text=record.pair.con.text, label=judgment.s_con, topic_text=topic_text
        )
        if not extra:
            continue
        levels = labels.get(prefix_len, {})
        for claim in extra:
            if claim.id not in levels:
                raise MissingLabelError(f"H_{prefix_len} の主張ラベルがありません: claim={claim.id}")
            yield PredictorExample(
                history_text=history_text, claim_text=claim.text, label=levels[claim.id], topic_text=topic_text
            )


def build_tom_dataset(
    records: Iterable[ConversationRecord],
    claims_per_record: Optional[int] = None,
    split: Split = Split.TRAIN,
) -> PredictorDataset:
    """
    会話記録から態度予測の学習例を作る。

    被説得側ターン後の各プレフィックス H_2, H_4, ... と
    {Q, ¬Q, ¬q_1..k, q_1..k} の組ごとに1例。無効な記録は除外する。

    Raises:
        MissingLabelError: ラベルのない (プレフィックス, 主張) がある
    """
    examples: List[PredictorExample] = []
    used = 0
    for record in records:
        if not record.valid:
            continue
        examples.extend(_record_examples(record, claims_per_record))
        used += 1
    dataset = PredictorDataset(split=split, examples=tuple(examples))
    logger.info("D_ToM 構築: records=%d, examples=%d, counts=%s", used, len(examples), dataset.class_counts)
    return dataset


def balance(dataset: PredictorDataset, seed: int = 0) -> PredictorDataset:
    """
    多数クラスを最小クラスの件数まで一様にダウンサンプリングする（元の順序を保つ）。

    Raises:
        MissingClassError: 1件もないクラスがある
    """
    counts = dataset.class_counts
    missing = [level for level in range(N_CLASSES) if counts[level] == 0]
    if missing:
        raise MissingClassError(missing)
    target = min(counts)
    rng = np.random.default_rng(seed)
    labels = np.array([int(ex.label) for ex in dataset.examples])
    keep: List[int] = []
    for level in range(N_CLASSES):
        indices = np.flatnonzero(labels == level)
        keep.extend(int(i) for i in rng.choice(indices, size=target, replace=False))
    keep.sort()
    logger.info("均衡化: %s → %d/クラス", counts, target)
    return dataset.model_copy(update={"examples": tuple(dataset.examples[i] for i in keep)})


def _split_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"分割比率は非負で合計 1 にしてください: {fractions}")
    bounds = np.floor(np.cumsum(fractions) * n + 1e-9).astype(int)
    bounds[-1] = n
    return list(np.diff(np.concatenate([[0], bounds])))


def split_topics(
    topics: Sequence[Topic],
    fractions: Sequence[float] = (0.9, 0.1),
    seed: int = 0,
) -> List[List[Topic]]:
    """シード固定でトピックを分割する"""
    order = np.random.default_rng(seed).permutation(len(topics))
    parts: List[List[Topic]] = []
    start = 0
    for size in _split_sizes(len(topics), fractions):
        parts.append([topics[i] for i in order[start:start + size]])
        start += size
    return parts


class TopicSplit(BaseModel):
    """トピック分割の記録（genpairs のサマリ）"""

    model_config = ConfigDict(frozen=True)

    seed: int
    fractions: Tuple[float, float]
    train_topics: List[str]
    val_topics: List[str]
    train_pairs: int
    val_pairs: int
    failed_topics: List[str] = Field(default_factory=list)


def split_records(
    records: Sequence[ConversationRecord],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Dict[Split, List[ConversationRecord]]:
    """
    会話記録を TRAIN / VAL / TEST に分割する。

    同じ主張ペアの記録は同じ分割に入る。
    """
    if len(fractions) != 3:
        raise ValueError("分割比率は3つ指定してください")
    pair_ids = list(dict.fromkeys(r.pair.id for r in records))
    order = np.random.default_rng(seed).permutation(len(pair_ids))
    assignment: Dict[str, Split] = {}
    start = 0
    for split, size in zip(Split, _split_sizes(len(pair_ids), fractions)):
        for i in order[start:start + size]:
            assignment[pair_ids[i]] = split
        start += size
    result: Dict[Split, List[ConversationRecord]] = {split: [] for split in Split}
    for record in records:
        result[assignment[record.pair.id]].append(record)
    return result


# ========================================
# ロールアウト
# ========================================

class TrainerMetadata(BaseModel):
    """外部 PPO トレーナー向けのハイパーパラメータ"""

    model_config = ConfigDict(frozen=True)

    actor_lr: float = 1e-6
    critic_lr: float = 2e-6
    warmup_ratio: float = 0.2
    rollout_temperature: float = 1.0
    kl_coef: float = 0.001
    train_batch_size: int = 128
    ppo_mini_batch_size: int = 64
    ppo_micro_batch_size: int = 32
    training_steps: int = 200
    max_input_length: int = 3000
    max_response_length: int = 1000
    max_argument_length: int = 200
    num_counterclaims: int = 3
    persuasion_turns: int = 3


class RolloutRecord(BaseModel):
    """単一ターンに分解した (プロンプト, 応答, 報酬)"""

    model_config = ConfigDict(frozen=True)

    schema_version: int = ROLLOUT_SCHEMA_VERSION
    system_prompt: str
    user_prompt: str = Field(min_length=1)
    response: str
    breakdown: RewardBreakdown
    pair_id: str
    claim_id: str
    anti_claim_id: str
    turn_index: int = Field(ge=1)
    record_seed: int
    trial: int
    trainer_metadata: TrainerMetadata = Field(default_factory=TrainerMetadata)


def rollouts(
    records: Iterable[ConversationRecord],
    metadata: Optional[TrainerMetadata] = None,
) -> Iterator[RolloutRecord]:
    """説得側の各ターンを1件のロールアウトとして返す（無効な記録は除外）"""
    metadata = metadata or TrainerMetadata()
    for record in records:
        if not record.valid:
            logger.warning("無効な記録をスキップ: pair=%s, trial=%d", record.pair.id, record.trial)
            continue
        persuader_turns = [t for t in record.history.turns if t.speaker is Speaker.PERSUADER]
        for turn, prompt, breakdown in zip(persuader_turns, record.prompts, record.per_turn_rewards):
            yield RolloutRecord(
                system_prompt=prompt.system,
                user_prompt=prompt.user,
                response=turn.raw,
                breakdown=breakdown,
                pair_id=record.pair.id,
                claim_id=record.pair.pro.id,
                anti_claim_id=record.pair.con.id,
                turn_index=turn.index,
                record_seed=record.seed,
                trial=record.trial,
                trainer_metadata=metadata,
            )


def export_rollouts(
    records: Iterable[ConversationRecord],
    path: Union[str, Path],
    metadata: Optional[TrainerMetadata] = None,
) -> int:
    """ロールアウトを JSON Lines で書き出し、件数を返す"""
    count = write_jsonl(path, rollouts(records, metadata))
    logger.info("ロールアウト書き出し: path=%s, rollouts=%d", path, count)
    return count
