"""
説得会話オーケストレーションサービス

説得側（Alice）と被説得側（Bob）を交互に発話させ、
H_0 と被説得側の各ターン後に態度を判定し、説得側の各ターンに報酬を付ける。
ToM 有効時は会話開始時に反対主張を生成し、説得側ターンごとに
相手の態度（予測または実測）を更新してプロンプトの先頭に差し込む。

複数会話は asyncio + run_in_executor でスレッドプールに委譲して並列実行する。
"""

import asyncio
import functools
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from persuasion.config import GenerationSettings, RewardSettings, RunConfig, ScoringSettings, TomMode
from persuasion.core import (
    PERSUADEE_NAME,
    AttitudeJudgment,
    Claim,
    ClaimLabels,
    ClaimPair,
    ConversationHistory,
    ConversationRecord,
    PromptPair,
    RewardBreakdown,
    Speaker,
    ToMContext,
    Turn,
    extract_tagged,
    make_id,
    render_history,
    strip_turn_tags,
)
from persuasion.errors import AttitudeElicitationError, PersuasionError
from persuasion.services.gateway import ChatBackend, ChatRequest, load_template, render_prompt
from persuasion.services.predictor import AttitudePredictor
from persuasion.services.rewards import Tokenizer, build_tokenizer, score_turn
from persuasion.services.scoring import AttitudeJudge
from persuasion.services.tom import generate_counterclaims, negate_claim

__all__ = [
    "ExperimentReport",
    "PairResult",
    "PersuasionRunner",
    "RunConfig",
    "TomMode",
    "build_persuadee_prompt",
    "build_persuader_prompt",
    "config_hash",
    "persuadee_turn",
    "persuader_turn",
    "render_tom_block",
    "summarize_experiment",
]

logger = logging.getLogger(__name__)


# ========================================
# プロンプト構築
# ========================================

def render_tom_block(tom_context: ToMContext) -> str:
    """
    ToM ブロックを描画する。

    態度付きの場合は各主張に "(Bob's agreement on this claim is X/8)" を付ける。
    反対主張が空なら空文字列。
    """
    if not tom_context.counterclaims:
        return ""
    entries = [load_template("tom_header").body]
    if tom_context.rendered_agreement:
        for claim, x in zip(tom_context.counterclaims, tom_context.rendered_agreement):
            entries.append(f'"{claim.text}" ({PERSUADEE_NAME}\'s agreement on this claim is {x}/8)')
    else:
        entries.extend(f'"{claim.text}"' for claim in tom_context.counterclaims)
    return "\n\n".join(entries)


def build_persuader_prompt(
    pair: ClaimPair,
    history: ConversationHistory,
    tom_context: Optional[ToMContext] = None,
) -> PromptPair:
    """
    説得側のシステム/ユーザープロンプトを組み立てる。

    ユーザープロンプトは ToM ブロック（あれば）、空行、
    会話履歴入りの次ターン指示の順。
    """
    system = render_prompt(load_template("persuader_system"), {"claim": pair.pro.text})
    user = render_prompt(load_template("persuader_next_turn"), {"turns": render_history(history)})
    block = render_tom_block(tom_context) if tom_context is not None else ""
    if block:
        user = f"{block}\n\n{user}"
    return PromptPair(system=system, user=user)


def build_persuadee_prompt(pair: ClaimPair, history: ConversationHistory) -> PromptPair:
    system = render_prompt(load_template("persuadee_system"), {"claim": pair.pro.text})
    user = render_prompt(load_template("persuadee_next_turn"), {"turns": render_history(history)})
    return PromptPair(system=system, user=user)


def _sample_turn(
    backend: ChatBackend,
    prompts: PromptPair,
    history: ConversationHistory,
    speaker: Speaker,
    temperature: float,
    max_tokens: int,
    seed: Optional[int],
) -> Turn:
    if history.next_speaker is not speaker:
        raise ValueError(f"次の話者は {history.next_speaker.value} です: requested={speaker.value}")
    raw = backend.chat(
        ChatRequest(
            system_prompt=prompts.system,
            user_prompt=prompts.user,
            temperature=temperature,
            max_tokens=max_tokens,
            seed=seed,
        )
    )
    thought = (extract_tagged(raw, "thought") or "").strip()
    argument = strip_turn_tags(extract_tagged(raw, "argument") or "")
    if not argument:
        logger.warning("argument を抽出できません: speaker=%s, turn=%d", speaker.value, len(history) + 1)
    return Turn(index=len(history) + 1, speaker=speaker, thought=thought, argument=argument, raw=raw)


def persuader_turn(
    backend: ChatBackend,
    prompts: PromptPair,
    history: ConversationHistory,
    temperature: float = 1.0,
    max_tokens: int = 1000,
    seed: Optional[int] = None,
) -> Turn:
    """
    説得側（奇数ターン）の発話を生成する。

    形式不正の出力も保持し、argument が取れなければ空文字列にする
    （報酬側で減点される）。
    """
    return _sample_turn(backend, prompts, history, Speaker.PERSUADER, temperature, max_tokens, seed)


def persuadee_turn(
    backend: ChatBackend,
    prompts: PromptPair,
    history: ConversationHistory,
    temperature: float = 1.0,
    max_tokens: int = 1000,
    seed: Optional[int] = None,
) -> Turn:
    return _sample_turn(backend, prompts, history, Speaker.PERSUADEE, temperature, max_tokens, seed)


# ========================================
# 会話実行
# ========================================

def config_hash(config: RunConfig) -> str:
    return make_id(json.dumps(config.model_dump(mode="json"), sort_keys=True))


def conversation_seed(base_seed: int, pair: ClaimPair, trial: int) -> int:
    """(実験シード, ペア, 試行) から決まる会話シード"""
    return int(make_id(str(base_seed), pair.id, str(trial)), 16) % (2 ** 31)


class PersuasionRunner:
    """
    会話ランナー。

    Args:
        config: 実行設定
        persuader: 説得側バックエンド
        persuadee: 被説得側バックエンド
        judge: 態度判定に使うバックエンド（省略時は被説得側）
        generator: 否定文生成に使うバックエンド（省略時は説得側）
        predictor: PREDICTED モードで使う態度予測器
    """

    def __init__(
        self,
        config: RunConfig,
        persuader: ChatBackend,
        persuadee: ChatBackend,
        judge: Optional[ChatBackend] = None,
        generator: Optional[ChatBackend] = None,
        predictor: Optional[AttitudePredictor] = None,
        scoring: Optional[ScoringSettings] = None,
        generation: Optional[GenerationSettings] = None,
        rewards: Optional[RewardSettings] = None,
        tokenizer: Optional[Tokenizer] = None,
    ):
        if config.tom_mode is TomMode.PREDICTED and predictor is None:
            raise ValueError("PREDICTED モードには態度予測器が必要です")
        self.config = config
        self.persuader = persuader
        self.persuadee = persuadee
        self.judge = AttitudeJudge(judge or persuadee, scoring)
        self.generator = generator or persuader
        self.predictor = predictor
        self.generation = generation or GenerationSettings()
        self.rewards = rewards or RewardSettings()
        self.tokenizer = tokenizer or build_tokenizer(self.rewards)

    def _prepare_tom(self, pair: ClaimPair, seeds: Iterator[int]) -> Tuple[List[Claim], List[Claim]]:
        """反対主張 ¬q_1..k と対の主張 q_1..k を生成する（会話ごとに1回）"""
        mode = self.config.tom_mode
        if mode is TomMode.OFF or self.config.k == 0:
            return [], []
        counterclaims = generate_counterclaims(
            self.persuader, pair.pro, pair.con, self.config.k, self.generation, next(seeds)
        )
        if mode is TomMode.COUNTERCLAIMS_ONLY:
            return counterclaims, []
        paired = [negate_claim(self.generator, c, self.generation, next(seeds)) for c in counterclaims]
        return counterclaims, paired

    def _label_claims(
        self,
        pair: ClaimPair,
        history: ConversationHistory,
        claims: Sequence[Claim],
        seeds: Iterator[int],
    ) -> ClaimLabels:
        levels = {c.id: self.judge.elicit_level(history, c, pair.pro, next(seeds)) for c in claims}
        return ClaimLabels(history_len=len(history), levels=levels)

    def _tom_context(
        self,
        history: ConversationHistory,
        counterclaims: List[Claim],
        paired: List[Claim],
        labels: Optional[ClaimLabels],
    ) -> ToMContext:
        mode = self.config.tom_mode
        if mode is TomMode.COUNTERCLAIMS_ONLY or not counterclaims:
            return ToMContext(counterclaims=tuple(counterclaims), paired_claims=tuple(paired))
        if mode is TomMode.GROUND_TRUTH:
            assert labels is not None
            levels = [(labels.levels[c.id], labels.levels[q.id]) for c, q in zip(counterclaims, paired)]
        else:
            predicted = self.predictor.predict(history, counterclaims + paired)
            k = len(counterclaims)
            levels = list(zip(predicted[:k], predicted[k:]))
        return ToMContext.with_levels(counterclaims, paired, levels)

    def run_conversation(self, pair: ClaimPair, trial: int = 0) -> ConversationRecord:
        """
        1会話を実行する。

        態度を取得できなかった場合は valid=False の部分記録を返す。
        """
        cfg = self.config
        seed = conversation_seed(cfg.seed, pair, trial)
        seeds = itertools.count(seed)
        history = ConversationHistory()
        judgments: List[AttitudeJudgment] = []
        rewards: List[RewardBreakdown] = []
        contexts: List[ToMContext] = []
        prompts: List[PromptPair] = []
        claim_labels: List[ClaimLabels] = []
        counterclaims: List[Claim] = []
        paired: List[Claim] = []

        def _record(valid: bool = True, error: Optional[str] = None) -> ConversationRecord:
            return ConversationRecord(
                pair=pair,
                history=history,
                judgments=tuple(judgments),
                per_turn_rewards=tuple(rewards),
                tom_contexts=tuple(contexts),
                prompts=tuple(prompts),
                counterclaims=tuple(counterclaims),
                paired_claims=tuple(paired),
                claim_labels=tuple(claim_labels),
                config=cfg.model_dump(mode="json"),
                seed=seed,
                trial=trial,
                valid=valid,
                error=error,
            )

        logger.info("会話開始: pair=%s, trial=%d, mode=%s, n_turns=%d", pair.id, trial, cfg.tom_mode.value, cfg.n_turns)
        try:
            counterclaims, paired = self._prepare_tom(pair, seeds)
            judgments.append(self.judge.judge(history, pair, next(seeds)))
            ground_truth = cfg.tom_mode is TomMode.GROUND_TRUTH and bool(counterclaims)
            if ground_truth:
                claim_labels.append(self._label_claims(pair, history, counterclaims + paired, seeds))
            logger.info("初期態度: score=%.3f", judgments[0].score)

            for round_no in range(1, cfg.n_turns + 1):
                # Step 1: ToM 更新
                context = None
                if cfg.tom_mode is not TomMode.OFF:
                    context = self._tom_context(
                        history, counterclaims, paired, claim_labels[-1] if claim_labels else None
                    )
                    contexts.append(context)

                # Step 2: 説得側ターン
                prompt = build_persuader_prompt(pair, history, context)
                prompts.append(prompt)
                previous_arguments = history.persuader_arguments()
                turn = persuader_turn(
                    self.persuader, prompt, history, cfg.temperature, cfg.max_tokens, next(seeds)
                )
                history = history.with_turn(turn.thought, turn.argument, turn.raw)

                # Step 3: 被説得側ターン
                reply = persuadee_turn(
                    self.persuadee,
                    build_persuadee_prompt(pair, history),
                    history,
                    cfg.temperature,
                    cfg.max_tokens,
                    next(seeds),
                )
                history = history.with_turn(reply.thought, reply.argument, reply.raw)

                # Step 4: 態度判定
                judgments.append(self.judge.judge(history, pair, next(seeds)))
                if ground_truth:
                    claim_labels.append(self._label_claims(pair, history, counterclaims + paired, seeds))

                # Step 5: 報酬
                rewards.append(
                    score_turn(
                        raw=turn.raw,
                        thought=turn.thought,
                        argument=turn.argument,
                        previous_arguments=previous_arguments,
                        s_prev=judgments[-2].score,
                        s_new=judgments[-1].score,
                        settings=self.rewards,
                        tokenizer=self.tokenizer,
                    )
                )
                logger.info(
                    "ラウンド %d/%d: score=%.3f, reward=%.4f",
                    round_no, cfg.n_turns, judgments[-1].score, rewards[-1].final,
                )
        except AttitudeElicitationError as e:
            logger.error("態度判定失敗のため会話を無効化: pair=%s, trial=%d, error=%s", pair.id, trial, e)
            return _record(valid=False, error=str(e))

        record = _record()
        logger.info("会話完了: pair=%s, trial=%d, shift=%.3f", pair.id, trial, record.agreement_shift)
        return record

    def _safe_conversation(self, pair: ClaimPair, trial: int) -> ConversationRecord:
        try:
            return self.run_conversation(pair, trial)
        except Exception as e:
            # 1試行の失敗で実験全体を止めない
            if isinstance(e, PersuasionError):
                logger.error("会話失敗: pair=%s, trial=%d, error=%s", pair.id, trial, e)
            else:
                logger.exception("会話中の想定外エラー: pair=%s, trial=%d", pair.id, trial)
            return ConversationRecord(
                pair=pair,
                history=ConversationHistory(),
                config=self.config.model_dump(mode="json"),
                seed=conversation_seed(self.config.seed, pair, trial),
                trial=trial,
                valid=False,
                error=str(e) or type(e).__name__,
            )

    async def _gather(self, jobs: List[Tuple[ClaimPair, int]]) -> List[ConversationRecord]:
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.config.max_parallel) as pool:
            futures = [
                loop.run_in_executor(pool, functools.partial(self._safe_conversation, pair, trial))
                for pair, trial in jobs
            ]
            return list(await asyncio.gather(*futures))

    def collect(self, pairs: Sequence[ClaimPair]) -> List[ConversationRecord]:
        """
        全ペア × trials 回の会話を並列に実行する。

        戻り値の順序は (ペア, 試行) の入力順で固定。
        """
        if not pairs:
            raise ValueError("ペアが空です")
        jobs = [(pair, trial) for pair in pairs for trial in range(self.config.trials)]
        logger.info("実験開始: pairs=%d, trials=%d, parallel=%d", len(pairs), self.config.trials, self.config.max_parallel)
        return asyncio.run(self._gather(jobs))

    def run_experiment(self, pairs: Sequence[ClaimPair]) -> "ExperimentReport":
        return summarize_experiment(self.collect(pairs), self.config)


# ========================================
# 集計
# ========================================

class PairResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    pair_id: str
    claim: str
    trials: int
    valid_trials: int
    invalid_trials: int
    excluded_trials: int = 0
    shifts: List[float]
    mean_shift: Optional[float] = None
    evaluated: bool


class ExperimentReport(BaseModel):
    """
    実験サマリ。シフトの平均値はパーセント（0.75 → 75.0）。

    trajectory[i] は有効会話の i 回目判定（H_0 が 0）のスコア平均。
    """

    model_config = ConfigDict(frozen=True)

    persuader: str
    persuadee: str
    corpus: str
    tom_mode: TomMode
    n_turns: int
    trials: int
    seed: int
    config_hash: str
    pairs: List[PairResult]
    corpus_mean: Optional[float] = None
    trajectory: List[float]
    invalid_count: int
    excluded_count: int
    initial_above_half_count: int


def summarize_experiment(records: Sequence[ConversationRecord], config: RunConfig) -> ExperimentReport:
    """会話記録を集計する（ペアは初出順）"""
    by_pair: Dict[str, List[ConversationRecord]] = {}
    for record in records:
        by_pair.setdefault(record.pair.id, []).append(record)

    pair_results: List[PairResult] = []
    included: List[ConversationRecord] = []
    excluded = 0
    for pair_id, group in by_pair.items():
        valid = [r for r in group if r.valid]
        kept = valid
        if config.exclude_initial_above_half:
            kept = [r for r in valid if not r.initial_above_half]
        excluded += len(valid) - len(kept)
        shifts = [r.agreement_shift for r in kept]
        included.extend(kept)
        if not shifts:
            logger.warning("評価不能なペア: pair=%s, invalid=%d", pair_id, len(group) - len(valid))
        pair_results.append(
            PairResult(
                pair_id=pair_id,
                claim=group[0].pair.pro.text,
                trials=len(group),
                valid_trials=len(valid),
                invalid_trials=len(group) - len(valid),
                excluded_trials=len(valid) - len(kept),
                shifts=shifts,
                mean_shift=100.0 * float(np.mean(shifts)) if shifts else None,
                evaluated=bool(shifts),
            )
        )

    evaluated = [p.mean_shift for p in pair_results if p.mean_shift is not None]
    trajectory: List[float] = []
    if included:
        depth = max(len(r.judgments) for r in included)
        for i in range(depth):
            column = [r.judgments[i].score for r in included if len(r.judgments) > i]
            trajectory.append(float(np.mean(column)))

    roles = config.roles
    return ExperimentReport(
        persuader=roles.persuader,
        persuadee=roles.persuadee,
        corpus=config.corpus,
        tom_mode=config.tom_mode,
        n_turns=config.n_turns,
        trials=config.trials,
        seed=config.seed,
        config_hash=config_hash(config),
        pairs=pair_results,
        corpus_mean=float(np.mean(evaluated)) if evaluated else None,
        trajectory=trajectory,
        invalid_count=sum(1 for r in records if not r.valid),
        excluded_count=excluded,
        initial_above_half_count=sum(1 for r in records if r.valid and r.initial_above_half),
    )
