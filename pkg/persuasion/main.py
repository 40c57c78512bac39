"""
説得実験 CLI

サブコマンドで各サービス（取り込み・ペア生成・会話・評価・予測器・
ロールアウト・注釈・レポート）を呼び出す。

    python -m persuasion.main --config config.toml evaluate --pairs pairs.jsonl
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import requests
from dotenv import load_dotenv
from pydantic import ValidationError

from persuasion.config import RunConfig, Settings, TomMode, load_settings
from persuasion.core import ClaimPair, ConversationRecord, read_jsonl, write_jsonl
from persuasion.errors import MissingClassError, PersuasionError
from persuasion.services import annotation, data, predictor, report, tom
from persuasion.services.gateway import build_chat_backend, build_embedding_backend
from persuasion.services.orchestrator import ExperimentReport, PersuasionRunner, summarize_experiment
from persuasion.services.scoring import AttitudeJudge

logger = logging.getLogger(__name__)


# ========================================
# 共通
# ========================================

def _run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    """設定ファイルの RunConfig にコマンドライン指定を上書きする"""
    update = {}
    for key in ("n_turns", "k", "trials", "seed", "max_parallel"):
        value = getattr(args, key, None)
        if value is not None:
            update[key] = value
    if getattr(args, "tom_mode", None):
        update["tom_mode"] = TomMode(args.tom_mode)
    if getattr(args, "exclude_initial_above_half", False):
        update["exclude_initial_above_half"] = True
    return RunConfig.model_validate({**settings.run.model_dump(), **update})


def _chat(settings: Settings, name: str):
    return build_chat_backend(name, settings.backend(name))


def _embedder(settings: Settings):
    name = settings.run.roles.embedder
    return build_embedding_backend(name, settings.backend(name))


def _build_runner(args: argparse.Namespace, settings: Settings, config: RunConfig) -> PersuasionRunner:
    roles = config.roles
    attitude_predictor = None
    if config.tom_mode is TomMode.PREDICTED:
        checkpoint_path = getattr(args, "checkpoint", None) or settings.paths.checkpoint
        checkpoint = predictor.PredictorCheckpoint.load(checkpoint_path)
        attitude_predictor = predictor.AttitudePredictor(checkpoint, _embedder(settings))
    return PersuasionRunner(
        config,
        persuader=_chat(settings, roles.persuader),
        persuadee=_chat(settings, roles.persuadee),
        judge=_chat(settings, roles.judge),
        generator=_chat(settings, roles.generator),
        predictor=attitude_predictor,
        scoring=settings.scoring,
        generation=settings.generation,
        rewards=settings.rewards,
    )


def _read_lines(path: str) -> List[str]:
    """1行1主張のテキストファイル"""
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _load_dataset(path: str, split: predictor.Split) -> predictor.PredictorDataset:
    examples = read_jsonl(path, predictor.PredictorExample)
    return predictor.PredictorDataset(split=split, examples=tuple(examples))


def _write_json(path: Path, payload: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload + "\n", encoding="utf-8")


# ========================================
# サブコマンド
# ========================================

def cmd_ingest(args: argparse.Namespace, settings: Settings) -> int:
    topics = data.ingest(args.input, args.source)
    write_jsonl(args.out, topics)
    return 0


def cmd_genpairs(args: argparse.Namespace, settings: Settings) -> int:
    topics = read_jsonl(args.input, data.Topic)
    config = _run_config(args, settings)
    pairs, failed = data.generate_claim_pairs(
        _chat(settings, config.roles.generator),
        topics,
        settings.generation,
        seed=config.seed,
        max_parallel=config.max_parallel,
    )
    write_jsonl(args.out, pairs)
    if failed:
        logger.warning("ペア生成に失敗したトピック: %d 件", len(failed))
    if args.val_fraction is not None:
        _write_topic_split(Path(args.out), topics, pairs, failed, args.val_fraction, config.seed)
    return 0


def _write_topic_split(
    out: Path,
    topics: List[data.Topic],
    pairs: List[ClaimPair],
    failed: List[str],
    val_fraction: float,
    seed: int,
) -> None:
    """トピック単位で train/val に分け、<stem>.train/.val.jsonl と <stem>.split.json を書き出す"""
    fractions = (1.0 - val_fraction, val_fraction)
    train_topics, val_topics = data.split_topics(topics, fractions, seed=seed)
    val_ids = {t.id for t in val_topics}
    train_pairs = [p for p in pairs if p.pro.topic_id not in val_ids]
    val_pairs = [p for p in pairs if p.pro.topic_id in val_ids]
    write_jsonl(out.with_suffix(".train.jsonl"), train_pairs)
    write_jsonl(out.with_suffix(".val.jsonl"), val_pairs)
    split = data.TopicSplit(
        seed=seed,
        fractions=fractions,
        train_topics=[t.id for t in train_topics],
        val_topics=[t.id for t in val_topics],
        train_pairs=len(train_pairs),
        val_pairs=len(val_pairs),
        failed_topics=list(failed),
    )
    _write_json(out.with_suffix(".split.json"), split.model_dump_json(indent=2))
    logger.info("トピック分割: train=%d, val=%d, seed=%d", len(train_topics), len(val_topics), seed)


def cmd_converse(args: argparse.Namespace, settings: Settings) -> int:
    config = _run_config(args, settings)
    pairs = read_jsonl(args.pairs, ClaimPair)
    records = _build_runner(args, settings, config).collect(pairs)
    write_jsonl(args.out, records)
    return 0


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    config = _run_config(args, settings)
    pairs = read_jsonl(args.pairs, ClaimPair)
    records = _build_runner(args, settings, config).collect(pairs)
    out = Path(args.out)
    write_jsonl(out / "records.jsonl", records)
    summary = summarize_experiment(records, config)
    _write_json(out / "summary.json", summary.model_dump_json(indent=2))
    logger.info(
        "評価完了: corpus_mean=%s, invalid=%d, config_hash=%s",
        "n/a" if summary.corpus_mean is None else f"{summary.corpus_mean:.2f}%",
        summary.invalid_count, summary.config_hash,
    )
    return 0


def cmd_collect_tom(args: argparse.Namespace, settings: Settings) -> int:
    """実測ラベル付きの会話を集め、D_ToM の train/val/test を書き出す"""
    config = _run_config(args, settings).model_copy(update={"tom_mode": TomMode.GROUND_TRUTH})
    pairs = read_jsonl(args.pairs, ClaimPair)
    records = _build_runner(args, settings, config).collect(pairs)
    out = Path(args.out)
    write_jsonl(out / "records.jsonl", records)

    splits = data.split_records(records, seed=config.seed)
    for split, group in splits.items():
        dataset = data.build_tom_dataset(group, split=split)
        try:
            dataset = data.balance(dataset, seed=config.seed)
        except MissingClassError as e:
            logger.warning("均衡化できません（不均衡のまま出力）: split=%s, %s", split.value, e)
        write_jsonl(out / f"{split.value.lower()}.jsonl", dataset.examples)
    return 0


def cmd_train_predictor(args: argparse.Namespace, settings: Settings) -> int:
    train_config = settings.predictor
    if args.seed is not None:
        train_config = train_config.model_copy(update={"seed": args.seed})
    checkpoint = predictor.train(
        _load_dataset(args.train, predictor.Split.TRAIN),
        _load_dataset(args.val, predictor.Split.VAL),
        _embedder(settings),
        train_config,
    )
    checkpoint.save(args.out or settings.paths.checkpoint)
    logger.info("best_val_loss=%.4f (epoch %d)", checkpoint.best_val_loss, checkpoint.best_epoch)
    return 0


def cmd_eval_predictor(args: argparse.Namespace, settings: Settings) -> int:
    checkpoint = predictor.PredictorCheckpoint.load(args.checkpoint or settings.paths.checkpoint)
    dataset = _load_dataset(args.test, predictor.Split.TEST)
    em, mse = predictor.evaluate_dataset(checkpoint, _embedder(settings), dataset)
    labels = [int(ex.label) for ex in dataset.examples]
    seed = settings.run.seed if args.seed is None else args.seed
    base_em, base_mse = predictor.evaluate_predictions(predictor.random_guess_baseline(labels, seed), labels)
    result: Dict[str, Any] = {
        "n": len(labels),
        "predictor": {"em": em, "mse": mse},
        "random_guessing": {"em": base_em, "mse": base_mse},
    }
    logger.info("予測器: EM=%.2f%%, MSE=%.3f / ランダム: EM=%.2f%%, MSE=%.3f", 100 * em, mse, 100 * base_em, base_mse)

    if not args.skip_prompting:
        judge = AttitudeJudge(_chat(settings, settings.run.roles.judge), settings.scoring)
        predictions, answered, failed = predictor.prompting_baseline(judge, dataset, seed)
        row: Dict[str, Any] = {"em": None, "mse": None, "n": len(answered), "failed": failed}
        if answered:
            row["em"], row["mse"] = predictor.evaluate_predictions(predictions, answered)
            logger.info("LLM プロンプティング: EM=%.2f%%, MSE=%.3f, failed=%d", 100 * row["em"], row["mse"], failed)
        result["llm_prompting"] = row

    if args.out:
        _write_json(Path(args.out), json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_export_rollouts(args: argparse.Namespace, settings: Settings) -> int:
    records = read_jsonl(args.records, ConversationRecord)
    data.export_rollouts(records, args.out)
    return 0


def cmd_match_claims(args: argparse.Namespace, settings: Settings) -> int:
    """2つの主張ファイルの対応付け、または複数モデルが生成した主張集合の比較"""
    if args.models:
        if not args.pairs:
            raise ValueError("--models には --pairs が必要です")
        config = _run_config(args, settings)
        comparisons = tom.compare_models(
            [(name, _chat(settings, name)) for name in args.models],
            _embedder(settings),
            read_jsonl(args.pairs, ClaimPair),
            k=config.k,
            settings=settings.generation,
            seed=config.seed,
        )
        payload = json.dumps([c.model_dump(mode="json") for c in comparisons], indent=2)
    else:
        if not (args.a and args.b):
            raise ValueError("--a と --b、または --models と --pairs を指定してください")
        matching = tom.match_claim_sets(_embedder(settings), _read_lines(args.a), _read_lines(args.b))
        payload = json.dumps(
            {"assignment": {str(k): v for k, v in sorted(matching.assignment.items())},
             "total": matching.total, "mean": matching.mean},
            indent=2,
        )
    if args.out:
        _write_json(Path(args.out), payload)
    else:
        print(payload)
    return 0


def cmd_annotate(args: argparse.Namespace, settings: Settings) -> int:
    backend = _chat(settings, settings.run.roles.annotator)
    results = []
    for record in read_jsonl(args.records, ConversationRecord):
        if record.valid:
            results.extend(annotation.annotate_strategies(backend, record, settings.generation, record.seed))
    write_jsonl(args.out, results)
    return 0


def cmd_report(args: argparse.Namespace, settings: Settings) -> int:
    records: List[ConversationRecord] = []
    for path in args.records or []:
        records.extend(read_jsonl(path, ConversationRecord))
    experiments = [
        ExperimentReport.model_validate_json(Path(p).read_text(encoding="utf-8")) for p in args.experiments or []
    ]
    annotations: List[annotation.TurnStrategies] = []
    for path in args.annotations or []:
        annotations.extend(read_jsonl(path, annotation.TurnStrategies))
    report.write_report(args.out, records, experiments, annotations)
    return 0


_COMMANDS: Dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "ingest": cmd_ingest,
    "genpairs": cmd_genpairs,
    "converse": cmd_converse,
    "evaluate": cmd_evaluate,
    "collect-tom": cmd_collect_tom,
    "train-predictor": cmd_train_predictor,
    "eval-predictor": cmd_eval_predictor,
    "export-rollouts": cmd_export_rollouts,
    "match-claims": cmd_match_claims,
    "annotate": cmd_annotate,
    "report": cmd_report,
}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pairs", required=True, help="主張ペアの JSON Lines")
    p.add_argument("--tom-mode", choices=[m.value for m in TomMode])
    p.add_argument("--n-turns", type=int, help="説得側のターン数（長期モードは 10）")
    p.add_argument("--k", type=int, help="反対主張の数")
    p.add_argument("--trials", type=int)
    p.add_argument("--max-parallel", type=int)
    p.add_argument("--checkpoint", help="PREDICTED モードの予測器チェックポイント")


def _add_common_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS if suppress else None, help="TOML 設定ファイル")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else None, help="シードの上書き")
    p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False, help="DEBUG ログを出す")


def build_parser() -> argparse.ArgumentParser:
    """共通オプションはサブコマンドの前後どちらにも書ける"""
    parser = argparse.ArgumentParser(prog="persuasion", description="説得会話の実験ツール")
    _add_common_options(parser, suppress=False)
    # サブコマンド側は指定時のみ上書きする
    common = argparse.ArgumentParser(add_help=False)
    _add_common_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="コーパスを取り込む")
    p.add_argument("--source", required=True, choices=[s.value.lower() for s in data.TopicSource])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("genpairs", parents=[common], help="トピックから主張ペアを生成する")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, help="トピック単位で検証用に分ける割合（<stem>.train/.val.jsonl と <stem>.split.json を出力）")

    p = sub.add_parser("converse", parents=[common], help="会話を実行して記録を書き出す")
    _add_run_options(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="実験を実行してサマリを書き出す")
    _add_run_options(p)
    p.add_argument("--exclude-initial-above-half", action="store_true")
    p.add_argument("--out", required=True, help="出力ディレクトリ")

    p = sub.add_parser("collect-tom", parents=[common], help="実測ラベル付き会話から予測器データを作る")
    _add_run_options(p)
    p.add_argument("--out", required=True, help="出力ディレクトリ")

    p = sub.add_parser("train-predictor", parents=[common], help="態度予測器を学習する")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out")

    p = sub.add_parser("eval-predictor", parents=[common], help="態度予測器を評価する")
    p.add_argument("--checkpoint")
    p.add_argument("--test", required=True)
    p.add_argument("--skip-prompting", action="store_true", help="LLM プロンプティングとの比較を省く")
    p.add_argument("--out")

    p = sub.add_parser("export-rollouts", parents=[common], help="RL 用ロールアウトを書き出す")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("match-claims", parents=[common], help="主張集合の類似度を求める")
    p.add_argument("--a", help="1行1主張のテキスト")
    p.add_argument("--b", help="1行1主張のテキスト")
    p.add_argument("--models", nargs="+", help="主張を生成させて比較するチャットバックエンド名（2つ以上）")
    p.add_argument("--pairs", help="--models 用の主張ペア JSON Lines")
    p.add_argument("--k", type=int, help="モデルごとの主張数（既定は run.k）")
    p.add_argument("--out")

    p = sub.add_parser("annotate", parents=[common], help="説得戦略を注釈する")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="CSV / JSON レポートを出力する")
    p.add_argument("--records", nargs="*")
    p.add_argument("--experiments", nargs="*")
    p.add_argument("--annotations", nargs="*")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI エントリポイント。致命的エラーで 1 を返す"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config)
        return _COMMANDS[args.command](args, settings)
    except (PersuasionError, ValidationError, ValueError, OSError, requests.RequestException) as e:
        logger.error("%s に失敗しました: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
