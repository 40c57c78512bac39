"""
レポート出力サービス

会話記録・実験サマリ・戦略注釈から CSV 表と JSON サマリを出力する。
数値は固定小数点で書き出すため、同じ入力からは同じバイト列になる。
"""

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd

from persuasion.core import ConversationRecord
from persuasion.services.annotation import StrategyLabel, TurnStrategies
from persuasion.services.orchestrator import ExperimentReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
PRECISION = 6


def shifts_table(records: Sequence[ConversationRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        rows.append({
            "pair_id": r.pair.id,
            "trial": r.trial,
            "valid": r.valid,
            "initial_score": r.scores[0] if r.scores else None,
            "final_score": r.scores[-1] if r.scores else None,
            "shift": r.agreement_shift if r.valid else None,
        })
    return pd.DataFrame(rows, columns=["pair_id", "trial", "valid", "initial_score", "final_score", "shift"])


def trajectory_table(records: Sequence[ConversationRecord]) -> pd.DataFrame:
    """ラウンドごとの平均スコアと初期値からの平均上昇（1ラウンド1行）"""
    rows = []
    for r in records:
        if not r.valid:
            continue
        initial = r.scores[0]
        for round_no, score in enumerate(r.scores[1:], start=1):
            rows.append({"round": round_no, "score": score, "gain": score - initial})
    frame = pd.DataFrame(rows, columns=["round", "score", "gain"])
    if frame.empty:
        return pd.DataFrame(columns=["round", "mean_score", "mean_gain", "count"])
    return (
        frame.groupby("round", sort=True)
        .agg(mean_score=("score", "mean"), mean_gain=("gain", "mean"), count=("score", "size"))
        .reset_index()
    )


def strategy_table(annotations: Sequence[TurnStrategies]) -> pd.DataFrame:
    """戦略ごとの出現回数と、注釈済みターンに占める割合"""
    counts: Counter = Counter()
    for a in annotations:
        counts.update(a.strategies)
    total = len(annotations)
    rows = [
        {
            "strategy": label.value,
            "count": counts[label],
            "frequency": counts[label] / total if total else 0.0,
        }
        for label in StrategyLabel
    ]
    return pd.DataFrame(rows, columns=["strategy", "count", "frequency"])


def comparison_table(experiments: Sequence[ExperimentReport]) -> pd.DataFrame:
    """(説得側, 被説得側, コーパス) ごとに1行"""
    rows = [
        {
            "persuader": e.persuader,
            "persuadee": e.persuadee,
            "corpus": e.corpus,
            "tom_mode": e.tom_mode.value,
            "mean_shift_pct": e.corpus_mean,
            "pairs": len(e.pairs),
            "invalid": e.invalid_count,
            "config_hash": e.config_hash,
        }
        for e in experiments
    ]
    return pd.DataFrame(
        rows,
        columns=["persuader", "persuadee", "corpus", "tom_mode", "mean_shift_pct", "pairs", "invalid", "config_hash"],
    )


def _round(value: Any) -> Any:
    if isinstance(value, float):
        return round(value, PRECISION)
    if isinstance(value, dict):
        return {k: _round(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_round(v) for v in value]
    return value


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_summary(path: Union[str, Path], summary: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round(summary), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_report(
    out_dir: Union[str, Path],
    records: Sequence[ConversationRecord] = (),
    experiments: Sequence[ExperimentReport] = (),
    annotations: Sequence[TurnStrategies] = (),
) -> Dict[str, Path]:
    """
    レポート一式を書き出す。

    Returns:
        {表の名前: 出力パス}
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    if records:
        written["shifts"] = write_csv(shifts_table(records), out / "shifts.csv")
        written["trajectory"] = write_csv(trajectory_table(records), out / "trajectory.csv")
    if annotations:
        written["strategies"] = write_csv(strategy_table(annotations), out / "strategies.csv")
    if experiments:
        written["comparison"] = write_csv(comparison_table(experiments), out / "comparison.csv")

    valid = [r for r in records if r.valid]
    shifts: List[float] = [r.agreement_shift for r in valid]
    summary = {
        "records": len(records),
        "valid_records": len(valid),
        "invalid_records": len(records) - len(valid),
        "mean_shift_pct": 100.0 * sum(shifts) / len(shifts) if shifts else None,
        "annotated_turns": len(annotations),
        "experiments": [e.model_dump(mode="json", exclude={"pairs"}) for e in experiments],
    }
    written["summary"] = write_summary(out / "summary.json", summary)
    logger.info("レポート出力: dir=%s, files=%s", out, sorted(written))
    return written
