"""
設定モジュール

pydantic-settings で設定を一元管理する。
構造化設定ファイル（TOML）を `--config` で受け取り、未指定の項目は
既定値（全ロールがモックバックエンド）を使う。
秘密情報（API トークン）は環境変数からのみ読む。
"""

import enum
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class BackendSettings(BaseModel):
    """チャット／埋め込みバックエンド1つ分の設定"""

    kind: Literal["openai", "mock"] = "mock"
    endpoint: str = ""
    model: str = "mock"
    # トークン本体ではなく、トークンを持つ環境変数名
    auth_token_env: Optional[str] = None
    temperature: float = Field(default=1.0, ge=0.0)
    max_tokens: int = Field(default=1000, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff_seconds: float = Field(default=1.0, ge=0.0)
    concurrency: int = Field(default=4, ge=1)
    timeout_seconds: float = Field(default=60.0, gt=0.0)
    # 埋め込みバックエンドの次元（モックの既定は 64）
    dimension: Optional[int] = Field(default=None, gt=0)
    # モックの乱数シード
    seed: int = 0

    def auth_token(self) -> Optional[str]:
        if not self.auth_token_env:
            return None
        return os.getenv(self.auth_token_env)


class RoleSettings(BaseModel):
    """ロール → バックエンド名"""

    persuader: str = "mock"
    persuadee: str = "mock"
    judge: str = "mock"
    embedder: str = "mock-embed"
    generator: str = "mock"
    annotator: str = "mock"


class TomMode(str, enum.Enum):
    OFF = "OFF"
    COUNTERCLAIMS_ONLY = "COUNTERCLAIMS_ONLY"
    PREDICTED = "PREDICTED"
    GROUND_TRUTH = "GROUND_TRUTH"


class RunConfig(BaseModel):
    """会話・実験の設定"""

    n_turns: int = Field(default=3, ge=1)
    k: int = Field(default=3, ge=0)
    tom_mode: TomMode = TomMode.OFF
    temperature: float = Field(default=1.0, ge=0.0)
    max_tokens: int = Field(default=1000, gt=0)
    trials: int = Field(default=3, ge=1)
    seed: int = 0
    max_parallel: int = Field(default=4, ge=1)
    exclude_initial_above_half: bool = False
    corpus: str = "custom"
    roles: RoleSettings = Field(default_factory=RoleSettings)


class ScoringSettings(BaseModel):
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=1000, gt=0)
    retries: int = Field(default=2, ge=0)


class GenerationSettings(BaseModel):
    """主張生成系（反対主張・否定・主張ペア・戦略注釈）の設定"""

    temperature: float = Field(default=1.0, ge=0.0)
    max_tokens: int = Field(default=1000, gt=0)
    parse_retries: int = Field(default=2, ge=0)


class RewardWeights(BaseModel):
    format: float = 0.1
    tag: float = 0.1
    repeat: float = 0.1
    overlength: float = 0.1


class RewardSettings(BaseModel):
    weights: RewardWeights = Field(default_factory=RewardWeights)
    ngram: int = Field(default=8, ge=1)
    overlap_threshold: float = Field(default=0.1, ge=0.0, le=1.0)
    max_argument_tokens: int = Field(default=200, gt=0)
    overlength_floor: float = Field(default=-0.5, le=0.0)
    # "default": 単語・記号単位, "whitespace": 空白区切り
    tokenizer: Literal["default", "whitespace"] = "default"


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=5e-4, gt=0.0)
    epochs: int = Field(default=20, gt=0)
    batch_size: int = Field(default=256, gt=0)
    seed: int = 0
    hidden_dims: List[int] = Field(default_factory=lambda: [1024, 256, 64])

    @field_validator("hidden_dims")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        if not v or any(d <= 0 for d in v):
            raise ValueError("hidden_dims は正の整数のリストにしてください")
        return v


class PathSettings(BaseModel):
    output_dir: Path = Path("outputs")
    checkpoint: Path = Path("outputs/predictor.pt")


def _default_backends() -> Dict[str, BackendSettings]:
    return {
        "mock": BackendSettings(kind="mock", model="mock"),
        "mock-embed": BackendSettings(kind="mock", model="mock-embed", dimension=64),
    }


class Settings(BaseSettings):
    """アプリケーション設定（設定ファイル + 環境変数）"""

    backends: Dict[str, BackendSettings] = Field(default_factory=_default_backends)
    run: RunConfig = Field(default_factory=RunConfig)
    scoring: ScoringSettings = Field(default_factory=ScoringSettings)
    generation: GenerationSettings = Field(default_factory=GenerationSettings)
    rewards: RewardSettings = Field(default_factory=RewardSettings)
    predictor: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathSettings = Field(default_factory=PathSettings)

    model_config = SettingsConfigDict(
        env_prefix="PERSUASION_",
        env_nested_delimiter="__",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    def backend(self, name: str) -> BackendSettings:
        try:
            return self.backends[name]
        except KeyError:
            raise ValueError(f"未定義のバックエンド: {name}") from None


def load_settings(config_path: Optional[str] = None) -> Settings:
    """TOML 設定ファイルを読み込んで Settings を作る"""
    if config_path is None:
        return Settings()
    with Path(config_path).open("rb") as f:
        data = tomllib.load(f)
    return Settings(**data)


@lru_cache()
def get_settings(config_path: Optional[str] = None) -> Settings:
    """設定のシングルトンを返す（パスごとにキャッシュ）"""
    return load_settings(config_path)
