"""
ゲートウェイサービス

チャット補完・埋め込みバックエンドへの統一アクセスを提供する。

- OpenAI 互換 HTTP API（/chat/completions, /embeddings）を requests で呼ぶ
- 一時的な通信失敗と 5xx / 429 は指数バックオフでリトライする
- バックエンドごとに同時リクエスト数の上限を設ける
- テスト・オフライン実行用に決定的なモックバックエンドを持つ
"""

import hashlib
import logging
import re
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import requests
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from persuasion.config import BackendSettings
from persuasion.errors import (
    BackendRejectedError,
    DimensionMismatchError,
    MalformedReplyError,
    MissingBindingError,
    MissingTemplateError,
    PersuasionError,
    TransportExhaustedError,
)

logger = logging.getLogger(__name__)

_TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

# テンプレート中で置換対象になるプレースホルダ名（<thought> 等のタグは対象外）
PLACEHOLDERS = ("claim", "anti_claim", "turns", "thought_text", "argument_text")
_PLACEHOLDER_RE = re.compile(r"<(" + "|".join(PLACEHOLDERS) + r")>")

EmbeddingVector = NDArray[np.float64]


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    system_prompt: str = ""
    user_prompt: str
    temperature: float = Field(default=1.0, ge=0.0)
    max_tokens: int = Field(default=1000, gt=0)
    seed: Optional[int] = None


class PromptTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    body: str

    @property
    def placeholders(self) -> List[str]:
        return sorted(set(_PLACEHOLDER_RE.findall(self.body)))


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """
    プレースホルダを置換する（1パス、他の変換はしない）。

    Raises:
        MissingBindingError: 値のないプレースホルダがある
    """
    missing = [name for name in template.placeholders if name not in bindings]
    if missing:
        raise MissingBindingError(f"テンプレート {template.name} の未解決プレースホルダ: {missing}")
    return _PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], template.body)


@lru_cache()
def load_template(name: str) -> PromptTemplate:
    """
    templates/ からテンプレートを読み込む。末尾の改行1つは除去する。

    Raises:
        MissingTemplateError: ファイルがない
    """
    path = _TEMPLATE_DIR / f"{name}.txt"
    if not path.is_file():
        raise MissingTemplateError(f"テンプレートが見つかりません: {path}")
    body = path.read_text(encoding="utf-8").removesuffix("\n")
    return PromptTemplate(name=name, body=body)


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """コサイン類似度（[-1, 1] にクリップ）"""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class _Admission:
    """同時実行数の上限と計測カウンタ"""

    def __init__(self, concurrency: int):
        self.concurrency = concurrency
        self._slots = threading.BoundedSemaphore(concurrency)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

    def __enter__(self) -> "_Admission":
        self._slots.acquire()
        with self._lock:
            self.in_flight += 1
            self.calls += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        return self

    def __exit__(self, *exc: Any) -> None:
        with self._lock:
            self.in_flight -= 1
        self._slots.release()


class ChatBackend(ABC):
    """チャットバックエンドの共通インタフェース"""

    def __init__(self, name: str, model: str = "mock", concurrency: int = 4):
        self.name = name
        self.model = model
        self.admission = _Admission(concurrency)

    def chat(self, request: ChatRequest) -> str:
        """
        補完テキストを返す。

        Raises:
            TransportExhaustedError: リトライ上限まで通信失敗
            MalformedReplyError: 応答形式が不正
        """
        with self.admission:
            return self._complete(request)

    @abstractmethod
    def _complete(self, request: ChatRequest) -> str:
        ...


class EmbeddingBackend(ABC):
    """埋め込みバックエンドの共通インタフェース"""

    def __init__(self, name: str, model: str = "mock", dimension: Optional[int] = None, concurrency: int = 4):
        self.name = name
        self.model = model
        self._dimension = dimension
        self.admission = _Admission(concurrency)

    @property
    def dimension(self) -> Optional[int]:
        return self._dimension

    def embed(self, text: str) -> EmbeddingVector:
        """
        テキストの埋め込みを返す。次元はセッション内で固定。

        Raises:
            TransportExhaustedError: リトライ上限まで通信失敗
            DimensionMismatchError: 宣言次元と異なる
        """
        with self.admission:
            vector = np.asarray(self._embed(text), dtype=np.float64)
        if vector.ndim != 1 or not np.all(np.isfinite(vector)):
            raise MalformedReplyError(f"埋め込みベクトルが不正です: backend={self.name}")
        if self._dimension is None:
            self._dimension = int(vector.shape[0])
        elif vector.shape[0] != self._dimension:
            raise DimensionMismatchError(
                f"埋め込み次元が一致しません: backend={self.name}, "
                f"expected={self._dimension}, actual={vector.shape[0]}"
            )
        return vector

    @abstractmethod
    def _embed(self, text: str) -> Sequence[float]:
        ...


# ========================================
# HTTP バックエンド
# ========================================

def _post_with_retry(
    session: requests.Session,
    url: str,
    payload: Dict[str, Any],
    settings: BackendSettings,
    sleep: Callable[[float], None],
) -> Dict[str, Any]:
    """
    JSON を POST し、失敗時は指数バックオフでリトライする。

    リトライ対象は通信エラー、5xx、429 のみ。
    待機時間は backoff_seconds * 2**attempt（既定 1s/2s/4s）。
    """
    headers = {"Content-Type": "application/json"}
    token = settings.auth_token()
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_error = ""
    for attempt in range(settings.max_retries + 1):
        try:
            response = session.post(url, json=payload, headers=headers, timeout=settings.timeout_seconds)
        except (requests.ConnectionError, requests.Timeout) as e:
            last_error = f"{type(e).__name__}: {e}"
        else:
            if response.status_code < 400:
                try:
                    return response.json()
                except ValueError as e:
                    raise MalformedReplyError(f"JSON でない応答: url={url}") from e
            if response.status_code < 500 and response.status_code != 429:
                raise BackendRejectedError(f"HTTP {response.status_code}: url={url}")
            last_error = f"HTTP {response.status_code}"

        if attempt < settings.max_retries:
            delay = settings.backoff_seconds * (2 ** attempt)
            logger.warning(
                "リクエスト失敗、リトライします: url=%s, attempt=%d/%d, error=%s, wait=%.1fs",
                url, attempt + 1, settings.max_retries + 1, last_error, delay,
            )
            sleep(delay)

    raise TransportExhaustedError(
        f"リトライ上限に達しました: url={url}, attempts={settings.max_retries + 1}, error={last_error}"
    )


class OpenAIChatBackend(ChatBackend):
    """OpenAI 互換 /chat/completions バックエンド"""

    def __init__(
        self,
        name: str,
        settings: BackendSettings,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(name, model=settings.model, concurrency=settings.concurrency)
        self.settings = settings
        self._session = session or requests.Session()
        self._sleep = sleep

    def _complete(self, request: ChatRequest) -> str:
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": request.user_prompt})
        payload: Dict[str, Any] = {
            "model": self.settings.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed

        url = self.settings.endpoint.rstrip("/") + "/chat/completions"
        data = _post_with_retry(self._session, url, payload, self.settings, self._sleep)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise MalformedReplyError(f"choices[0].message.content がありません: backend={self.name}") from e
        if not isinstance(content, str):
            raise MalformedReplyError(f"content が文字列ではありません: backend={self.name}")
        return content


class OpenAIEmbeddingBackend(EmbeddingBackend):
    """OpenAI 互換 /embeddings バックエンド"""

    def __init__(
        self,
        name: str,
        settings: BackendSettings,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(name, model=settings.model, dimension=settings.dimension, concurrency=settings.concurrency)
        self.settings = settings
        self._session = session or requests.Session()
        self._sleep = sleep

    def _embed(self, text: str) -> Sequence[float]:
        url = self.settings.endpoint.rstrip("/") + "/embeddings"
        data = _post_with_retry(
            self._session, url, {"model": self.settings.model, "input": text}, self.settings, self._sleep
        )
        try:
            return data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as e:
            raise MalformedReplyError(f"data[0].embedding がありません: backend={self.name}") from e


# ========================================
# モック／スクリプトバックエンド
# ========================================

def _request_seed(*parts: Any) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class ScriptedChatBackend(ChatBackend):
    """応答キューを順に返すバックエンド（reset で先頭に戻る）"""

    def __init__(self, responses: Sequence[str], name: str = "scripted", concurrency: int = 4):
        super().__init__(name, model=name, concurrency=concurrency)
        self._script = list(responses)
        self._queue: deque = deque(self._script)
        self.requests: List[ChatRequest] = []

    def reset(self) -> None:
        self._queue = deque(self._script)
        self.requests = []

    def _complete(self, request: ChatRequest) -> str:
        self.requests.append(request)
        if not self._queue:
            raise PersuasionError(f"スクリプト応答が尽きました: backend={self.name}")
        return self._queue.popleft()


class RuleChatBackend(ChatBackend):
    """リクエストから応答を決める関数を包むバックエンド"""

    def __init__(self, rule: Callable[[ChatRequest], str], name: str = "rule", concurrency: int = 4):
        super().__init__(name, model=name, concurrency=concurrency)
        self._rule = rule

    def _complete(self, request: ChatRequest) -> str:
        return self._rule(request)


_MOCK_VOCABULARY = (
    "policy", "evidence", "community", "cost", "benefit", "risk", "history", "future",
    "research", "families", "economy", "fairness", "freedom", "safety", "education",
    "trust", "experience", "change", "data", "values", "consider", "suggests", "because",
    "many", "people", "long", "term", "impact", "local", "global", "shows", "clearly",
)
_MOCK_LEVELS = ("Disagree", "Partly Disagree", "Neutral", "Partly Agree", "Agree")
_MOCK_STRATEGIES = (
    "Evidential Appeals", "Authority Appeals", "Emotional Appeals", "Social Appeals",
    "Common Ground Appeals", "Gradual Concession", "Framing Effects", "Rhetoric",
    "Preemptive Rebuttal",
)


class MockChatBackend(ChatBackend):
    """
    決定的モックバックエンド。

    応答は (seed, リクエスト) のハッシュだけで決まる純関数で、
    プロンプトの種類（討論ターン・態度・反対主張・否定・主張ペア・戦略注釈）に
    応じて整形済みの出力を返す。
    """

    def __init__(self, name: str = "mock", seed: int = 0, concurrency: int = 4):
        super().__init__(name, model=name, concurrency=concurrency)
        self.seed = seed

    def _complete(self, request: ChatRequest) -> str:
        rng = np.random.default_rng(
            _request_seed(self.seed, request.seed, request.system_prompt, request.user_prompt)
        )
        system, user = request.system_prompt, request.user_prompt

        if "<attitude></attitude>" in user:
            level = _MOCK_LEVELS[int(rng.integers(0, 5))]
            return f"<thought>Weighing the arguments so far.</thought>\n<attitude>{level}</attitude>"
        if user.startswith("Propose reasons why another debater"):
            lines = [
                f"{i}. Supporting reason {i}: {' '.join(rng.choice(_MOCK_VOCABULARY, size=8))}."
                for i in range(1, 11)
            ]
            return "<thought>Listing reasons from strongest to weakest.</thought>\n" + "\n".join(lines)
        if user.startswith("Write the direct opposite"):
            match = re.search(r'"(.+)"', user)
            statement = match.group(1).rstrip(".") if match else "the statement holds"
            return f"<answer>It is not the case that {statement}.</answer>"
        if system.startswith("You are a debate topic generator"):
            subject = " ".join(user.split()[:6]).rstrip(".?!") or "This topic"
            return f"{subject} is beneficial.\n{subject} is not beneficial."
        if system.startswith("You are a debate expert"):
            count = int(rng.integers(1, 4))
            picked = sorted(rng.choice(len(_MOCK_STRATEGIES), size=count, replace=False))
            names = ", ".join(_MOCK_STRATEGIES[i] for i in picked)
            return f"<thought>Identifying the techniques used.</thought>\n<answer>{names}</answer>"

        length = int(rng.integers(20, 60))
        words = " ".join(rng.choice(_MOCK_VOCABULARY, size=length))
        return f"<thought>Plan the next point.</thought>\n<argument>{words.capitalize()}.</argument>"


class MockEmbeddingBackend(EmbeddingBackend):
    """ハッシュシードの擬似乱数単位ベクトル（既定 64 次元）"""

    def __init__(self, name: str = "mock-embed", dimension: int = 64, seed: int = 0, concurrency: int = 4):
        super().__init__(name, model=name, dimension=dimension, concurrency=concurrency)
        self.seed = seed

    def _embed(self, text: str) -> Sequence[float]:
        rng = np.random.default_rng(_request_seed(self.seed, text))
        vector = rng.standard_normal(self._dimension)
        return vector / np.linalg.norm(vector)


def build_chat_backend(name: str, settings: BackendSettings) -> ChatBackend:
    """設定からチャットバックエンドを生成する"""
    if settings.kind == "openai":
        return OpenAIChatBackend(name, settings)
    return MockChatBackend(name=name, seed=settings.seed, concurrency=settings.concurrency)


def build_embedding_backend(name: str, settings: BackendSettings) -> EmbeddingBackend:
    """設定から埋め込みバックエンドを生成する"""
    if settings.kind == "openai":
        return OpenAIEmbeddingBackend(name, settings)
    return MockEmbeddingBackend(
        name=name, dimension=settings.dimension or 64, seed=settings.seed, concurrency=settings.concurrency
    )
