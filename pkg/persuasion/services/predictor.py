"""
相手態度予測サービス

会話履歴と主張をそれぞれ埋め込み、連結ベクトル [E(H); E(q)] を
5クラス MLP（ReLU 中間層 1024/256/64）で分類して被説得側の態度を予測する。
エンコーダは外部・固定で、学習するのは MLP のみ。

MLP は PyTorch（nn.Sequential + Adam + 交差エントロピー）で学習し、
シード固定で決定的。チェックポイントは torch.save による .pt
（state_dict + メタデータ）で保存する。
"""

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict

from persuasion.config import TrainConfig
from persuasion.core import AttitudeLevel, Claim, ConversationHistory, render_history
from persuasion.errors import AttitudeElicitationError, DivergenceError, EmptyDatasetError, ShapeMismatchError
from persuasion.services.gateway import EmbeddingBackend
from persuasion.services.scoring import AttitudeJudge

logger = logging.getLogger(__name__)

N_CLASSES = len(AttitudeLevel)
CHECKPOINT_VERSION = 2

Array = NDArray[np.float64]


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class PredictorExample(BaseModel):
    model_config = ConfigDict(frozen=True)

    history_text: str
    claim_text: str
    label: AttitudeLevel
    # 被説得側システムプロンプトの目標主張 Q（LLM プロンプティング比較用）
    topic_text: str = ""


class PredictorDataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    split: Split
    examples: Tuple[PredictorExample, ...] = ()

    @property
    def class_counts(self) -> List[int]:
        counts = [0] * N_CLASSES
        for ex in self.examples:
            counts[int(ex.label)] += 1
        return counts

    @property
    def is_balanced(self) -> bool:
        return len(set(self.class_counts)) == 1

    def __len__(self) -> int:
        return len(self.examples)


# ========================================
# MLP 本体
# ========================================

class AttitudeMLP(nn.Module):
    """[E(H); E(q)] → 5クラスのロジット"""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], output_dim: int = N_CLASSES):
        super().__init__()
        layers: List[nn.Module] = []
        dims = [input_dim] + list(hidden_dims)
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            layers.append(nn.Linear(fan_in, fan_out))
            layers.append(nn.ReLU())
        layers.append(nn.Linear(dims[-1], output_dim))
        self.classifier = nn.Sequential(*layers)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """
        Args:
            embeddings: (batch, input_dim)

        Returns:
            logits: (batch, output_dim)
        """
        return self.classifier(embeddings)


def _mean_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, chunk: int = 4096) -> float:
    """データ全体の平均交差エントロピー（勾配なし）"""
    loss_fn = nn.CrossEntropyLoss(reduction="sum")
    total = 0.0
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk):
            total += float(loss_fn(model(x[start:start + chunk]), y[start:start + chunk]))
    return total / x.shape[0]


# ========================================
# チェックポイント
# ========================================

@dataclass(eq=False)
class PredictorCheckpoint:
    """
    学習済み MLP。

    .pt レイアウト（torch.save の辞書）:
        state_dict: AttitudeMLP の state_dict
        meta: version, input_dim, hidden_dims, output_dim, activation,
              best_val_loss, best_epoch, val_losses, train_losses,
              rng_seed, training_config, embedding_model
    """

    input_dim: int
    hidden_dims: List[int]
    state_dict: Dict[str, torch.Tensor]
    output_dim: int = N_CLASSES
    activation: str = "relu"
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    val_losses: List[float] = field(default_factory=list)
    train_losses: List[float] = field(default_factory=list)
    rng_seed: int = 0
    training_config: Dict[str, Any] = field(default_factory=dict)
    embedding_model: str = ""
    version: int = CHECKPOINT_VERSION
    _model: Optional[AttitudeMLP] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        model = AttitudeMLP(self.input_dim, self.hidden_dims, self.output_dim)
        try:
            model.load_state_dict(self.state_dict)
        except RuntimeError as e:
            raise ValueError(f"state_dict が次元リストと一致しません: {e}") from e
        for name, tensor in model.state_dict().items():
            if not bool(torch.isfinite(tensor).all()):
                raise ValueError(f"{name} に非有限値があります")
        model.eval()
        self._model = model

    @property
    def model(self) -> AttitudeMLP:
        assert self._model is not None
        return self._model

    @property
    def n_parameters(self) -> int:
        return int(sum(p.numel() for p in self.model.parameters()))

    def _meta(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "val_losses": list(self.val_losses),
            "train_losses": list(self.train_losses),
            "rng_seed": self.rng_seed,
            "training_config": self.training_config,
            "embedding_model": self.embedding_model,
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"state_dict": self.model.state_dict(), "meta": self._meta()}, path)
        logger.info("チェックポイント保存: path=%s, params=%d", path, self.n_parameters)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PredictorCheckpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        meta = payload["meta"]
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"未対応のチェックポイントバージョン: {meta.get('version')}")
        return cls(
            input_dim=meta["input_dim"],
            hidden_dims=meta["hidden_dims"],
            state_dict=payload["state_dict"],
            output_dim=meta["output_dim"],
            activation=meta["activation"],
            best_val_loss=meta["best_val_loss"],
            best_epoch=meta["best_epoch"],
            val_losses=meta["val_losses"],
            train_losses=meta["train_losses"],
            rng_seed=meta["rng_seed"],
            training_config=meta["training_config"],
            embedding_model=meta["embedding_model"],
            version=meta["version"],
        )


def forward(checkpoint: PredictorCheckpoint, x: Array) -> Array:
    """
    クラス確率（長さ 5、バッチ入力なら各行）を返す。

    Raises:
        ShapeMismatchError: 入力次元がチェックポイントと異なる
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != checkpoint.input_dim:
        raise ShapeMismatchError(f"入力次元が一致しません: expected={checkpoint.input_dim}, actual={x.shape[-1]}")
    with torch.no_grad():
        logits = checkpoint.model(torch.from_numpy(np.atleast_2d(x)))
        probs = torch.softmax(logits.double(), dim=1).numpy()
    return probs[0] if x.ndim == 1 else probs


# ========================================
# 学習・評価
# ========================================

def train_arrays(
    x_train: Array,
    y_train: NDArray[np.int64],
    x_val: Array,
    y_val: NDArray[np.int64],
    config: Optional[TrainConfig] = None,
    embedding_model: str = "",
) -> PredictorCheckpoint:
    """
    特徴量配列から MLP を学習する。

    エポックごとに検証損失を記録し、最小の検証損失のエポックの
    パラメータを返す（同値なら早いエポック）。

    Raises:
        EmptyDatasetError: 学習データまたは検証データが空
        DivergenceError: 損失が非有限値になった
    """
    config = config or TrainConfig()
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptyDatasetError("学習データと検証データは空にできません")

    xt = torch.as_tensor(np.asarray(x_train, dtype=np.float32))
    xv = torch.as_tensor(np.asarray(x_val, dtype=np.float32))
    yt = torch.as_tensor(np.asarray(y_train, dtype=np.int64))
    yv = torch.as_tensor(np.asarray(y_val, dtype=np.int64))

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    model = AttitudeMLP(xt.shape[1], config.hidden_dims)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()

    best_state: Optional[Dict[str, torch.Tensor]] = None
    best_loss, best_epoch = float("inf"), 0
    train_losses: List[float] = []
    val_losses: List[float] = []
    n = xt.shape[0]

    logger.info("学習開始: n_train=%d, n_val=%d, input_dim=%d, hidden=%s", n, xv.shape[0], xt.shape[1], config.hidden_dims)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            if not bool(torch.isfinite(loss)):
                raise DivergenceError(epoch, float(loss))
            loss.backward()
            optimizer.step()

        model.eval()
        train_loss = _mean_loss(model, xt, yt)
        val_loss = _mean_loss(model, xv, yv)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(epoch, val_loss if np.isfinite(train_loss) else train_loss)
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        logger.info("epoch %d/%d: train_loss=%.4f, val_loss=%.4f", epoch, config.epochs, train_loss, val_loss)

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    assert best_state is not None
    logger.info("学習完了: best_epoch=%d, best_val_loss=%.4f", best_epoch, best_loss)
    return PredictorCheckpoint(
        input_dim=xt.shape[1],
        hidden_dims=list(config.hidden_dims),
        state_dict=best_state,
        best_val_loss=best_loss,
        best_epoch=best_epoch,
        val_losses=val_losses,
        train_losses=train_losses,
        rng_seed=config.seed,
        training_config=config.model_dump(),
        embedding_model=embedding_model,
    )


def featurize(embed_backend: EmbeddingBackend, history_text: str, claim_text: str) -> Array:
    """[E(history); E(claim)]（長さ 2d）"""
    return np.concatenate([embed_backend.embed(history_text), embed_backend.embed(claim_text)])


def featurize_dataset(
    embed_backend: EmbeddingBackend,
    dataset: PredictorDataset,
) -> Tuple[Array, NDArray[np.int64]]:
    """データセット全体を特徴量化する（同一テキストの埋め込みは再利用）"""
    cache: Dict[str, Array] = {}

    def _embed(text: str) -> Array:
        if text not in cache:
            cache[text] = embed_backend.embed(text)
        return cache[text]

    x = np.stack([np.concatenate([_embed(ex.history_text), _embed(ex.claim_text)]) for ex in dataset.examples])
    y = np.array([int(ex.label) for ex in dataset.examples], dtype=np.int64)
    return x, y


def train(
    dataset_train: PredictorDataset,
    dataset_val: PredictorDataset,
    embed_backend: EmbeddingBackend,
    config: Optional[TrainConfig] = None,
) -> PredictorCheckpoint:
    """
    データセットを埋め込んで MLP を学習する。

    Raises:
        EmptyDatasetError: どちらかのデータセットが空
    """
    if not dataset_train.examples or not dataset_val.examples:
        raise EmptyDatasetError("学習データと検証データは空にできません")
    if not dataset_train.is_balanced:
        logger.warning("学習データのクラスが不均衡です: counts=%s", dataset_train.class_counts)
    x_train, y_train = featurize_dataset(embed_backend, dataset_train)
    x_val, y_val = featurize_dataset(embed_backend, dataset_val)
    return train_arrays(x_train, y_train, x_val, y_val, config, embedding_model=embed_backend.model)


def evaluate_predictions(predictions: Sequence[int], labels: Sequence[int]) -> Tuple[float, float]:
    """
    完全一致率（EM）とクラス番号の平均二乗誤差（MSE）。

    Raises:
        EmptyDatasetError: 空
    """
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if gold.size == 0:
        raise EmptyDatasetError("評価データが空です")
    em = float(np.mean(pred == gold))
    mse = float(np.mean((pred - gold) ** 2))
    return em, mse


def evaluate(checkpoint: PredictorCheckpoint, x_test: Array, y_test: Sequence[int]) -> Tuple[float, float]:
    """argmax 予測の (EM, MSE)"""
    if len(y_test) == 0:
        raise EmptyDatasetError("評価データが空です")
    predictions = np.argmax(forward(checkpoint, np.atleast_2d(x_test)), axis=1)
    return evaluate_predictions(predictions, y_test)


def evaluate_dataset(
    checkpoint: PredictorCheckpoint,
    embed_backend: EmbeddingBackend,
    dataset: PredictorDataset,
) -> Tuple[float, float]:
    if not dataset.examples:
        raise EmptyDatasetError("評価データが空です")
    x, y = featurize_dataset(embed_backend, dataset)
    return evaluate(checkpoint, x, y)


def random_guess_baseline(labels: Sequence[int], seed: int = 0) -> NDArray[np.int64]:
    """labels と同じ長さの、一様ランダムな 0..4 の予測"""
    return np.random.default_rng(seed).integers(0, N_CLASSES, size=len(labels))


def prompting_baseline(
    judge: AttitudeJudge,
    dataset: PredictorDataset,
    seed: Optional[int] = None,
) -> Tuple[List[int], List[int], int]:
    """
    LLM に直接態度を尋ねるゼロショット予測。

    各例の履歴テキストと主張を判定プロンプトに入れ、返ってきた
    レベルを予測とする。態度を読み取れなかった例は評価から除く。

    Returns:
        (予測, 対応する正解ラベル, 除外した例の数)

    Raises:
        EmptyDatasetError: 空
    """
    if not dataset.examples:
        raise EmptyDatasetError("評価データが空です")
    predictions: List[int] = []
    labels: List[int] = []
    failed = 0
    for ex in dataset.examples:
        try:
            level = judge.elicit_rendered(ex.history_text, ex.claim_text, ex.topic_text or None, seed)
        except AttitudeElicitationError as e:
            logger.warning("プロンプティング予測失敗: %s", e)
            failed += 1
            continue
        predictions.append(int(level))
        labels.append(int(ex.label))
    logger.info("プロンプティング予測: n=%d, failed=%d", len(dataset), failed)
    return predictions, labels, failed


def predict_levels(
    checkpoint: PredictorCheckpoint,
    embed_backend: EmbeddingBackend,
    history: ConversationHistory,
    claims: Sequence[Claim],
) -> List[AttitudeLevel]:
    """各主張に対する被説得側の態度（argmax）を予測する"""
    if not claims:
        return []
    history_vec = embed_backend.embed(render_history(history))
    x = np.stack([np.concatenate([history_vec, embed_backend.embed(c.text)]) for c in claims])
    probs = forward(checkpoint, x)
    return [AttitudeLevel(int(i)) for i in np.argmax(probs, axis=1)]


class AttitudePredictor:
    """チェックポイントと埋め込みバックエンドの組"""

    def __init__(self, checkpoint: PredictorCheckpoint, embed_backend: EmbeddingBackend):
        if embed_backend.dimension is not None and 2 * embed_backend.dimension != checkpoint.input_dim:
            raise ShapeMismatchError(
                f"埋め込み次元がチェックポイントと一致しません: "
                f"2*{embed_backend.dimension} != {checkpoint.input_dim}"
            )
        self.checkpoint = checkpoint
        self.embed_backend = embed_backend

    def predict(self, history: ConversationHistory, claims: Sequence[Claim]) -> List[AttitudeLevel]:
        return predict_levels(self.checkpoint, self.embed_backend, history, claims)
