"""
例外定義

各サービスが送出する例外をここに集約する。
入力検証系は ValueError、実行時エラー系は PersuasionError を継承する。
"""


class PersuasionError(RuntimeError):
    """パイプライン共通の実行時エラー"""


# --- gateway ---

class TransportExhaustedError(PersuasionError):
    """リトライ上限までバックエンド通信が失敗した"""


class MalformedReplyError(PersuasionError):
    """バックエンドの応答形式が不正"""


class BackendRejectedError(PersuasionError):
    """バックエンドがリトライ対象外のエラー（4xx）を返した"""


class DimensionMismatchError(PersuasionError):
    """埋め込み次元がバックエンド宣言値と一致しない"""


class MissingBindingError(ValueError):
    """テンプレートのプレースホルダに対応する値がない"""


class MissingTemplateError(PersuasionError):
    """テンプレートファイルが見つからない"""


# --- scoring ---

class UnparseableAttitudeError(ValueError):
    """<attitude> タグから態度を読み取れない"""


class AttitudeElicitationError(PersuasionError):
    """リトライ後も態度を取得できなかった（試行は無効扱い）"""


# --- tom ---

class CounterclaimParseError(PersuasionError):
    """反対主張のリストを必要数パースできなかった"""


class NegationParseError(PersuasionError):
    """否定文を取得できなかった"""


class NonSquareMatrixError(ValueError):
    """類似度行列が正方行列でない"""


# --- predictor ---

class ShapeMismatchError(ValueError):
    """入力ベクトルの次元がチェックポイントと一致しない"""


class EmptyDatasetError(ValueError):
    """データセットが空"""


class DivergenceError(PersuasionError):
    """学習中に損失が非有限値になった"""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"損失が発散しました: epoch={epoch}, loss={loss}")
        self.epoch = epoch
        self.loss = loss


# --- data ---

class PairParseError(PersuasionError):
    """主張ペア（2行）をパースできなかった"""


class MissingLabelError(PersuasionError):
    """履歴プレフィックスと主張の組に正解ラベルがない"""


class MissingClassError(ValueError):
    """ダウンサンプリング対象のクラスが欠けている"""

    def __init__(self, missing: list):
        super().__init__(f"ラベルが存在しないクラスがあります: {missing}")
        self.missing = missing


# --- annotation ---

class AnnotationParseError(PersuasionError):
    """戦略アノテーションの <answer> を取得できなかった"""
