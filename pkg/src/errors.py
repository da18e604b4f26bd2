"""pbdetect の例外定義。

各モジュールはここから import して送出すること。
メッセージには問題の対象 (行番号・特徴量名・件数など) を必ず含める。
"""


class PbDetectError(Exception):
    """pbdetect が送出する例外の基底クラス。"""


class ConfigurationError(PbDetectError, ValueError):
    """設定値が不正、またはモデルとストリームの設定が一致しない。"""


class TraceFormatError(PbDetectError, ValueError):
    """トレースファイルの書式エラー。"""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None) -> None:
        where = []
        if line is not None:
            where.append(f"line={line}")
        if offset is not None:
            where.append(f"offset={offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class EmptyTraceError(PbDetectError, ValueError):
    """サンプルを 1 件も含まないトレース。"""


class StreamOrderError(PbDetectError, ValueError):
    """サンプル番号・タイムスタンプが単調増加していない。"""


class MalformedWaveletError(PbDetectError, ValueError):
    """wavelet が NHC→IHC→PHC の形をしていない。"""


class UndefinedCorrelationError(PbDetectError, ValueError):
    """分散 0 の系列で相関が定義できない。"""


class SequenceLengthError(PbDetectError, ValueError):
    """系列長が計算に必要な長さに満たない。"""


class EmptyBufferError(PbDetectError, ValueError):
    """wavelet_buffer が空。"""


class IncompleteTrainingError(PbDetectError):
    """学習期間の候補波形が規定回数に満たない。"""

    def __init__(self, message: str, pb_count: int = 0, up_count: int = 0) -> None:
        super().__init__(f"{message}: pb={pb_count}, up={up_count}")
        self.pb_count = pb_count
        self.up_count = up_count


class DegenerateTrainingError(PbDetectError):
    """閾値帯が潰れた (lt >= ut)。"""

    def __init__(self, feature: str, lt: float, ut: float) -> None:
        super().__init__(f"閾値が縮退しました: feature={feature}, lt={lt!r}, ut={ut!r}")
        self.feature = feature


class ModelFormatError(PbDetectError, ValueError):
    """モデルファイルのバージョン不一致・途中切れ・チェックサム不一致。"""


class ModeMismatchError(PbDetectError):
    """モデルと実行時の計算式モードが一致しない。"""


class CapacityError(PbDetectError, MemoryError):
    """メモリ予算を超過し、退避しても確保できない。"""


class GenerationError(PbDetectError):
    """シミュレーターが相関下限を満たす波形を生成できなかった。"""


class ScoringError(PbDetectError):
    """検出イベントがどのラベル区間にも属さない。"""


class InvalidFeatureError(PbDetectError, ValueError):
    """特徴量に NaN / 無限大が含まれる。"""
