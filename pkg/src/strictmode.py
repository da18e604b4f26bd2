"""計算式モードの切り替え。

公表された式どおりの変種 (STRICT_PAPER) と修正版 (CORRECTED) をここで一括管理する。
各モジュールは resolve_formulas(cfg) の結果だけを参照し、フラグを直接読まないこと。

対象となる式:
  - sd_sqrt:          SD = sqrt(acc / N)   (strict: acc / N)
  - gaussian_square:  exp(-z^2 / 2)         (strict: exp(-z / 2))
  - fod_abs:          |d| > clearance       (strict: d > clearance)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .config import PipelineConfig


class FormulaMode(str, Enum):
    CORRECTED = "CORRECTED"
    STRICT_PAPER = "STRICT_PAPER"

    @classmethod
    def from_cli(cls, value: str) -> "FormulaMode":
        """CLI 表記 (corrected / strict) をモードに変換する。"""
        mapping = {"corrected": cls.CORRECTED, "strict": cls.STRICT_PAPER}
        try:
            return mapping[value.lower()]
        except KeyError:
            return cls(value.upper())

    @property
    def cli_name(self) -> str:
        return "corrected" if self is FormulaMode.CORRECTED else "strict"


@dataclass(frozen=True)
class FormulaFlags:
    """実行中に使う計算式の組。イミュータブル。"""

    sd_sqrt: bool
    gaussian_square: bool
    fod_abs: bool

    def as_dict(self) -> dict[str, bool]:
        return {
            "sd_sqrt": self.sd_sqrt,
            "gaussian_square": self.gaussian_square,
            "fod_abs": self.fod_abs,
        }


_BASE_FLAGS = {
    FormulaMode.CORRECTED: FormulaFlags(sd_sqrt=True, gaussian_square=True, fod_abs=True),
    FormulaMode.STRICT_PAPER: FormulaFlags(sd_sqrt=False, gaussian_square=False, fod_abs=False),
}


def resolve_formulas(cfg: "PipelineConfig") -> FormulaFlags:
    """設定のモードと個別上書きから、実際に使う式の組を決める。

    上書きフラグが None のものはモードの既定値に従う。
    """
    base = _BASE_FLAGS[cfg.formula_mode]
    return FormulaFlags(
        sd_sqrt=base.sd_sqrt if cfg.sd_sqrt is None else cfg.sd_sqrt,
        gaussian_square=base.gaussian_square if cfg.gaussian_square is None else cfg.gaussian_square,
        fod_abs=base.fod_abs if cfg.fod_abs is None else cfg.fod_abs,
    )


def apply_mode(cfg: "PipelineConfig", mode: FormulaMode | str) -> "PipelineConfig":
    """モードを差し替えた設定のコピーを返す。

    個別上書きフラグはそのまま引き継ぐ (モードを細かく調整するためのもの)。
    """
    if isinstance(mode, str) and not isinstance(mode, FormulaMode):
        mode = FormulaMode.from_cli(mode)
    return cfg.model_copy(update={"formula_mode": mode})
