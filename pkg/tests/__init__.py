# tests パッケージ
